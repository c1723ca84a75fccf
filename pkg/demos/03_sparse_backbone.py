"""The sparse encoder-decoder backbone.

Submanifold convolutions keep the active set fixed; strided convolutions
halve the grid (three of them reach 1/8 resolution); the decoder upsamples
back along the encoder's exact coordinate sets, so no voxel is invented or
lost end to end. The bottleneck also projects losslessly to a dense BEV
map whose heights fold into channels.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from lidarmt import autodiff as ad
from lidarmt import backbone as bb
from lidarmt import sparse

r = np.random.default_rng(0)
shape = (32, 32, 8)
cells = r.choice(np.prod(shape), size=400, replace=False)
coords = np.column_stack([cells % 32, (cells // 32) % 32, cells // (32 * 32)])
t = sparse.SparseVoxelTensor(coords, r.normal(size=(400, 8)), shape)
print(f"input: {len(t)} voxels in {shape}, {t.num_channels} channels")

cfg = bb.BackboneConfig(base_channels=8)
enc = bb.init_encoder(cfg, 8, r)
scales = bb.encode(t, enc)
for i, s in enumerate(scales):
    print(f"  scale 1/{2**i}: shape {s.spatial_shape}, {len(s)} voxels, "
          f"{s.num_channels} channels")

dec = bb.init_decoder(cfg, scales[3].num_channels, r)
out = bb.decode(scales, scales[3], dec)
assert np.array_equal(out.coords, t.coords)
print("decoder returns exactly the input coordinate set: ok")

# lossless sparse <-> dense mappings at the bottleneck
bott = scales[3]
dense = sparse.scatter_to_dense(bott)            # (C, D, H, W)
bev = sparse.height_collapse(dense)              # (D*C, H, W)
print(f"\nbottleneck -> dense {dense.shape} -> BEV {bev.shape}")
back = sparse.height_expand(bev, bott.spatial_shape[2])
assert np.array_equal(back.data, dense.data)
rows = sparse.gather_from_dense(dense, bott.coords, bott.spatial_shape)
assert np.array_equal(rows.data, bott.features.data)
print("height collapse/expand and scatter/gather invert exactly: ok")

# the 2D extractor is shape-preserving on the BEV map
bev_map = sparse.DenseBEVMap(features=bev, n_heights=bott.spatial_shape[2])
extracted = bb.bev_extract(bev_map, bb.init_bev_extractor(bev.shape[0], r))
print(f"BEV extractor: {bev.shape} -> {extracted.features.shape}")

# one dense-oracle spot check of a submanifold convolution
k = ad.Tensor(r.normal(size=(3, 3, 3, 8, 4)))
b = ad.Tensor(r.normal(size=4))
conv = sparse.submanifold_conv3d(t, k, b)
row = 5
x, y, z = t.coords[row]
acc = b.data.copy()
for off in sparse.KERNEL_OFFSETS:
    rows_, found = t.rows_of(np.array([[x, y, z] + off]))
    if found[0]:
        acc = acc + t.features.data[rows_[0]] @ k.data[tuple(off + 1)]
assert np.allclose(conv.features.data[row], acc, atol=1e-12)
print("submanifold conv matches the neighborhood sum at a random site: ok")
