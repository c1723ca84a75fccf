"""Sparse voxel tensors, submanifold / strided 3D convolutions, and the
lossless mappings between sparse voxel space and dense arrays.

Coordinates are (x, y, z) integer triples inside a (W, H, D) grid, packed
to a 64-bit linear key (z*H + y)*W + x. Row lookup is a binary search over
the sorted keys, which vectorizes; the mapping surface behaves like an
exact hash (collision-free within the grid).

Convolutions are cross-correlations: out[p] = sum_t K[t] . in[p + off_t],
with taps enumerated row-major over (dx, dy, dz) in {-1, 0, 1}^3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class CoordinateError(Exception):
    """Coordinates outside the grid, or duplicated."""


KERNEL_OFFSETS = np.array([(dx, dy, dz)
                           for dx in (-1, 0, 1)
                           for dy in (-1, 0, 1)
                           for dz in (-1, 0, 1)], dtype=np.int64)


def pack_coords(coords: np.ndarray, shape: tuple) -> np.ndarray:
    w, h, _d = shape
    return (coords[:, 2] * h + coords[:, 1]) * w + coords[:, 0]


def unpack_coords(keys: np.ndarray, shape: tuple) -> np.ndarray:
    w, h, _d = shape
    out = np.empty((len(keys), 3), dtype=np.int64)
    out[:, 0] = keys % w
    out[:, 1] = (keys // w) % h
    out[:, 2] = keys // (w * h)
    return out


class SparseVoxelTensor:
    """Coordinate list + feature matrix, single sample, immutable."""

    def __init__(self, coords: np.ndarray, features, spatial_shape: tuple):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if not isinstance(features, ad.Tensor):
            features = ad.Tensor(features)
        if features.data.ndim != 2 or len(features.data) != len(coords):
            raise ValueError("features must be (M, C) aligned with coords")
        shape = tuple(int(s) for s in spatial_shape)
        if len(coords) and ((coords < 0).any() or (coords >= np.array(shape)).any()):
            raise CoordinateError("coords outside spatial_shape")
        keys = pack_coords(coords, shape)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        if len(sorted_keys) > 1 and (np.diff(sorted_keys) == 0).any():
            raise CoordinateError("duplicate coordinates")
        self.coords = coords
        self.features = features
        self.spatial_shape = shape
        self._keys = keys
        self._sorted_keys = sorted_keys
        self._order = order

    def __len__(self):
        return len(self.coords)

    @property
    def num_channels(self) -> int:
        return self.features.data.shape[1]

    def rows_of(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized lookup: (row ids, found mask) for query coordinates.

        Out-of-grid queries are simply not found.
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        shape = np.array(self.spatial_shape)
        in_grid = ((coords >= 0) & (coords < shape)).all(axis=1)
        keys = pack_coords(np.clip(coords, 0, shape - 1), self.spatial_shape)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.clip(pos, 0, max(len(self._sorted_keys) - 1, 0))
        if len(self._sorted_keys):
            found = in_grid & (self._sorted_keys[pos] == keys)
            rows = self._order[pos]
        else:
            found = np.zeros(len(coords), dtype=bool)
            rows = np.zeros(len(coords), dtype=np.int64)
        return rows, found

    @property
    def coord_index(self) -> dict:
        """Coordinate-triple -> row mapping (materialized for inspection)."""
        return {tuple(c): r for r, c in enumerate(map(tuple, self.coords))}

    def with_features(self, features) -> "SparseVoxelTensor":
        out = SparseVoxelTensor.__new__(SparseVoxelTensor)
        out.coords = self.coords
        out.spatial_shape = self.spatial_shape
        out._keys = self._keys
        out._sorted_keys = self._sorted_keys
        out._order = self._order
        if not isinstance(features, ad.Tensor):
            features = ad.Tensor(features)
        out.features = features
        return out


@dataclass
class DenseBEVMap:
    """Height-collapsed 2D feature grid; channels are height-major blocks."""

    features: ad.Tensor          # (C * n_heights, H, W)
    n_heights: int
    downsample: tuple = (1, 1, 1)

    def __post_init__(self):
        if not isinstance(self.features, ad.Tensor):
            self.features = ad.Tensor(self.features)
        if self.features.data.shape[0] % self.n_heights:
            raise ValueError("channel count not divisible by n_heights")

    @property
    def channels_per_height(self) -> int:
        return self.features.data.shape[0] // self.n_heights

    @property
    def hw(self) -> tuple:
        return self.features.data.shape[1:]


# Rulebooks depend only on coordinate geometry, which repeats every time the
# same scene is revisited; cache them keyed by the raw coordinate bytes.
_RULEBOOK_CACHE: dict = {}
_RULEBOOK_CACHE_LIMIT = 512


def _cached(key, build):
    hit = _RULEBOOK_CACHE.get(key)
    if hit is not None:
        return hit
    if len(_RULEBOOK_CACHE) >= _RULEBOOK_CACHE_LIMIT:
        _RULEBOOK_CACHE.clear()
    out = _RULEBOOK_CACHE[key] = build()
    return out


def _conv_pairs(tensor: SparseVoxelTensor, out_coords: np.ndarray,
                out_shape: tuple, stride: int):
    """Per-tap (input rows, output rows) route for a 3x3x3 correlation."""
    def build():
        pairs = []
        for off in KERNEL_OFFSETS:
            want = out_coords * stride + off
            rows, found = tensor.rows_of(want)
            out_rows = np.nonzero(found)[0]
            pairs.append((rows[found], out_rows))
        return pairs

    key = ("conv", tensor.spatial_shape, stride, tensor._keys.tobytes(),
           out_coords.tobytes())
    return _cached(key, build)


def submanifold_conv3d(t: SparseVoxelTensor, kernel: ad.Tensor,
                       bias: ad.Tensor) -> SparseVoxelTensor:
    """3x3x3 sparse convolution whose output sites equal the input sites."""
    if kernel.data.shape[:3] != (3, 3, 3) or kernel.data.shape[3] != t.num_channels:
        raise ValueError(f"kernel shape {kernel.data.shape} does not fit input")
    k = ad.reshape(kernel, (27, kernel.data.shape[3], kernel.data.shape[4]))
    pairs = _conv_pairs(t, t.coords, t.spatial_shape, stride=1)
    out = ad.tap_matmul_scatter(t.features, k, pairs, len(t), bias)
    return t.with_features(out)


def strided_conv3d(t: SparseVoxelTensor, kernel: ad.Tensor,
                   bias: ad.Tensor, stride: int = 2) -> SparseVoxelTensor:
    """Downsampling sparse convolution (stride 2, padding 1).

    Active output sites are floor(coords / 2) of the input sites,
    deduplicated; each carries the dense strided convolution value there.
    """
    if any(s % stride for s in t.spatial_shape):
        raise ValueError(f"spatial_shape {t.spatial_shape} not divisible by {stride}")
    if kernel.data.shape[3] != t.num_channels:
        raise ValueError("kernel input width mismatch")
    out_shape = tuple(s // stride for s in t.spatial_shape)
    if len(t):
        down = t.coords // stride
        keys = np.unique(pack_coords(down, out_shape))
        out_coords = unpack_coords(keys, out_shape)
    else:
        out_coords = np.empty((0, 3), dtype=np.int64)
    k = ad.reshape(kernel, (27, kernel.data.shape[3], kernel.data.shape[4]))
    pairs = _conv_pairs(t, out_coords, out_shape, stride=stride)
    out = ad.tap_matmul_scatter(t.features, k, pairs, len(out_coords), bias)
    return SparseVoxelTensor(out_coords, out, out_shape)


def upsample_conv3d(coarse: SparseVoxelTensor, fine_coords: np.ndarray,
                    fine_shape: tuple, kernel: ad.Tensor,
                    bias: ad.Tensor) -> SparseVoxelTensor:
    """Transposed counterpart of strided_conv3d, restricted to known
    fine-scale coordinates: fine[f] += K[t] . coarse[o] wherever 2o + t = f."""
    fine_coords = np.asarray(fine_coords, dtype=np.int64).reshape(-1, 3)

    def build():
        pairs = []
        for off in KERNEL_OFFSETS:
            cand = fine_coords - off
            parity_ok = (cand % 2 == 0).all(axis=1)
            source = cand // 2
            rows, found = coarse.rows_of(source)
            ok = parity_ok & found
            pairs.append((rows[ok], np.nonzero(ok)[0]))
        return pairs

    pairs = _cached(("up", coarse.spatial_shape, coarse._keys.tobytes(),
                     fine_coords.tobytes()), build)
    k = ad.reshape(kernel, (27, kernel.data.shape[3], kernel.data.shape[4]))
    out = ad.tap_matmul_scatter(coarse.features, k, pairs, len(fine_coords), bias)
    return SparseVoxelTensor(fine_coords, out, fine_shape)


def scatter_to_dense(t: SparseVoxelTensor) -> ad.Tensor:
    """Write features into a zero (C, D, H, W) array at the active sites."""
    w, h, d = t.spatial_shape
    linear = pack_coords(t.coords, t.spatial_shape)
    flat = ad.put_rows(t.features, linear, w * h * d)           # (D*H*W, C)
    return ad.transpose(ad.reshape(flat, (d, h, w, t.num_channels)), (3, 0, 1, 2))


def gather_from_dense(dense: ad.Tensor, coords: np.ndarray,
                      spatial_shape: tuple) -> ad.Tensor:
    """Read (M, C) feature rows of a (C, D, H, W) array at coords."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    shape = np.array(spatial_shape)
    if len(coords) and ((coords < 0).any() or (coords >= shape).any()):
        raise CoordinateError("gather coordinate outside the dense array")
    c, d, h, w = dense.data.shape
    flat = ad.reshape(ad.transpose(dense, (1, 2, 3, 0)), (d * h * w, c))
    return ad.gather_rows(flat, pack_coords(coords, spatial_shape))


def height_collapse(dense: ad.Tensor) -> ad.Tensor:
    """(C, D, H, W) -> (D*C, H, W); channel block j is height slice j."""
    c, d, h, w = dense.data.shape
    return ad.reshape(ad.transpose(dense, (1, 0, 2, 3)), (d * c, h, w))


def height_expand(bev: ad.Tensor, n_heights: int) -> ad.Tensor:
    """Exact inverse of height_collapse."""
    dc, h, w = bev.data.shape
    if dc % n_heights:
        raise ValueError(f"{dc} channels not divisible into {n_heights} heights")
    c = dc // n_heights
    return ad.transpose(ad.reshape(bev, (n_heights, c, h, w)), (1, 0, 2, 3))
