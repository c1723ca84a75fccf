import numpy as np
import pytest

from lidarmt import autodiff as ad
from lidarmt import sparse

from conftest import check_grads, rng


def random_sparse(r, shape=(5, 5, 5), n=10, cin=3):
    w, h, d = shape
    cells = r.choice(w * h * d, size=min(n, w * h * d), replace=False)
    coords = np.column_stack([cells % w, (cells // w) % h, cells // (w * h)])
    feats = ad.parameter(r.normal(size=(len(coords), cin)))
    return sparse.SparseVoxelTensor(coords, feats, shape)


def dense_conv_oracle(t, kernel, bias, stride=1):
    """Zero-padded dense 3D correlation, evaluated on the full grid."""
    w, h, d = t.spatial_shape
    cin = t.num_channels
    cout = kernel.shape[-1]
    dense = np.zeros((w, h, d, cin))
    for row, (x, y, z) in enumerate(t.coords):
        dense[x, y, z] = t.features.data[row]
    padded = np.pad(dense, ((1, 1), (1, 1), (1, 1), (0, 0)))
    wo, ho, do = w // stride, h // stride, d // stride
    out = np.zeros((wo, ho, do, cout))
    for x in range(wo):
        for y in range(ho):
            for z in range(do):
                acc = np.zeros(cout)
                for dx in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        for dz in (-1, 0, 1):
                            v = padded[x * stride + dx + 1, y * stride + dy + 1,
                                       z * stride + dz + 1]
                            acc += v @ kernel[dx + 1, dy + 1, dz + 1]
                out[x, y, z] = acc + bias
    return out


def test_identity_kernel_is_identity():
    r = rng(0)
    t = random_sparse(r, n=8, cin=4)
    k = np.zeros((3, 3, 3, 4, 4))
    k[1, 1, 1] = np.eye(4)
    out = sparse.submanifold_conv3d(t, ad.Tensor(k), ad.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.coords, t.coords)
    np.testing.assert_allclose(out.features.data, t.features.data, atol=1e-15)


def test_single_voxel_sees_only_center_tap():
    r = rng(1)
    k = ad.Tensor(r.normal(size=(3, 3, 3, 3, 2)))
    b = ad.Tensor(r.normal(size=2))
    t = sparse.SparseVoxelTensor(np.array([[2, 2, 2]]), r.normal(size=(1, 3)), (5, 5, 5))
    out = sparse.submanifold_conv3d(t, k, b)
    want = t.features.data[0] @ k.data[1, 1, 1] + b.data
    np.testing.assert_allclose(out.features.data[0], want, atol=1e-12)


@pytest.mark.parametrize("seed", [2, 3, 4])
def test_submanifold_matches_dense_oracle(seed):
    r = rng(seed)
    t = random_sparse(r, shape=(5, 5, 5), n=14, cin=3)
    k = ad.Tensor(r.normal(size=(3, 3, 3, 3, 4)))
    b = ad.Tensor(r.normal(size=4))
    out = sparse.submanifold_conv3d(t, k, b)
    dense = dense_conv_oracle(t, k.data, b.data)
    for row, (x, y, z) in enumerate(out.coords):
        np.testing.assert_allclose(out.features.data[row], dense[x, y, z], atol=1e-12)


def test_strided_single_voxel_coordinate_arithmetic():
    r = rng(5)
    t = sparse.SparseVoxelTensor(np.array([[4, 4, 2]]), r.normal(size=(1, 2)), (8, 8, 4))
    k = ad.Tensor(r.normal(size=(3, 3, 3, 2, 2)))
    out = sparse.strided_conv3d(t, k, ad.Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.coords, [[2, 2, 1]])
    assert out.spatial_shape == (4, 4, 2)


def test_strided_merging_matches_dense_oracle():
    r = rng(6)
    coords = np.array([[2, 2, 2], [3, 3, 3], [0, 0, 0], [3, 2, 2]])
    t = sparse.SparseVoxelTensor(coords, r.normal(size=(4, 3)), (6, 6, 6))
    k = ad.Tensor(r.normal(size=(3, 3, 3, 3, 2)))
    b = ad.Tensor(r.normal(size=2))
    out = sparse.strided_conv3d(t, k, b)
    assert out.spatial_shape == (3, 3, 3)
    want_coords = {(1, 1, 1), (0, 0, 0)}
    assert set(map(tuple, out.coords)) == want_coords
    dense = dense_conv_oracle(t, k.data, b.data, stride=2)
    for row, (x, y, z) in enumerate(out.coords):
        np.testing.assert_allclose(out.features.data[row], dense[x, y, z], atol=1e-12)


def test_strided_empty_tensor_halves_shape():
    t = sparse.SparseVoxelTensor(np.empty((0, 3)), np.empty((0, 3)), (4, 4, 4))
    out = sparse.strided_conv3d(t, ad.Tensor(np.zeros((3, 3, 3, 3, 2))),
                                ad.Tensor(np.zeros(2)))
    assert len(out) == 0
    assert out.spatial_shape == (2, 2, 2)


def test_strided_rejects_odd_shape():
    t = sparse.SparseVoxelTensor(np.array([[0, 0, 0]]), np.ones((1, 1)), (3, 4, 4))
    with pytest.raises(ValueError):
        sparse.strided_conv3d(t, ad.Tensor(np.zeros((3, 3, 3, 1, 1))),
                              ad.Tensor(np.zeros(1)))


def test_conv_gradients_match_finite_differences():
    r = rng(7)
    t = random_sparse(r, shape=(4, 4, 4), n=6, cin=2)
    k = ad.parameter(r.normal(size=(3, 3, 3, 2, 3)))
    b = ad.parameter(r.normal(size=3))
    w = ad.constant(r.normal(size=(len(t), 3)))

    def f_sub():
        return ad.mul(sparse.submanifold_conv3d(t, k, b).features, w).sum()

    check_grads(f_sub, [t.features, k, b])

    w2 = ad.constant(r.normal(size=(len(sparse.strided_conv3d(t, k, b)), 3)))

    def f_str():
        return ad.mul(sparse.strided_conv3d(t, k, b).features, w2).sum()

    check_grads(f_str, [t.features, k, b])


def test_upsample_conv_routes_and_grads():
    r = rng(8)
    coarse = random_sparse(r, shape=(2, 2, 2), n=3, cin=2)
    fine_coords = np.array([[0, 0, 0], [1, 0, 0], [2, 2, 2], [3, 3, 3]])
    k = ad.parameter(r.normal(size=(3, 3, 3, 2, 2)))
    b = ad.parameter(r.normal(size=2))
    out = sparse.upsample_conv3d(coarse, fine_coords, (4, 4, 4), k, b)
    np.testing.assert_array_equal(out.coords, fine_coords)
    # every fine site f receives coarse[o] iff 2o + t = f for some tap t
    for fi, f in enumerate(fine_coords):
        acc = b.data.copy()
        for off in sparse.KERNEL_OFFSETS:
            cand = f - off
            if (cand % 2 == 0).all():
                rows, found = coarse.rows_of(cand // 2)
                if found[0]:
                    tap = tuple(off + 1)
                    acc = acc + coarse.features.data[rows[0]] @ k.data[tap]
        np.testing.assert_allclose(out.features.data[fi], acc, atol=1e-12)
    w = ad.constant(r.normal(size=(4, 2)))

    def f():
        return ad.mul(sparse.upsample_conv3d(coarse, fine_coords, (4, 4, 4), k, b).features,
                      w).sum()

    check_grads(f, [coarse.features, k, b])


def test_scatter_gather_roundtrip_identity():
    r = rng(9)
    t = random_sparse(r, shape=(3, 4, 2), n=5, cin=3)
    dense = sparse.scatter_to_dense(t)
    assert dense.shape == (3, 2, 4, 3)  # (C, D, H, W)
    back = sparse.gather_from_dense(dense, t.coords, t.spatial_shape)
    np.testing.assert_array_equal(back.data, t.features.data)


def test_scatter_empty_is_all_zero():
    t = sparse.SparseVoxelTensor(np.empty((0, 3)), np.empty((0, 2)), (2, 2, 2))
    np.testing.assert_array_equal(sparse.scatter_to_dense(t).data,
                                  np.zeros((2, 2, 2, 2)))


def test_gather_at_absent_coordinate_is_zero():
    r = rng(10)
    t = sparse.SparseVoxelTensor(np.array([[1, 1, 1]]), r.normal(size=(1, 2)), (3, 3, 3))
    dense = sparse.scatter_to_dense(t)
    out = sparse.gather_from_dense(dense, np.array([[0, 0, 0]]), t.spatial_shape)
    np.testing.assert_array_equal(out.data, np.zeros((1, 2)))


def test_gather_out_of_range_raises():
    dense = ad.Tensor(np.zeros((2, 2, 2, 2)))
    with pytest.raises(sparse.CoordinateError):
        sparse.gather_from_dense(dense, np.array([[5, 0, 0]]), (2, 2, 2))


def test_scatter_gather_gradients():
    r = rng(11)
    t = random_sparse(r, shape=(3, 3, 2), n=4, cin=2)
    w = ad.constant(r.normal(size=(2, 2, 3, 3)))

    def f():
        return ad.mul(sparse.scatter_to_dense(t), w).sum()

    check_grads(f, [t.features])


def test_height_collapse_expand_inverse():
    r = rng(12)
    x = ad.parameter(r.normal(size=(3, 2, 4, 5)))  # (C, D, H, W)
    bev = sparse.height_collapse(x)
    assert bev.shape == (6, 4, 5)
    back = sparse.height_expand(bev, 2)
    np.testing.assert_array_equal(back.data, x.data)
    w = ad.constant(r.normal(size=(6, 4, 5)))
    check_grads(lambda: ad.mul(sparse.height_collapse(x), w).sum(), [x])


def test_height_collapse_order_is_height_major():
    x = np.zeros((1, 2, 2, 2))
    x[0, 0] = 1.0
    x[0, 1] = 2.0
    bev = sparse.height_collapse(ad.Tensor(x))
    np.testing.assert_array_equal(bev.data[0], np.ones((2, 2)))
    np.testing.assert_array_equal(bev.data[1], 2 * np.ones((2, 2)))


def test_height_slices_match_channel_blocks():
    r = rng(13)
    x = ad.Tensor(r.normal(size=(4, 3, 2, 2)))
    bev = sparse.height_collapse(x)
    for j in range(3):
        np.testing.assert_array_equal(bev.data[4 * j:4 * (j + 1)], x.data[:, j])
    back = sparse.height_expand(bev, 3)
    for j in range(3):
        np.testing.assert_array_equal(back.data[:, j], bev.data[4 * j:4 * (j + 1)])


def test_height_expand_rejects_indivisible():
    with pytest.raises(ValueError):
        sparse.height_expand(ad.Tensor(np.zeros((5, 2, 2))), 2)


def test_coord_index_exact_lookup():
    r = rng(14)
    t = random_sparse(r, shape=(6, 6, 6), n=20, cin=1)
    index = t.coord_index
    for row in range(len(t)):
        assert index[tuple(t.coords[row])] == row
    rows, found = t.rows_of(t.coords)
    assert found.all()
    np.testing.assert_array_equal(rows, np.arange(len(t)))


def test_duplicate_coords_rejected():
    with pytest.raises(sparse.CoordinateError):
        sparse.SparseVoxelTensor(np.array([[1, 1, 1], [1, 1, 1]]),
                                 np.zeros((2, 1)), (3, 3, 3))


def test_out_of_shape_coords_rejected():
    with pytest.raises(sparse.CoordinateError):
        sparse.SparseVoxelTensor(np.array([[3, 0, 0]]), np.zeros((1, 1)), (3, 3, 3))
