from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxflow.errors import DimensionError, ParameterError
from voxflow.lattice import (
    BinaryMask3D,
    CoordinateSet,
    DenseLatentGrid,
    SoftMask3D,
    SparseLatentSet,
    coords_in,
    dense_from_sparse,
    dilate_mask,
    gaussian_falloff,
    index_of,
    keep_complement,
    nearest_set_distance,
    soft_edit_mask,
    sparse_from_dense,
    surface_voxels,
)

masks = st.integers(4, 9).flatmap(
    lambda n: arrays(bool, (n, n, n), elements=st.booleans()).map(BinaryMask3D)
)


# -- brute-force oracles ------------------------------------------------------


def dilate_oracle(bits, r):
    out = np.zeros_like(bits)
    dims = bits.shape
    for x, y, z in zip(*np.nonzero(bits)):
        for dx, dy, dz in itertools.product(range(-r, r + 1), repeat=3):
            p = (x + dx, y + dy, z + dz)
            if all(0 <= p[i] < dims[i] for i in range(3)):
                out[p] = True
    return out


def distance_oracle(bits):
    pts = np.argwhere(bits).astype(float)
    grid = np.indices(bits.shape).reshape(3, -1).T.astype(float)
    d = np.sqrt(((grid[:, None, :] - pts[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return d.reshape(bits.shape)


def scan_oracle(values, thr):
    n = values.shape[0]
    coords, feats = [], []
    for x in range(n):
        for y in range(n):
            for z in range(n):
                if values[x, y, z, 0] > thr:
                    coords.append((x, y, z))
                    feats.append(values[x, y, z, 1:])
    return np.array(coords).reshape(-1, 3), np.array(feats).reshape(len(coords), -1)


# -- containers -----------------------------------------------------------------


def test_dense_grid_rejects_nonfinite():
    v = np.zeros((2, 2, 2, 1))
    v[0, 0, 0, 0] = np.nan
    with pytest.raises(DimensionError):
        DenseLatentGrid(v)


def test_sparse_set_requires_canonical_distinct_coords():
    with pytest.raises(DimensionError):
        SparseLatentSet(np.array([[1, 0, 0], [0, 0, 0]]), np.zeros((2, 1)), 4)
    with pytest.raises(DimensionError):
        SparseLatentSet(np.array([[1, 0, 0], [1, 0, 0]]), np.zeros((2, 1)), 4)
    with pytest.raises(DimensionError):
        SparseLatentSet(np.array([[4, 0, 0]]), np.zeros((1, 1)), 4)
    s = SparseLatentSet.from_unsorted(np.array([[1, 0, 0], [0, 3, 0]]), np.array([[1.0], [2.0]]), 4)
    assert s.coords.tolist() == [[0, 3, 0], [1, 0, 0]]
    assert s.feats[:, 0].tolist() == [2.0, 1.0]


def test_containers_are_immutable():
    g = DenseLatentGrid(np.zeros((2, 2, 2, 1)))
    with pytest.raises(ValueError):
        g.values[0, 0, 0, 0] = 1.0


def test_soft_mask_range_checked():
    with pytest.raises(DimensionError):
        SoftMask3D(np.full((2, 2, 2), 1.5))


# -- sparse_from_dense ----------------------------------------------------------


def test_sparse_from_dense_examples():
    assert len(sparse_from_dense(DenseLatentGrid(np.zeros((4, 4, 4, 2))))) == 0
    v = np.zeros((4, 4, 4, 2))
    v[1, 2, 3, 0] = 1.0
    s = sparse_from_dense(DenseLatentGrid(v))
    assert s.coords.tolist() == [[1, 2, 3]]


def test_sparse_from_dense_matches_scan(rng):
    v = rng.uniform(0, 1, size=(8, 8, 8, 3))
    s = sparse_from_dense(DenseLatentGrid(v), threshold=0.5)
    coords, feats = scan_oracle(v, 0.5)
    assert np.array_equal(s.coords, coords)
    assert np.array_equal(s.feats, feats)


def test_sparse_from_dense_needs_cubic_grid():
    with pytest.raises(DimensionError):
        sparse_from_dense(DenseLatentGrid(np.zeros((4, 4, 5, 2))))


@given(arrays(float, (5, 5, 5, 3), elements=st.floats(-2, 2)))
def test_sparse_dense_roundtrip_idempotent(values):
    s1 = sparse_from_dense(DenseLatentGrid(values))
    s2 = sparse_from_dense(dense_from_sparse(s1))
    assert np.array_equal(s1.coords, s2.coords)
    assert np.array_equal(s1.feats, s2.feats)


# -- dilation -------------------------------------------------------------------------


def test_dilate_radius_zero_identity(rng):
    m = BinaryMask3D(rng.random((6, 6, 6)) < 0.2)
    assert np.array_equal(dilate_mask(m, 0).bits, m.bits)


def test_dilate_single_voxel():
    b = np.zeros((7, 7, 7), bool)
    b[3, 3, 3] = True
    d = dilate_mask(BinaryMask3D(b), 1)
    assert d.count() == 27
    assert d.bits[2:5, 2:5, 2:5].all()
    b = np.zeros((7, 7, 7), bool)
    b[0, 0, 0] = True
    assert dilate_mask(BinaryMask3D(b), 1).count() == 8


def test_dilate_matches_bruteforce(rng):
    bits = rng.random((16, 16, 16)) < 0.03
    assert np.array_equal(dilate_mask(BinaryMask3D(bits), 2).bits, dilate_oracle(bits, 2))


def test_dilate_rejects_negative_radius():
    with pytest.raises(ParameterError):
        dilate_mask(BinaryMask3D.empty((3, 3, 3)), -1)


@given(masks, st.integers(0, 2), st.integers(0, 2))
def test_dilation_extensive_and_composable(m, r1, r2):
    d1 = dilate_mask(m, r1)
    assert not np.any(m.bits & ~d1.bits)
    assert np.array_equal(dilate_mask(d1, r2).bits, dilate_mask(m, r1 + r2).bits)


@given(masks, st.integers(0, 2), st.data())
def test_dilation_monotone(m, r, data):
    extra = data.draw(arrays(bool, m.dims, elements=st.booleans()))
    bigger = BinaryMask3D(m.bits | extra)
    assert not np.any(dilate_mask(m, r).bits & ~dilate_mask(bigger, r).bits)


# -- falloff ---------------------------------------------------------------------------


def test_falloff_examples():
    b = np.zeros((9, 9, 9), bool)
    b[4, 4, 4] = True
    w = gaussian_falloff(BinaryMask3D(b), 2.0).weights
    assert w[4, 4, 4] == 1.0
    assert w[6, 4, 4] == pytest.approx(np.exp(-0.5), abs=1e-12)
    assert np.exp(-0.5) == pytest.approx(0.60653, abs=1e-5)
    assert not gaussian_falloff(BinaryMask3D.empty((4, 4, 4)), 1.0).weights.any()
    with pytest.raises(ParameterError):
        gaussian_falloff(BinaryMask3D(b), 0.0)


def test_edt_matches_bruteforce(rng):
    bits = rng.random((10, 10, 10)) < 0.02
    bits[0, 0, 0] = True
    assert np.array_equal(nearest_set_distance(BinaryMask3D(bits)), distance_oracle(bits))


@given(masks.filter(lambda m: m.bits.any()), st.floats(0.3, 4.0))
def test_falloff_one_on_mask_and_monotone_in_distance(m, sigma):
    w = gaussian_falloff(m, sigma).weights
    assert np.all(w[m.bits] == 1.0)
    d = nearest_set_distance(m).ravel()
    order = np.argsort(d, kind="stable")
    assert np.all(np.diff(w.ravel()[order]) <= 0)
    assert np.all((w > 0) & (w <= 1))


def test_soft_edit_mask_truncated_to_dilation(rng):
    bits = rng.random((12, 12, 12)) < 0.01
    bits[5, 5, 5] = True
    m = BinaryMask3D(bits)
    w = soft_edit_mask(m, 2, 1.5).weights
    support = dilate_mask(m, 2).bits
    assert np.all(w[~support] == 0.0)
    assert np.all(w[bits] == 1.0)
    assert np.all(w[support] > 0.0)


# -- coordinate sets -----------------------------------------------------------------


def test_keep_complement_examples():
    active = CoordinateSet(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]]))
    b = np.zeros((3, 3, 3), bool)
    b[1, 1, 1] = True
    assert keep_complement(active, BinaryMask3D(b)).as_tuples() == [(0, 0, 0), (2, 2, 2)]
    assert keep_complement(active, BinaryMask3D.empty((3, 3, 3))).as_tuples() == active.as_tuples()
    assert len(keep_complement(active, BinaryMask3D(np.ones((3, 3, 3), bool)))) == 0
    with pytest.raises(DimensionError):
        keep_complement(CoordinateSet(np.array([[3, 0, 0]])), BinaryMask3D(b))


@given(masks, st.data())
def test_keep_complement_partition(m, data):
    n = m.dims[0]
    active_bits = data.draw(arrays(bool, m.dims, elements=st.booleans()))
    active = CoordinateSet(np.argwhere(active_bits))
    keep = keep_complement(active, m)
    if len(keep):
        x, y, z = keep.coords.T
        assert not m.bits[x, y, z].any()
    edited = np.argwhere(active_bits & m.bits)
    union = CoordinateSet.from_unsorted(np.concatenate([keep.coords, edited]))
    assert np.array_equal(union.coords, active.coords)
    assert n == m.dims[0]


def test_index_of_and_coords_in():
    layout = np.array([[0, 0, 1], [0, 2, 0], [3, 1, 1]])
    q = np.array([[3, 1, 1], [1, 1, 1], [0, 0, 1]])
    assert index_of(q, layout).tolist() == [2, -1, 0]
    assert coords_in(q, layout).tolist() == [True, False, True]


def test_surface_voxels_of_solid_cube():
    occ = np.zeros((6, 6, 6), bool)
    occ[1:5, 1:5, 1:5] = True
    surf = surface_voxels(occ)
    assert len(surf) == 4**3 - 2**3
    occ_full = np.ones((3, 3, 3), bool)
    assert len(surface_voxels(occ_full)) == 26
