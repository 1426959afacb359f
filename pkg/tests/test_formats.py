from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxflow.errors import DimensionError, FormatError
from voxflow.formats import (
    decode_vxg,
    decode_vxs,
    encode_vxg,
    encode_vxs,
    read_manifest,
    read_mask,
    read_vxg,
    read_vxs,
    sha256_array,
    write_manifest,
    write_mask,
    write_vxg,
    write_vxs,
)
from voxflow.lattice import BinaryMask3D, DenseLatentGrid, SoftMask3D, SparseLatentSet

f32 = st.floats(-1e6, 1e6, width=32)


@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 3)), elements=f32))
def test_vxg_roundtrip_bitwise(values):
    g = DenseLatentGrid(values.astype(np.float64))
    back = decode_vxg(encode_vxg(g))
    assert np.array_equal(back.values, g.values)


def test_vxg_layout_is_x_fastest():
    v = np.zeros((2, 3, 1, 1))
    v[1, 0, 0, 0] = 7.0
    data = encode_vxg(DenseLatentGrid(v))
    assert data[:4] == b"VXG1"
    assert struct.unpack_from("<4I", data, 4) == (2, 3, 1, 1)
    payload = np.frombuffer(data, "<f4", offset=20)
    assert payload[1] == 7.0


@given(st.integers(2, 6), st.integers(1, 4), st.data())
def test_vxs_roundtrip_bitwise(n, c, data):
    bits = data.draw(arrays(bool, (n, n, n), elements=st.booleans()))
    coords = np.argwhere(bits)
    feats = data.draw(arrays(np.float32, (len(coords), c), elements=f32)).astype(np.float64)
    s = SparseLatentSet(coords, feats, n)
    back = decode_vxs(encode_vxs(s))
    assert back.resolution == n
    assert np.array_equal(back.coords, s.coords)
    assert np.array_equal(back.feats, s.feats)


def test_files_roundtrip(tmp_path, rng):
    g = DenseLatentGrid(rng.standard_normal((3, 4, 5, 2)).astype(np.float32))
    assert np.array_equal(read_vxg(write_vxg(tmp_path / "g.vxg", g)).values, g.values)
    s = SparseLatentSet(np.array([[0, 1, 2], [3, 3, 3]]), np.array([[0.5, -1.0], [2.0, 4.0]]), 4)
    back = read_vxs(write_vxs(tmp_path / "s.vxs", s))
    assert np.array_equal(back.feats, s.feats)


def test_nonfinite_rejected_on_write_and_read():
    with pytest.raises(DimensionError):
        DenseLatentGrid(np.full((1, 1, 1, 1), np.inf))
    data = bytearray(encode_vxg(DenseLatentGrid(np.zeros((1, 1, 1, 1)))))
    data[20:24] = struct.pack("<f", float("nan"))
    with pytest.raises(FormatError):
        decode_vxg(bytes(data))
    with pytest.raises(FormatError):
        encode_vxg(DenseLatentGrid(np.full((1, 1, 1, 1), 1e300)))


def test_malformed_headers():
    with pytest.raises(FormatError):
        decode_vxg(b"NOPE" + bytes(16))
    with pytest.raises(FormatError):
        decode_vxg(b"VXG1" + struct.pack("<4I", 2, 2, 2, 1) + bytes(4))
    with pytest.raises(FormatError):
        decode_vxs(b"VXS1" + struct.pack("<3I", 4, 1, 3))


def test_vxs_rejects_noncanonical_records():
    s = SparseLatentSet(np.array([[0, 0, 0], [1, 0, 0]]), np.zeros((2, 1)), 4)
    data = bytearray(encode_vxs(s))
    rec = 8 + 4
    first, second = data[16 : 16 + rec], data[16 + rec : 16 + 2 * rec]
    data[16 : 16 + 2 * rec] = second + first
    with pytest.raises(FormatError):
        decode_vxs(bytes(data))


def test_masks(tmp_path):
    b = np.zeros((3, 3, 3), bool)
    b[1, 2, 0] = True
    m = read_mask(write_mask(tmp_path / "m.vxg", BinaryMask3D(b)))
    assert np.array_equal(m.bits, b)
    w = np.full((3, 3, 3), 0.25)
    sm = read_mask(write_mask(tmp_path / "s.vxg", SoftMask3D(w)), soft=True)
    assert np.array_equal(sm.weights, w)
    with pytest.raises(FormatError):
        read_mask(tmp_path / "s.vxg")


def test_manifest_checksum_ignores_volatile(tmp_path):
    body = {"a": 1, "b": [1.5, "x"]}
    write_manifest(tmp_path / "m1.json", body, {"time": "t1"})
    write_manifest(tmp_path / "m2.json", body, {"time": "t2"})
    m1, m2 = read_manifest(tmp_path / "m1.json"), read_manifest(tmp_path / "m2.json")
    assert m1["body_sha256"] == m2["body_sha256"]
    assert m1["volatile"] != m2["volatile"]


def test_sha256_array_depends_on_shape_and_bits():
    a = np.zeros(4)
    assert sha256_array(a) != sha256_array(a.reshape(2, 2))
    assert sha256_array(np.array([0.0])) != sha256_array(np.array([-0.0]))
