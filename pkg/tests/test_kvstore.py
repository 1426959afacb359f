from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxflow.errors import AlignmentError, CacheMissError, CollisionError, ShapeError
from voxflow.kvstore import KVCacheStore, KVEntry, KVKey, align_to_layout, replace_kv

vals = st.floats(-5, 5)


def test_put_get_identity_and_collision(rng):
    s = KVCacheStore("ST")
    K, V = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 2, 4))
    key = KVKey("ST", 0.5, 1, "self", 1)
    s.put(key, K, V)
    assert len(s) == 1
    e = s.get(key)
    assert np.array_equal(e.K, K) and np.array_equal(e.V, V)
    with pytest.raises(CollisionError):
        s.put(key, K, V)


def test_misses_name_the_key():
    s = KVCacheStore("ST")
    s.put(KVKey("ST", 0.5, 0), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(CacheMissError, match="eval_time=0.5000000000000001"):
        s.get(KVKey("ST", 0.5000000000000001, 0))
    with pytest.raises(CacheMissError, match="stage=SLAT"):
        s.get(KVKey("SLAT", 0.5, 0))


def test_layout_conformance():
    s = KVCacheStore("SLAT")
    s.bind_layout(np.array([[0, 0, 0], [0, 0, 1]]))
    with pytest.raises(ShapeError):
        s.put(KVKey("SLAT", 0.1, 0), np.zeros((3, 1, 1)), np.zeros((3, 1, 1)))


def test_replace_kv_examples(rng):
    Kn, Vn, Kc, Vc = (rng.standard_normal((3, 2, 2)) for _ in range(4))
    K, V = replace_kv(Kn, Vn, Kc, Vc, np.ones(3))
    assert np.array_equal(K, Kn) and np.array_equal(V, Vn)
    K, V = replace_kv(Kn, Vn, Kc, Vc, np.zeros(3))
    assert np.array_equal(K, Kc) and np.array_equal(V, Vc)
    W = np.array([1.0, 0.0, 1.0])
    K, V = replace_kv(Kn, Vn, Kc, Vc, W)
    for i, w in enumerate(W):
        assert np.array_equal(K[i], Kn[i] if w else Kc[i])
        assert np.array_equal(V[i], Vn[i] if w else Vc[i])
    with pytest.raises(ShapeError):
        replace_kv(Kn, Vn, Kc[:2], Vc, W)


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    arrays(float, (n, 2, 3), elements=vals),
    arrays(float, (n, 2, 3), elements=vals),
    arrays(float, (n,), elements=st.sampled_from([0.0, 1.0])),
)))
def test_replace_kv_idempotent_for_binary_w(data):
    Kn, Kc, W = data
    once, _ = replace_kv(Kn, Kn, Kc, Kc, W)
    twice, _ = replace_kv(once, once, Kc, Kc, W)
    assert np.array_equal(once, twice)


@given(st.integers(1, 5).flatmap(lambda n: st.tuples(
    arrays(float, (n, 3), elements=vals),
    arrays(float, (n, 3), elements=vals),
    arrays(float, (n, 3), elements=vals),
    arrays(float, (n,), elements=st.floats(0, 1)),
)))
def test_replace_kv_linear(data):
    A, B, C, W = data
    lhs, _ = replace_kv(A + B, A + B, 2 * C, 2 * C, W)
    ra, _ = replace_kv(A, A, C, C, W)
    rb, _ = replace_kv(B, B, C, C, W)
    assert np.allclose(lhs, ra + rb, atol=1e-9)


def test_store_roundtrip_bitwise(tmp_path, rng):
    s = KVCacheStore("SLAT")
    s.bind_layout(np.array([[0, 0, 0], [1, 0, 0]]))
    keys = [KVKey("SLAT", t, layer, "self", layer, br) for t in (0.0, 1 / 3) for layer in (0, 1) for br in ("cond", "neg")]
    for k in keys:
        s.put(k, rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3)))
    s.save(tmp_path / "kv")
    back = KVCacheStore.load(tmp_path / "kv")
    assert back.stage == "SLAT" and np.array_equal(back.layout, s.layout)
    assert set(back.keys()) == set(keys)
    for k in keys:
        assert np.array_equal(back.get(k).K, s.get(k).K)
        assert np.array_equal(back.get(k).V, s.get(k).V)


def test_align_to_layout():
    entry = KVEntry(np.arange(2.0).reshape(2, 1, 1), np.arange(2.0).reshape(2, 1, 1) + 10)
    store_layout = np.array([[0, 0, 0], [0, 0, 2]])
    layout = np.array([[0, 0, 1], [0, 0, 2]])
    out = align_to_layout(entry, store_layout, layout, np.array([1.0, 0.0]))
    assert out.K[1, 0, 0] == 1.0 and out.V[1, 0, 0] == 11.0
    with pytest.raises(AlignmentError):
        align_to_layout(entry, store_layout, layout, np.array([0.0, 0.0]))
