from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxflow.errors import DimensionError, ParameterError
from voxflow.formats import sha256_array
from voxflow.lattice import BinaryMask3D, SparseLatentSet
from voxflow.pipeline import (
    Asset,
    AssetInversion,
    RunConfig,
    assets_equal,
    denormalize_features,
    invert_asset,
    normalize_features,
    reconstruct_asset,
    run_two_stage_edit,
    slat_field,
    slat_initial_state,
    st_field,
)
from voxflow.solver import sample
from voxflow.synth import gen_edit_scenario


def slat_of(feats):
    feats = np.asarray(feats, dtype=float)
    coords = np.argwhere(np.ones((4, 4, 4), bool))[: len(feats)]
    return SparseLatentSet(coords, feats, 4)


def test_normalize_examples():
    s, stats = normalize_features(slat_of([[3.0, 0.0], [3.0, 2.0]]))
    assert s.feats[:, 0].tolist() == [0.0, 0.0] and stats.std[0] == 1.0
    assert s.feats[:, 1].tolist() == [-1.0, 1.0]
    assert stats.mean[1] == 1.0 and stats.std[1] == 1.0
    with pytest.raises(ParameterError):
        normalize_features(SparseLatentSet(np.zeros((0, 3)), np.zeros((0, 2)), 4))


@given(arrays(float, st.tuples(st.integers(1, 30), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)))
def test_normalize_roundtrip(feats):
    s = slat_of(feats)
    n, stats = normalize_features(s)
    assert np.all(stats.std > 0)
    back = denormalize_features(n, stats).feats
    assert np.max(np.abs(back - feats)) <= 1e-6


def test_run_config_layers():
    cfg = RunConfig.from_dict({"steps": "50", "guidance": "off", "omega": "2.5"})
    assert cfg.steps == 50 and cfg.guidance is False and cfg.omega == 2.5
    assert cfg.guidance_config() is None
    assert RunConfig().guidance_config().omega == 5.0
    assert RunConfig().guidance_config().interval == (0.5, 1.0)
    assert RunConfig().steps == 25
    with pytest.raises(ParameterError):
        RunConfig.from_dict({"nonsense": "1"})
    with pytest.raises(ParameterError):
        RunConfig.from_dict({"steps": "many"})
    with pytest.raises(ParameterError):
        RunConfig(steps=0)
    with pytest.raises(ParameterError):
        RunConfig(model_dim=10, heads=4)


def test_asset_invariants(small_asset):
    small_asset.validate()
    bad = Asset(small_asset.st_grid, SparseLatentSet(np.array([[0, 0, 0]]), np.zeros((1, 5)), 8))
    with pytest.raises(DimensionError):
        bad.validate()
    with pytest.raises(DimensionError):
        Asset(small_asset.st_grid, SparseLatentSet(np.zeros((0, 3)), np.zeros((0, 5)), 16)).validate()


def test_asset_save_load(tmp_path, small_asset):
    small_asset.save(tmp_path / "a")
    assert assets_equal(Asset.load(tmp_path / "a"), small_asset)


@pytest.fixture(scope="module")
def edited(small_asset, small_config):
    sc = gen_edit_scenario(small_asset, "octant:+++")
    cfg = small_config.updated(cond="remove")
    return sc, cfg, run_two_stage_edit(small_asset, sc.mask, config=cfg)


def test_two_stage_preservation(small_asset, edited):
    sc, _, res = edited
    region = res.region.bits
    assert np.array_equal(res.asset.st_grid.values[~region], small_asset.st_grid.values[~region])
    src = {tuple(c): f for c, f in zip(small_asset.slat.coords.tolist(), small_asset.slat.feats)}
    out = {tuple(c): f for c, f in zip(res.asset.slat.coords.tolist(), res.asset.slat.feats)}
    for c in res.keep.as_tuples():
        assert np.array_equal(out[c], src[c])
        assert not region[c]
    assert res.report["st_preserved_match"] and res.report["slat_keep_match"]
    assert res.report["st_preserved_sha256_in"] == sha256_array(small_asset.st_grid.values[~region])
    res.asset.validate()


def test_report_contents(edited):
    _, cfg, res = edited
    r = res.report
    assert r["steps"] == cfg.steps
    assert r["st_kv_entries"] > 0 and r["slat_kv_entries"] > 0
    assert r["keep_count"] == len(res.keep)


def test_no_edit_identity(small_asset, small_config):
    res = run_two_stage_edit(small_asset, BinaryMask3D.empty((8, 8, 8)), config=small_config.updated(cond="other"))
    assert assets_equal(res.asset, small_asset)


def test_full_cover_equals_free_generation(small_asset, small_config):
    cfg = small_config.updated(cond="fresh")
    full = BinaryMask3D(np.ones((8, 8, 8), bool))
    res = run_two_stage_edit(small_asset, full, config=cfg)
    assert "keep set is empty: SLAT stage runs as free generation" in res.report["warnings"]
    src, cond, neg = cfg.conditions()
    inv = invert_asset(small_asset, cfg, src, neg)
    st_ref, _ = sample(st_field(cfg, 8), cfg.schedule_obj(), inv.st.noise, cfg.guidance_config(), cond, neg)
    assert np.array_equal(res.asset.st_grid.values, st_ref)
    coords = res.asset.slat.coords
    f = slat_field(cfg, coords, 8, small_asset.slat.channels)
    init = slat_initial_state(inv, coords, cfg.seed)
    feats, _ = sample(f, cfg.schedule_obj(), init, cfg.guidance_config(), cond, neg, stage="SLAT")
    assert np.array_equal(res.asset.slat.feats, feats * inv.stats.std + inv.stats.mean)


def test_mask_dims_checked(small_asset, small_config):
    with pytest.raises(DimensionError):
        run_two_stage_edit(small_asset, BinaryMask3D.empty((4, 4, 4)), config=small_config)


def test_inversion_spill_gives_identical_edit(tmp_path, small_asset, small_config, edited):
    sc, cfg, res = edited
    inv = invert_asset(small_asset, cfg)
    inv.save(tmp_path)
    again = run_two_stage_edit(small_asset, sc.mask, config=cfg, inversion=AssetInversion.load(tmp_path))
    assert assets_equal(again.asset, res.asset)


def test_reconstruct(small_asset, small_config):
    rec, errs = reconstruct_asset(small_asset, small_config.updated(steps=16))
    assert errs["st_rel_l2"] < 0.05 and errs["occupancy_flips"] == 0
    _, errs_st = reconstruct_asset(small_asset, small_config.updated(steps=16), "st")
    assert errs_st["slat_rel_l2"] > errs["slat_rel_l2"]
    with pytest.raises(ParameterError):
        reconstruct_asset(small_asset, small_config, "slat")


def test_empty_structure_skips_slat(small_asset, small_config, monkeypatch):
    import voxflow.pipeline as pl

    monkeypatch.setattr(pl, "edit_denoise", lambda ctx, *a, **k: np.zeros_like(ctx.trajectory.terminal) - 1.0)
    res = run_two_stage_edit(small_asset, BinaryMask3D(np.ones((8, 8, 8), bool)), config=small_config)
    assert len(res.asset.slat) == 0
    assert any("no active voxels" in w for w in res.report["warnings"])


SNIPPET = """
from voxflow.pipeline import RunConfig, run_two_stage_edit
from voxflow.synth import ShapeSpec, gen_asset, gen_edit_scenario
from voxflow.formats import sha256_array
cfg = RunConfig(steps=3, layers=2, model_dim=16, heads=2, token_grid_side=4, cond_width=8, cond='x')
a = gen_asset(ShapeSpec(radius=0.35), 8, 8, 5)
r = run_two_stage_edit(a, gen_edit_scenario(a, 'octant:-++').mask, config=cfg)
print(sha256_array(r.asset.st_grid.values), sha256_array(r.asset.slat.feats), sha256_array(r.asset.slat.coords))
"""


def test_determinism_across_processes():
    outs = {subprocess.run([sys.executable, "-c", SNIPPET], capture_output=True, text=True, check=True).stdout for _ in range(2)}
    assert len(outs) == 1
