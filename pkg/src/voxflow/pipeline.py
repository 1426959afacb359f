"""Two-stage orchestration: structure grid first, then the structured latents.

The ST stage edits the dense occupancy grid; the edited occupancy decides
which voxels carry structured latents in the SLAT stage, whose preserved
coordinates are pinned to the source features.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .editor import EditOptions, edit_denoise, edit_region, slat_context, st_context
from .errors import DimensionError, ParameterError
from .fields.base import ConditionInput, GuidanceConfig
from .fields.toy import ToyConfig, ToyTransformer
from .formats import read_vxg, read_vxs, sha256_array, write_vxg, write_vxs
from .kvstore import KVCacheStore
from .lattice import (
    BinaryMask3D,
    CoordinateSet,
    DenseLatentGrid,
    SparseLatentSet,
    canonical_order,
    index_of,
    keep_complement,
    surface_voxels,
)
from .solver import Schedule, TrajectoryCache, invert, make_schedule, sample

log = logging.getLogger(__name__)

ST_CHANNELS = 4


# -- configuration ------------------------------------------------------------


@dataclass
class RunConfig:
    steps: int = 25
    schedule: str = "uniform"
    shift: float = 2.0
    guidance: bool = True
    omega: float = 5.0
    cfg_lo: float = 0.5
    cfg_hi: float = 1.0
    latent_replacement: bool = True
    use_soft_mask: bool = True
    dilation_radius: int = 2
    sigma: float = 1.5
    use_kv_replacement: bool = True
    use_attention_mask: bool = False
    seed: int = 0
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    token_grid_side: int = 8
    cond_width: int = 16
    occupancy_threshold: float = 0.5
    cond: str = "edit"
    source_cond: str = ""
    neg: str = "negative"
    # synthetic asset and scenario
    shape: str = "sphere"
    shape_center: str = "0.5,0.5,0.5"
    shape_radius: float = 0.4
    shape_lo: str = "0.2,0.2,0.2"
    shape_hi: str = "0.8,0.8,0.8"
    shape_notch: float = 0.5
    resolution: int = 16
    slat_channels: int = 8
    region: str = ""
    # reconstruction, order study and metrics
    recon_stages: str = "st+slat"
    probe_field: str = "linear"
    probe_lambda: float = 1.0
    probe_steps: str = "8,16,32,64"
    metrics_axis: str = "z"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.use_soft_mask and (self.dilation_radius < 0 or not self.sigma > 0):
            raise ParameterError("soft mask needs dilation_radius >= 0 and sigma > 0")
        self.guidance_config()
        ToyConfig(self.layers, self.model_dim, self.heads, self.token_grid_side)

    def schedule_obj(self) -> Schedule:
        return make_schedule(self.steps, self.schedule, self.shift)

    def guidance_config(self) -> GuidanceConfig | None:
        if not self.guidance:
            return None
        return GuidanceConfig(self.omega, (self.cfg_lo, self.cfg_hi))

    def edit_options(self) -> EditOptions:
        return EditOptions(
            latent_replacement=self.latent_replacement,
            use_soft_mask=self.use_soft_mask,
            dilation_radius=self.dilation_radius,
            sigma=self.sigma,
            use_kv_replacement=self.use_kv_replacement,
            use_attention_mask=self.use_attention_mask,
            guidance=self.guidance_config(),
        )

    def conditions(self) -> tuple[ConditionInput, ConditionInput, ConditionInput]:
        """``(source, edit, negative)`` condition inputs."""
        edit = ConditionInput.named(self.cond, self.cond_width, self.seed)
        src = ConditionInput.named(self.source_cond, self.cond_width, self.seed) if self.source_cond else edit
        neg = ConditionInput.named(self.neg, self.cond_width, self.seed, mode="negative")
        return src, edit, neg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ParameterError(f"unknown config key {key!r}")
            kwargs[key] = coerce(cls.__dataclass_fields__[key].type, raw, key)
        return cls(**kwargs)

    def updated(self, **values) -> "RunConfig":
        merged = self.to_dict()
        merged.update(values)
        return RunConfig.from_dict(merged)


def coerce(type_name, raw, key: str):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if type_name == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
    except ValueError:
        raise ParameterError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from None
    return text


# -- assets ---------------------------------------------------------------------


@dataclass(eq=False)
class Asset:
    st_grid: DenseLatentGrid
    slat: SparseLatentSet

    def occupancy(self, threshold: float = 0.5) -> np.ndarray:
        return self.st_grid.values[..., 0] > threshold

    def validate(self, threshold: float = 0.5) -> None:
        dims = self.st_grid.dims
        if len(set(dims)) != 1:
            raise DimensionError(f"ST grid must be cubic, got {dims}")
        if self.slat.resolution != dims[0]:
            raise DimensionError(
                f"SLAT resolution {self.slat.resolution} must equal ST resolution {dims[0]} (identity block mapping)"
            )
        if len(self.slat):
            occ = self.occupancy(threshold)
            x, y, z = self.slat.coords.T
            if not np.all(occ[x, y, z]):
                raise DimensionError("every SLAT coordinate must lie in an occupied ST voxel")

    def save(self, directory, meta: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_vxg(directory / "st.vxg", self.st_grid)
        write_vxs(directory / "slat.vxs", self.slat)
        info = {
            "st_dims": list(self.st_grid.dims),
            "st_channels": self.st_grid.channels,
            "slat_resolution": self.slat.resolution,
            "slat_channels": self.slat.channels,
            "slat_count": len(self.slat),
        }
        info.update(meta or {})
        (directory / "meta.json").write_text(json.dumps(info, sort_keys=True, indent=2) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "Asset":
        directory = Path(directory)
        return cls(read_vxg(directory / "st.vxg"), read_vxs(directory / "slat.vxs"))


def assets_equal(a: Asset, b: Asset) -> bool:
    """Bitwise equality of both stages."""
    return (
        a.st_grid.values.shape == b.st_grid.values.shape
        and np.array_equal(a.st_grid.values, b.st_grid.values)
        and a.slat.resolution == b.slat.resolution
        and np.array_equal(a.slat.coords, b.slat.coords)
        and a.slat.feats.shape == b.slat.feats.shape
        and np.array_equal(a.slat.feats, b.slat.feats)
    )


# -- feature normalisation ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def normalize_features(slat: SparseLatentSet) -> tuple[SparseLatentSet, NormStats]:
    """Per-channel standardisation with population std; constant channels keep std = 1."""
    if len(slat) == 0:
        raise ParameterError("cannot normalise an empty latent set")
    mean = slat.feats.mean(axis=0)
    std = slat.feats.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return slat.with_feats((slat.feats - mean) / std), NormStats(mean, std)


def denormalize_features(slat: SparseLatentSet, stats: NormStats) -> SparseLatentSet:
    return slat.with_feats(slat.feats * stats.std + stats.mean)


# -- fields -------------------------------------------------------------------------


def st_field(config: RunConfig, side: int, channels: int = ST_CHANNELS) -> ToyTransformer:
    tgs = min(config.token_grid_side, side)
    while side % tgs:
        tgs -= 1
    toy = ToyConfig(
        config.layers, config.model_dim, config.heads, tgs, channels, side, config.cond_width
    )
    return ToyTransformer(toy, config.seed)


def slat_field(config: RunConfig, coords, resolution: int, channels: int) -> ToyTransformer:
    toy = ToyConfig(
        config.layers, config.model_dim, config.heads, config.token_grid_side, channels, resolution, config.cond_width
    )
    return ToyTransformer(toy, config.seed + 1, np.asarray(coords, dtype=np.int64))


# -- inversion ---------------------------------------------------------------------


@dataclass
class StageInversion:
    noise: np.ndarray
    trajectory: TrajectoryCache
    store: KVCacheStore | None
    evaluations: int


@dataclass
class AssetInversion:
    st: StageInversion
    slat: StageInversion
    stats: NormStats
    coords: np.ndarray
    resolution: int

    def save(self, directory) -> Path:
        directory = Path(directory)
        for name, inv in (("st", self.st), ("slat", self.slat)):
            inv.trajectory.save(directory / f"{name}_trajectory")
            if inv.store is not None:
                inv.store.save(directory / f"{name}_kv")
        np.save(directory / "norm_stats.npy", np.stack([self.stats.mean, self.stats.std]))
        counts = {"st_evaluations": self.st.evaluations, "slat_evaluations": self.slat.evaluations}
        (directory / "inversion.json").write_text(json.dumps(counts, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "AssetInversion":
        directory = Path(directory)
        stages = {}
        counts_path = directory / "inversion.json"
        counts = json.loads(counts_path.read_text()) if counts_path.exists() else {}
        for name in ("st", "slat"):
            traj = TrajectoryCache.load(directory / f"{name}_trajectory")
            kv_dir = directory / f"{name}_kv"
            store = KVCacheStore.load(kv_dir) if kv_dir.exists() else None
            stages[name] = StageInversion(traj.terminal, traj, store, int(counts.get(f"{name}_evaluations", 0)))
        stats = np.load(directory / "norm_stats.npy")
        slat_traj = stages["slat"].trajectory
        return cls(stages["st"], stages["slat"], NormStats(stats[0], stats[1]), slat_traj.coords, slat_traj.resolution)


def invert_asset(
    asset: Asset,
    config: RunConfig,
    source: ConditionInput | None = None,
    neg: ConditionInput | None = None,
    capture: bool = True,
) -> AssetInversion:
    asset.validate(config.occupancy_threshold)
    src_default, _, neg_default = config.conditions()
    source = source or src_default
    neg = neg or neg_default
    sched = config.schedule_obj()
    guidance = config.guidance_config()

    f_st = st_field(config, asset.st_grid.dims[0], asset.st_grid.channels)
    st_store = KVCacheStore("ST") if capture else None
    st_inv = invert(f_st, sched, asset.st_grid.values, guidance, source, neg, st_store, stage="ST")

    normed, stats = normalize_features(asset.slat)
    f_slat = slat_field(config, normed.coords, normed.resolution, normed.channels)
    slat_store = KVCacheStore("SLAT") if capture else None
    slat_inv = invert(f_slat, sched, normed.feats, guidance, source, neg, slat_store, stage="SLAT")
    slat_inv.trajectory.coords = normed.coords
    slat_inv.trajectory.resolution = normed.resolution

    return AssetInversion(
        StageInversion(st_inv.noise, st_inv.trajectory, st_store, st_inv.report.evaluations),
        StageInversion(slat_inv.noise, slat_inv.trajectory, slat_store, slat_inv.report.evaluations),
        stats,
        normed.coords,
        normed.resolution,
    )


# -- editing -------------------------------------------------------------------------


def edited_layout(keep: CoordinateSet, new_occ: np.ndarray, region: BinaryMask3D) -> np.ndarray:
    """Coordinates denoised in the SLAT edit pass: the kept ones plus edited-surface voxels inside the region."""
    spawn = surface_voxels(new_occ)
    if len(spawn):
        x, y, z = spawn.T
        spawn = spawn[region.bits[x, y, z]]
    merged = np.concatenate([keep.coords, spawn]) if len(spawn) else keep.coords
    return CoordinateSet.from_unsorted(merged).coords


def slat_initial_state(inv: AssetInversion, coords: np.ndarray, seed: int) -> np.ndarray:
    """Inverted noise on coordinates the source had; seeded draws elsewhere.

    Fresh coordinates are drawn per channel from a normal distribution with
    the mean and std of the SLAT-stage inverted noise.
    """
    idx = index_of(coords, inv.coords)
    noise = inv.slat.noise
    out = np.empty((len(coords), noise.shape[1]))
    have = idx >= 0
    out[have] = noise[idx[have]]
    n_new = int((~have).sum())
    if n_new:
        rng = np.random.default_rng([int(seed), 0x51A7])
        mu = noise.mean(axis=0) if len(noise) else np.zeros(noise.shape[1])
        sd = noise.std(axis=0) if len(noise) else np.ones(noise.shape[1])
        out[~have] = mu + sd * rng.standard_normal((n_new, noise.shape[1]))
    return out


@dataclass
class EditResult:
    asset: Asset
    report: dict
    keep: CoordinateSet
    region: BinaryMask3D
    st_latent: np.ndarray = field(repr=False, default=None)


def run_two_stage_edit(
    asset: Asset,
    edit_mask: BinaryMask3D,
    cond: ConditionInput | None = None,
    neg: ConditionInput | None = None,
    config: RunConfig | None = None,
    inversion: AssetInversion | None = None,
    source: ConditionInput | None = None,
) -> EditResult:
    config = config or RunConfig()
    asset.validate(config.occupancy_threshold)
    if edit_mask.dims != asset.st_grid.dims:
        raise DimensionError(f"mask dims {edit_mask.dims} != ST dims {asset.st_grid.dims}")
    src_default, cond_default, neg_default = config.conditions()
    cond = cond or cond_default
    neg = neg or neg_default
    source = source or src_default
    options = config.edit_options()
    sched = config.schedule_obj()
    warn_list: list[str] = []

    if inversion is None:
        inversion = invert_asset(asset, config, source, neg, capture=options.use_kv_replacement)

    # ST stage
    side = asset.st_grid.dims[0]
    f_st = st_field(config, side, asset.st_grid.channels)
    st_store = inversion.st.store if options.use_kv_replacement else None
    ctx = st_context(inversion.st.trajectory, edit_mask, options, f_st.config.token_grid_side, st_store)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        st_out = edit_denoise(ctx, f_st, sched, options, cond, neg)
    warn_list += [str(w.message) for w in caught]
    st_hits = st_store.hits if st_store is not None else 0

    # structure hand-off
    region = edit_region(edit_mask, options)
    thr = config.occupancy_threshold
    new_occ = st_out[..., 0] > thr
    keep = keep_complement(asset.slat.coordinate_set(), region)
    coords = edited_layout(keep, new_occ, region)
    if len(keep) == 0:
        warn_list.append("keep set is empty: SLAT stage runs as free generation")

    # SLAT stage
    slat_hits = 0
    if len(coords) == 0:
        warn_list.append("edited structure has no active voxels; SLAT stage skipped")
        feats = np.zeros((0, asset.slat.channels))
    else:
        f_slat = slat_field(config, coords, side, asset.slat.channels)
        init = slat_initial_state(inversion, coords, config.seed)
        slat_store = inversion.slat.store if options.use_kv_replacement else None
        sctx = slat_context(inversion.slat.trajectory, keep, coords, init, slat_store)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            feats_n = edit_denoise(sctx, f_slat, sched, options, cond, neg)
        warn_list += [str(w.message) for w in caught]
        slat_hits = slat_store.hits if slat_store is not None else 0
        feats = feats_n * inversion.stats.std + inversion.stats.mean
        if options.latent_replacement and len(keep):
            # the last overwrite, redone in raw feature space so that the
            # de-normalisation round trip cannot perturb preserved values
            dst = index_of(keep.coords, coords)
            src = index_of(keep.coords, asset.slat.coords)
            feats[dst] = asset.slat.feats[src]

    edited = Asset(DenseLatentGrid(st_out), SparseLatentSet(coords, feats, side))
    report = _edit_report(asset, edited, edit_mask, region, keep, inversion, sched, st_hits, slat_hits, warn_list)
    return EditResult(edited, report, keep, region, st_out)


def _edit_report(asset, edited, mask, region, keep, inv, sched, st_hits, slat_hits, warn_list) -> dict:
    outside = ~region.bits
    src_keep = asset.slat.feats[index_of(keep.coords, asset.slat.coords)]
    out_keep = edited.slat.feats[index_of(keep.coords, edited.slat.coords)] if len(keep) else src_keep
    st_in = sha256_array(asset.st_grid.values[outside])
    st_out = sha256_array(edited.st_grid.values[outside])
    slat_in = sha256_array(src_keep)
    slat_out = sha256_array(out_keep)
    return {
        "steps": sched.steps,
        "schedule_kind": sched.kind,
        "mask_voxels": mask.count(),
        "region_voxels": region.count(),
        "keep_count": len(keep),
        "slat_count_in": len(asset.slat),
        "slat_count_out": len(edited.slat),
        "st_inversion_evaluations": inv.st.evaluations,
        "slat_inversion_evaluations": inv.slat.evaluations,
        "st_kv_entries": len(inv.st.store) if inv.st.store is not None else 0,
        "slat_kv_entries": len(inv.slat.store) if inv.slat.store is not None else 0,
        "st_kv_hits": st_hits,
        "slat_kv_hits": slat_hits,
        "st_preserved_sha256_in": st_in,
        "st_preserved_sha256_out": st_out,
        "st_preserved_match": st_in == st_out,
        "slat_keep_sha256_in": slat_in,
        "slat_keep_sha256_out": slat_out,
        "slat_keep_match": slat_in == slat_out,
        "warnings": warn_list,
    }


# -- reconstruction -----------------------------------------------------------------


def relative_l2(estimate, reference) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.linalg.norm(reference)
    diff = np.linalg.norm(np.asarray(estimate, dtype=np.float64) - reference)
    return float(diff / denom) if denom > 0 else float(diff)


def reconstruct_asset(
    asset: Asset,
    config: RunConfig | None = None,
    stages: str = "st+slat",
    source: ConditionInput | None = None,
    neg: ConditionInput | None = None,
) -> tuple[Asset, dict]:
    """Invert and regenerate without any replacement.

    ``stages="st"`` inverts only the structure; the SLAT stage then starts
    from fresh seeded noise, as a generator would without SLAT inversion.
    """
    if stages not in ("st", "st+slat"):
        raise ParameterError(f"stages must be 'st' or 'st+slat', got {stages!r}")
    config = config or RunConfig()
    src_default, _, neg_default = config.conditions()
    source = source or src_default
    neg = neg or neg_default
    sched = config.schedule_obj()
    guidance = config.guidance_config()
    inv = invert_asset(asset, config, source, neg, capture=False)

    side = asset.st_grid.dims[0]
    f_st = st_field(config, side, asset.st_grid.channels)
    st_rec, _ = sample(f_st, sched, inv.st.noise, guidance, source, neg)

    f_slat = slat_field(config, asset.slat.coords, side, asset.slat.channels)
    if stages == "st+slat":
        start = inv.slat.noise
    else:
        rng = np.random.default_rng([int(config.seed), 0xF4E5])
        start = rng.standard_normal(inv.slat.noise.shape)
    feats_n, _ = sample(f_slat, sched, start, guidance, source, neg, stage="SLAT")
    feats = feats_n * inv.stats.std + inv.stats.mean

    thr = config.occupancy_threshold
    rec = Asset(DenseLatentGrid(st_rec), SparseLatentSet(asset.slat.coords, feats, side))
    errors = {
        "stages": stages,
        "st_rel_l2": relative_l2(st_rec, asset.st_grid.values),
        "slat_rel_l2": relative_l2(feats, asset.slat.feats),
        "occupancy_flips": int(np.sum((st_rec[..., 0] > thr) != asset.occupancy(thr))),
    }
    return rec, errors


def canonical(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return coords[canonical_order(coords)]
