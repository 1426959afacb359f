"""Mask-guided editing denoise loop.

Starting from inverted noise, each solver step is followed by latent
replacement against the inversion trajectory, and the next step's attention
reads cached K/V rows for preserved tokens.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ParameterError, ShapeError
from .fields.base import ConditionInput, GuidanceConfig, VelocityField, using_hook
from .fields.toy import AttentionHook
from .kvstore import KVCacheStore
from .lattice import (
    DEFAULT_DILATION_RADIUS,
    DEFAULT_FALLOFF_SIGMA,
    BinaryMask3D,
    CoordinateSet,
    SoftMask3D,
    SparseLatentSet,
    coords_in,
    dilate_mask,
    index_of,
    soft_edit_mask,
)
from .solver import Schedule, TrajectoryCache, sample

log = logging.getLogger(__name__)

EDITED, PRESERVED = 1, 0


@dataclass(frozen=True)
class EditOptions:
    latent_replacement: bool = True
    use_soft_mask: bool = True
    dilation_radius: int = DEFAULT_DILATION_RADIUS
    sigma: float = DEFAULT_FALLOFF_SIGMA
    use_kv_replacement: bool = True
    use_attention_mask: bool = False
    soft_kv: bool = False
    guidance: GuidanceConfig | None = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        if self.use_soft_mask and (self.dilation_radius < 0 or not self.sigma > 0):
            raise ParameterError("soft mask needs radius >= 0 and sigma > 0")


def edit_region(mask: BinaryMask3D, options: EditOptions) -> BinaryMask3D:
    """Voxels treated as edited: the mask itself, or its dilation when soft masks are on."""
    if options.use_soft_mask:
        return dilate_mask(mask, options.dilation_radius)
    return mask


def latent_weights(mask: BinaryMask3D, options: EditOptions) -> np.ndarray:
    if options.use_soft_mask:
        return np.array(soft_edit_mask(mask, options.dilation_radius, options.sigma).weights)
    return mask.bits.astype(np.float64)


# -- latent replacement -------------------------------------------------------


def blend_st_latent(current, cached, mask) -> np.ndarray:
    """``M * current + (1 - M) * cached`` with the voxel mask broadcast over channels.

    Voxels with weight exactly 0 or 1 are copied, not computed.
    """
    current = np.asarray(current, dtype=np.float64)
    cached = np.asarray(cached, dtype=np.float64)
    if isinstance(mask, BinaryMask3D):
        w = mask.bits.astype(np.float64)
    elif isinstance(mask, SoftMask3D):
        w = mask.weights
    else:
        w = np.asarray(mask, dtype=np.float64)
    if current.shape != cached.shape:
        raise ShapeError(f"latent shapes differ: {current.shape} vs {cached.shape}")
    if w.shape != current.shape[:3]:
        raise ShapeError(f"mask dims {w.shape} do not match grid dims {current.shape[:3]}")
    w = w[..., None]
    mixed = w * current + (1.0 - w) * cached
    return np.where(w == 1.0, current, np.where(w == 0.0, cached, mixed))


def _keep_rows(cur_coords, cache_coords, keep_coords):
    keep_coords = np.asarray(keep_coords, dtype=np.int64).reshape(-1, 3)
    i_cur = index_of(keep_coords, cur_coords)
    i_cache = index_of(keep_coords, cache_coords)
    if np.any(i_cur < 0) or np.any(i_cache < 0):
        bad = keep_coords[(i_cur < 0) | (i_cache < 0)][0]
        raise AlignmentError(f"keep coordinate {tuple(int(v) for v in bad)} missing from a latent set")
    return i_cur, i_cache


def _copy_rows(current, cached, i_cur, i_cache, weights=None):
    out = np.array(current, dtype=np.float64)
    if weights is None:
        out[i_cur] = cached[i_cache]
        return out
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    mixed = w * cached[i_cache] + (1.0 - w) * out[i_cur]
    out[i_cur] = np.where(w == 1.0, cached[i_cache], np.where(w == 0.0, out[i_cur], mixed))
    return out


def copy_slat_preserved(
    current: SparseLatentSet,
    cached: SparseLatentSet,
    keep: CoordinateSet,
    boundary_weights=None,
) -> SparseLatentSet:
    """Overwrite features at ``keep`` with the cached ones.

    ``boundary_weights`` (one per keep coordinate, in [0, 1]) blend towards
    the cached value instead; 1 means a full copy.
    """
    if current.channels != cached.channels:
        raise ShapeError(f"feature widths differ: {current.channels} vs {cached.channels}")
    if boundary_weights is not None:
        boundary_weights = np.asarray(boundary_weights, dtype=np.float64).reshape(-1)
        if len(boundary_weights) != len(keep):
            raise ShapeError("need one boundary weight per keep coordinate")
        if np.any((boundary_weights < 0) | (boundary_weights > 1)):
            raise ParameterError("boundary weights must lie in [0, 1]")
    i_cur, i_cache = _keep_rows(current.coords, cached.coords, keep.coords)
    feats = _copy_rows(current.feats, cached.feats, i_cur, i_cache, boundary_weights)
    return current.with_feats(feats)


# -- attention masking ----------------------------------------------------------


def build_attention_mask(token_roles) -> np.ndarray:
    """Boolean ``(tokens, tokens)`` matrix: queries may only read keys of their own role."""
    roles = np.asarray(token_roles).reshape(-1)
    return roles[:, None] == roles[None, :]


def dense_token_mask(region: BinaryMask3D, token_grid_side: int) -> np.ndarray:
    """W for patch tokens: a token is edited if any voxel of its patch is in ``region``."""
    n = token_grid_side
    side = region.dims[0]
    if side % n or region.dims != (side, side, side):
        raise ShapeError(f"region {region.dims} does not tile into {n}^3 tokens")
    p = side // n
    per = region.bits.reshape(n, p, n, p, n, p).any(axis=(1, 3, 5))
    return per.reshape(-1).astype(np.float64)


def sparse_token_mask(layout: np.ndarray, keep: CoordinateSet) -> np.ndarray:
    """W for voxel tokens: preserved exactly where the token's coordinate is kept."""
    return (~coords_in(layout, keep.coords)).astype(np.float64)


# -- stage context and the loop -----------------------------------------------


@dataclass
class StageContext:
    """Everything one stage's edit pass needs.

    For ST, ``latent_mask`` holds per-voxel weights (1 = edited). For SLAT,
    ``keep`` lists the preserved coordinates, ``coords`` the layout being
    denoised (which may differ from the trajectory's) and ``init_state`` the
    starting noise on that layout.
    """

    stage: str
    trajectory: TrajectoryCache
    token_mask: np.ndarray
    kv_store: KVCacheStore | None = None
    latent_mask: np.ndarray | None = None
    keep: CoordinateSet | None = None
    coords: np.ndarray | None = None
    init_state: np.ndarray | None = None
    boundary_weights: np.ndarray | None = None
    edit_mask: BinaryMask3D | None = None

    def __post_init__(self):
        if self.kv_store is not None and self.kv_store.stage != self.stage:
            raise AlignmentError(f"{self.stage} context given a {self.kv_store.stage} KV store")
        if self.trajectory.stage != self.stage:
            raise AlignmentError(f"{self.stage} context given a {self.trajectory.stage} trajectory")
        if self.stage == "SLAT" and self.keep is None:
            raise ParameterError("SLAT context needs the keep set")


def st_context(
    trajectory: TrajectoryCache,
    mask: BinaryMask3D,
    options: EditOptions,
    token_grid_side: int,
    kv_store: KVCacheStore | None = None,
) -> StageContext:
    region = edit_region(mask, options)
    return StageContext(
        "ST",
        trajectory,
        token_mask=dense_token_mask(region, token_grid_side),
        kv_store=kv_store,
        latent_mask=latent_weights(mask, options),
        edit_mask=mask,
    )


def slat_context(
    trajectory: TrajectoryCache,
    keep: CoordinateSet,
    coords: np.ndarray,
    init_state: np.ndarray,
    kv_store: KVCacheStore | None = None,
    boundary_weights=None,
) -> StageContext:
    return StageContext(
        "SLAT",
        trajectory,
        token_mask=sparse_token_mask(coords, keep),
        kv_store=kv_store,
        keep=keep,
        coords=np.asarray(coords, dtype=np.int64),
        init_state=np.asarray(init_state, dtype=np.float64),
        boundary_weights=boundary_weights,
    )


def edit_denoise(
    ctx: StageContext,
    field: VelocityField,
    schedule: Schedule,
    options: EditOptions,
    cond: ConditionInput | None = None,
    neg: ConditionInput | None = None,
    *,
    record: list | None = None,
) -> np.ndarray:
    """Denoise from the inverted noise while pinning preserved regions to the trajectory.

    After each step, the state at the destination time is blended (ST) or
    overwritten (SLAT) with the trajectory entry at that time. The following
    step's attention then replaces preserved K/V rows with the rows captured
    during inversion at the same evaluation time. There is no inversion-time
    evaluation at ``s_T``, so the first evaluation is never injected; its state
    is the inverted noise itself.
    """
    times = schedule.times
    state = ctx.init_state if ctx.init_state is not None else ctx.trajectory.at(times[-1])
    W = np.asarray(ctx.token_mask, dtype=np.float64)
    if not options.soft_kv:
        W = (W > 0).astype(np.float64)
    if options.latent_replacement and _nothing_preserved(ctx):
        warnings.warn("nothing to preserve: latent replacement degenerates to free generation", stacklevel=2)

    hook = None
    if options.use_kv_replacement or options.use_attention_mask or record is not None:
        if options.use_kv_replacement and ctx.kv_store is None:
            raise ParameterError("KV replacement requested without a KV store")
        attn_mask = build_attention_mask(W > 0) if options.use_attention_mask else None
        hook = AttentionHook(
            "inject" if options.use_kv_replacement else "off",
            ctx.kv_store if options.use_kv_replacement else None,
            token_mask=W,
            attn_mask=attn_mask,
            skip_times=frozenset({times[-1]}),
            record=record,
        )

    callback = None
    if options.latent_replacement:
        callback = _replacement_callback(ctx, times)

    if hook is not None:
        with using_hook(field, hook):
            x0, _ = sample(field, schedule, state, options.guidance, cond, neg, callback, stage=ctx.stage)
    else:
        x0, _ = sample(field, schedule, state, options.guidance, cond, neg, callback, stage=ctx.stage)
    return x0


def _nothing_preserved(ctx: StageContext) -> bool:
    if ctx.stage == "SLAT":
        return len(ctx.keep) == 0
    return bool(np.all(ctx.latent_mask == 1.0))


def _replacement_callback(ctx: StageContext, times):
    traj = ctx.trajectory
    if ctx.stage == "ST":
        weights = ctx.latent_mask

        def apply(k, state):
            return blend_st_latent(state, traj.at(times[k]), weights)

        return apply

    cache_coords = traj.coords if traj.coords is not None else ctx.coords
    i_cur, i_cache = _keep_rows(ctx.coords, cache_coords, ctx.keep.coords)

    def apply(k, state):
        return _copy_rows(state, traj.at(times[k]), i_cur, i_cache, ctx.boundary_weights)

    return apply
