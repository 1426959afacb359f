"""Deterministic synthetic assets and edit regions.

Shapes are implicit functions on normalised coordinates: a voxel is occupied
when its center lies inside the shape. SLAT features sit on the surface
voxels of the occupancy and start with the voxel-center position, so any
preservation failure shows up as a coordinate mismatch.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .lattice import BinaryMask3D, DenseLatentGrid, SparseLatentSet, keep_complement, surface_voxels
from .pipeline import ST_CHANNELS, Asset

log = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "box", "union", "l-shape")


@dataclass(frozen=True)
class ShapeSpec:
    """An implicit shape in the unit cube.

    ``sphere`` uses ``center`` and ``radius``. ``box`` spans ``lo`` to ``hi``
    inclusive. ``union`` is the sphere together with the box. ``l-shape`` is
    the box minus its upper corner beyond ``notch`` on the x and z axes.
    """

    kind: str = "sphere"
    center: tuple = (0.5, 0.5, 0.5)
    radius: float = 0.4
    lo: tuple = (0.2, 0.2, 0.2)
    hi: tuple = (0.8, 0.8, 0.8)
    notch: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ParameterError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        values = [*self.center, self.radius, *self.lo, *self.hi, self.notch]
        if not all(math.isfinite(float(v)) for v in values):
            raise ParameterError("shape parameters must be finite")
        if len(self.center) != 3 or len(self.lo) != 3 or len(self.hi) != 3:
            raise ParameterError("center, lo and hi need three components")
        if self.radius < 0:
            raise ParameterError("radius must be non-negative")

    def inside(self, p: np.ndarray) -> np.ndarray:
        """Membership of points ``p`` with shape ``(..., 3)``."""
        sphere = np.sum((p - np.asarray(self.center)) ** 2, axis=-1) <= self.radius**2
        box = np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)
        if self.kind == "sphere":
            return sphere
        if self.kind == "box":
            return box
        if self.kind == "union":
            return sphere | box
        notch = (p[..., 0] > self.notch) & (p[..., 2] > self.notch)
        return box & ~notch


def voxel_centers(n: int) -> np.ndarray:
    """``(n, n, n, 3)`` array of voxel centers in the unit cube."""
    c = (np.arange(n) + 0.5) / n
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def feature_rule(coords: np.ndarray, resolution: int, channels: int, seed: int) -> np.ndarray:
    """Position texture: xyz of the voxel center, then seeded sinusoids of position."""
    p = (np.asarray(coords, dtype=np.float64) + 0.5) / resolution
    out = np.empty((len(p), channels))
    k = min(3, channels)
    out[:, :k] = p[:, :k]
    extra = channels - k
    if extra:
        rng = np.random.default_rng([int(seed), 0x7E47])
        freq = rng.uniform(1.0, 4.0, size=(3, extra)) * np.pi
        phase = rng.uniform(0.0, 2 * np.pi, size=extra)
        out[:, k:] = np.sin(p @ freq + phase)
    return out


def gen_asset(spec: ShapeSpec, n_st: int = 16, n_slat: int | None = None, c_slat: int = 8) -> Asset:
    n_slat = n_st if n_slat is None else n_slat
    if n_st < 4:
        raise ParameterError(f"resolution must be >= 4, got {n_st}")
    if n_slat != n_st:
        raise ParameterError(f"SLAT resolution {n_slat} must equal ST resolution {n_st}")
    if c_slat < 1:
        raise ParameterError("SLAT feature width must be positive")
    centers = voxel_centers(n_st)
    occ = spec.inside(centers)
    if not occ.any():
        raise ParameterError(f"{spec.kind} shape occupies no voxel at {n_st}^3")
    st = np.zeros((n_st, n_st, n_st, ST_CHANNELS))
    st[..., 0] = occ
    st[..., 1:4] = (centers * occ[..., None]).astype(np.float32)
    coords = surface_voxels(occ)
    # stored assets are float32; generate values that survive the trip to disk unchanged
    feats = feature_rule(coords, n_st, c_slat, spec.seed).astype(np.float32).astype(np.float64)
    slat = SparseLatentSet(coords, feats, n_st)
    asset = Asset(DenseLatentGrid(st), slat)
    asset.validate()
    return asset


# -- edit regions -------------------------------------------------------------


@dataclass(frozen=True)
class RegionSpec:
    """Parsed region text.

    ``octant:+-+`` picks the half of each axis by sign. ``ball:cx,cy,cz,r``
    is a ball in voxel units around a voxel-space point. ``slab:axis,lo,hi``
    selects voxel indices ``lo..hi`` inclusive along ``x``, ``y`` or ``z``.
    """

    kind: str
    params: tuple = field(default_factory=tuple)

    @classmethod
    def parse(cls, text: str) -> "RegionSpec":
        kind, _, body = text.strip().partition(":")
        kind = kind.strip().lower()
        try:
            if kind == "octant":
                signs = body.strip()
                if len(signs) != 3 or any(s not in "+-" for s in signs):
                    raise ValueError(signs)
                return cls(kind, tuple(signs))
            if kind == "ball":
                vals = tuple(float(v) for v in body.split(","))
                if len(vals) != 4 or vals[3] < 0 or not all(map(math.isfinite, vals)):
                    raise ValueError(body)
                return cls(kind, vals)
            if kind == "slab":
                axis, lo, hi = (v.strip() for v in body.split(","))
                if axis not in ("x", "y", "z"):
                    raise ValueError(axis)
                return cls(kind, (axis, int(lo), int(hi)))
        except ValueError:
            raise ParameterError(f"malformed region {text!r}") from None
        raise ParameterError(f"unknown region kind {kind!r} in {text!r}")

    def text(self) -> str:
        if self.kind == "octant":
            return "octant:" + "".join(self.params)
        if self.kind == "ball":
            return "ball:" + ",".join(repr(v) for v in self.params)
        return "slab:{},{},{}".format(*self.params)


def region_mask(region: RegionSpec | str, dims) -> np.ndarray:
    if isinstance(region, str):
        region = RegionSpec.parse(region)
    dims = tuple(int(d) for d in dims)
    idx = np.indices(dims)
    if region.kind == "octant":
        bits = np.ones(dims, dtype=bool)
        for axis, sign in enumerate(region.params):
            half = dims[axis] // 2
            bits &= idx[axis] >= half if sign == "+" else idx[axis] < half
        return bits
    if region.kind == "ball":
        cx, cy, cz, r = region.params
        centers = np.stack(idx, axis=-1) + 0.5
        bits = np.sum((centers - np.array([cx, cy, cz])) ** 2, axis=-1) <= r * r
        inside_grid = all(0 <= c < d for c, d in zip((cx, cy, cz), dims))
        if inside_grid:
            # the voxel containing the center always belongs to the ball
            bits[int(math.floor(cx)), int(math.floor(cy)), int(math.floor(cz))] = True
        return bits
    axis, lo, hi = region.params
    a = "xyz".index(axis)
    return (idx[a] >= lo) & (idx[a] <= hi)


@dataclass
class EditScenario:
    mask: BinaryMask3D
    region: str
    mask_active: int
    keep_count: int


def gen_edit_scenario(asset: Asset, region: RegionSpec | str, threshold: float = 0.5) -> EditScenario:
    spec = RegionSpec.parse(region) if isinstance(region, str) else region
    bits = region_mask(spec, asset.st_grid.dims)
    if not bits.any():
        warnings.warn(f"region {spec.text()} misses the grid; using an empty mask", stacklevel=2)
    mask = BinaryMask3D(bits)
    active = asset.occupancy(threshold)
    keep = keep_complement(asset.slat.coordinate_set(), mask)
    return EditScenario(mask, spec.text(), int(np.sum(bits & active)), len(keep))
