"""Voxel lattice types, edit masks and mask morphology.

Array conventions used throughout the package:

* dense grids are numpy arrays of shape ``(H, W, D, C)`` indexed ``[x, y, z, c]``;
* sparse sets hold ``coords`` of shape ``(L, 3)`` and ``feats`` of shape ``(L, C)``;
* coordinates are always kept in canonical lexicographic ``(x, y, z)`` order.

All containers copy their inputs and freeze them, so values are immutable
after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError

DEFAULT_DILATION_RADIUS = 2
DEFAULT_FALLOFF_SIGMA = 1.5


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Permutation that sorts ``coords`` lexicographically by x, then y, then z."""
    coords = np.asarray(coords)
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def linear_keys(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Integer keys whose numeric order equals the lexicographic coordinate order."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    n = int(resolution)
    return (c[:, 0] * n + c[:, 1]) * n + c[:, 2]


def _check_coords(coords: np.ndarray, dims) -> np.ndarray:
    coords = np.asarray(coords)
    if coords.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"coordinates must have shape (L, 3), got {coords.shape}")
    if not np.issubdtype(coords.dtype, np.integer):
        if not np.all(np.equal(np.mod(coords, 1), 0)):
            raise DimensionError("coordinates must be integers")
    coords = coords.astype(np.int64)
    hi = np.asarray(dims, dtype=np.int64)
    if np.any(coords < 0) or np.any(coords >= hi):
        bad = coords[np.any((coords < 0) | (coords >= hi), axis=1)][0]
        raise DimensionError(f"coordinate {tuple(int(v) for v in bad)} outside grid {tuple(dims)}")
    return coords


def _check_canonical(coords: np.ndarray, resolution: int) -> None:
    if len(coords) < 2:
        return
    keys = linear_keys(coords, resolution)
    d = np.diff(keys)
    if np.any(d == 0):
        raise DimensionError("coordinates must be pairwise distinct")
    if np.any(d < 0):
        raise DimensionError("coordinates must be in canonical lexicographic order")


@dataclass(frozen=True, eq=False)
class DenseLatentGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3:
            v = v[..., None]
        if v.ndim != 4 or min(v.shape) < 1:
            raise DimensionError(f"dense grid needs shape (H, W, D, C), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DimensionError("dense grid values must be finite")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.values.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    @classmethod
    def zeros(cls, dims, channels: int) -> "DenseLatentGrid":
        return cls(np.zeros((*dims, channels)))


@dataclass(frozen=True, eq=False)
class SparseLatentSet:
    coords: np.ndarray
    feats: np.ndarray
    resolution: int

    def __post_init__(self):
        n = int(self.resolution)
        if n < 1:
            raise DimensionError("resolution must be positive")
        coords = _check_coords(self.coords, (n, n, n))
        feats = np.asarray(self.feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(coords):
            raise DimensionError(
                f"need one feature row per coordinate, got feats {feats.shape} for {len(coords)} coords"
            )
        if not np.all(np.isfinite(feats)):
            raise DimensionError("sparse features must be finite")
        _check_canonical(coords, n)
        object.__setattr__(self, "resolution", n)
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "feats", _frozen(feats))

    @classmethod
    def from_unsorted(cls, coords, feats, resolution: int) -> "SparseLatentSet":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(feats, dtype=np.float64)
        order = canonical_order(coords)
        return cls(coords[order], feats[order], resolution)

    @property
    def channels(self) -> int:
        return int(self.feats.shape[1])

    def __len__(self) -> int:
        return len(self.coords)

    def with_feats(self, feats) -> "SparseLatentSet":
        return SparseLatentSet(self.coords, feats, self.resolution)

    def coordinate_set(self) -> "CoordinateSet":
        return CoordinateSet(self.coords)


@dataclass(frozen=True, eq=False)
class BinaryMask3D:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 3:
            raise DimensionError(f"mask needs shape (H, W, D), got {b.shape}")
        if b.dtype != bool:
            if not np.all((b == 0) | (b == 1)):
                raise DimensionError("binary mask values must be 0 or 1")
            b = b.astype(bool)
        object.__setattr__(self, "bits", _frozen(b))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.bits.shape)

    @classmethod
    def empty(cls, dims) -> "BinaryMask3D":
        return cls(np.zeros(dims, dtype=bool))

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True, eq=False)
class SoftMask3D:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3:
            raise DimensionError(f"mask needs shape (H, W, D), got {w.shape}")
        if not np.all((w >= 0.0) & (w <= 1.0)):
            raise DimensionError("soft mask weights must lie in [0, 1]")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.weights.shape)


@dataclass(frozen=True, eq=False)
class CoordinateSet:
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords)
        if c.size == 0:
            c = np.zeros((0, 3), dtype=np.int64)
        if c.ndim != 2 or c.shape[1] != 3:
            raise DimensionError(f"coordinates must have shape (L, 3), got {c.shape}")
        c = c.astype(np.int64)
        if len(c) and c.min() < 0:
            raise DimensionError("coordinates must be non-negative")
        span = int(c.max()) + 1 if len(c) else 1
        _check_canonical(c, span)
        object.__setattr__(self, "coords", _frozen(c))

    @classmethod
    def from_unsorted(cls, coords) -> "CoordinateSet":
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if len(c) == 0:
            return cls(c)
        c = np.unique(c, axis=0)  # unique sorts rows lexicographically
        return cls(c)

    def __len__(self) -> int:
        return len(self.coords)

    def as_tuples(self) -> list[tuple[int, int, int]]:
        return [tuple(int(v) for v in row) for row in self.coords]


def coords_in(coords: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Boolean membership of each row of ``coords`` in ``other``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    other = np.asarray(other, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0 or len(other) == 0:
        return np.zeros(len(coords), dtype=bool)
    span = int(max(coords.max(), other.max())) + 1
    return np.isin(linear_keys(coords, span), linear_keys(other, span))


def index_of(coords: np.ndarray, layout: np.ndarray) -> np.ndarray:
    """Row index of each coordinate inside a canonical ``layout``; -1 where absent."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    layout = np.asarray(layout, dtype=np.int64).reshape(-1, 3)
    out = np.full(len(coords), -1, dtype=np.int64)
    if len(coords) == 0 or len(layout) == 0:
        return out
    span = int(max(coords.max(), layout.max())) + 1
    lk = linear_keys(layout, span)
    ck = linear_keys(coords, span)
    pos = np.searchsorted(lk, ck)
    pos_c = np.minimum(pos, len(lk) - 1)
    hit = lk[pos_c] == ck
    out[hit] = pos_c[hit]
    return out


def sparse_from_dense(grid: DenseLatentGrid, channel: int = 0, threshold: float = 0.5) -> SparseLatentSet:
    """Voxels whose ``channel`` value exceeds ``threshold``, carrying the other channels."""
    h, w, d = grid.dims
    if not (h == w == d):
        raise DimensionError(f"sparse_from_dense needs a cubic grid, got {grid.dims}")
    if not np.isfinite(threshold):
        raise ParameterError("threshold must be finite")
    if not 0 <= channel < grid.channels:
        raise ParameterError(f"occupancy channel {channel} out of range")
    occ = grid.values[..., channel] > threshold
    coords = np.argwhere(occ)  # row-major scan is already lexicographic
    rest = [c for c in range(grid.channels) if c != channel]
    feats = grid.values[occ][:, rest]
    return SparseLatentSet(coords, feats, h)


def dense_from_sparse(
    slat: SparseLatentSet, channel: int = 0, occupancy_value: float = 1.0
) -> DenseLatentGrid:
    """Inverse of :func:`sparse_from_dense`: occupancy written to ``channel``, zero elsewhere."""
    n, c = slat.resolution, slat.channels
    out = np.zeros((n, n, n, c + 1))
    rest = [k for k in range(c + 1) if k != channel]
    if len(slat):
        x, y, z = slat.coords.T
        out[x, y, z, channel] = occupancy_value
        for j, k in enumerate(rest):
            out[x, y, z, k] = slat.feats[:, j]
    return DenseLatentGrid(out)


def scatter_features(slat: SparseLatentSet) -> np.ndarray:
    """Features placed on the dense ``(N, N, N, C)`` grid, zero at inactive voxels."""
    n = slat.resolution
    out = np.zeros((n, n, n, slat.channels))
    if len(slat):
        x, y, z = slat.coords.T
        out[x, y, z] = slat.feats
    return out


def dilate_mask(mask: BinaryMask3D, radius: int) -> BinaryMask3D:
    """Chebyshev (cube) dilation of the set voxels by ``radius``."""
    if int(radius) != radius or radius < 0:
        raise ParameterError(f"dilation radius must be a non-negative integer, got {radius}")
    if radius == 0 or not mask.bits.any():
        return BinaryMask3D(mask.bits)
    size = 2 * int(radius) + 1
    out = ndimage.maximum_filter(mask.bits, size=size, mode="constant", cval=False)
    return BinaryMask3D(out)


def nearest_set_distance(mask: BinaryMask3D) -> np.ndarray:
    """Euclidean voxel-center distance to the nearest set voxel (inf for an empty mask)."""
    if not mask.bits.any():
        return np.full(mask.dims, np.inf)
    # exact Euclidean transform: distances are sqrt of integer squared offsets
    return ndimage.distance_transform_edt(~mask.bits)


def gaussian_falloff(mask: BinaryMask3D, sigma: float) -> SoftMask3D:
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if not mask.bits.any():
        return SoftMask3D(np.zeros(mask.dims))
    d = nearest_set_distance(mask)
    w = np.exp(-(d * d) / (2.0 * sigma * sigma))
    w[mask.bits] = 1.0
    return SoftMask3D(w)


def soft_edit_mask(
    mask: BinaryMask3D,
    radius: int = DEFAULT_DILATION_RADIUS,
    sigma: float = DEFAULT_FALLOFF_SIGMA,
) -> SoftMask3D:
    """Gaussian falloff around ``mask``, truncated to zero outside its dilation.

    The truncation keeps every voxel beyond the dilated region at weight 0,
    which is what lets the blend reproduce preserved voxels exactly.
    """
    support = dilate_mask(mask, radius)
    w = np.array(gaussian_falloff(mask, sigma).weights)
    w[~support.bits] = 0.0
    return SoftMask3D(w)


def keep_complement(active: CoordinateSet, edit: BinaryMask3D) -> CoordinateSet:
    """Active coordinates that are not set in ``edit``."""
    coords = _check_coords(active.coords, edit.dims)
    if len(coords) == 0:
        return CoordinateSet(coords)
    x, y, z = coords.T
    return CoordinateSet(coords[~edit.bits[x, y, z]])


def surface_voxels(occupancy: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one empty 6-neighbour (grid exterior counts as empty)."""
    occ = np.asarray(occupancy, dtype=bool)
    padded = np.pad(occ, 1, constant_values=False)
    interior = occ.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(occ & ~interior)
