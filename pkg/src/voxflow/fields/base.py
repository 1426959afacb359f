from __future__ import annotations

import zlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from ..errors import NumericError, ParameterError, ShapeError

MODES = ("conditional", "negative", "unconditional")
_BRANCH = {"conditional": "cond", "negative": "neg", "unconditional": "uncond"}


@dataclass(frozen=True, eq=False)
class ConditionInput:
    """Conditioning for one branch of a field evaluation.

    ``embedding`` stands in for an image or text encoding; ``None`` means the
    field sees a zero vector.
    """

    mode: str = "conditional"
    embedding: np.ndarray | None = None
    name: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown condition mode {self.mode!r}")
        if self.embedding is not None:
            e = np.array(self.embedding, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(e)):
                raise ParameterError("condition embedding must be finite")
            e.flags.writeable = False
            object.__setattr__(self, "embedding", e)

    @property
    def branch(self) -> str:
        return _BRANCH[self.mode]

    @classmethod
    def named(cls, name: str, width: int, seed: int = 0, mode: str = "conditional") -> "ConditionInput":
        """Fixed pseudo-random embedding derived from ``(name, seed)``."""
        rng = np.random.default_rng([zlib.crc32(name.encode()), int(seed)])
        return cls(mode, rng.standard_normal(width), name)

    @classmethod
    def unconditional(cls) -> "ConditionInput":
        return cls("unconditional")


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 5.0
    interval: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.interval)
        if not (np.isfinite(self.omega) and self.omega >= 0):
            raise ParameterError(f"guidance scale must be a finite non-negative number, got {self.omega}")
        if not (0.0 <= lo <= hi <= 1.0):
            raise ParameterError(f"guidance interval must satisfy 0 <= lo <= hi <= 1, got {self.interval}")
        object.__setattr__(self, "interval", (lo, hi))

    def active(self, t: float) -> bool:
        # closed on both ends
        return self.interval[0] <= t <= self.interval[1]


class VelocityField:
    """Base class for ``f(x, t, cond)``.

    ``shape`` is the declared state shape (``None`` accepts any shape) and
    ``hook`` is the attention-hook slot; fields without attention ignore it.
    """

    shape: tuple | None = None
    cond_width: int | None = None
    has_exact_flow = False

    def __init__(self):
        self.hook = None

    def velocity(self, state: np.ndarray, t: float, cond: ConditionInput) -> np.ndarray:
        raise NotImplementedError

    def exact_flow(self, x: np.ndarray, t_from: float, t_to: float) -> np.ndarray:
        raise ParameterError(f"{type(self).__name__} has no closed-form flow map")


@contextmanager
def using_hook(field: VelocityField, hook):
    previous = field.hook
    field.hook = hook
    try:
        yield field
    finally:
        field.hook = previous


def eval_velocity(field: VelocityField, state, t: float, cond: ConditionInput | None = None) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if field.shape is not None and state.shape != tuple(field.shape):
        raise ShapeError(f"state shape {state.shape} does not match field shape {tuple(field.shape)}")
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"time {t} outside [0, 1]")
    cond = cond if cond is not None else ConditionInput()
    if cond.embedding is not None and field.cond_width is not None and len(cond.embedding) != field.cond_width:
        raise ShapeError(f"condition width {len(cond.embedding)} != field width {field.cond_width}")
    out = np.asarray(field.velocity(state, float(t), cond), dtype=np.float64)
    if out.shape != state.shape:
        raise ShapeError(f"field returned {out.shape} for state {state.shape}")
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite velocity at t={t}")
    return out


def cfg_combine(f_cond, f_neg, omega: float) -> np.ndarray:
    """``(1 + omega) * f_cond - omega * f_neg``."""
    f_cond = np.asarray(f_cond, dtype=np.float64)
    f_neg = np.asarray(f_neg, dtype=np.float64)
    if f_cond.shape != f_neg.shape:
        raise ShapeError(f"guidance branches differ in shape: {f_cond.shape} vs {f_neg.shape}")
    if omega == 0:
        return f_cond.copy()
    return (1.0 + omega) * f_cond - omega * f_neg


def guided_evaluations(guidance: GuidanceConfig | None, t: float) -> int:
    """Number of field evaluations :func:`guided_velocity` performs at time ``t``."""
    if guidance is None or guidance.omega == 0 or not guidance.active(t):
        return 1
    return 2


def guided_velocity(
    field: VelocityField,
    state,
    t: float,
    guidance: GuidanceConfig | None,
    cond: ConditionInput | None = None,
    neg: ConditionInput | None = None,
) -> np.ndarray:
    """Classifier-free guidance gated to ``guidance.interval``; the conditional branch elsewhere.

    With ``omega == 0`` the negative branch is not evaluated at all, since it
    would be multiplied by zero.
    """
    f_cond = eval_velocity(field, state, t, cond)
    if guided_evaluations(guidance, t) == 1:
        return f_cond
    f_neg = eval_velocity(field, state, t, neg if neg is not None else ConditionInput.unconditional())
    return cfg_combine(f_cond, f_neg, guidance.omega)
