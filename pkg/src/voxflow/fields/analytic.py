"""Velocity fields with closed-form flow maps, used as solver oracles."""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from ..errors import ParameterError
from .base import ConditionInput, VelocityField


def _finite(name, value):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite")
    return arr


class ConstantField(VelocityField):
    """``f = c``; the negative branch may use its own constant ``c_neg``."""

    has_exact_flow = True

    def __init__(self, c: float = 1.0, c_neg: float | None = None):
        super().__init__()
        self.c = float(_finite("c", c))
        self.c_neg = self.c if c_neg is None else float(_finite("c_neg", c_neg))

    def velocity(self, state, t, cond: ConditionInput):
        value = self.c_neg if cond.mode != "conditional" else self.c
        return np.full(state.shape, value)

    def exact_flow(self, x, t_from, t_to):
        return np.asarray(x) + self.c * (t_to - t_from)


class TimePolyField(VelocityField):
    """``f = t``."""

    has_exact_flow = True

    def velocity(self, state, t, cond):
        return np.full(state.shape, t)

    def exact_flow(self, x, t_from, t_to):
        return np.asarray(x) + 0.5 * (t_to * t_to - t_from * t_from)


class LinearField(VelocityField):
    """``f = lam * x``."""

    has_exact_flow = True

    def __init__(self, lam: float = 1.0):
        super().__init__()
        self.lam = float(_finite("lambda", lam))

    def velocity(self, state, t, cond):
        return self.lam * state

    def exact_flow(self, x, t_from, t_to):
        return np.asarray(x) * np.exp(self.lam * (t_to - t_from))


class AffineField(VelocityField):
    """``f = A x + b`` acting on the trailing (channel) axis."""

    has_exact_flow = True

    def __init__(self, A, b):
        super().__init__()
        A = _finite("A", A)
        b = _finite("b", b).reshape(-1)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != len(b):
            raise ParameterError(f"A must be square and match b, got A {A.shape}, b {b.shape}")
        if np.max(np.abs(np.linalg.eigvals(A))) > 50:
            raise ParameterError("spectral radius of A too large for a finite flow on [0, 1]")
        self.A = A
        self.b = b

    def velocity(self, state, t, cond):
        return state @ self.A.T + self.b

    def exact_flow(self, x, t_from, t_to):
        # augmented exponential handles singular A
        n = len(self.b)
        aug = np.zeros((n + 1, n + 1))
        aug[:n, :n] = self.A
        aug[:n, n] = self.b
        E = expm(aug * (t_to - t_from))
        return np.asarray(x) @ E[:n, :n].T + E[:n, n]


def make_analytic_field(kind: str, **params) -> VelocityField:
    kinds = {
        "constant": ConstantField,
        "time-poly": TimePolyField,
        "linear": LinearField,
        "affine": AffineField,
    }
    try:
        cls = kinds[kind]
    except KeyError:
        raise ParameterError(f"unknown analytic field {kind!r}; expected one of {sorted(kinds)}") from None
    if kind == "linear" and "lambda" in params:
        params["lam"] = params.pop("lambda")
    return cls(**params)
