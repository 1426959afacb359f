"""Discrete schedules and the second-order Taylor rectified-flow stepper.

Orientation: ``t = 1`` is noise and ``t = 0`` is data. Inversion walks the
schedule upward (positive steps), generation walks it downward.
"""

from __future__ import annotations

import json
import logging
import struct
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CacheMissError, DegenerateStepError, FormatError, NumericError, ParameterError
from .fields.base import ConditionInput, GuidanceConfig, VelocityField, guided_evaluations, guided_velocity, using_hook
from .fields.toy import AttentionHook
from .formats import read_vxg, read_vxs, write_vxg, write_vxs
from .kvstore import KVCacheStore, time_hex
from .lattice import DenseLatentGrid, SparseLatentSet

log = logging.getLogger(__name__)

METHODS = ("taylor", "euler")


@dataclass(frozen=True)
class Schedule:
    times: tuple[float, ...]
    kind: str = "uniform"
    exponent: float = 1.0

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) < 2:
            raise ParameterError("a schedule needs at least one step")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise ParameterError("schedule must start at exactly 0 and end at exactly 1")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ParameterError("schedule times must be strictly increasing")
        object.__setattr__(self, "times", times)

    @property
    def steps(self) -> int:
        return len(self.times) - 1


def make_schedule(steps: int, kind: str = "uniform", exponent: float = 2.0) -> Schedule:
    """``uniform``: ``s_k = k / T``; ``shifted``: ``s_k = (k / T) ** exponent``."""
    if int(steps) != steps or steps < 1:
        raise ParameterError(f"steps must be a positive integer, got {steps}")
    T = int(steps)
    base = [k / T for k in range(T + 1)]
    if kind == "uniform":
        return Schedule(tuple(base), "uniform", 1.0)
    if kind == "shifted":
        if not exponent > 0:
            raise ParameterError("shift exponent must be positive")
        return Schedule(tuple(s**exponent for s in base), "shifted", float(exponent))
    raise ParameterError(f"unknown schedule kind {kind!r}")


def midpoint_time(a: float, b: float) -> float:
    # symmetric in (a, b), so a forward and a backward step over the same
    # interval evaluate at the bitwise-same midpoint time
    return 0.5 * (a + b)


@dataclass
class StepReport:
    records: list = field(default_factory=list)

    def add(self, a, b, evaluations, max_abs_velocity):
        self.records.append(
            {"from": a, "to": b, "evaluations": evaluations, "max_abs_velocity": max_abs_velocity}
        )

    @property
    def evaluations(self) -> int:
        return sum(r["evaluations"] for r in self.records)


@dataclass
class TrajectoryCache:
    """States recorded at each schedule time, keyed by the exact time value."""

    stage: str
    times: list = field(default_factory=list)
    states: dict = field(default_factory=dict)
    coords: np.ndarray | None = None
    resolution: int | None = None

    def record(self, t: float, state: np.ndarray) -> None:
        arr = np.array(state, dtype=np.float64)
        arr.flags.writeable = False
        if t not in self.states:
            self.times.append(t)
        self.states[t] = arr

    def at(self, t: float) -> np.ndarray:
        try:
            return self.states[t]
        except KeyError:
            raise CacheMissError(
                f"cache miss: no {self.stage} trajectory entry at t={t!r} [0x{time_hex(t)}]"
            ) from None

    def __contains__(self, t) -> bool:
        return t in self.states

    def __len__(self) -> int:
        return len(self.states)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[max(self.times)]

    @property
    def source(self) -> np.ndarray:
        return self.states[min(self.times)]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, t in enumerate(sorted(self.times)):
            state = self.states[t]
            if self.coords is None:
                name = f"{self.stage}_{k:03d}.vxg"
                write_vxg(directory / name, DenseLatentGrid(state))
            else:
                name = f"{self.stage}_{k:03d}.vxs"
                write_vxs(directory / name, SparseLatentSet(self.coords, state, self.resolution))
            exact = name.rsplit(".", 1)[0] + ".f64"
            # the f32 container rounds; the raw sidecar keeps the state bit-exact
            (directory / exact).write_bytes(np.ascontiguousarray(state, dtype="<f8").tobytes())
            entries.append({"k": k, "time": t, "time_hex": time_hex(t), "file": name, "exact": exact})
        manifest = {"stage": self.stage, "sparse": self.coords is not None, "entries": entries}
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "TrajectoryCache":
        directory = Path(directory)
        try:
            manifest = json.loads((directory / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{directory}: cannot read trajectory manifest ({exc})") from exc
        traj = cls(manifest["stage"])
        for rec in manifest["entries"]:
            t = _from_hex(rec["time_hex"])
            if manifest["sparse"]:
                s = read_vxs(directory / rec["file"])
                traj.coords, traj.resolution = s.coords, s.resolution
                state = s.feats
            else:
                state = read_vxg(directory / rec["file"]).values
            exact = rec.get("exact")
            if exact is not None:
                raw = np.frombuffer((directory / exact).read_bytes(), dtype="<f8")
                if raw.size != state.size:
                    raise FormatError(f"{directory / exact}: expected {state.size} values, found {raw.size}")
                state = raw.reshape(state.shape)
            traj.record(t, state)
        return traj


def _from_hex(h: str) -> float:
    return struct.unpack(">d", bytes.fromhex(h))[0]


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite state {where}")


def taylor_step(
    field: VelocityField,
    x_a,
    a: float,
    b: float,
    guidance: GuidanceConfig | None = None,
    cond: ConditionInput | None = None,
    neg: ConditionInput | None = None,
    *,
    method: str = "taylor",
    report: StepReport | None = None,
) -> np.ndarray:
    """One step from time ``a`` to ``b``.

    The time derivative of the velocity is estimated from a forward difference
    against an explicit Euler half-step; ``method="euler"`` drops that term
    and performs a single evaluation.
    """
    if a == b:
        raise DegenerateStepError(f"step from {a} to itself")
    if method not in METHODS:
        raise ParameterError(f"unknown step method {method!r}")
    x_a = np.asarray(x_a, dtype=np.float64)
    _check_finite(x_a, f"at t={a}")
    h = b - a
    f_a = guided_velocity(field, x_a, a, guidance, cond, neg)
    n_eval = guided_evaluations(guidance, a)
    vmax = float(np.max(np.abs(f_a))) if f_a.size else 0.0
    if method == "euler":
        x_b = x_a + h * f_a
    else:
        half = 0.5 * h
        if half == 0.0:
            raise DegenerateStepError(f"step {a} -> {b} is too small to form a finite difference")
        t_mid = midpoint_time(a, b)
        x_mid = x_a + half * f_a
        f_mid = guided_velocity(field, x_mid, t_mid, guidance, cond, neg)
        n_eval += guided_evaluations(guidance, t_mid)
        dfdt = (f_mid - f_a) / half
        x_b = x_a + h * f_a + 0.5 * h * h * dfdt
        vmax = max(vmax, float(np.max(np.abs(f_mid))) if f_mid.size else 0.0)
    _check_finite(x_b, f"after step {a} -> {b}")
    if report is not None:
        report.add(a, b, n_eval, vmax)
    return x_b


def evaluation_times(a: float, b: float, method: str = "taylor") -> tuple[float, ...]:
    return (a,) if method == "euler" else (a, midpoint_time(a, b))


def integrate(
    field: VelocityField,
    times: Sequence[float],
    x,
    guidance: GuidanceConfig | None = None,
    cond: ConditionInput | None = None,
    neg: ConditionInput | None = None,
    *,
    method: str = "taylor",
    callback: Callable | None = None,
    report: StepReport | None = None,
    trajectory: TrajectoryCache | None = None,
) -> np.ndarray:
    """Step through ``times`` in the given order.

    ``callback(i, state)`` runs after arriving at ``times[i]`` and may return
    a replacement state. ``trajectory`` records the state at every time,
    after the callback.
    """
    times = [float(t) for t in times]
    state = np.array(x, dtype=np.float64)
    if trajectory is not None:
        trajectory.record(times[0], state)
    for i in range(1, len(times)):
        state = taylor_step(field, state, times[i - 1], times[i], guidance, cond, neg, method=method, report=report)
        if callback is not None:
            replaced = callback(i, state)
            if replaced is not None:
                state = np.asarray(replaced, dtype=np.float64)
        if trajectory is not None:
            trajectory.record(times[i], state)
    return state


@dataclass
class Inversion:
    noise: np.ndarray
    trajectory: TrajectoryCache
    store: KVCacheStore | None
    report: StepReport


def invert(
    field: VelocityField,
    schedule: Schedule,
    x0,
    guidance: GuidanceConfig | None = None,
    cond: ConditionInput | None = None,
    neg: ConditionInput | None = None,
    kv_capture: KVCacheStore | None = None,
    *,
    stage: str = "ST",
    method: str = "taylor",
) -> Inversion:
    """Map data at ``s_0`` to noise at ``s_T``, recording the state at every schedule time.

    With ``kv_capture`` set, every attention evaluation's K/V lands in that
    store, keyed by the evaluation's exact time.
    """
    traj = TrajectoryCache(kv_capture.stage if kv_capture is not None else stage)
    report = StepReport()
    hook = AttentionHook("capture", kv_capture) if kv_capture is not None else None
    ctx = using_hook(field, hook) if hook is not None else nullcontext()
    with ctx:
        noise = integrate(
            field, schedule.times, x0, guidance, cond, neg, method=method, report=report, trajectory=traj
        )
    log.debug("inverted %s over %d steps with %d evaluations", traj.stage, schedule.steps, report.evaluations)
    return Inversion(noise, traj, kv_capture, report)


def sample(
    field: VelocityField,
    schedule: Schedule,
    x1,
    guidance: GuidanceConfig | None = None,
    cond: ConditionInput | None = None,
    neg: ConditionInput | None = None,
    per_step_callback: Callable | None = None,
    *,
    stage: str = "ST",
    method: str = "taylor",
    report: StepReport | None = None,
) -> tuple[np.ndarray, TrajectoryCache]:
    """Generate from noise at ``s_T`` down to ``s_0``.

    ``per_step_callback(k, state)`` is called after each step with the index
    ``k`` of the schedule time just reached; a returned array replaces the state.
    """
    times = schedule.times[::-1]
    T = schedule.steps
    traj = TrajectoryCache(stage)
    callback = None
    if per_step_callback is not None:
        callback = lambda i, state: per_step_callback(T - i, state)  # noqa: E731
    x0 = integrate(
        field, times, x1, guidance, cond, neg, method=method, callback=callback, report=report, trajectory=traj
    )
    return x0, traj


@dataclass
class ProbeResult:
    step_counts: list
    errors: list
    slope: float | None
    exact: bool
    method: str


def fit_order(step_counts, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(1 / T)``."""
    x = np.log(1.0 / np.asarray(step_counts, dtype=np.float64))
    y = np.log(np.asarray(errors, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def convergence_probe(
    field: VelocityField,
    step_counts: Sequence[int],
    x1=None,
    *,
    method: str = "taylor",
    guidance: GuidanceConfig | None = None,
) -> ProbeResult:
    """Integrate ``1 -> 0`` at each step count and compare with the exact flow map."""
    if not field.has_exact_flow:
        raise ParameterError(f"{type(field).__name__} has no closed-form flow to compare against")
    step_counts = [int(T) for T in step_counts]
    if len(step_counts) < 2:
        raise ParameterError("need at least two step counts to fit an order")
    if x1 is None:
        x1 = np.random.default_rng(0).uniform(0.5, 1.5, size=64)
    x1 = np.asarray(x1, dtype=np.float64)
    exact = field.exact_flow(x1, 1.0, 0.0)
    errors = []
    for T in step_counts:
        x0 = integrate(field, make_schedule(T).times[::-1], x1, guidance, method=method)
        errors.append(float(np.max(np.abs(x0 - exact))))
    if all(e == 0.0 for e in errors):
        return ProbeResult(step_counts, errors, None, True, method)
    pairs = [(T, e) for T, e in zip(step_counts, errors) if e > 0.0]
    slope = fit_order(*zip(*pairs)) if len(pairs) >= 2 else float("nan")
    return ProbeResult(step_counts, errors, slope, False, method)
