"""Knot splines with clamped extrapolation (zero-order, linear, cubic)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

MODES = ("zero", "linear", "cubic")


@dataclass(frozen=True)
class Spline:
    knot_times: np.ndarray   # (P,) strictly increasing, seconds
    knot_values: np.ndarray  # (P, D)
    interpolation: str = "linear"

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.knot_times, dtype=np.float64))
        v = np.asarray(self.knot_values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or len(t) < 1 or v.shape[0] != len(t):
            raise ValueError("need P >= 1 knot times matching knot_values rows")
        if np.any(np.diff(t) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(t)):
            raise ValueError("knots must be finite")
        if self.interpolation not in MODES:
            raise ValueError(f"interpolation must be one of {MODES}")
        object.__setattr__(self, "knot_times", t)
        object.__setattr__(self, "knot_values", v)

    @classmethod
    def zeros(cls, n_knots: int, dof: int, horizon: float, interpolation: str = "linear") -> "Spline":
        times = np.linspace(0.0, horizon, n_knots) if n_knots > 1 else np.zeros(1)
        return cls(times, np.zeros((n_knots, dof)), interpolation)

    @property
    def dof(self) -> int:
        return self.knot_values.shape[1]

    def __call__(self, t):
        return evaluate(self.knot_times, self.knot_values, t, self.interpolation)

    def with_values(self, values: np.ndarray) -> "Spline":
        return Spline(self.knot_times, values, self.interpolation)


def evaluate(times: np.ndarray, values: np.ndarray, t, mode: str = "linear") -> np.ndarray:
    """Evaluate knots ``values[..., P, D]`` at query time(s) ``t``.

    Leading batch axes of ``values`` are carried through, so candidate plans
    sharing knot times can be evaluated together. Returns ``[..., D]`` for a
    scalar ``t`` or ``[..., len(t), D]`` for an array.
    """
    scalar = np.ndim(t) == 0
    tq = np.clip(np.atleast_1d(np.asarray(t, dtype=np.float64)), times[0], times[-1])
    P = len(times)
    if P == 1:
        out = np.repeat(values[..., :1, :], len(tq), axis=-2)
    elif mode == "cubic":
        out = CubicSpline(times, values, axis=-2)(tq)
    else:
        i = np.clip(np.searchsorted(times, tq, side="right") - 1, 0, P - 2)
        if mode == "zero":
            i = np.where(tq >= times[-1], P - 1, i)
            out = values[..., i, :]
        else:
            w = ((tq - times[i]) / (times[i + 1] - times[i]))[:, None]
            out = values[..., i, :] * (1.0 - w) + values[..., i + 1, :] * w
    return out[..., 0, :] if scalar else out


def eval_spline(sp: Spline, t):
    return sp(t)


def shift(sp: Spline, dt: float) -> Spline:
    """Move the time origin forward by ``dt``: ``shift(sp, dt)(t) == sp(t + dt)``.

    In zero/linear mode, knots wholly behind the new origin are dropped (one is
    kept so the segment crossing zero is intact) and the knot count is restored
    by replicating the last value past the end. Cubic knots are only translated.
    """
    if dt < 0:
        raise ValueError("shift requires dt >= 0")
    if dt == 0:
        return sp
    times = sp.knot_times - dt
    values = sp.knot_values
    if sp.interpolation == "cubic" or len(times) == 1:
        return Spline(times, values, sp.interpolation)
    P = len(times)
    spacing = (sp.knot_times[-1] - sp.knot_times[0]) / (P - 1)
    first = max(0, int(np.searchsorted(times, 0.0, side="right")) - 1)
    times, values = times[first:], values[first:]
    extra = P - len(times)
    if extra:
        tail = times[-1] + spacing * np.arange(1, extra + 1)
        times = np.concatenate([times, tail])
        values = np.concatenate([values, np.repeat(values[-1:], extra, axis=0)])
    return Spline(times, values, sp.interpolation)


def perturb(sp: Spline, sigma: float, rng: np.random.Generator) -> Spline:
    """Add i.i.d. N(0, sigma^2) noise to every knot value."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return sp
    return sp.with_values(sp.knot_values + rng.normal(0.0, sigma, sp.knot_values.shape))
