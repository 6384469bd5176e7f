"""Oscillation energy and total action computed from trajectories.

E(t) = sum_j H_j * w_s * (w_j(t) - w_COI(t))^2, the inertia-weighted energy
of COI-relative speed deviations. Its time integral over a horizon is the
action; the total action is the integral taken to convergence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory
from .netmodel import SystemCase

TAIL_WINDOW_S = 2.0
TAIL_FRACTION = 1e-3  # tail increment above 0.1% of the total flags non-convergence


def coi_speed(speeds, h) -> float:
    """Inertia-weighted mean speed (center of inertia), pu."""
    speeds = np.asarray(speeds, dtype=float)
    h = np.asarray(h, dtype=float)
    if speeds.size == 0:
        raise ValueError("empty speed vector")
    if speeds.shape[-1] != h.shape[0]:
        raise ValueError("speed and inertia dimensions differ")
    return speeds @ h / h.sum()


@dataclass
class EnergySeries:
    """Oscillation energy sampled on the trajectory grid."""

    t: np.ndarray
    e: np.ndarray
    h_gen: np.ndarray
    omega_s: float

    @property
    def t0(self):
        return float(self.t[0])

    def since(self, t0: float) -> "EnergySeries":
        """Tail of the series starting at grid time t0 (the measurement instant)."""
        step = self.t[1] - self.t[0]
        k = int(round((t0 - self.t[0]) / step))
        if k < 0 or k >= len(self.t) or abs(self.t[k] - t0) > 1e-9:
            raise ValueError(f"time {t0} is not on the series grid")
        return EnergySeries(t=self.t[k:], e=self.e[k:], h_gen=self.h_gen,
                            omega_s=self.omega_s)

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("time,energy\n")
            for tv, ev in zip(self.t, self.e):
                f.write(f"{float(tv)!r},{float(ev)!r}\n")


def oscillation_energy(traj: Trajectory, case: SystemCase) -> EnergySeries:
    """Energy series E(t) over the whole trajectory."""
    h = np.array([g.h for g in case.generators])
    if h.size == 0:
        raise ValueError("case has no generators")
    ws = case.omega_s
    w_coi = traj.omega @ h / h.sum()
    dev = traj.omega - w_coi[:, None]
    e = (dev ** 2) @ (h * ws)
    return EnergySeries(t=traj.t.copy(), e=e, h_gen=h, omega_s=ws)


def action(series: EnergySeries, tau: float) -> float:
    """Trapezoidal integral of E from the series start over a horizon tau (s)."""
    if tau <= 0.0:
        raise ValueError("horizon must be positive")
    t_end = series.t[0] + tau
    if t_end > series.t[-1] + 1e-9:
        raise ValueError("horizon extends beyond the series span")
    step = series.t[1] - series.t[0]
    k = int(np.floor((t_end - series.t[0]) / step + 1e-9))
    k = min(k, len(series.t) - 1)
    total = float(np.trapezoid(series.e[:k + 1], series.t[:k + 1]))
    rem = t_end - series.t[k]
    if rem > 1e-12 and k + 1 < len(series.t):
        e_end = series.e[k] + (series.e[k + 1] - series.e[k]) * rem / step
        total += 0.5 * (series.e[k] + e_end) * rem
    return total


@dataclass
class TotalActionResult:
    value: float
    converged: bool
    tail_increment: float

    def __float__(self):
        return self.value


def total_action(series: EnergySeries) -> TotalActionResult:
    """Total action over the full series horizon, with a convergence check.

    The integral has converged when the increment accumulated over the final
    2 s stays below 0.1% of the total; otherwise the result is flagged so
    callers can exclude the sample.
    """
    span = series.t[-1] - series.t[0]
    if span < 1.0:
        raise ValueError("series must span at least 1 s past the measurement instant")
    value = float(np.trapezoid(series.e, series.t))
    window = min(TAIL_WINDOW_S, span)
    tail_start = series.t[-1] - window
    step = series.t[1] - series.t[0]
    k = int(round((tail_start - series.t[0]) / step))
    tail = float(np.trapezoid(series.e[k:], series.t[k:]))
    converged = tail <= TAIL_FRACTION * value
    return TotalActionResult(value=value, converged=bool(converged), tail_increment=tail)
