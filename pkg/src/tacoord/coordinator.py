"""Coordination policies and the comparison harness.

Data-informed coordination (DIC) evaluates the trained approximator for all
switching combinations of the measured operating point and commits the
argmin. The harness pits it against no-coordination (NC), a fixed
combination (FC), and the model-based path (MBC, linear sensitivities), all
judged by the simulated total action of the same scenario.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, mbc, metrics, netmodel
from .approximator import MlpModel, all_combinations, predict_batch
from .dataset import Disturbance, OperatingCondition, Timing, apply_condition
from .errors import TacoordError
from .netmodel import SystemCase

EXHAUSTIVE_LIMIT = 20  # combinations above 2^20 need an integer solver, out of scope


@dataclass
class Scenario:
    """One evaluation point: operating condition + disturbance + timing."""

    condition: OperatingCondition
    disturbance: Disturbance
    timing: Timing
    label: str = ""

    def describe(self):
        return {
            "label": self.label,
            "condition": self.condition.to_dict(),
            "disturbance": self.disturbance.to_dict(),
            "timing": self.timing.to_dict(),
        }

    @property
    def clearing_time(self):
        t_cl = self.timing.fault_time + self.disturbance.duration
        return round(t_cl / dynamics.STEP_S) * dynamics.STEP_S


@dataclass
class CoordinationResult:
    gamma: tuple[int, ...]
    predictions: np.ndarray       # ordered by binary encoding
    wall_time_ms: float
    tie_note: str | None = None


def dic_select(model: MlpModel, y0, n_controllers: int | None = None) -> CoordinationResult:
    """Exhaustive argmin of the predicted total action over all combinations.

    Ties break toward the fewest active controllers, then the lowest binary
    encoding, so resources are committed only when the model distinguishes
    the alternatives.
    """
    if n_controllers is None:
        n_controllers = model.n_inputs - len(np.asarray(y0))
    if n_controllers > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search limited to {EXHAUSTIVE_LIMIT} controllers")
    start = time.perf_counter()
    preds = predict_batch(model, y0, n_controllers)
    combos = all_combinations(n_controllers)
    best = np.min(preds)
    tied = [k for k in range(len(preds)) if preds[k] == best]
    winner = min(tied, key=lambda k: (sum(combos[k]), k))
    wall_ms = (time.perf_counter() - start) * 1e3
    note = f"{len(tied)} combinations tied at the minimum" if len(tied) > 1 else None
    return CoordinationResult(gamma=combos[winner], predictions=preds,
                              wall_time_ms=wall_ms, tie_note=note)


@dataclass
class PolicyRow:
    name: str
    gamma: tuple[int, ...] | None
    s_inf: float | None
    reduction_pct: float | None
    converged: bool = True
    trajectory_path: str | None = None
    error: str | None = None


@dataclass
class PolicyReport:
    scenario: dict
    rows: list[PolicyRow] = field(default_factory=list)

    @property
    def failed(self):
        return [r.name for r in self.rows if r.error is not None]

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


POLICY_ORDER = ("NC", "FC", "MBC", "DIC")


def _simulate_policy(case, setup, scenario: Scenario, gamma, activation_time=None):
    t_a = scenario.timing.activation_time if activation_time is None else activation_time
    events = dynamics.EventSchedule(
        fault_bus=scenario.disturbance.fault_bus,
        fault_time=scenario.timing.fault_time,
        clearing_time=scenario.timing.fault_time + scenario.disturbance.duration,
        activation_time=t_a,
        end_time=scenario.timing.end_time,
        gamma=tuple(gamma),
    )
    traj = dynamics.simulate(case, events, setup=setup)
    series = metrics.oscillation_energy(traj, case).since(scenario.clearing_time)
    result = metrics.total_action(series)
    return traj, result


def evaluate_policies(case: SystemCase, scenario: Scenario,
                      model: MlpModel | None = None,
                      fixed_combo=None,
                      policies=POLICY_ORDER,
                      out_dir=None) -> PolicyReport:
    """One nonlinear simulation per requested policy, reductions vs NC.

    The NC run is always simulated (it is the baseline and provides the
    measurements for DIC and MBC); per-policy failures are reported in the
    row rather than aborting the report.
    """
    policies = [p for p in POLICY_ORDER if p in policies]
    if "DIC" in policies and model is None:
        raise ValueError("DIC requested but no model given")
    if "FC" in policies and fixed_combo is None:
        raise ValueError("FC requested but no fixed combination given")

    variant = apply_condition(case, scenario.condition)
    setup = dynamics.prepare(variant)
    nc = len(variant.ibrs)
    t_cl = scenario.clearing_time

    nc_traj, nc_result = _simulate_policy(variant, setup, scenario, (0,) * nc)
    s_nc = nc_result.value

    y01 = netmodel.line_flows(variant, setup.pf)
    y02 = dynamics.snapshot_features(nc_traj, variant, t_cl)
    y0 = np.concatenate([y01, y02])

    report = PolicyReport(scenario=scenario.describe())
    for name in policies:
        try:
            if name == "NC":
                traj, result, gamma = nc_traj, nc_result, (0,) * nc
            else:
                if name == "FC":
                    gamma = tuple(int(q) for q in fixed_combo)
                elif name == "DIC":
                    gamma = dic_select(model, y0, nc).gamma
                elif name == "MBC":
                    x0 = mbc.state_deviation(variant, setup, nc_traj, t_cl)
                    sens = mbc.tas(variant, setup, np.zeros(nc), x0)
                    gamma = tuple(int(q) for q in mbc.mbc_switching(sens, np.zeros(nc, dtype=int)))
                traj, result = _simulate_policy(variant, setup, scenario, gamma)
            path = None
            if out_dir is not None:
                path = f"{out_dir}/trajectory_{name.lower()}.csv"
                traj.to_csv(path)
            report.rows.append(PolicyRow(
                name=name, gamma=gamma, s_inf=result.value,
                reduction_pct=100.0 * (s_nc - result.value) / s_nc,
                converged=result.converged, trajectory_path=path))
        except TacoordError as exc:
            report.rows.append(PolicyRow(name=name, gamma=None, s_inf=None,
                                         reduction_pct=None, converged=False,
                                         error=str(exc)))
    return report


def delay_sweep(case: SystemCase, scenario: Scenario, model: MlpModel,
                delays) -> PolicyReport:
    """DIC activated at clearing + tau_b for each delay; an infinite-delay
    row (never activated, identical to NC) is always included."""
    variant = apply_condition(case, scenario.condition)
    setup = dynamics.prepare(variant)
    nc = len(variant.ibrs)
    t_cl = scenario.clearing_time
    t_e = scenario.timing.end_time

    nc_traj, nc_result = _simulate_policy(variant, setup, scenario, (0,) * nc,
                                          activation_time=t_e)
    s_nc = nc_result.value
    y01 = netmodel.line_flows(variant, setup.pf)
    y02 = dynamics.snapshot_features(nc_traj, variant, t_cl)
    gamma = dic_select(model, np.concatenate([y01, y02]), nc).gamma

    report = PolicyReport(scenario=scenario.describe())
    taus = sorted(float(t) for t in delays)
    if not any(np.isinf(t) for t in taus):
        taus.append(np.inf)
    for tau in taus:
        if tau < 0:
            raise ValueError("delays must be nonnegative")
        name = f"tau={'inf' if np.isinf(tau) else format(tau, 'g')}"
        t_a = t_cl + tau
        try:
            if np.isinf(tau) or round(t_a / dynamics.STEP_S) * dynamics.STEP_S >= t_e:
                traj, result, used = nc_traj, nc_result, (0,) * nc
            else:
                traj, result = _simulate_policy(variant, setup, scenario, gamma,
                                                activation_time=t_a)
                used = gamma
            report.rows.append(PolicyRow(
                name=name, gamma=used, s_inf=result.value,
                reduction_pct=100.0 * (s_nc - result.value) / s_nc,
                converged=result.converged))
        except TacoordError as exc:
            report.rows.append(PolicyRow(name=name, gamma=None, s_inf=None,
                                         reduction_pct=None, converged=False,
                                         error=str(exc)))
    return report


def _average_ranks(values):
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(predicted, actual) -> float:
    """Rank correlation with average-rank tie handling."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or predicted.ndim != 1 or len(predicted) < 2:
        raise ValueError("need two equal-length vectors of at least 2 entries")
    if np.all(predicted == predicted[0]) or np.all(actual == actual[0]):
        raise ValueError("rank correlation undefined for a constant vector")
    rp = _average_ranks(predicted)
    ra = _average_ranks(actual)
    rp = rp - rp.mean()
    ra = ra - ra.mean()
    return float(rp @ ra / np.sqrt((rp @ rp) * (ra @ ra)))


def mape(predicted, actual) -> float:
    """Mean absolute percentage error, in percent."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or len(predicted) == 0:
        raise ValueError("need two equal-length nonempty vectors")
    if np.any(actual == 0.0):
        raise ValueError("actual values must be nonzero for a percentage error")
    return float(100.0 * np.mean(np.abs(predicted - actual) / np.abs(actual)))
