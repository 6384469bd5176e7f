"""Training-data collection over operating conditions, disturbances, and
switching combinations.

One sample couples the steady-state tie-line flows (y01, depends on the
operating condition), the post-clearing speed deviations (y02, depends on
condition and disturbance), the switching combination applied at activation,
and the resulting total action. Samples are persisted as JSON Lines with a
schema header so collections are diff-able and byte-reproducible.
"""
from __future__ import annotations

import copy
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, metrics, netmodel
from .errors import CaseError, PowerFlowError, SimulationUnstableError, TacoordError
from .netmodel import SystemCase

SCHEMA_VERSION = 1


@dataclass
class OperatingCondition:
    """One operating point: scaled demand, redispatched generation, IBR references."""

    load_scale: float = 1.0
    gen_scale: float = 1.0
    ibr_refs: list[float] | None = None

    def to_dict(self):
        return {"load_scale": self.load_scale, "gen_scale": self.gen_scale,
                "ibr_refs": self.ibr_refs}

    @classmethod
    def from_dict(cls, d):
        refs = d.get("ibr_refs")
        return cls(load_scale=float(d.get("load_scale", 1.0)),
                   gen_scale=float(d.get("gen_scale", 1.0)),
                   ibr_refs=None if refs is None else [float(v) for v in refs])


@dataclass
class Disturbance:
    fault_bus: int
    duration: float = 0.05  # 3 cycles at 60 Hz

    def to_dict(self):
        return {"fault_bus": self.fault_bus, "duration": self.duration}

    @classmethod
    def from_dict(cls, d):
        return cls(fault_bus=int(d["fault_bus"]), duration=float(d.get("duration", 0.05)))


@dataclass
class Timing:
    """Event-time template shared by every collected scenario."""

    fault_time: float = 2.0
    activation_time: float = 2.55
    end_time: float = 30.0

    def to_dict(self):
        return {"fault_time": self.fault_time, "activation_time": self.activation_time,
                "end_time": self.end_time}

    @classmethod
    def from_dict(cls, d):
        return cls(fault_time=float(d.get("fault_time", 2.0)),
                   activation_time=float(d.get("activation_time", 2.55)),
                   end_time=float(d.get("end_time", 30.0)))


@dataclass
class ScenarioGrid:
    """Enumeration axes: n_s = n_o * n_d * 2^n_c samples."""

    operating_conditions: list[OperatingCondition]
    disturbances: list[Disturbance]
    n_controllers: int

    @property
    def n_samples(self):
        return (len(self.operating_conditions) * len(self.disturbances)
                * 2 ** self.n_controllers)

    def combinations(self):
        """All switching vectors ordered by binary encoding (first DC is the
        most significant bit): 000, 001, 010, ..."""
        nc = self.n_controllers
        return [tuple((k >> (nc - 1 - l)) & 1 for l in range(nc))
                for k in range(2 ** nc)]

    def to_dict(self):
        return {
            "operating_conditions": [oc.to_dict() for oc in self.operating_conditions],
            "disturbances": [dv.to_dict() for dv in self.disturbances],
            "n_controllers": self.n_controllers,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            operating_conditions=[OperatingCondition.from_dict(oc)
                                  for oc in d["operating_conditions"]],
            disturbances=[Disturbance.from_dict(dv) for dv in d["disturbances"]],
            n_controllers=int(d["n_controllers"]),
        )


def load_grid(path) -> ScenarioGrid:
    with open(path) as f:
        return ScenarioGrid.from_dict(json.load(f))


def load_builtin_grid(name: str = "two_area_grid") -> ScenarioGrid:
    from importlib import resources
    ref = resources.files("tacoord").joinpath(f"cases/{name}.json")
    return ScenarioGrid.from_dict(json.loads(ref.read_text()))


def save_grid(grid: ScenarioGrid, path):
    with open(path, "w") as f:
        json.dump(grid.to_dict(), f, indent=2)
        f.write("\n")


def apply_condition(case: SystemCase, oc: OperatingCondition) -> SystemCase:
    """Case variant under one operating condition; the input case is untouched."""
    out = copy.deepcopy(case)
    slack_bus = next(b.id for b in out.buses if b.type == "slack")
    for ld in out.loads:
        ld.p *= oc.load_scale
        ld.q *= oc.load_scale
    for g in out.generators:
        if g.bus != slack_bus:
            g.pm *= oc.gen_scale
    if oc.ibr_refs is not None:
        if len(oc.ibr_refs) != len(out.ibrs):
            raise CaseError("ibr_refs length does not match case IBR count")
        for ib, ref in zip(out.ibrs, oc.ibr_refs):
            ib.p_ref = ref
    return out


@dataclass
class Sample:
    """One training record per Algorithm-1 scenario."""

    s_inf: float | None
    y01: list[float]
    y02: list[float]
    gamma: list[int]
    condition: int
    disturbance: int
    combination: int
    converged: bool

    def to_dict(self):
        return {
            "s_inf": self.s_inf, "y01": self.y01, "y02": self.y02,
            "gamma": self.gamma, "i": self.condition, "j": self.disturbance,
            "k": self.combination, "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(s_inf=d["s_inf"], y01=d["y01"], y02=d["y02"], gamma=d["gamma"],
                   condition=d["i"], disturbance=d["j"], combination=d["k"],
                   converged=d["converged"])


@dataclass
class Dataset:
    header: dict
    samples: list[Sample]

    @property
    def n_y01(self):
        return self.header["n_y01"]

    @property
    def n_y02(self):
        return self.header["n_y02"]

    @property
    def n_controllers(self):
        return self.header["n_controllers"]

    @property
    def feature_dim(self):
        return self.n_y01 + self.n_y02 + self.n_controllers

    def features(self, indices=None):
        """Feature matrix [y01 | y02 | gamma] over the selected samples."""
        rows = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.array([s.y01 + s.y02 + list(map(float, s.gamma)) for s in rows])

    def targets(self, indices=None):
        rows = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.array([np.nan if s.s_inf is None else s.s_inf for s in rows])

    def converged_indices(self):
        return np.array([i for i, s in enumerate(self.samples) if s.converged], dtype=int)

    def scenario_indices(self):
        """Map (condition, disturbance) -> sample indices ordered by combination."""
        out = {}
        for idx, s in enumerate(self.samples):
            out.setdefault((s.condition, s.disturbance), []).append(idx)
        return out

    def save(self, path):
        with open(path, "w") as f:
            f.write(json.dumps({"header": self.header}, sort_keys=True) + "\n")
            for s in self.samples:
                f.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            first = json.loads(f.readline())
            if "header" not in first:
                raise TacoordError(f"{path}: missing dataset header line")
            samples = [Sample.from_dict(json.loads(line)) for line in f if line.strip()]
        return cls(header=first["header"], samples=samples)


def _collect_one(args):
    case_dict, oc_dict, dist_dict, timing_dict, i, j, k, gamma = args
    case = SystemCase.from_dict(case_dict)
    oc = OperatingCondition.from_dict(oc_dict)
    dist = Disturbance.from_dict(dist_dict)
    timing = Timing.from_dict(timing_dict)
    variant = apply_condition(case, oc)
    setup = dynamics.prepare(variant)
    y01 = netmodel.line_flows(variant, setup.pf)
    t_cl = timing.fault_time + dist.duration
    events = dynamics.EventSchedule(
        fault_bus=dist.fault_bus, fault_time=timing.fault_time, clearing_time=t_cl,
        activation_time=timing.activation_time, end_time=timing.end_time, gamma=gamma)
    try:
        traj = dynamics.simulate(variant, events, setup=setup)
    except (SimulationUnstableError, TacoordError):
        return Sample(s_inf=None, y01=list(y01), y02=[0.0] * len(variant.generators),
                      gamma=list(gamma), condition=i, disturbance=j, combination=k,
                      converged=False)
    snapped_tcl = round(t_cl / dynamics.STEP_S) * dynamics.STEP_S
    y02 = dynamics.snapshot_features(traj, variant, snapped_tcl)
    series = metrics.oscillation_energy(traj, variant).since(snapped_tcl)
    result = metrics.total_action(series)
    return Sample(
        s_inf=float(result.value), y01=list(y01), y02=[float(v) for v in y02],
        gamma=list(gamma), condition=i, disturbance=j, combination=k,
        converged=bool(result.converged))


def collect(case: SystemCase, grid: ScenarioGrid, timing: Timing,
            seed: int = 0, jobs: int = 1, progress=None) -> Dataset:
    """Run the full scenario enumeration and assemble the dataset.

    Conditions with a non-convergent power flow are skipped with a warning;
    unstable or non-convergent simulations yield flagged samples. Output
    ordering is canonical (condition-major, then disturbance, then
    combination) regardless of execution order.
    """
    case.validate()
    if grid.n_controllers != len(case.ibrs):
        raise CaseError("grid controller count does not match the case")
    if progress is None:
        progress = lambda msg: print(msg, file=sys.stderr)

    combos = grid.combinations()
    tasks = []
    skipped_conditions = []
    skipped_disturbances = []
    bus_ids = {b.id for b in case.buses}
    for i, oc in enumerate(grid.operating_conditions):
        try:
            variant = apply_condition(case, oc)
            netmodel.solve_power_flow(variant)
        except (PowerFlowError, CaseError) as exc:
            skipped_conditions.append(i)
            progress(f"condition {i}: power flow failed ({exc}); skipped")
            continue
        for j, dist in enumerate(grid.disturbances):
            if dist.fault_bus not in bus_ids:
                if j not in skipped_disturbances:
                    skipped_disturbances.append(j)
                    progress(f"disturbance {j}: fault bus {dist.fault_bus} not in case; skipped")
                continue
            for k, gamma in enumerate(combos):
                tasks.append((case.to_dict(), oc.to_dict(), dist.to_dict(),
                              timing.to_dict(), i, j, k, gamma))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(_collect_one, tasks, chunksize=4))
    else:
        samples = []
        for n, t in enumerate(tasks):
            samples.append(_collect_one(t))
            if (n + 1) % 16 == 0:
                progress(f"collected {n + 1}/{len(tasks)} samples")
    samples.sort(key=lambda s: (s.condition, s.disturbance, s.combination))

    header = {
        "schema_version": SCHEMA_VERSION,
        "case_hash": case.content_hash(),
        "grid": grid.to_dict(),
        "timing": timing.to_dict(),
        "seed": seed,
        "n_y01": len(case.feature_lines),
        "n_y02": len(case.generators),
        "n_controllers": len(case.ibrs),
        "reference_generator": case.reference_generator,
        "skipped_conditions": skipped_conditions,
        "skipped_disturbances": skipped_disturbances,
        "std_convention": "population",
    }
    return Dataset(header=header, samples=samples)


@dataclass
class Standardizer:
    """Column-wise zero-mean unit-std transform for the measurement features.

    Switching columns pass through untouched, as does the reference
    generator's own y02 entry (identically zero by construction). The stored
    standard deviations use the population (1/N) convention.
    """

    mean: np.ndarray
    std: np.ndarray
    standardized_cols: list[int]
    passthrough_cols: list[int]

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        cols = self.standardized_cols
        if x.ndim == 1:
            out[cols] = (x[cols] - self.mean) / self.std
        else:
            out[:, cols] = (x[:, cols] - self.mean) / self.std
        return out

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        cols = self.standardized_cols
        if x.ndim == 1:
            out[cols] = x[cols] * self.std + self.mean
        else:
            out[:, cols] = x[:, cols] * self.std + self.mean
        return out

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "standardized_cols": list(self.standardized_cols),
            "passthrough_cols": list(self.passthrough_cols),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.array(d["mean"], dtype=float),
                   std=np.array(d["std"], dtype=float),
                   standardized_cols=[int(c) for c in d["standardized_cols"]],
                   passthrough_cols=[int(c) for c in d["passthrough_cols"]])


def feature_column_names(dataset: Dataset):
    names = [f"y01[{i}]" for i in range(dataset.n_y01)]
    names += [f"y02[{i}]" for i in range(dataset.n_y02)]
    names += [f"gamma[{i}]" for i in range(dataset.n_controllers)]
    return names


def fit_standardizer(dataset: Dataset, indices=None) -> Standardizer:
    """Fit the feature standardizer on the selected (training) samples."""
    if indices is None:
        indices = dataset.converged_indices()
    if len(indices) < 2:
        raise ValueError("need at least two samples to fit a standardizer")
    x = dataset.features(indices)
    n_feat = dataset.n_y01 + dataset.n_y02
    ref_col = dataset.n_y01 + dataset.header["reference_generator"]
    gamma_cols = list(range(n_feat, dataset.feature_dim))
    passthrough = [ref_col] + gamma_cols
    cols = [c for c in range(n_feat) if c != ref_col]
    mean = x[:, cols].mean(axis=0)
    std = x[:, cols].std(axis=0)  # population convention
    names = feature_column_names(dataset)
    for c, s in zip(cols, std):
        if s <= 1e-12:
            raise ValueError(f"constant feature column {names[c]} (std={s:.3e})")
    return Standardizer(mean=mean, std=std, standardized_cols=cols,
                        passthrough_cols=passthrough)


def make_folds(dataset: Dataset, n_folds: int, n_validation: int,
               rotation: int, seed: int = 0, indices=None):
    """Deterministic seeded shuffle into contiguous folds, then rotate.

    Returns (train_indices, validation_indices); the two partition the
    selected samples exactly. rotation=r validates folds r..r+P-1 (mod N).
    """
    if indices is None:
        indices = dataset.converged_indices()
    indices = np.asarray(indices, dtype=int)
    n = len(indices)
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if not 1 <= n_validation < n_folds:
        raise ValueError("validation fold count must be in [1, n_folds)")
    if n_folds > n:
        raise ValueError(f"cannot split {n} samples into {n_folds} folds")
    rng = np.random.default_rng(seed)
    shuffled = indices[rng.permutation(n)]
    folds = np.array_split(shuffled, n_folds)
    val_ids = [(rotation + p) % n_folds for p in range(n_validation)]
    val = np.concatenate([folds[v] for v in val_ids])
    train = np.concatenate([folds[f] for f in range(n_folds) if f not in val_ids])
    return np.sort(train), np.sort(val)
