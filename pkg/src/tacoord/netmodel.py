"""Static network model: admittance construction, AC power flow, Kron reduction.

All quantities are per-unit on the system base. Loads are modeled constant
impedance (converted at the prefault operating voltage), which keeps the
network linear in voltage and makes Kron reduction exact. A bolted 3-phase
fault is a large shunt conductance at the faulted bus.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import numpy as np

from .damping import DcConfig
from .errors import CaseError, NetworkSolveError, PowerFlowError

FAULT_SHUNT = 1e6  # pu shunt standing in for a zero-impedance fault

PF_TOLERANCE = 1e-8
PF_MAX_ITERATIONS = 50


class NetworkStage(Enum):
    PREFAULT = "prefault"
    FAULT_ON = "fault-on"
    POSTFAULT = "postfault"


@dataclass
class Bus:
    id: int
    type: str  # 'slack' | 'PV' | 'PQ'
    v: float = 1.0  # setpoint magnitude for slack/PV; initial guess for PQ


@dataclass
class Line:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0  # total line-charging susceptance, split half per end


@dataclass
class Generator:
    bus: int
    h: float          # inertia constant, s, on system base
    d: float          # damping coefficient, pu
    xd_prime: float   # transient reactance, pu
    pm: float         # active-power dispatch; becomes mechanical power at init
    emf: float | None = None  # internal EMF magnitude; filled at initialization


@dataclass
class Load:
    bus: int
    p: float
    q: float


@dataclass
class Ibr:
    bus: int
    p_ref: float  # quasi-stationary power reference, pu
    dc: DcConfig


@dataclass
class SystemCase:
    """One grid: buses, branches, machines, loads, and IBR-DC placements."""

    buses: list[Bus]
    lines: list[Line]
    generators: list[Generator]
    loads: list[Load]
    ibrs: list[Ibr]
    feature_lines: list[str]
    reference_generator: int = 0
    base_mva: float = 100.0
    nominal_hz: float = 60.0

    @property
    def n_controllers(self):
        return len(self.ibrs)

    @property
    def omega_s(self):
        """Synchronous speed in rad/s."""
        return 2.0 * np.pi * self.nominal_hz

    def bus_index(self):
        """Map bus id -> position in self.buses."""
        return {b.id: i for i, b in enumerate(self.buses)}

    def line_by_id(self):
        return {ln.id: ln for ln in self.lines}

    def validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("duplicate bus ids")
        index = self.bus_index()
        slack = [b for b in self.buses if b.type == "slack"]
        if len(slack) != 1:
            raise CaseError(f"expected exactly one slack bus, found {len(slack)}")
        for b in self.buses:
            if b.type not in ("slack", "PV", "PQ"):
                raise CaseError(f"bus {b.id}: unknown type {b.type!r}")
        line_ids = [ln.id for ln in self.lines]
        if len(set(line_ids)) != len(line_ids):
            raise CaseError("duplicate line ids")
        for ln in self.lines:
            if ln.from_bus not in index or ln.to_bus not in index:
                raise CaseError(f"line {ln.id}: endpoint not in bus list")
            if abs(complex(ln.r, ln.x)) <= 0.0:
                raise CaseError(f"line {ln.id}: zero series impedance")
        for g in self.generators:
            if g.bus not in index:
                raise CaseError(f"generator at bus {g.bus}: bus not in case")
            if g.h <= 0.0:
                raise CaseError(f"generator at bus {g.bus}: inertia must be positive")
            if g.xd_prime <= 0.0:
                raise CaseError(f"generator at bus {g.bus}: xd' must be positive")
        for ld in self.loads:
            if ld.bus not in index:
                raise CaseError(f"load at bus {ld.bus}: bus not in case")
        if len(self.ibrs) < 1:
            raise CaseError("case needs at least one IBR damping controller")
        ibr_buses = [ib.bus for ib in self.ibrs]
        if len(set(ibr_buses)) != len(ibr_buses):
            raise CaseError("IBRs must sit at distinct buses")
        for ib in self.ibrs:
            if ib.bus not in index:
                raise CaseError(f"IBR at bus {ib.bus}: bus not in case")
            ib.dc.validate()
            if not 0 <= ib.dc.input_source < len(self.generators):
                raise CaseError(f"IBR at bus {ib.bus}: input_source out of range")
        known_lines = set(line_ids)
        for fid in self.feature_lines:
            if fid not in known_lines:
                raise CaseError(f"feature line {fid!r} not in line list")
        if not 0 <= self.reference_generator < len(self.generators):
            raise CaseError("reference_generator index out of range")

    def to_dict(self):
        return {
            "base_mva": self.base_mva,
            "nominal_hz": self.nominal_hz,
            "reference_generator": self.reference_generator,
            "buses": [{"id": b.id, "type": b.type, "v": b.v} for b in self.buses],
            "lines": [
                {"id": ln.id, "from": ln.from_bus, "to": ln.to_bus,
                 "r": ln.r, "x": ln.x, "b": ln.b}
                for ln in self.lines
            ],
            "generators": [
                {"bus": g.bus, "h": g.h, "d": g.d, "xd_prime": g.xd_prime,
                 "pm": g.pm, "emf": g.emf}
                for g in self.generators
            ],
            "loads": [{"bus": ld.bus, "p": ld.p, "q": ld.q} for ld in self.loads],
            "ibrs": [
                {"bus": ib.bus, "p_ref": ib.p_ref, "dc": ib.dc.to_dict()}
                for ib in self.ibrs
            ],
            "feature_lines": list(self.feature_lines),
        }

    @classmethod
    def from_dict(cls, d):
        case = cls(
            buses=[Bus(id=int(b["id"]), type=str(b["type"]), v=float(b.get("v", 1.0)))
                   for b in d["buses"]],
            lines=[Line(id=str(ln["id"]), from_bus=int(ln["from"]), to_bus=int(ln["to"]),
                        r=float(ln["r"]), x=float(ln["x"]), b=float(ln.get("b", 0.0)))
                   for ln in d["lines"]],
            generators=[Generator(bus=int(g["bus"]), h=float(g["h"]), d=float(g["d"]),
                                  xd_prime=float(g["xd_prime"]), pm=float(g["pm"]),
                                  emf=None if g.get("emf") is None else float(g["emf"]))
                        for g in d["generators"]],
            loads=[Load(bus=int(ld["bus"]), p=float(ld["p"]), q=float(ld["q"]))
                   for ld in d["loads"]],
            ibrs=[Ibr(bus=int(ib["bus"]), p_ref=float(ib["p_ref"]),
                      dc=DcConfig.from_dict(ib["dc"]))
                  for ib in d["ibrs"]],
            feature_lines=[str(f) for f in d["feature_lines"]],
            reference_generator=int(d.get("reference_generator", 0)),
            base_mva=float(d.get("base_mva", 100.0)),
            nominal_hz=float(d.get("nominal_hz", 60.0)),
        )
        case.validate()
        return case

    def content_hash(self):
        """Stable hash of the case content, for dataset/manifest provenance."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_case(path) -> SystemCase:
    with open(path) as f:
        return SystemCase.from_dict(json.load(f))


def save_case(case: SystemCase, path):
    with open(path, "w") as f:
        json.dump(case.to_dict(), f, indent=2)
        f.write("\n")


def load_builtin_case(name: str = "two_area") -> SystemCase:
    """Load a case shipped with the package (default: two-area 4-machine)."""
    ref = resources.files("tacoord").joinpath(f"cases/{name}.json")
    return SystemCase.from_dict(json.loads(ref.read_text()))


@dataclass
class PowerFlowSolution:
    bus_ids: list[int]
    v: np.ndarray                # complex voltage per bus, case order
    flow_from: np.ndarray        # complex S at from end, per line, case order
    flow_to: np.ndarray          # complex S at to end
    iterations: int
    max_mismatch: float

    def v_at(self, bus_id):
        return self.v[self.bus_ids.index(bus_id)]


def _branch_ybus(case: SystemCase) -> np.ndarray:
    """Bus admittance from branches only (no loads, no fault)."""
    index = case.bus_index()
    n = len(case.buses)
    y = np.zeros((n, n), dtype=complex)
    for ln in case.lines:
        i, j = index[ln.from_bus], index[ln.to_bus]
        ys = 1.0 / complex(ln.r, ln.x)
        ysh = 0.5j * ln.b
        y[i, j] -= ys
        y[j, i] -= ys
        y[i, i] += ys + ysh
        y[j, j] += ys + ysh
    return y


def build_ybus(case: SystemCase, stage: NetworkStage = NetworkStage.PREFAULT,
               fault_bus: int | None = None,
               pf: PowerFlowSolution | None = None) -> np.ndarray:
    """Bus admittance matrix for a network stage.

    Loads enter as constant admittances converted at the prefault power-flow
    voltage (solved on demand when not supplied). The fault-on stage adds a
    large shunt at the fault bus.
    """
    index = case.bus_index()
    y = _branch_ybus(case)
    if case.loads:
        if pf is None:
            pf = solve_power_flow(case)
        for ld in case.loads:
            i = index[ld.bus]
            vm2 = abs(pf.v[i]) ** 2
            y[i, i] += complex(ld.p, -ld.q) / vm2
    if stage is NetworkStage.FAULT_ON:
        if fault_bus is None or fault_bus not in index:
            raise CaseError(f"fault bus {fault_bus!r} not in case")
        y[index[fault_bus], index[fault_bus]] += FAULT_SHUNT
    return y


def solve_power_flow(case: SystemCase, tol: float = PF_TOLERANCE,
                     max_iter: int = PF_MAX_ITERATIONS) -> PowerFlowSolution:
    """Newton-Raphson power flow from a flat start.

    Generators schedule their dispatch at PV buses, IBRs inject their
    quasi-stationary reference at unity power factor, loads draw scheduled
    P/Q. The slack bus absorbs the residual.
    """
    case.validate()
    index = case.bus_index()
    n = len(case.buses)
    y = _branch_ybus(case)

    p_sched = np.zeros(n)
    q_sched = np.zeros(n)
    for g in case.generators:
        p_sched[index[g.bus]] += g.pm
    for ib in case.ibrs:
        p_sched[index[ib.bus]] += ib.p_ref
    for ld in case.loads:
        p_sched[index[ld.bus]] -= ld.p
        q_sched[index[ld.bus]] -= ld.q

    types = [b.type for b in case.buses]
    slack = types.index("slack")
    pv = [i for i, t in enumerate(types) if t == "PV"]
    pq = [i for i, t in enumerate(types) if t == "PQ"]
    pvpq = pv + pq

    vm = np.ones(n)
    va = np.zeros(n)
    for i, b in enumerate(case.buses):
        if b.type in ("slack", "PV"):
            vm[i] = b.v

    s_sched = p_sched + 1j * q_sched
    mismatch = np.inf
    for it in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        i_inj = y @ v
        s = v * np.conj(i_inj)
        f = np.concatenate([(s - s_sched).real[pvpq], (s - s_sched).imag[pq]])
        mismatch = float(np.max(np.abs(f))) if f.size else 0.0
        if mismatch <= tol:
            return _finish_power_flow(case, index, v, it, mismatch)
        if it == max_iter:
            break
        diag_v = np.diag(v)
        diag_i = np.diag(i_inj)
        diag_vn = np.diag(v / vm)
        ds_dvm = diag_v @ np.conj(y @ diag_vn) + np.conj(diag_i) @ diag_vn
        ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
        j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
        j12 = ds_dvm.real[np.ix_(pvpq, pq)]
        j21 = ds_dva.imag[np.ix_(pq, pvpq)]
        j22 = ds_dvm.imag[np.ix_(pq, pq)]
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {it}",
                                 mismatch=mismatch, iterations=it) from exc
        if not np.all(np.isfinite(dx)):
            raise PowerFlowError(f"diverged at iteration {it}",
                                 mismatch=mismatch, iterations=it)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
    raise PowerFlowError(
        f"no convergence after {max_iter} iterations (max mismatch {mismatch:.3e} pu)",
        mismatch=mismatch, iterations=max_iter)


def _finish_power_flow(case, index, v, iterations, mismatch):
    nl = len(case.lines)
    flow_from = np.zeros(nl, dtype=complex)
    flow_to = np.zeros(nl, dtype=complex)
    for k, ln in enumerate(case.lines):
        i, j = index[ln.from_bus], index[ln.to_bus]
        ys = 1.0 / complex(ln.r, ln.x)
        ysh = 0.5j * ln.b
        i_from = (v[i] - v[j]) * ys + v[i] * ysh
        i_to = (v[j] - v[i]) * ys + v[j] * ysh
        flow_from[k] = v[i] * np.conj(i_from)
        flow_to[k] = v[j] * np.conj(i_to)
    return PowerFlowSolution(
        bus_ids=[b.id for b in case.buses],
        v=v,
        flow_from=flow_from,
        flow_to=flow_to,
        iterations=iterations,
        max_mismatch=mismatch,
    )


def line_flows(case: SystemCase, pf: PowerFlowSolution) -> np.ndarray:
    """Sending-end active power over the case's feature lines (this is y01)."""
    if not case.feature_lines:
        raise CaseError("case declares no feature lines")
    order = {ln.id: k for k, ln in enumerate(case.lines)}
    try:
        idx = [order[fid] for fid in case.feature_lines]
    except KeyError as exc:
        raise CaseError(f"feature line {exc.args[0]!r} not in line list") from None
    return pf.flow_from[idx].real.copy()


@dataclass
class ReducedNetwork:
    """Admittance among retained nodes: generator internal nodes, then IBR buses."""

    y: np.ndarray
    stage: NetworkStage
    labels: list[str] = field(default_factory=list)
    n_gen: int = 0
    n_ibr: int = 0

    @property
    def gen_slice(self):
        return slice(0, self.n_gen)

    @property
    def ibr_slice(self):
        return slice(self.n_gen, self.n_gen + self.n_ibr)


def reduce_network(case: SystemCase, pf: PowerFlowSolution,
                   stage: NetworkStage = NetworkStage.PREFAULT,
                   fault_bus: int | None = None) -> ReducedNetwork:
    """Kron reduction onto generator internal nodes and IBR buses.

    Generators attach behind xd' to their terminal bus; loads are folded in
    as constant admittances at the prefault voltage. Every other bus is
    eliminated.
    """
    index = case.bus_index()
    n = len(case.buses)
    p = len(case.generators)
    nc = len(case.ibrs)

    y_full = np.zeros((n + p, n + p), dtype=complex)
    y_full[:n, :n] = build_ybus(case, stage, fault_bus=fault_bus, pf=pf)
    for g_idx, g in enumerate(case.generators):
        t = index[g.bus]
        yg = 1.0 / complex(0.0, g.xd_prime)
        k = n + g_idx
        y_full[k, k] += yg
        y_full[t, t] += yg
        y_full[k, t] -= yg
        y_full[t, k] -= yg

    retained = [n + g_idx for g_idx in range(p)]
    retained += [index[ib.bus] for ib in case.ibrs]
    eliminated = [i for i in range(n) if i not in set(retained)]

    y_rr = y_full[np.ix_(retained, retained)]
    if eliminated:
        y_re = y_full[np.ix_(retained, eliminated)]
        y_er = y_full[np.ix_(eliminated, retained)]
        y_ee = y_full[np.ix_(eliminated, eliminated)]
        try:
            y_red = y_rr - y_re @ np.linalg.solve(y_ee, y_er)
        except np.linalg.LinAlgError as exc:
            raise NetworkSolveError("singular sub-block during Kron elimination") from exc
    else:
        y_red = y_rr.copy()

    labels = [f"gen{g_idx}@bus{g.bus}" for g_idx, g in enumerate(case.generators)]
    labels += [f"ibr{l}@bus{ib.bus}" for l, ib in enumerate(case.ibrs)]
    return ReducedNetwork(y=y_red, stage=stage, labels=labels, n_gen=p, n_ibr=nc)
