"""Nonlinear time-domain simulation of the classical multi-machine model.

State vector layout: [rotor angles (rad), rotor speeds (pu), controller
states (washout, leadlag) per damping controller]. Integration is fixed-step
RK4 with event times snapped to the grid, which keeps runs bit-for-bit
reproducible for dataset generation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import netmodel
from .damping import filter_output, filter_rates
from .errors import CaseError, NetworkSolveError, SimulationUnstableError
from .netmodel import NetworkStage, ReducedNetwork, SystemCase, reduce_network, solve_power_flow

STEP_S = 0.005          # RK4 step, s
IBR_SOLVE_MAX_ITER = 10
IBR_SOLVE_TOL = 1e-8
BLOWUP_ANGLE_RAD = 1e4


@dataclass
class EventSchedule:
    """Fault, clearing, coordination activation, and end times for one run."""

    fault_bus: int | None
    fault_time: float
    clearing_time: float
    activation_time: float
    end_time: float
    gamma: tuple[int, ...] = ()

    def validate(self, n_controllers):
        if not self.fault_time < self.clearing_time <= self.activation_time <= self.end_time:
            raise CaseError(
                "event times must satisfy fault < clearing <= activation <= end")
        if self.gamma and len(self.gamma) != n_controllers:
            raise CaseError(
                f"switching vector has {len(self.gamma)} entries, case has {n_controllers} controllers")
        if any(q not in (0, 1) for q in self.gamma):
            raise CaseError("switching vector entries must be 0 or 1")


@dataclass
class Trajectory:
    """Uniformly sampled simulation record."""

    t: np.ndarray          # (n,)
    delta: np.ndarray      # (n, n_gen) rotor angles, rad
    omega: np.ndarray      # (n, n_gen) rotor speeds, pu
    dc: np.ndarray         # (n, n_ibr, 2) controller states
    ibr_p: np.ndarray      # (n, n_ibr) injected active power, pu
    ibr_v: np.ndarray      # (n, n_ibr) complex voltage at IBR buses
    events: dict = field(default_factory=dict)

    @property
    def step(self):
        return float(self.t[1] - self.t[0])

    def index_of(self, t):
        k = int(round((t - self.t[0]) / self.step))
        if k < 0 or k >= len(self.t) or abs(self.t[k] - t) > 1e-9:
            raise ValueError(f"time {t} is not on the trajectory grid")
        return k

    def to_csv(self, path):
        """Write the trajectory as CSV plus a JSON sidecar of event markers."""
        path = str(path)
        n_gen = self.delta.shape[1]
        n_ibr = self.ibr_p.shape[1]
        cols = ["time"]
        cols += [f"gen{i}_delta" for i in range(n_gen)]
        cols += [f"gen{i}_omega" for i in range(n_gen)]
        cols += [f"dc{l}_washout" for l in range(n_ibr)]
        cols += [f"dc{l}_leadlag" for l in range(n_ibr)]
        cols += [f"ibr{l}_p" for l in range(n_ibr)]
        cols += [f"ibr{l}_vm" for l in range(n_ibr)]
        cols += [f"ibr{l}_va" for l in range(n_ibr)]
        data = np.column_stack([
            self.t, self.delta, self.omega,
            self.dc[:, :, 0], self.dc[:, :, 1],
            self.ibr_p, np.abs(self.ibr_v), np.angle(self.ibr_v),
        ])
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for row in data:
                f.write(",".join(repr(float(v)) for v in row) + "\n")
        with open(path + ".events.json", "w") as f:
            json.dump(self.events, f, indent=2)
            f.write("\n")


@dataclass
class _NetBlocks:
    """Partitioned reduced admittance, with the IBR block prefactored."""

    y_gg: np.ndarray
    y_gi: np.ndarray
    b: np.ndarray   # inv(Y_ii)
    c: np.ndarray   # inv(Y_ii) @ Y_ig


def _partition(reduced: ReducedNetwork) -> _NetBlocks:
    g, i = reduced.gen_slice, reduced.ibr_slice
    y_ii = reduced.y[i, i]
    try:
        b = np.linalg.inv(y_ii)
    except np.linalg.LinAlgError as exc:
        raise NetworkSolveError("singular IBR sub-block in reduced network") from exc
    return _NetBlocks(
        y_gg=reduced.y[g, g].copy(),
        y_gi=reduced.y[g, i].copy(),
        b=b,
        c=b @ reduced.y[i, g],
    )


@dataclass
class SimulationSetup:
    """Precomputed operating point and machine arrays for one case."""

    case: SystemCase
    pf: netmodel.PowerFlowSolution
    x0: np.ndarray
    h_gen: np.ndarray
    d_gen: np.ndarray
    emf: np.ndarray
    pm: np.ndarray
    delta0: np.ndarray
    p_ref: np.ndarray
    dc_gain: np.ndarray
    dc_tw: np.ndarray
    dc_t1: np.ndarray
    dc_t2: np.ndarray
    dc_pmax: np.ndarray
    dc_src: np.ndarray
    net_pre: ReducedNetwork
    blocks_pre: _NetBlocks
    v_ibr0: np.ndarray

    @property
    def n_gen(self):
        return len(self.h_gen)

    @property
    def n_ibr(self):
        return len(self.p_ref)

    @property
    def omega_s(self):
        return self.case.omega_s

    def fault_blocks(self, fault_bus):
        net = reduce_network(self.case, self.pf, NetworkStage.FAULT_ON, fault_bus)
        return _partition(net)


def prepare(case: SystemCase, pf=None) -> SimulationSetup:
    """Solve the operating point and initialize the classical machine model.

    Internal EMFs and mechanical powers are set from the converged power
    flow so the returned state is an exact equilibrium of the simulation.
    """
    case.validate()
    if pf is None:
        pf = solve_power_flow(case)
    index = case.bus_index()
    gen_buses = [g.bus for g in case.generators]
    if len(set(gen_buses)) != len(gen_buses):
        raise CaseError("generators must sit at distinct buses")

    load_p = np.zeros(len(case.buses))
    load_q = np.zeros(len(case.buses))
    for ld in case.loads:
        load_p[index[ld.bus]] += ld.p
        load_q[index[ld.bus]] += ld.q
    ibr_p = np.zeros(len(case.buses))
    for ib in case.ibrs:
        ibr_p[index[ib.bus]] += ib.p_ref

    y = netmodel._branch_ybus(case)
    s_inj = pf.v * np.conj(y @ pf.v)

    p = len(case.generators)
    emf = np.zeros(p)
    delta0 = np.zeros(p)
    pm = np.zeros(p)
    for g_idx, g in enumerate(case.generators):
        b = index[g.bus]
        if case.buses[b].type == "slack":
            p_gen = s_inj[b].real + load_p[b] - ibr_p[b]
        else:
            p_gen = g.pm
        q_gen = s_inj[b].imag + load_q[b]
        i_term = np.conj(complex(p_gen, q_gen) / pf.v[b])
        e = pf.v[b] + 1j * g.xd_prime * i_term
        emf[g_idx] = abs(e)
        delta0[g_idx] = np.angle(e)
        pm[g_idx] = p_gen

    net_pre = reduce_network(case, pf, NetworkStage.PREFAULT)
    nc = len(case.ibrs)
    x0 = np.concatenate([delta0, np.ones(p), np.zeros(2 * nc)])
    v_ibr0 = np.array([pf.v[index[ib.bus]] for ib in case.ibrs], dtype=complex)

    return SimulationSetup(
        case=case,
        pf=pf,
        x0=x0,
        h_gen=np.array([g.h for g in case.generators]),
        d_gen=np.array([g.d for g in case.generators]),
        emf=emf,
        pm=pm,
        delta0=delta0,
        p_ref=np.array([ib.p_ref for ib in case.ibrs]),
        dc_gain=np.array([ib.dc.gain for ib in case.ibrs]),
        dc_tw=np.array([ib.dc.washout_tc for ib in case.ibrs]),
        dc_t1=np.array([ib.dc.lead_tc for ib in case.ibrs]),
        dc_t2=np.array([ib.dc.lag_tc for ib in case.ibrs]),
        dc_pmax=np.array([ib.dc.p_max for ib in case.ibrs]),
        dc_src=np.array([ib.dc.input_source for ib in case.ibrs], dtype=int),
        net_pre=net_pre,
        blocks_pre=_partition(net_pre),
        v_ibr0=v_ibr0,
    )


def _solve_ibr_network(blocks: _NetBlocks, v_gen, p_inj, v_guess):
    """Fixed-point solve of the IBR constant-power interface.

    Iterates V = B*conj(S/V) - C*V_gen from the warm-start guess; falls back
    to a restart from the passive-network solution before giving up.
    """
    c_vg = blocks.c @ v_gen
    passive = -c_vg
    starts = [v_guess, passive] if v_guess is not None else [passive]
    for start in starts:
        v = start.copy()
        for _ in range(IBR_SOLVE_MAX_ITER):
            i_inj = np.conj(p_inj / v)
            v_new = blocks.b @ i_inj - c_vg
            err = np.max(np.abs(v_new - v))
            v = v_new
            if err <= IBR_SOLVE_TOL:
                if not np.all(np.isfinite(v)):
                    break
                return v
        if not np.all(np.isfinite(v)):
            continue
    raise NetworkSolveError("IBR network fixed point did not converge")


def _rates(setup: SimulationSetup, blocks: _NetBlocks, x, q, v_guess=None):
    """Full state derivative; q may be continuous (relaxed gains)."""
    p = setup.n_gen
    nc = setup.n_ibr
    delta = x[:p]
    omega = x[p:2 * p]
    dc = x[2 * p:].reshape(nc, 2)

    h_sum = setup.h_gen.sum()
    omega_coi = setup.h_gen @ omega / h_sum
    u = omega[setup.dc_src] - omega_coi

    dxw, dxll = filter_rates(setup.dc_gain, setup.dc_tw, setup.dc_t2,
                             dc[:, 0], dc[:, 1], u)
    p_osc = filter_output(setup.dc_gain, setup.dc_t1, setup.dc_t2,
                          setup.dc_pmax, dc[:, 0], dc[:, 1], u)
    p_inj = p_osc * q + setup.p_ref

    v_gen = setup.emf * np.exp(1j * delta)
    v_ibr = _solve_ibr_network(blocks, v_gen, p_inj, v_guess)
    i_gen = blocks.y_gg @ v_gen + blocks.y_gi @ v_ibr
    pe = (v_gen * np.conj(i_gen)).real

    d_delta = setup.omega_s * (omega - 1.0)
    d_omega = (setup.pm - pe - setup.d_gen * (omega - 1.0)) / (2.0 * setup.h_gen)

    dx = np.concatenate([d_delta, d_omega, np.column_stack([dxw, dxll]).ravel()])
    return dx, v_ibr, p_inj


def derivatives(case: SystemCase, reduced: ReducedNetwork, state,
                gamma, setup: SimulationSetup | None = None) -> np.ndarray:
    """State derivative for a given network stage and switching vector."""
    if setup is None:
        setup = prepare(case)
    blocks = _partition(reduced)
    x = np.asarray(state, dtype=float)
    q = np.asarray(gamma, dtype=float)
    dx, _, _ = _rates(setup, blocks, x, q)
    return dx


def simulate(case: SystemCase, events: EventSchedule,
             initial_gamma: tuple[int, ...] | None = None,
             setup: SimulationSetup | None = None,
             step: float = STEP_S) -> Trajectory:
    """Run one disturbance scenario and return the full trajectory.

    The network switches prefault -> fault-on at the fault time and back to
    the postfault stage at clearing; the switching vector in the schedule is
    applied from the activation time on (all controllers off before, unless
    initial_gamma requests a fixed pre-activation policy).
    """
    if setup is None:
        setup = prepare(case)
    nc = setup.n_ibr
    events.validate(nc)

    h = step
    n_steps = int(round(events.end_time / h))
    k_f = int(round(events.fault_time / h)) if events.fault_bus is not None else None
    k_cl = int(round(events.clearing_time / h)) if events.fault_bus is not None else None
    k_a = int(round(events.activation_time / h))
    if k_f is not None and not (0 <= k_f < k_cl <= n_steps):
        raise CaseError("snapped fault/clearing times fall outside the run")

    gamma = np.array(events.gamma if events.gamma else [0] * nc, dtype=float)
    q_pre = np.array(initial_gamma if initial_gamma is not None else [0] * nc, dtype=float)

    blocks_pre = setup.blocks_pre
    blocks_fault = setup.fault_blocks(events.fault_bus) if events.fault_bus is not None else None

    p = setup.n_gen
    t = np.arange(n_steps + 1) * h
    delta = np.empty((n_steps + 1, p))
    omega = np.empty((n_steps + 1, p))
    dcs = np.empty((n_steps + 1, nc, 2))
    ibr_p = np.empty((n_steps + 1, nc))
    ibr_v = np.empty((n_steps + 1, nc), dtype=complex)

    x = setup.x0.copy()
    v_warm = setup.v_ibr0.copy()

    def stage_blocks(k):
        if k_f is not None and k_f <= k < k_cl:
            return blocks_fault
        return blocks_pre

    def q_vec(k):
        return gamma if k >= k_a else q_pre

    for k in range(n_steps + 1):
        blocks = stage_blocks(k)
        q = q_vec(k)
        try:
            k1, v_warm, p_inj = _rates(setup, blocks, x, q, v_warm)
            delta[k] = x[:p]
            omega[k] = x[p:2 * p]
            dcs[k] = x[2 * p:].reshape(nc, 2)
            ibr_p[k] = p_inj
            ibr_v[k] = v_warm
            if k == n_steps:
                break
            k2, v_warm, _ = _rates(setup, blocks, x + 0.5 * h * k1, q, v_warm)
            k3, v_warm, _ = _rates(setup, blocks, x + 0.5 * h * k2, q, v_warm)
            k4, v_warm, _ = _rates(setup, blocks, x + h * k3, q, v_warm)
        except NetworkSolveError as exc:
            # loss of a network solution mid-run means the swing has left the
            # feasible region: report it as an instability with its time
            raise SimulationUnstableError(
                f"network solution lost at t={t[k]:.3f} s ({exc})",
                time=float(t[k])) from exc
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x[:p])) > BLOWUP_ANGLE_RAD:
            raise SimulationUnstableError(
                f"simulation blew up at t={t[k + 1]:.3f} s", time=float(t[k + 1]))

    return Trajectory(
        t=t, delta=delta, omega=omega, dc=dcs, ibr_p=ibr_p, ibr_v=ibr_v,
        events={
            "fault_bus": events.fault_bus,
            "fault_time": None if k_f is None else k_f * h,
            "clearing_time": None if k_cl is None else k_cl * h,
            "activation_time": k_a * h,
            "end_time": n_steps * h,
            "gamma": [int(q) for q in gamma],
            "step": h,
        },
    )


def snapshot_features(traj: Trajectory, case: SystemCase, t: float) -> np.ndarray:
    """Generator speed deviations vs the reference generator at time t (y02)."""
    k = traj.index_of(t)
    ref = case.reference_generator
    return traj.omega[k] - traj.omega[k, ref]
