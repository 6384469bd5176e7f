"""Model-based coordination path.

Linearizes the simulation model numerically (with relaxed controller gains),
evaluates the total action of the linear model in closed form from its
eigendecomposition, differentiates it w.r.t. the relaxed gains, and applies
the resulting on/off switching logic. A Lyapunov-equation solver provides an
independent oracle for the closed-form value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import SimulationSetup, Trajectory, _rates, prepare
from .errors import CaseError, LinearTaError, NetworkSolveError
from .netmodel import SystemCase

FD_STATE_STEP = 1e-6
FD_GAIN_STEP = 1e-3
STABILITY_MARGIN = -1e-9
RESONANCE_TOL = 1e-12


@dataclass
class LinearModel:
    """Linear state model with the energy quadratic form.

    State ordering: [angles relative to the reference generator (n_gen - 1),
    speeds (n_gen), controller states (2 per controller)]. Expressing angles
    relative to the reference removes the rotor-angle zero mode, so a damped
    system yields a Hurwitz matrix.
    """

    a: np.ndarray
    q_matrix: np.ndarray
    equilibrium: np.ndarray
    q_hat: tuple[float, ...] = ()
    labels: list[str] = field(default_factory=list)

    @property
    def n(self):
        return self.a.shape[0]


@dataclass
class EigenDecomp:
    eigenvalues: np.ndarray   # complex, 1/s
    vectors: np.ndarray       # right eigenvectors, columns
    modal_x0: np.ndarray      # initial condition in modal coordinates
    modal_q: np.ndarray       # energy form mapped through the eigenvectors


def _reduced_labels(case: SystemCase):
    ref = case.reference_generator
    labels = [f"angle_gen{j}_rel" for j in range(len(case.generators)) if j != ref]
    labels += [f"speed_gen{j}" for j in range(len(case.generators))]
    for l in range(len(case.ibrs)):
        labels += [f"dc{l}_washout", f"dc{l}_leadlag"]
    return labels


def _reduce_state(case: SystemCase, x_full):
    """Full simulation state -> reference-relative reduced coordinates."""
    p = len(case.generators)
    ref = case.reference_generator
    delta = x_full[:p]
    rest = x_full[p:]
    theta = np.delete(delta - delta[ref], ref)
    return np.concatenate([theta, rest])


def _expand_state(case: SystemCase, setup: SimulationSetup, x_red):
    """Reduced coordinates -> full state, pinning the reference angle."""
    p = len(case.generators)
    ref = case.reference_generator
    theta = x_red[:p - 1]
    delta = np.empty(p)
    delta[ref] = setup.delta0[ref]
    delta[[j for j in range(p) if j != ref]] = theta + setup.delta0[ref]
    return np.concatenate([delta, x_red[p - 1:]])


def _reduced_rates(case: SystemCase, setup: SimulationSetup, x_red, q_hat):
    p = len(case.generators)
    ref = case.reference_generator
    x_full = _expand_state(case, setup, x_red)
    dx, _, _ = _rates(setup, setup.blocks_pre, x_full, q_hat)
    d_delta = dx[:p]
    d_theta = np.delete(d_delta - d_delta[ref], ref)
    return np.concatenate([d_theta, dx[p:]])


def energy_quadratic_form(case: SystemCase) -> np.ndarray:
    """Q such that x'Qx equals the oscillation energy of the speed deviations."""
    p = len(case.generators)
    nc = len(case.ibrs)
    h = np.array([g.h for g in case.generators])
    proj = np.eye(p) - np.outer(np.ones(p), h) / h.sum()
    w = np.diag(h * case.omega_s)
    n = (p - 1) + p + 2 * nc
    q = np.zeros((n, n))
    q[p - 1:2 * p - 1, p - 1:2 * p - 1] = proj.T @ w @ proj
    return q


def linearize(case: SystemCase, setup: SimulationSetup, q_hat) -> LinearModel:
    """State matrix by central differences of the nonlinear rate function.

    q_hat holds the relaxed controller gains in [0, 1]; the binary on/off
    vector is recovered at the endpoints.
    """
    q_hat = np.asarray(q_hat, dtype=float)
    if q_hat.shape != (len(case.ibrs),):
        raise CaseError("relaxed gain vector length must match controller count")
    if np.any((q_hat < 0.0) | (q_hat > 1.0)):
        raise CaseError("relaxed gains must lie in [0, 1]")

    x_eq = _reduce_state(case, setup.x0)
    rate_eq = _reduced_rates(case, setup, x_eq, q_hat)
    if np.max(np.abs(rate_eq)) > 1e-6:
        raise CaseError(
            f"operating point is not an equilibrium (max rate {np.max(np.abs(rate_eq)):.2e})")

    n = x_eq.size
    a = np.empty((n, n))
    for k in range(n):
        dx = np.zeros(n)
        dx[k] = FD_STATE_STEP
        f_hi = _reduced_rates(case, setup, x_eq + dx, q_hat)
        f_lo = _reduced_rates(case, setup, x_eq - dx, q_hat)
        a[:, k] = (f_hi - f_lo) / (2.0 * FD_STATE_STEP)
    if not np.all(np.isfinite(a)):
        raise NetworkSolveError("non-finite entry in the linearized state matrix")

    return LinearModel(
        a=a,
        q_matrix=energy_quadratic_form(case),
        equilibrium=x_eq,
        q_hat=tuple(float(v) for v in q_hat),
        labels=_reduced_labels(case),
    )


def state_deviation(case: SystemCase, setup: SimulationSetup,
                    traj: Trajectory, t: float) -> np.ndarray:
    """Trajectory sample mapped into the linear model's deviation coordinates."""
    k = traj.index_of(t)
    x_full = np.concatenate([traj.delta[k], traj.omega[k], traj.dc[k].ravel()])
    return _reduce_state(case, x_full) - _reduce_state(case, setup.x0)


def eigen_decompose(lm: LinearModel, x0) -> EigenDecomp:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (lm.n,):
        raise ValueError("initial-condition dimension does not match the model")
    lam, m = np.linalg.eig(lm.a)
    resid = np.linalg.norm(lm.a @ m - m @ np.diag(lam))
    if resid > 1e-8 * max(np.linalg.norm(lm.a), 1.0):
        raise LinearTaError(f"eigendecomposition residual too large ({resid:.2e})")
    # complex eigenvalues must pair up with their conjugates
    complex_lam = lam[np.abs(lam.imag) > 1e-12]
    for lv in complex_lam:
        match = np.min(np.abs(complex_lam - np.conj(lv)))
        if match > 1e-6 * max(abs(lv), 1.0):
            raise LinearTaError("complex eigenvalues do not occur in conjugate pairs")
    z0 = np.linalg.solve(m, x0.astype(complex))
    g = m.T @ lm.q_matrix @ m
    return EigenDecomp(eigenvalues=lam, vectors=m, modal_x0=z0, modal_q=g)


def eigen_ta(lm: LinearModel, x0) -> float:
    """Closed-form total action of the linear model from x0.

    With modal energy form g = M'QM and modal initial condition z0, the
    integral of x'Qx along x = exp(At) x0 is -sum_ij z0_i z0_j g_ij /
    (lambda_i + lambda_j), which is real for a conjugate-paired spectrum.
    """
    dec = eigen_decompose(lm, x0)
    lam = dec.eigenvalues
    if np.any(lam.real >= STABILITY_MARGIN):
        worst = lam[np.argmax(lam.real)]
        raise LinearTaError(f"unstable or marginal mode {worst:.6f}")
    denom = lam[:, None] + lam[None, :]
    if np.min(np.abs(denom)) < RESONANCE_TOL:
        raise LinearTaError("resonant denominator in the modal sum")
    outer = dec.modal_x0[:, None] * dec.modal_x0[None, :]
    s = -np.sum(outer * dec.modal_q / denom)
    if abs(s.imag) > 1e-8 * max(abs(s), 1e-30):
        raise LinearTaError(f"imaginary residue too large ({s.imag:.2e})")
    return float(s.real)


def solve_lyapunov(a, q) -> np.ndarray:
    """Solve A'P + PA = -Q via the vectorized Kronecker system.

    Independent of the eigendecomposition path: the total action then equals
    x0' P x0.
    """
    a = np.asarray(a, dtype=float)
    q = np.asarray(q, dtype=float)
    n = a.shape[0]
    lhs = np.kron(np.eye(n), a.T) + np.kron(a.T, np.eye(n))
    try:
        vec_p = np.linalg.solve(lhs, -q.ravel(order="F"))
    except np.linalg.LinAlgError as exc:
        raise LinearTaError("singular Kronecker system (A not Hurwitz?)") from exc
    p = vec_p.reshape((n, n), order="F")
    return 0.5 * (p + p.T)


def tas(case: SystemCase, setup: SimulationSetup, q_hat0, x0,
        step: float = FD_GAIN_STEP) -> np.ndarray:
    """Total action sensitivities dS/dq_hat by central differences.

    Probes are clamped to [0, 1], so boundary gains fall back to one-sided
    differences.
    """
    q_hat0 = np.asarray(q_hat0, dtype=float)
    nc = len(case.ibrs)
    out = np.empty(nc)
    for l in range(nc):
        hi = q_hat0.copy()
        lo = q_hat0.copy()
        hi[l] = min(1.0, q_hat0[l] + step)
        lo[l] = max(0.0, q_hat0[l] - step)
        if hi[l] == lo[l]:
            raise CaseError("degenerate sensitivity probe (step too small)")
        s_hi = eigen_ta(linearize(case, setup, hi), x0)
        s_lo = eigen_ta(linearize(case, setup, lo), x0)
        out[l] = (s_hi - s_lo) / (hi[l] - lo[l])
    return out


def mbc_switching(tas_vector, q_current) -> np.ndarray:
    """On/off logic: on where the sensitivity is negative, off where positive,
    unchanged where exactly zero."""
    tas_vector = np.asarray(tas_vector, dtype=float)
    if not np.all(np.isfinite(tas_vector)):
        raise ValueError("sensitivities must be finite")
    q = np.asarray(q_current, dtype=int).copy()
    q[tas_vector < 0.0] = 1
    q[tas_vector > 0.0] = 0
    return q


def linear_model_dump(lm: LinearModel) -> dict:
    """JSON-ready dump of the linear model for offline inspection."""
    lam = np.linalg.eigvals(lm.a)
    order = np.argsort(lam.real)[::-1]
    return {
        "labels": list(lm.labels),
        "q_hat": list(lm.q_hat),
        "a": lm.a.tolist(),
        "q_matrix": lm.q_matrix.tolist(),
        "eigenvalues": [[float(v.real), float(v.imag)] for v in lam[order]],
    }
