import copy

import numpy as np
import pytest

from tacoord import dynamics, mbc
from tacoord.dynamics import EventSchedule, prepare, simulate
from tacoord.errors import CaseError, LinearTaError
from tacoord.mbc import (LinearModel, eigen_ta, linearize, mbc_switching,
                         solve_lyapunov, state_deviation, tas)

from conftest import make_dc, make_two_machine_case


def synthetic_model(a, q=None):
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    q = np.eye(n) if q is None else np.asarray(q, dtype=float)
    return LinearModel(a=a, q_matrix=q, equilibrium=np.zeros(n))


def linear_sim_ta(a, q, x0, t_end=60.0, h=1e-3):
    """Trapezoid-integrated TA of xdot = A x; independent of the eigen path."""
    x = np.asarray(x0, dtype=float).copy()
    e = [x @ q @ x]
    n = int(round(t_end / h))
    for _ in range(n):
        k1 = a @ x
        k2 = a @ (x + 0.5 * h * k1)
        k3 = a @ (x + 0.5 * h * k2)
        k4 = a @ (x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        e.append(x @ q @ x)
    return float(np.trapezoid(e, dx=h))


class TestEigenTa:
    def test_scalar_analytic(self):
        lm = synthetic_model([[-1.0]])
        assert eigen_ta(lm, [1.0]) == pytest.approx(0.5, rel=1e-12)

    def test_zero_initial_condition(self):
        lm = synthetic_model([[-1.0, 0.3], [0.0, -2.0]])
        assert eigen_ta(lm, [0.0, 0.0]) == 0.0

    def test_damped_oscillator_matches_lyapunov(self):
        w, zeta = 3.0, 0.1
        a = np.array([[0.0, 1.0], [-w ** 2, -2 * zeta * w]])
        q = np.diag([0.0, 1.0])
        lm = synthetic_model(a, q)
        rng = np.random.default_rng(7)
        for _ in range(5):
            x0 = rng.normal(size=2)
            p = solve_lyapunov(a, q)
            assert eigen_ta(lm, x0) == pytest.approx(float(x0 @ p @ x0), rel=1e-8)

    def test_unstable_mode_rejected(self):
        lm = synthetic_model([[1e-6]])
        with pytest.raises(LinearTaError):
            eigen_ta(lm, [1.0])

    def test_dimension_checked(self):
        lm = synthetic_model([[-1.0]])
        with pytest.raises(ValueError):
            eigen_ta(lm, [1.0, 2.0])


class TestLyapunov:
    def test_identity_case(self):
        p = solve_lyapunov(-np.eye(3), np.eye(3))
        np.testing.assert_allclose(p, 0.5 * np.eye(3), atol=1e-12)

    def test_residual_on_random_stable(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            m = rng.normal(size=(6, 6))
            a = m - (np.max(np.linalg.eigvals(m).real) + 1.0) * np.eye(6)
            r = rng.normal(size=(6, 6))
            q = r @ r.T
            p = solve_lyapunov(a, q)
            np.testing.assert_allclose(a.T @ p + p @ a, -q, atol=1e-10)
            np.testing.assert_allclose(p, p.T, atol=1e-12)

    def test_matches_numeric_integration(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(4, 4))
        a = m - (np.max(np.linalg.eigvals(m).real) + 0.8) * np.eye(4)
        r = rng.normal(size=(4, 4))
        q = r @ r.T
        x0 = rng.normal(size=4)
        p = solve_lyapunov(a, q)
        s_lyap = float(x0 @ p @ x0)
        s_sim = linear_sim_ta(a, q, x0, t_end=40.0)
        assert s_sim == pytest.approx(s_lyap, rel=5e-3)


class TestLinearize:
    def test_relaxed_zero_gains_decouple_controllers(self, two_machine_case):
        setup = prepare(two_machine_case)
        lm = linearize(two_machine_case, setup, [0.0])
        p = len(two_machine_case.generators)
        speed_rows = slice(p - 1, 2 * p - 1)
        dc_cols = slice(2 * p - 1, lm.n)
        np.testing.assert_allclose(lm.a[speed_rows, dc_cols], 0.0, atol=1e-7)
        lm_on = linearize(two_machine_case, setup, [1.0])
        assert np.max(np.abs(lm_on.a[speed_rows, dc_cols])) > 1e-3

    def test_desk_spectrum_stable(self, desk_case):
        setup = prepare(desk_case)
        lm = linearize(desk_case, setup, [0.0, 0.0, 0.0])
        lam = np.linalg.eigvals(lm.a)
        assert np.max(lam.real) < -1e-9

    def test_jacobian_directional_derivative(self, two_machine_case):
        setup = prepare(two_machine_case)
        lm = linearize(two_machine_case, setup, [0.5])
        x_eq = lm.equilibrium
        rng = np.random.default_rng(2)
        for _ in range(4):
            dx = rng.normal(size=lm.n) * 1e-5
            f_hi = mbc._reduced_rates(two_machine_case, setup, x_eq + dx, np.array([0.5]))
            f_lo = mbc._reduced_rates(two_machine_case, setup, x_eq - dx, np.array([0.5]))
            ref = 0.5 * (f_hi - f_lo)
            num = lm.a @ dx
            assert np.linalg.norm(num - ref) <= 1e-5 * max(np.linalg.norm(ref), 1e-12)

    def test_gain_bounds_enforced(self, two_machine_case):
        setup = prepare(two_machine_case)
        with pytest.raises(CaseError):
            linearize(two_machine_case, setup, [1.5])
        with pytest.raises(CaseError):
            linearize(two_machine_case, setup, [0.2, 0.3])

    def test_energy_form_matches_metric(self, desk_case):
        # x'Qx must reproduce the oscillation-energy formula on speed деviations
        setup = prepare(desk_case)
        lm = linearize(desk_case, setup, [0.0, 0.0, 0.0])
        h = np.array([g.h for g in desk_case.generators])
        ws = desk_case.omega_s
        rng = np.random.default_rng(0)
        p = len(h)
        for _ in range(3):
            dw = rng.normal(scale=1e-3, size=p)
            x = np.zeros(lm.n)
            x[p - 1:2 * p - 1] = dw
            w_coi = h @ dw / h.sum()
            expected = float(np.sum(h * ws * (dw - w_coi) ** 2))
            assert float(x @ lm.q_matrix @ x) == pytest.approx(expected, rel=1e-9)


class TestTas:
    def test_zero_gain_controller_has_zero_sensitivity(self):
        case = make_two_machine_case(gain=10.0)
        case.ibrs.append(copy.deepcopy(case.ibrs[0]))
        case.ibrs[1].bus = 4
        case.ibrs[1].dc = make_dc(gain=0.0)
        # small injections keep the faulted network solvable at depressed voltage
        case.ibrs[0].p_ref = 0.02
        case.ibrs[1].p_ref = 0.02
        setup = prepare(case)
        traj = simulate(case, EventSchedule(2, 0.2, 0.25, 0.5, 2.0, (0, 0)), setup=setup)
        x0 = state_deviation(case, setup, traj, 0.25)
        sens = tas(case, setup, np.zeros(2), x0)
        assert sens[1] == pytest.approx(0.0, abs=1e-9)
        assert abs(sens[0]) > 1e-9

    def test_sign_predicts_ta_change(self, desk_case):
        setup = prepare(desk_case)
        traj = simulate(desk_case, EventSchedule(9, 2.0, 2.05, 2.55, 5.0, (0, 0, 0)),
                        setup=setup)
        x0 = state_deviation(desk_case, setup, traj, 2.05)
        sens = tas(desk_case, setup, np.zeros(3), x0)
        s0 = eigen_ta(linearize(desk_case, setup, [0.0, 0.0, 0.0]), x0)
        for l in range(3):
            q = [0.0, 0.0, 0.0]
            q[l] = 0.1
            s_l = eigen_ta(linearize(desk_case, setup, q), x0)
            if sens[l] < 0:
                assert s_l < s0
            else:
                assert s_l > s0

    def test_symmetric_case_equal_sensitivities(self):
        # mirror-symmetric system, antisymmetric initial condition
        from tacoord.netmodel import Bus, Generator, Ibr, Line, Load, SystemCase
        case = SystemCase(
            buses=[Bus(1, "slack", 1.02), Bus(2, "PV", 1.02), Bus(3, "PQ"), Bus(4, "PQ")],
            lines=[Line("1-3", 1, 3, 0.0, 0.05), Line("2-4", 2, 4, 0.0, 0.05),
                   Line("3-4a", 3, 4, 0.01, 0.1, 0.04), Line("3-4b", 3, 4, 0.01, 0.1, 0.04)],
            generators=[Generator(bus=1, h=8.0, d=10.0, xd_prime=0.1, pm=0.9),
                        Generator(bus=2, h=8.0, d=10.0, xd_prime=0.1, pm=0.9)],
            # each side self-balances (0.9 + 0.1 IBR = 1.0 load): zero tie flow
            loads=[Load(bus=3, p=1.0, q=0.1), Load(bus=4, p=1.0, q=0.1)],
            ibrs=[Ibr(bus=3, p_ref=0.1, dc=make_dc(gain=15.0, input_source=0)),
                  Ibr(bus=4, p_ref=0.1, dc=make_dc(gain=15.0, input_source=1))],
            feature_lines=["3-4a"],
        )
        setup = prepare(case)
        n = 2 * 2 - 1 + 2 * 2
        x0 = np.zeros(n)
        x0[1] = 1e-3   # speed gen0
        x0[2] = -1e-3  # speed gen1 (antisymmetric)
        sens = tas(case, setup, np.zeros(2), x0)
        assert sens[0] == pytest.approx(sens[1], abs=1e-6)


class TestSwitchingLogic:
    def test_all_negative_turns_on(self):
        np.testing.assert_array_equal(mbc_switching([-1.0, -2.0, -3.0], [0, 0, 0]),
                                      [1, 1, 1])

    def test_mixed_signs(self):
        np.testing.assert_array_equal(mbc_switching([1.0, -1.0, 1.0], [1, 1, 1]),
                                      [0, 1, 0])

    def test_zero_keeps_current(self):
        np.testing.assert_array_equal(mbc_switching([0.0, -1.0, 0.0], [1, 0, 0]),
                                      [1, 1, 0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            mbc_switching([np.nan, 0.0], [0, 0])


class TestOracleTriangulation:
    def test_desk_case_three_way(self, desk_case):
        setup = prepare(desk_case)
        traj = simulate(desk_case, EventSchedule(9, 2.0, 2.05, 2.55, 5.0, (0, 0, 0)),
                        setup=setup)
        x0 = state_deviation(desk_case, setup, traj, 2.05)
        for q_hat in ([0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.3, 0.7, 0.5]):
            lm = linearize(desk_case, setup, q_hat)
            s_eig = eigen_ta(lm, x0)
            p = solve_lyapunov(lm.a, lm.q_matrix)
            s_lyap = float(x0 @ p @ x0)
            assert s_eig == pytest.approx(s_lyap, rel=1e-6)
            s_sim = linear_sim_ta(lm.a, lm.q_matrix, x0, t_end=50.0, h=2e-3)
            assert s_sim == pytest.approx(s_eig, rel=1e-2)
