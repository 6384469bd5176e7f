import copy
import json

import numpy as np
import pytest

from tacoord import dynamics, metrics, netmodel
from tacoord.dynamics import EventSchedule, prepare, simulate, snapshot_features
from tacoord.errors import CaseError, SimulationUnstableError

from conftest import make_smib_case, make_two_machine_case


def no_fault_schedule(t_end=2.0, nc=1):
    return EventSchedule(fault_bus=None, fault_time=0.1, clearing_time=0.15,
                         activation_time=0.5, end_time=t_end, gamma=(0,) * nc)


class TestDerivatives:
    def test_equilibrium_rates_vanish(self, two_machine_case, desk_case):
        for case in (two_machine_case, desk_case):
            setup = prepare(case)
            rates = dynamics.derivatives(case, setup.net_pre, setup.x0,
                                         [0] * len(case.ibrs), setup=setup)
            assert np.max(np.abs(rates)) <= 1e-8

    def test_smib_matches_textbook_formula(self):
        case = make_smib_case(x_line=0.5, pm=0.5)
        setup = prepare(case)
        p = 2
        x = setup.x0.copy()
        # swing the test machine away from equilibrium and compare Pe
        for d_angle in (0.1, 0.4, -0.3):
            x = setup.x0.copy()
            x[1] += d_angle
            rates = dynamics.derivatives(case, setup.net_pre, x, [0], setup=setup)
            x_total = 1e-4 + 0.5 + 0.25
            pe = (setup.emf[0] * setup.emf[1] / x_total) * np.sin(
                (x[1] - x[0]))
            d_omega_expected = (setup.pm[1] - pe) / (2 * setup.h_gen[1])
            assert rates[p + 1] == pytest.approx(d_omega_expected, rel=2e-3)

    def test_speed_rise_decelerates_machine(self, two_machine_case):
        # +0.01 pu on one machine: damping plus unchanged Pe force dω < 0
        setup = prepare(two_machine_case)
        x = setup.x0.copy()
        x[2] += 0.01
        rates = dynamics.derivatives(two_machine_case, setup.net_pre, x, [0],
                                     setup=setup)
        assert rates[2] < 0.0


class TestSimulate:
    def test_no_fault_stays_at_equilibrium(self, two_machine_case):
        traj = simulate(two_machine_case, no_fault_schedule(t_end=2.0))
        assert np.max(np.abs(traj.omega - 1.0)) <= 1e-7

    def test_unreached_activation_is_inert(self, two_machine_case):
        ev_zero = EventSchedule(4, 0.2, 0.25, 0.5, 1.5, (0,))
        ev_never = EventSchedule(4, 0.2, 0.25, 1.5, 1.5, (1,))
        t1 = simulate(two_machine_case, ev_zero)
        t2 = simulate(two_machine_case, ev_never)
        assert np.array_equal(t1.delta, t2.delta)
        assert np.array_equal(t1.omega, t2.omega)
        # identical up to (not including) the late activation instant
        assert np.array_equal(t1.ibr_p[:-1], t2.ibr_p[:-1])

    def test_desk_fault_decays(self, desk_case):
        ev = EventSchedule(9, 2.0, 2.05, 2.55, 30.0, (0, 0, 0))
        traj = simulate(desk_case, ev)
        series = metrics.oscillation_energy(traj, desk_case)
        e_cl = series.e[traj.index_of(2.05)]
        assert series.e[-1] < 0.01 * e_cl

    def test_determinism_bitwise(self, two_machine_case):
        ev = EventSchedule(4, 0.2, 0.25, 0.5, 2.0, (1,))
        t1 = simulate(two_machine_case, ev)
        t2 = simulate(two_machine_case, ev)
        for a, b in ((t1.delta, t2.delta), (t1.omega, t2.omega),
                     (t1.dc, t2.dc), (t1.ibr_p, t2.ibr_p)):
            assert np.array_equal(a, b)

    def test_rk4_order(self, two_machine_case):
        # smooth interval (no events): halving h shrinks the end-state
        # difference by ~2^4
        case = make_two_machine_case()
        setup = prepare(case)
        x_perturbed = setup.x0.copy()
        x_perturbed[2] += 0.01

        def end_delta(h):
            ev = no_fault_schedule(t_end=1.0)
            setup_p = prepare(case)
            setup_p.x0[:] = x_perturbed
            traj = simulate(case, ev, setup=setup_p, step=h)
            return traj.delta[-1].copy()

        d1 = end_delta(0.005)
        d2 = end_delta(0.0025)
        d3 = end_delta(0.00125)
        err1 = np.max(np.abs(d1 - d3))
        err2 = np.max(np.abs(d2 - d3))
        # (e1-e3)/(e2-e3) ~ (16 h^4 - h^4/16...)  => ratio close to ~17
        ratio = err1 / err2
        assert 10.0 < ratio < 24.0

    def test_coi_acceleration_matches_total_power(self):
        # with zero damping, sum 2H dω/dt equals total accelerating power
        case = make_two_machine_case(d1=0.0, d2=0.0)
        setup = prepare(case)
        x = setup.x0.copy()
        x[0] += 0.2
        x[1] -= 0.1
        rates, v_ibr, p_inj = dynamics._rates(setup, setup.blocks_pre, x,
                                              np.zeros(1))
        v_gen = setup.emf * np.exp(1j * x[:2])
        i_gen = setup.blocks_pre.y_gg @ v_gen + setup.blocks_pre.y_gi @ v_ibr
        pe = (v_gen * np.conj(i_gen)).real
        total_acc = np.sum(setup.pm - pe)
        assert np.sum(2 * setup.h_gen * rates[2:4]) == pytest.approx(total_acc,
                                                                     abs=1e-8)

    def test_blowup_raises_with_time(self):
        case = make_two_machine_case(d1=-80.0, d2=-80.0)
        ev = EventSchedule(4, 0.2, 0.3, 0.5, 10.0, (0,))
        with pytest.raises(SimulationUnstableError) as err:
            simulate(case, ev)
        assert err.value.time is not None
        assert 0.0 < err.value.time <= 10.0

    def test_switching_causality(self, two_machine_case):
        # q=0 throughout is bitwise identical to a controller with zero gain
        ev = EventSchedule(4, 0.2, 0.25, 0.5, 2.0, (0,))
        t_gated = simulate(two_machine_case, ev)
        unplugged = copy.deepcopy(two_machine_case)
        unplugged.ibrs[0].dc.gain = 0.0
        t_off = simulate(unplugged, ev)
        assert np.array_equal(t_gated.delta, t_off.delta)
        assert np.array_equal(t_gated.omega, t_off.omega)
        assert np.array_equal(t_gated.ibr_p, t_off.ibr_p)

    def test_saturation_limit_respected(self, desk_case):
        ev = EventSchedule(9, 2.0, 2.08, 2.55, 8.0, (1, 1, 1))
        traj = simulate(desk_case, ev)
        for l, ib in enumerate(desk_case.ibrs):
            p_osc = traj.ibr_p[:, l] - ib.p_ref
            assert np.max(np.abs(p_osc)) <= ib.dc.p_max + 1e-12

    def test_event_times_must_order(self, two_machine_case):
        with pytest.raises(CaseError):
            simulate(two_machine_case, EventSchedule(4, 1.0, 0.5, 2.0, 3.0, (0,)))

    def test_gamma_length_checked(self, two_machine_case):
        with pytest.raises(CaseError):
            simulate(two_machine_case, EventSchedule(4, 0.2, 0.25, 0.5, 1.0, (1, 0)))


class TestSnapshots:
    def test_equilibrium_snapshot_zero(self, two_machine_case):
        traj = simulate(two_machine_case, no_fault_schedule(t_end=1.0))
        y02 = snapshot_features(traj, two_machine_case, 0.5)
        np.testing.assert_allclose(y02, 0.0, atol=1e-9)

    def test_reference_entry_always_zero(self, desk_case):
        ev = EventSchedule(9, 2.0, 2.05, 2.55, 5.0, (0, 0, 0))
        traj = simulate(desk_case, ev)
        for t in (2.05, 3.0, 4.5):
            y02 = snapshot_features(traj, desk_case, t)
            assert y02[desk_case.reference_generator] == 0.0

    def test_matches_raw_arrays(self, desk_case):
        ev = EventSchedule(9, 2.0, 2.05, 2.55, 5.0, (0, 0, 0))
        traj = simulate(desk_case, ev)
        k = traj.index_of(2.05)
        expected = traj.omega[k] - traj.omega[k, 0]
        np.testing.assert_array_equal(snapshot_features(traj, desk_case, 2.05),
                                      expected)

    def test_off_grid_time_rejected(self, two_machine_case):
        traj = simulate(two_machine_case, no_fault_schedule(t_end=1.0))
        with pytest.raises(ValueError):
            snapshot_features(traj, two_machine_case, 0.5001)
        with pytest.raises(ValueError):
            snapshot_features(traj, two_machine_case, 99.0)


class TestExport:
    def test_csv_and_sidecar(self, tmp_path, two_machine_case):
        ev = EventSchedule(4, 0.2, 0.25, 0.5, 1.0, (1,))
        traj = simulate(two_machine_case, ev)
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "time"
        assert "gen0_delta" in header and "gen1_omega" in header
        assert "ibr0_p" in header
        assert len(lines) == 1 + len(traj.t)
        # full round-trip precision on a spot value
        row1 = [float(v) for v in lines[1].split(",")]
        assert row1[header.index("gen0_delta")] == traj.delta[0, 0]
        sidecar = json.loads((tmp_path / "traj.csv.events.json").read_text())
        assert sidecar["fault_bus"] == 4
        assert sidecar["gamma"] == [1]
