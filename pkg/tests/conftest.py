"""Shared fixtures: small synthetic cases plus the session-scoped desk
dataset and trained model used by the pipeline and acceptance tests."""
import numpy as np
import pytest

from tacoord import dataset as ds
from tacoord import approximator, dynamics, netmodel
from tacoord.damping import DcConfig
from tacoord.netmodel import Bus, Generator, Ibr, Line, Load, SystemCase


def make_dc(gain=10.0, washout_tc=10.0, lead_tc=0.1, lag_tc=0.1,
            input_source=0, p_max=0.5):
    return DcConfig(gain=gain, washout_tc=washout_tc, lead_tc=lead_tc,
                    lag_tc=lag_tc, input_source=input_source, p_max=p_max)


def make_two_bus_case(load_p=1.0, load_q=0.0, x=0.1):
    """Slack feeding one PQ load over a single reactance; inert IBR."""
    return SystemCase(
        buses=[Bus(1, "slack", 1.0), Bus(2, "PQ")],
        lines=[Line("1-2", 1, 2, 0.0, x)],
        generators=[Generator(bus=1, h=5.0, d=2.0, xd_prime=0.05, pm=load_p)],
        loads=[Load(bus=2, p=load_p, q=load_q)],
        ibrs=[Ibr(bus=2, p_ref=0.0, dc=make_dc())],
        feature_lines=["1-2"],
    )


def make_two_machine_case(d1=15.0, d2=12.0, gain=10.0, p_max=0.5):
    """Two machines joined by a double-circuit tie with one mid IBR."""
    return SystemCase(
        buses=[Bus(1, "slack", 1.02), Bus(2, "PV", 1.01), Bus(3, "PQ"), Bus(4, "PQ")],
        lines=[Line("1-3", 1, 3, 0.0, 0.05), Line("2-4", 2, 4, 0.0, 0.05),
               Line("3-4a", 3, 4, 0.01, 0.1, 0.04), Line("3-4b", 3, 4, 0.01, 0.1, 0.04)],
        generators=[Generator(bus=1, h=10.0, d=d1, xd_prime=0.1, pm=1.0),
                    Generator(bus=2, h=8.0, d=d2, xd_prime=0.1, pm=1.0)],
        loads=[Load(bus=4, p=1.8, q=0.2)],
        ibrs=[Ibr(bus=3, p_ref=0.2, dc=make_dc(gain=gain, p_max=p_max))],
        feature_lines=["3-4a", "3-4b"],
    )


def make_smib_case(x_line=0.5, pm=0.5):
    """Near-infinite bus (huge inertia, tiny reactance) against one machine."""
    return SystemCase(
        buses=[Bus(1, "slack", 1.0), Bus(2, "PQ")],
        lines=[Line("1-2", 1, 2, 0.0, x_line)],
        generators=[Generator(bus=1, h=1e6, d=0.0, xd_prime=1e-4, pm=0.0),
                    Generator(bus=2, h=4.0, d=0.0, xd_prime=0.25, pm=pm)],
        loads=[],
        ibrs=[Ibr(bus=2, p_ref=0.0, dc=make_dc())],
        feature_lines=["1-2"],
    )


@pytest.fixture
def two_bus_case():
    return make_two_bus_case()


@pytest.fixture
def two_machine_case():
    return make_two_machine_case()


@pytest.fixture
def smib_case():
    return make_smib_case()


@pytest.fixture(scope="session")
def desk_case():
    return netmodel.load_builtin_case("two_area")


@pytest.fixture(scope="session")
def desk_grid():
    """Acceptance grid: the shipped grid plus one condition and one disturbance
    (30 scenarios x 8 combinations = 240 samples)."""
    grid = ds.load_builtin_grid("two_area_grid")
    grid.operating_conditions.append(
        ds.OperatingCondition(load_scale=0.95, gen_scale=0.95,
                              ibr_refs=[0.6, 0.4, 0.55]))
    grid.disturbances.append(ds.Disturbance(fault_bus=5, duration=0.08))
    return grid


@pytest.fixture(scope="session")
def desk_timing():
    return ds.Timing(fault_time=2.0, activation_time=2.55, end_time=30.0)


@pytest.fixture(scope="session")
def desk_dataset(desk_case, desk_grid, desk_timing):
    return ds.collect(desk_case, desk_grid, desk_timing, seed=0, jobs=2,
                      progress=lambda msg: None)


def held_out_scenarios(dataset):
    """Deterministic held-out (condition, disturbance) pairs: every third."""
    pairs = sorted(dataset.scenario_indices())
    return [pair for n, pair in enumerate(pairs) if n % 3 == 1]


def split_by_scenario(dataset):
    """(train_indices, held_out_pairs): held-out scenarios are fully excluded."""
    held = set(held_out_scenarios(dataset))
    conv = set(dataset.converged_indices().tolist())
    train = [i for i, s in enumerate(dataset.samples)
             if (s.condition, s.disturbance) not in held and i in conv]
    return np.array(train, dtype=int), sorted(held)


@pytest.fixture(scope="session")
def desk_split(desk_dataset):
    return split_by_scenario(desk_dataset)


@pytest.fixture(scope="session")
def desk_model(desk_dataset, desk_split):
    train_idx, _ = desk_split
    config = approximator.MlpConfig(
        layer_sizes=[desk_dataset.feature_dim, 64, 64, 1],
        learning_rate=1e-3, epochs=2000, batch_size=32, seed=0, patience=200)
    sub_train, sub_val = ds.make_folds(desk_dataset, 10, 1, 0, seed=0,
                                       indices=train_idx)
    return approximator.fit_on_dataset(config, desk_dataset, sub_train, sub_val)
