"""
Unit tests for the synthetic trace generator
"""

import numpy as np
import pandas as pd
import pytest

from engine.python.dataset import RECORD_COLUMNS, future_columns, validate_trace
from engine.python.errors import ContractError
from engine.python.synthetic import (
    VEHICLE_POWER,
    DriverProfile,
    default_profiles,
    generate_synthetic_client,
    speed_heterogeneity,
)


def _profile(**overrides):
    values = dict(aggressiveness=1.0, cruise_speed=10.0, vehicle_power=1.0, reaction_delay=1.0, stop_tendency=0.5)
    values.update(overrides)
    return DriverProfile(**values)


class TestGenerator:
    """Physics and schema of generated traces"""

    @pytest.fixture(scope="class")
    def trace(self):
        return generate_synthetic_client(_profile(aggressiveness=1.2), 900, seed=4, spat_horizon=5)

    def test_schema_and_validity(self, trace):
        assert list(trace.columns) == RECORD_COLUMNS + future_columns(5)
        assert trace["t"].tolist() == list(range(900))
        validate_trace(trace, "client_00")

    def test_deterministic(self):
        first = generate_synthetic_client(_profile(), 300, seed=9)
        second = generate_synthetic_client(_profile(), 300, seed=9)
        pd.testing.assert_frame_equal(first, second)

    def test_acceleration_bounded(self, trace):
        a_max = _profile(aggressiveness=1.2).max_acceleration
        assert np.max(np.abs(np.diff(trace["v_T"].to_numpy()))) <= a_max + 1e-9

    def test_controls_follow_speed_change(self, trace):
        dv = np.diff(trace["v_T"].to_numpy())
        throttle = trace["throttle"].to_numpy()[:-1]
        brake = trace["brake"].to_numpy()[:-1]
        np.testing.assert_array_equal(throttle > 0, dv > 0)
        np.testing.assert_array_equal(brake > 0, dv < 0)

    def test_cruise_speed_orders_mean_speed(self):
        slow = generate_synthetic_client(_profile(cruise_speed=5.0), 1200, seed=2)
        fast = generate_synthetic_client(_profile(cruise_speed=15.0), 1200, seed=2)
        assert slow["v_T"].mean() < fast["v_T"].mean()

    def test_too_short(self):
        with pytest.raises(ContractError):
            generate_synthetic_client(_profile(), 15, seed=0, spat_horizon=10)


class TestProfiles:
    """Default driver population"""

    def test_population(self):
        profiles = default_profiles(10, seed=0)
        assert len(profiles) == 10
        assert [p.vehicle_type for p in profiles[:3]] == list(VEHICLE_POWER)
        assert all(6.5 <= p.cruise_speed <= 15.5 for p in profiles)

    def test_seeded(self):
        assert default_profiles(4, seed=3) == default_profiles(4, seed=3)


class TestHeterogeneity:
    """Pairwise KS distances between client speed distributions"""

    def test_default_population_is_heterogeneous(self):
        traces = [
            (f"client_{i:02d}", generate_synthetic_client(p, 1200, seed=i))
            for i, p in enumerate(default_profiles(10, seed=0))
        ]
        summary = speed_heterogeneity(traces)
        assert summary["pairs"] == 45
        assert summary["above_threshold"] >= 0.5

    def test_identical_clients(self):
        trace = generate_synthetic_client(_profile(), 300, seed=1)
        summary = speed_heterogeneity([("a", trace), ("b", trace)])
        assert summary["pairs"] == 1
        assert summary["max"] == 0.0
        assert summary["above_threshold"] == 0.0
