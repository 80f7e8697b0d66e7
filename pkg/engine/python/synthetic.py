"""
Synthetic Driving Trace Generator
1 Hz car-following and traffic-light episodes for heterogeneous drivers
"""

import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import ks_2samp

from engine.python.dataset import DISTANCE_CAP, GREEN, RED, YELLOW, future_columns
from engine.python.errors import ContractError

logger = logging.getLogger(__name__)

# Relative power of the three vehicle types driven by the volunteers
VEHICLE_POWER = {"micra": 0.75, "a2": 1.0, "model3": 1.35}


class DriverProfile(BaseModel):
    """Driving style and vehicle of one synthetic client"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    aggressiveness: float = Field(..., gt=0, description="Acceleration scale")
    cruise_speed: float = Field(..., gt=0, description="Preferred speed in m/s")
    vehicle_power: float = Field(..., gt=0)
    reaction_delay: float = Field(..., gt=0, description="Seconds before reacting to a freed road")
    stop_tendency: float = Field(..., gt=0, description="Propensity to stop at yellow and for errands")
    vehicle_type: str = "generic"

    @property
    def gain(self) -> float:
        return self.aggressiveness * self.vehicle_power

    @property
    def max_acceleration(self) -> float:
        return 4.0 * self.gain


def default_profiles(num_clients: int = 10, seed: int = 0) -> List[DriverProfile]:
    """
    Spread of drivers with distinct preferred speeds, styles and vehicles

    Cruise speeds are spaced evenly over 7..15 m/s so client speed
    distributions differ markedly, as with the human drivers.
    """
    rng = np.random.default_rng(seed)
    vehicles = list(VEHICLE_POWER)
    profiles = []
    for i in range(num_clients):
        vehicle = vehicles[i % len(vehicles)]
        spread = i / (num_clients - 1) if num_clients > 1 else 0.5
        profiles.append(DriverProfile(
            aggressiveness=float(rng.uniform(0.5, 1.4)),
            cruise_speed=float(7.0 + 8.0 * spread + rng.uniform(-0.5, 0.5)),
            vehicle_power=VEHICLE_POWER[vehicle],
            reaction_delay=float(rng.uniform(0.5, 2.0)),
            stop_tendency=float(rng.uniform(0.3, 1.0)),
            vehicle_type=vehicle,
        ))
    return profiles


@dataclass
class _TrafficLight:
    distance: float
    green: int
    yellow: int
    red: int
    offset: int
    stops_on_yellow: bool

    def state(self, t: int) -> int:
        phase = (t + self.offset) % (self.green + self.yellow + self.red)
        if phase < self.green:
            return GREEN
        if phase < self.green + self.yellow:
            return YELLOW
        return RED


@dataclass
class _Vehicle:
    gap: float
    speed: float
    cruise: float = 0.0


def generate_synthetic_client(
    profile: DriverProfile,
    duration_s: int,
    seed: int,
    spat_horizon: int = 10,
    client_id: str = "client_00",
) -> pd.DataFrame:
    """
    Simulate one client's trace at 1 Hz

    The target vehicle tracks min(cruise speed, car-following speed,
    stopping speed for a red or yellow light) with gain
    aggressiveness * vehicle_power, never changing speed by more than
    4 * gain m/s per second. Preceding and side vehicles and traffic lights
    appear and disappear stochastically; absent objects use the sentinel
    encoding (distance 100, speed = v_T, light green).

    Args:
        profile: Driver and vehicle
        duration_s: Number of one-second records
        seed: Generator seed; equal (profile, seed) give equal traces
        spat_horizon: Number of future signal-state columns s_TL_f1..
        client_id: Value of the client_id column

    Returns:
        DataFrame in the record schema
    """
    if duration_s < 2 * spat_horizon:
        raise ContractError(f"duration {duration_s}s is shorter than M + H = {2 * spat_horizon}")

    rng = np.random.default_rng(seed)
    gain = profile.gain
    a_max = profile.max_acceleration
    comfort_decel = min(a_max, 1.5 + gain)
    delay = max(1, int(round(profile.reaction_delay)))
    headway = 1.8 / min(max(profile.aggressiveness, 0.3), 2.0)
    cruise_phase = rng.uniform(0.0, 2.0 * math.pi)

    v = 0.0
    steer = 0.0
    heavy_nearby = False
    light: Optional[_TrafficLight] = None
    light_gap = rng.uniform(50.0, 300.0)
    lead: Optional[_Vehicle] = None
    side: Optional[_Vehicle] = None
    stop_request = False
    stop_timer = 0
    desired_history: List[float] = []
    rows = []

    for t in range(duration_s):
        # ---- observe
        has_lead = lead is not None and lead.gap <= DISTANCE_CAP
        has_light = light is not None and light.distance <= DISTANCE_CAP
        has_side = side is not None and side.gap <= DISTANCE_CAP
        d_p = lead.gap if has_lead else DISTANCE_CAP
        v_p = lead.speed if has_lead else v
        d_tl = light.distance if has_light else DISTANCE_CAP
        s_tl = light.state(t) if has_light else GREEN
        futures = [light.state(t + j) if has_light else GREEN for j in range(1, spat_horizon + 1)]
        d_s = side.gap if has_side else DISTANCE_CAP
        v_s = side.speed if has_side else v

        # ---- decide
        desired = profile.cruise_speed * (1.0 + 0.08 * math.sin(2.0 * math.pi * t / 300.0 + cruise_phase))
        if lead is not None:
            safe_gap = 2.0 + headway * v
            desired = min(desired, max(0.0, lead.speed + (lead.gap - safe_gap) / 2.0))
        if has_light:
            state = light.state(t)
            if state == RED or (state == YELLOW and light.stops_on_yellow):
                desired = min(desired, math.sqrt(2.0 * comfort_decel * max(light.distance - 3.0, 0.0)))
        if not stop_request and v > 3.0 and rng.random() < 0.002 * profile.stop_tendency:
            stop_request, stop_timer = True, int(rng.integers(5, 25))
        if stop_request:
            desired = 0.0

        desired_history.append(desired)
        # freed road is taken up only after the reaction delay
        target = min(desired, min(desired_history[-delay - 1:]))
        error = target - v
        accel = float(np.clip(gain * error + rng.normal(0.0, 0.15 * profile.aggressiveness), -a_max, a_max))
        if abs(accel) > abs(error) and np.sign(accel) == np.sign(error):
            accel = error
        v_next = max(0.0, v + accel)
        if target == 0.0 and v_next < 0.3 and v <= a_max:
            v_next = 0.0
        realized = v_next - v

        throttle = float(min(1.0, realized / a_max + 0.05)) if realized > 0 else 0.0
        brake = float(min(1.0, -realized / a_max)) if realized < 0 else 0.0
        steer = float(np.clip(0.6 * steer + rng.normal(0.0, 0.05 * profile.aggressiveness), -1.0, 1.0))

        if rng.random() < 0.01:
            heavy_nearby = not heavy_nearby
        r1 = 0.05 + rng.uniform(0.0, 0.05)
        if has_lead:
            r1 += 0.35 * math.exp(-d_p / 25.0)
        if has_side:
            r1 += 0.15 * math.exp(-d_s / 20.0)
        r2 = 0.1 + rng.uniform(0.0, 0.05) if heavy_nearby else rng.uniform(0.0, 0.02)
        r3 = 0.04 * math.exp(-d_tl / 40.0) + rng.uniform(0.0, 0.005) if has_light else rng.uniform(0.0, 0.003)
        total = r1 + r2 + r3
        if total > 1.0:
            r1, r2, r3 = r1 / total, r2 / total, r3 / total

        row = {
            "client_id": client_id, "t": t, "v_T": v, "v_P": v_p,
            "I_P": int(has_lead), "I_TL": int(has_light), "d_P": d_p, "d_TL": d_tl, "s_TL": s_tl,
            "v_S": v_s, "I_S": int(has_side), "d_S": d_s,
            "throttle": throttle, "brake": brake, "steer": steer,
            "r1": r1, "r2": r2, "r3": r3,
        }
        row.update(zip(future_columns(spat_horizon), futures))
        rows.append(row)

        # ---- advance the world
        travelled = 0.5 * (v + v_next)
        if v_next == 0.0 and stop_request:
            stop_timer -= 1
            if stop_timer <= 0:
                stop_request = False

        if light is not None:
            light.distance -= travelled
            if light.distance < 0.0:
                light, light_gap = None, rng.uniform(150.0, 450.0)
        else:
            light_gap -= travelled
            if light_gap <= 0.0:
                light = _TrafficLight(
                    distance=float(rng.uniform(120.0, 250.0)),
                    green=int(rng.integers(15, 40)),
                    yellow=3,
                    red=int(rng.integers(10, 30)),
                    offset=int(rng.integers(0, 100)),
                    stops_on_yellow=bool(rng.random() < min(profile.stop_tendency, 1.0)),
                )

        if lead is None:
            if rng.random() < 0.03:
                lead = _Vehicle(
                    gap=float(rng.uniform(15.0, 90.0)),
                    speed=float(max(0.0, v + rng.normal(0.0, 2.0))),
                    cruise=float(rng.uniform(6.0, 16.0)),
                )
        else:
            lead_accel = 0.4 * (lead.cruise - lead.speed) + rng.normal(0.0, 0.5)
            if light is not None and light.distance > lead.gap and light.state(t) != GREEN \
                    and light.distance - lead.gap < 40.0:
                lead_accel = -2.5
            lead_next = max(0.0, lead.speed + float(np.clip(lead_accel, -3.0, 2.0)))
            lead.gap = max(1.0, lead.gap + 0.5 * (lead.speed + lead_next) - travelled)
            lead.speed = lead_next
            if lead.gap > 140.0 or rng.random() < 0.01:
                lead = None

        if side is None:
            if rng.random() < 0.05:
                side = _Vehicle(gap=float(rng.uniform(3.0, 60.0)), speed=float(max(0.0, v_next + rng.normal(0.0, 1.0))))
        else:
            side.gap = float(np.clip(side.gap + rng.normal(0.0, 1.5), 0.5, 150.0))
            side.speed = float(max(0.0, v_next + rng.normal(0.0, 1.0)))
            if side.gap > DISTANCE_CAP or rng.random() < 0.05:
                side = None

        v = v_next

    frame = pd.DataFrame(rows)
    logger.debug(f"Generated {duration_s}s trace for {client_id}: mean speed {frame['v_T'].mean():.2f} m/s")
    return frame


def speed_heterogeneity(traces: Sequence[Tuple[str, pd.DataFrame]], threshold: float = 0.1) -> dict:
    """
    Pairwise two-sample KS distances between client speed distributions

    Stopped samples (v_T == 0) are left out, as parking would dominate.

    Returns:
        {"pairs": n, "above_threshold": fraction of pairs with KS > threshold,
         "min": ..., "median": ..., "max": ...}
    """
    moving = [trace.loc[trace["v_T"] > 0.0, "v_T"].to_numpy() for _, trace in traces]
    distances = [
        float(ks_2samp(a, b).statistic)
        for a, b in combinations(moving, 2)
        if len(a) and len(b)
    ]
    if not distances:
        return {"pairs": 0, "above_threshold": 0.0, "min": 0.0, "median": 0.0, "max": 0.0}
    return {
        "pairs": len(distances),
        "above_threshold": float(np.mean(np.asarray(distances) > threshold)),
        "min": float(np.min(distances)),
        "median": float(np.median(distances)),
        "max": float(np.max(distances)),
    }
