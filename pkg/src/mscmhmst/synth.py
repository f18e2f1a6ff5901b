"""Seeded synthetic traffic flows at 5-minute resolution.

flow[s, n] = max(0, level_s * dip_s(n) * profile(u_n - phase_s) + noise)

    u_n        = (n mod 288) / 288, time of day in [0, 1)
    profile(u) = 0.1 + 0.25 (1 - cos 2 pi u) + 0.35 (1 - cos 4 pi u)
                 (morning and evening peaks, midday plateau, night trough)
    level_s    ~ U(150, 300) vehicles per interval
    phase_s    = 0.01 s + U(-0.005, 0.005)
    noise      ~ N(0, (noise * level_s)^2), noise = 0.03
    dip_s(n)   = 0.5 inside an incident, else 1; each sensor-day has an
                 incident with probability 0.1 lasting 6 to 24 steps
"""

from __future__ import annotations

import numpy as np

from .dataio import STEPS_PER_DAY, FlowSeries

FORMULA = __doc__.strip().splitlines()[2:]


def daily_profile(u: np.ndarray) -> np.ndarray:
    return 0.1 + 0.25 * (1 - np.cos(2 * np.pi * u)) + 0.35 * (1 - np.cos(4 * np.pi * u))


def generate(
    sensors: int,
    days: int,
    seed: int,
    noise: float = 0.03,
    incident_rate: float = 0.1,
) -> FlowSeries:
    if sensors < 1 or days < 1:
        raise ValueError("sensors and days must be >= 1")
    rng = np.random.default_rng(seed)
    n_steps = STEPS_PER_DAY * days
    u = (np.arange(n_steps) % STEPS_PER_DAY) / STEPS_PER_DAY
    level = rng.uniform(150.0, 300.0, size=sensors)
    phase = 0.01 * np.arange(sensors) + rng.uniform(-0.005, 0.005, size=sensors)
    flows = level[:, None] * daily_profile(u[None, :] - phase[:, None])
    dip = np.ones((sensors, n_steps))
    for s in range(sensors):
        for d in range(days):
            if rng.random() < incident_rate:
                start = d * STEPS_PER_DAY + int(rng.integers(0, STEPS_PER_DAY))
                dip[s, start : start + int(rng.integers(6, 25))] = 0.5
    flows = flows * dip + rng.normal(0.0, 1.0, size=flows.shape) * (noise * level[:, None])
    flows = np.round(np.maximum(flows, 0.0), 2)
    return FlowSeries(flows, tuple(f"sensor_{i}" for i in range(sensors)))
