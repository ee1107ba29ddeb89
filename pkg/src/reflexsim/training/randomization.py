"""Per-episode physical randomisation mapped onto the reduced model."""

from __future__ import annotations

import numpy as np

from ..config import Config
from ..sim_core import Dynamics


def sample_dynamics(rng: np.random.Generator, cfg: Config) -> Dynamics:
    r = cfg.randomization
    gain = rng.uniform(*r.actuator_gain_factor)
    dm = rng.uniform(*r.base_mass_delta)
    mu = rng.uniform(*r.friction_factor)
    force = rng.uniform(*r.external_push, size=2)
    start = rng.uniform(0.0, cfg.sim.horizon)
    return Dynamics(
        gain=np.array(gain),
        mass_scale=np.array((cfg.sim.base_mass + dm) / cfg.sim.base_mass),
        friction=np.array(mu),
        push=force / (cfg.sim.base_mass + dm),
        push_start=np.array(start),
        push_end=np.array(start + r.push_duration),
    )


def sample_ranges(rng: np.random.Generator, cfg: Config) -> dict:
    """Raw draws in their declared units, for range checks."""
    d = sample_dynamics(rng, cfg)
    return {
        "actuator_gain_factor": float(d.gain),
        "base_mass_delta": float(d.mass_scale) * cfg.sim.base_mass - cfg.sim.base_mass,
        "friction_factor": float(d.friction),
        "external_push": (d.push * (cfg.sim.base_mass * float(d.mass_scale))).tolist(),
    }
