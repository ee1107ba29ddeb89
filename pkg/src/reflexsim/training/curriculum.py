"""Success-rate driven obstacle-speed curriculum."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..config import CurriculumConfig


@dataclass
class CurriculumState:
    level: int
    bands: list
    window: deque
    window_size: int
    promote_threshold: float
    promotions: list = field(default_factory=list)

    @classmethod
    def initial(cls, cfg: CurriculumConfig) -> "CurriculumState":
        return cls(level=0, bands=[list(b) for b in cfg.bands], window=deque(maxlen=cfg.window),
                   window_size=cfg.window, promote_threshold=cfg.promote_threshold)

    @property
    def tr_band(self) -> tuple:
        return tuple(self.bands[self.level])

    @property
    def terminal(self) -> bool:
        return self.level == len(self.bands) - 1

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.window)) if self.window else 0.0

    def seen_band(self) -> tuple:
        """Union of every band unlocked so far."""
        return (self.bands[self.level][0], max(b[1] for b in self.bands[: self.level + 1]))


def curriculum_update(cs: CurriculumState, success: bool) -> CurriculumState:
    """Record one episode; promote when a full window meets the threshold. Never demotes."""
    cs.window.append(1.0 if success else 0.0)
    if len(cs.window) == cs.window_size and not cs.terminal:
        rate = cs.success_rate
        if rate >= cs.promote_threshold:
            cs.promotions.append((cs.level, rate))
            cs.level += 1
            cs.window.clear()
    return cs


def sample_band(cs: CurriculumState, rng: np.random.Generator, replay_fraction: float):
    """Band for the next spawn and whether it is the current (promotion-relevant) band.

    A share of episodes replays the easier levels already passed so earlier
    behaviour is not forgotten.
    """
    if cs.level > 0 and rng.uniform() < replay_fraction:
        return cs.seen_band(), False
    return cs.tr_band, True
