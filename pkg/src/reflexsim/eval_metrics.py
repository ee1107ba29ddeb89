"""Episode metrics: success rate, maneuver distance, transient acceleration and gait surrogates."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .config import LEG_CHANNELS, WHEEL_CHANNELS
from .sim_core import Outcome


class Gait(str, Enum):
    STEPPING = "STEPPING"
    ROLLING = "ROLLING"
    HYBRID = "HYBRID"


CHANNEL_GROUPS = {"wheel": (0, 1), "hip_x": (2, 3), "hip_y": (4, 5), "knee": (6, 7)}

FEATURE_HEADER = [
    "episode", "window", "t_start",
    "speed_mean", "speed_var", "accel_mean", "accel_var", "yaw_rate_mean", "yaw_rate_var",
    "wheel_frac_mean", "wheel_frac_var", "mode_low", "mode_high",
]


@dataclass
class EpisodeResult:
    outcome: int
    reaction_time: float
    min_clearance: float
    amd: float
    mode_fractions: dict
    tea: float | None = None
    tna: float | None = None
    transient_power: dict | None = None
    kind: int = 0
    xi: bool = True
    triggered: bool = False
    alpha_ever: bool = False
    post_trigger_steps: dict = field(default_factory=lambda: {"LOW": 0, "HIGH": 0})
    approach_angle: float = 0.0
    path_length: float = 0.0
    seed_group: int = 0
    index: int = 0

    @property
    def success(self) -> bool:
        return self.outcome == Outcome.SUCCESS


def _get(log, name, default=None):
    if isinstance(log, dict):
        return log.get(name, default)
    return getattr(log, name, default)


def compute_asr(outcomes) -> float:
    """Share of successful trials; accepts Outcome values or booleans."""
    items = list(outcomes)
    if not items:
        raise ValueError("cannot compute a success rate over zero episodes")
    wins = sum(1 for o in items if (o is True) or (not isinstance(o, bool) and int(o) == Outcome.SUCCESS))
    return wins / len(items)


def positions(log) -> np.ndarray:
    p = np.asarray(_get(log, "p"), dtype=float).reshape(-1, 2)
    p_init = _get(log, "p_init")
    if p_init is not None:
        p = np.vstack([np.asarray(p_init, dtype=float)[None], p])
    return p


def compute_amd(log) -> float:
    """Straight-line displacement between the first and last base positions."""
    p = positions(log)
    if len(p) == 0:
        raise ValueError("empty log")
    return float(np.linalg.norm(p[-1] - p[0]))


def path_length(log) -> float:
    p = positions(log)
    if len(p) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def _velocity_series(log):
    t = np.asarray(_get(log, "t"), dtype=float)
    v = np.asarray(_get(log, "v_world"), dtype=float).reshape(-1, 2)
    v_init = _get(log, "v_init")
    if v_init is not None and len(t) >= 1:
        dt = t[1] - t[0] if len(t) > 1 else t[0]
        t = np.concatenate([[t[0] - dt], t])
        v = np.vstack([np.asarray(v_init, dtype=float)[None], v])
    return t, v


def acceleration_series(log):
    """Planar acceleration magnitude from velocity differences, placed at step midpoints."""
    t, v = _velocity_series(log)
    if len(t) < 2:
        return np.zeros(0), np.zeros(0)
    a = np.linalg.norm(np.diff(v, axis=0), axis=1) / np.diff(t)
    return 0.5 * (t[1:] + t[:-1]), a


def _window(t_mid, t_detect, dt_start, t_end):
    if dt_start <= 0:
        raise ValueError("dt_start must be positive")
    if t_detect + dt_start > t_end + 1e-9:
        raise ValueError(f"window [{t_detect}, {t_detect + dt_start}] exceeds log end {t_end}")
    return (t_mid >= t_detect - 1e-9) & (t_mid <= t_detect + dt_start + 1e-9)


def compute_tea(log, t_detect: float, dt_start: float = 0.3) -> float:
    """Trapezoidal mean of |a(t)| over [t_detect, t_detect + dt_start]."""
    t, _ = _velocity_series(log)
    if len(t) < 2:
        raise ValueError("log too short for an acceleration estimate")
    t_mid, a = acceleration_series(log)
    sel = _window(t_mid, t_detect, dt_start, t[-1])
    tm, am = t_mid[sel], a[sel]
    if len(tm) == 0:
        raise ValueError("no samples inside the window")
    if len(tm) == 1:
        return float(am[0])
    return float(np.trapezoid(am, tm) / (tm[-1] - tm[0]))


def transient_effort(log, t_detect: float, dt_start: float) -> float:
    """Mean over the window of the summed absolute actuator torque."""
    t = np.asarray(_get(log, "t"), dtype=float)
    tau = np.abs(np.asarray(_get(log, "channel_torque"), dtype=float))
    sel = (t > t_detect + 1e-9) & (t <= t_detect + dt_start + 1e-9)
    if not sel.any():
        raise ValueError("no torque samples inside the window")
    return float(np.mean(tau[sel].sum(axis=1)))


def tna_from_parts(a_mean: float, tau_transient: float, tau_idle: float) -> float:
    if tau_idle <= 0:
        raise ValueError("idle torque effort must be positive")
    if a_mean == 0:
        return 0.0
    if tau_transient <= 0:
        raise ValueError("transient torque effort must be positive")
    return float(a_mean / (tau_transient / tau_idle))


def compute_tna(log, t_detect: float, dt_start: float, tau_idle: float) -> float:
    """Transient acceleration per unit of torque effort relative to idle."""
    if tau_idle <= 0:
        raise ValueError("idle torque effort must be positive")
    a_mean = compute_tea(log, t_detect, dt_start)
    return tna_from_parts(a_mean, transient_effort(log, t_detect, dt_start), tau_idle)


def transient_power(log, t_detect: float, dt_start: float) -> dict:
    """Mean |tau * qdot| per surrogate channel group over the window."""
    t = np.asarray(_get(log, "t"), dtype=float)
    pw = np.abs(np.asarray(_get(log, "channel_torque")) * np.asarray(_get(log, "channel_vel")))
    sel = (t > t_detect + 1e-9) & (t <= t_detect + dt_start + 1e-9)
    if not sel.any():
        return {k: 0.0 for k in CHANNEL_GROUPS}
    return {k: float(pw[sel][:, list(idx)].sum(axis=1).mean()) for k, idx in CHANNEL_GROUPS.items()}


def wheel_fraction(torque, vel) -> float:
    pw = np.abs(np.asarray(torque, dtype=float) * np.asarray(vel, dtype=float))
    total = pw.sum()
    if total <= 0:
        return 0.0
    return float(pw[..., list(WHEEL_CHANNELS)].sum() / total)


def classify_gait_surrogate(window, rolling: float = 0.7, stepping: float = 0.3, min_steps: int = 10) -> Gait:
    """Three-way gait label from the wheel share of actuator power over a window."""
    torque = np.asarray(_get(window, "channel_torque"), dtype=float)
    vel = np.asarray(_get(window, "channel_vel"), dtype=float)
    if torque.ndim != 2 or len(torque) < min_steps:
        raise ValueError(f"window needs at least {min_steps} steps")
    rho = wheel_fraction(torque, vel)
    if rho > rolling:
        return Gait.ROLLING
    if rho < stepping:
        return Gait.STEPPING
    return Gait.HYBRID


def bin_index(reaction_time: float, edges) -> int | None:
    """Half-open bin [e_k, e_{k+1}) holding ``reaction_time``; None when outside."""
    edges = list(edges)
    for k in range(len(edges) - 1):
        if edges[k] <= reaction_time < edges[k + 1]:
            return k
    return None


def bin_by_reaction_time(results, edges=(0.0, 1.0, 2.0, 3.0)) -> list:
    """Per-bin ASR and AMD, mean and std over evaluation-seed groups."""
    edges = list(edges)
    groups: list = [[] for _ in range(len(edges) - 1)]
    for r in results:
        k = bin_index(r.reaction_time, edges)
        if k is not None:
            groups[k].append(r)
    rows = []
    for k, members in enumerate(groups):
        row = {"lo": edges[k], "hi": edges[k + 1], "n": len(members)}
        seeds = sorted({r.seed_group for r in members})
        asr = [compute_asr([r.success for r in members if r.seed_group == s]) for s in seeds]
        amd = [float(np.mean([r.amd for r in members if r.seed_group == s])) for s in seeds]
        row["asr_per_seed"] = asr
        row["amd_per_seed"] = amd
        row["asr_mean"] = float(np.mean(asr)) if asr else float("nan")
        row["asr_std"] = float(np.std(asr)) if asr else float("nan")
        row["amd_mean"] = float(np.mean(amd)) if amd else float("nan")
        row["amd_std"] = float(np.std(amd)) if amd else float("nan")
        rows.append(row)
    return rows


def episode_features(log, episode: int, window: int = 10) -> list:
    """Feature rows for consecutive non-overlapping windows of one episode."""
    t = np.asarray(_get(log, "t"), dtype=float)
    n = len(t)
    if n == 0:
        return []
    v = np.asarray(_get(log, "v_world"), dtype=float)
    speed = np.linalg.norm(v, axis=1)
    _, a = acceleration_series(log)
    a = a[-n:] if len(a) >= n else np.concatenate([np.zeros(n - len(a)), a])
    yaw_rate = np.asarray(_get(log, "yaw_rate"), dtype=float)
    tau = np.asarray(_get(log, "channel_torque"), dtype=float)
    qd = np.asarray(_get(log, "channel_vel"), dtype=float)
    pw = np.abs(tau * qd)
    tot = pw.sum(axis=1)
    rho = np.where(tot > 0, pw[:, list(WHEEL_CHANNELS)].sum(axis=1) / np.where(tot > 0, tot, 1.0), 0.0)
    mode = np.asarray(_get(log, "mode"), dtype=int)
    rows = []
    for w, s in enumerate(range(0, n - window + 1, window)):
        sl = slice(s, s + window)
        rows.append({
            "episode": episode, "window": w, "t_start": float(t[s]),
            "speed_mean": float(speed[sl].mean()), "speed_var": float(speed[sl].var()),
            "accel_mean": float(a[sl].mean()), "accel_var": float(a[sl].var()),
            "yaw_rate_mean": float(yaw_rate[sl].mean()), "yaw_rate_var": float(yaw_rate[sl].var()),
            "wheel_frac_mean": float(rho[sl].mean()), "wheel_frac_var": float(rho[sl].var()),
            "mode_low": float(np.mean(mode[sl] == 0)), "mode_high": float(np.mean(mode[sl] == 1)),
        })
    return rows


def export_features(logs, path=None, window: int = 10) -> str:
    """CSV of per-window kinematic features; columns are FEATURE_HEADER.

    ``logs`` may be episode logs or pre-computed feature rows. Returns the CSV
    text and writes it to ``path`` when given.
    """
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=FEATURE_HEADER, lineterminator="\n")
    w.writeheader()
    for i, item in enumerate(logs):
        rows = [item] if isinstance(item, dict) and "speed_mean" in item else episode_features(item, i, window)
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


__all__ = [
    "EpisodeResult", "Gait", "FEATURE_HEADER", "compute_asr", "compute_amd", "compute_tea", "compute_tna",
    "bin_by_reaction_time", "classify_gait_surrogate", "export_features", "episode_features",
    "transient_power", "path_length", "bin_index", "LEG_CHANNELS",
]
