"""SVG episode plots: trajectories with the predicted CPA point, and clearance over time."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import sim_core as sc
from .config import Config
from .sim_core import Outcome


def episode_svg(trace, cfg: Config, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p = np.vstack([np.zeros((1, 2)), np.asarray(trace.p).reshape(-1, 2)])
    po = np.vstack([np.asarray(trace.spawn_p_o)[None], np.asarray(trace.p_o).reshape(-1, 2)])
    cpa = sc.cpa_predict(trace.spawn_p_o, trace.spawn_v_o)
    cpa_pt = np.asarray(trace.spawn_p_o) + float(cpa.t_cpa) * np.asarray(trace.spawn_v_o)

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4.5))
    ax0.plot(p[:, 0], p[:, 1], "-", color="tab:blue", label="robot")
    ax0.plot(po[:, 0], po[:, 1], "--", color="tab:red", label="obstacle")
    ax0.plot(*cpa_pt, "x", color="k", markersize=8, label="predicted CPA")
    g = cfg.geometry
    box = np.array([[g.half_length, g.half_width], [-g.half_length, g.half_width],
                    [-g.half_length, -g.half_width], [g.half_length, -g.half_width], [g.half_length, g.half_width]])
    for k in (0, len(p) - 1):
        yaw = 0.0 if k == 0 else float(trace.yaw[-1])
        ax0.plot(*(sc.rotate(box, yaw) + p[k]).T, color="tab:blue", alpha=0.5, linewidth=0.8)
    ax0.set_aspect("equal")
    ax0.set_xlabel("x (m)")
    ax0.set_ylabel("y (m)")
    ax0.legend(loc="best", fontsize=8)
    ax0.set_title(f"{Outcome(trace.outcome).name}, t_r = {trace.reaction_time:.2f} s")

    t = np.asarray(trace.t)
    clear = np.minimum(np.asarray(trace.clearance), 5.0)
    ax1.plot(t, clear, color="tab:green")
    ax1.axhline(g.delta_safe, color="k", linestyle=":", label="safety margin")
    ax1.axhline(0.0, color="tab:red", linewidth=0.8)
    if len(t):
        high = np.asarray(trace.mode) == 1
        ax1.fill_between(t, 0, np.where(high, clear.max(initial=0.0), 0.0), color="tab:orange", alpha=0.15,
                         step="mid", label="agile mode")
    ax1.set_xlabel("t (s)")
    ax1.set_ylabel("clearance (m)")
    ax1.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
