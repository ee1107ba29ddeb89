"""Evaluation protocol: fixed episode specs, lane runners, controllers and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import eval_metrics as em
from . import sim_core as sc
from .config import Config
from .env import EpisodeSpec, EpisodeTrace, Lane, expert_accel
from .oracle import OracleController, OracleDodgerParams
from .policy_net import CheckpointError, load_checkpoint
from .sim_core import Kind, Mode, Outcome
from .training.stage2 import high_level_act

EVAL_STREAM = 7
NONTHREAT_GROUP = 99
RT_HIST_EDGES = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5)
ANGLE_BINS = 8


# ------------------------------------------------------------------ controllers


class HierarchicalController:
    """Deterministic deployment of the trained stack: Gaussian mean and argmax mode."""

    def __init__(self, cfg: Config, high, experts, source: dict | None = None):
        self.cfg = cfg
        self.high = high
        self.experts = experts
        self.source = source or {}

    def reset(self, width: int) -> None:
        pass

    def act(self, lane: Lane, obs, ts):
        _, _, _, _, v_cmd, mode, _ = high_level_act(self.high, obs, ts, self.cfg)
        accel = expert_accel(self.experts, _next_hist(lane.hist, v_cmd), lane.robot, mode, self.cfg)
        return v_cmd, mode, accel

    def describe(self) -> dict:
        return {"type": "hierarchical", **self.source}


class ScriptedOracle(OracleController):
    def __init__(self, cfg: Config, params: OracleDodgerParams | None = None):
        super().__init__(cfg, params)

    def describe(self) -> dict:
        return {"type": "oracle", "params": asdict(self.params)}


def _next_hist(hist, v_cmd):
    return np.concatenate([hist[:, 1:], v_cmd[:, None, :]], axis=1)


def checkpoint_paths(checkpoint) -> dict:
    """Resolve the three policy files from a run directory or the high-level checkpoint path."""
    p = Path(checkpoint)
    root = p if p.is_dir() else p.parent
    high = p if p.is_file() else root / "high_level.npz"
    return {"high_level": high, "expert_low": root / "expert_low.npz", "expert_high": root / "expert_high.npz"}


def load_controller(cfg: Config, checkpoint) -> HierarchicalController:
    paths = checkpoint_paths(checkpoint)
    missing = [str(v) for v in paths.values() if not v.exists()]
    if missing:
        raise CheckpointError("missing checkpoint files: " + ", ".join(missing))
    h = cfg.model_hash()
    high, _ = load_checkpoint(paths["high_level"], expected_config_hash=h, kind="high_level")
    low, _ = load_checkpoint(paths["expert_low"], expected_config_hash=h, kind="expert_low")
    hi, _ = load_checkpoint(paths["expert_high"], expected_config_hash=h, kind="expert_high")
    source = {"checkpoints": {k: str(v.resolve()) for k, v in paths.items()},
              "parameter_hashes": {"high_level": high.parameter_hash(), "expert_low": low.parameter_hash(),
                                   "expert_high": hi.parameter_hash()}}
    return HierarchicalController(cfg, high, [low, hi], source)


def controller_from_description(cfg: Config, desc: dict):
    if desc["type"] == "oracle":
        return ScriptedOracle(cfg, OracleDodgerParams(**desc.get("params", {})))
    ctrl = load_controller(cfg, desc["checkpoints"]["high_level"])
    if ctrl.source["parameter_hashes"] != desc.get("parameter_hashes", ctrl.source["parameter_hashes"]):
        raise CheckpointError("checkpoint parameters differ from those recorded in the log")
    return ctrl


# ------------------------------------------------------------------ protocol


def protocol_specs(cfg: Config, seed: int, episodes_per_bin: int | None = None,
                   nonthreat: int | None = None) -> list:
    """Episode specs for every reaction-time bin and the non-threat set, in a fixed order."""
    ec = cfg.eval
    n_bin = ec.episodes_per_bin if episodes_per_bin is None else episodes_per_bin
    n_nt = ec.nonthreat_episodes if nonthreat is None else nonthreat
    if n_bin <= 0:
        raise ValueError("episodes per bin must be positive")
    edges = list(ec.bin_edges)
    seeds = max(1, ec.seeds)
    specs = []
    for b in range(len(edges) - 1):
        band = (edges[b], edges[b + 1])
        for s in range(seeds):
            count = n_bin // seeds + (1 if s < n_bin % seeds else 0)
            for i in range(count):
                specs.append(EpisodeSpec(seed=(seed, EVAL_STREAM, b, s, i), band=band, kind=int(Kind.THREAT),
                                         index=len(specs), group=f"bin{b}:seed{s}"))
    for i in range(n_nt):
        kind = Kind.STILL if i % 2 == 0 else Kind.NON_CENTRAL
        specs.append(EpisodeSpec(seed=(seed, EVAL_STREAM, NONTHREAT_GROUP, 0, i), band=(0.5, 3.5), kind=int(kind),
                                 index=len(specs), group="nonthreat"))
    return specs


def chunk_specs(specs: list, width: int) -> list:
    return [specs[i:i + width] for i in range(0, len(specs), width)]


def first_lane_per_group(specs: list, width: int) -> list:
    """Index of the first lane touching each reaction-time bin and the non-threat set."""
    seen, lanes = set(), []
    for i, ch in enumerate(chunk_specs(specs, width)):
        prefix = {sp.group.split(":")[0] for sp in ch}
        if prefix - seen:
            lanes.append(i)
            seen |= prefix
    return lanes


def run_lane(cfg: Config, controller, specs: list, width: int) -> list:
    """Run one lane of episodes to completion; returns one EpisodeTrace per spec."""
    lane = Lane(cfg, width, rngs=[None] * width, specs=specs, record=True)
    lane.start_eval()
    controller.reset(width)
    traces: list = [None] * width
    max_steps = int(math.ceil(cfg.sim.horizon / cfg.sim.dt)) + 2
    for _ in range(max_steps):
        if not lane.active.any():
            break
        obs, ts = lane.observe_high()
        v_cmd, mode, accel = controller.act(lane, obs, ts)
        v_prev = lane.push_command(v_cmd)
        _, done, outcome = lane.advance(v_cmd, mode, accel, v_prev, ts)
        for i in np.flatnonzero(done & lane.active):
            traces[i] = lane.pop_trace(i, outcome[i], specs[i])
            lane.active[i] = False
    return traces[: len(specs)]


def summarize(trace: EpisodeTrace, cfg: Config) -> em.EpisodeResult:
    spec = trace.spec
    log = trace_view(trace)
    alpha = np.asarray(trace.alpha, dtype=bool)
    mode = np.asarray(trace.mode, dtype=int)
    n = max(len(mode), 1)
    fractions = {"LOW": float(np.sum(mode == Mode.LOW) / n), "HIGH": float(np.sum(mode == Mode.HIGH) / n)}
    post = {"LOW": int(np.sum(alpha & (mode == Mode.LOW))), "HIGH": int(np.sum(alpha & (mode == Mode.HIGH)))}
    tea = tna = power = None
    if alpha.any():
        k = int(np.argmax(alpha))
        t_detect = float(trace.t[k] - cfg.sim.dt)
        try:
            tea = em.compute_tea(log, t_detect, cfg.eval.dt_start)
            tna = em.compute_tna(log, t_detect, cfg.eval.dt_start, sc.idle_torque_effort(cfg.sim))
            power = em.transient_power(log, t_detect, cfg.eval.dt_start)
        except ValueError:
            tea = tna = power = None
    speed = np.linalg.norm(np.asarray(trace.v_cmd), axis=1) if len(trace.v_cmd) else np.zeros(0)
    triggered = bool(np.any(speed > cfg.threat.fp_deadband))
    clear = float(np.min(trace.clearance)) if len(trace.clearance) else float("inf")
    seed_group = int(spec.seed[3]) if spec is not None else 0
    return em.EpisodeResult(
        outcome=int(trace.outcome), reaction_time=float(trace.reaction_time), min_clearance=clear,
        amd=em.compute_amd(log), mode_fractions=fractions, tea=tea, tna=tna, transient_power=power,
        kind=int(trace.kind), xi=bool(trace.xi), triggered=triggered, alpha_ever=bool(alpha.any()),
        post_trigger_steps=post, approach_angle=float(math.atan2(trace.spawn_p_o[1], trace.spawn_p_o[0])),
        path_length=em.path_length(log), seed_group=seed_group, index=spec.index if spec is not None else 0,
    )


def trace_view(trace: EpisodeTrace) -> dict:
    """Metric-ready view of a trace, with the shared initial state prepended."""
    d = {name: getattr(trace, name) for name in ("t", "p", "v_world", "yaw_rate", "channel_torque",
                                                 "channel_vel", "mode", "alpha")}
    d["p_init"] = np.zeros(2)
    d["v_init"] = np.zeros(2)
    return d


@dataclass
class LaneTask:
    cfg: Config
    controller: object
    specs: list
    width: int
    keep_traces: bool = False


def evaluate_lane(task: LaneTask):
    traces = run_lane(task.cfg, task.controller, task.specs, task.width)
    results, features = [], []
    for tr in traces:
        results.append(summarize(tr, task.cfg))
        if tr.kind == Kind.THREAT:
            features.extend(em.episode_features(trace_view(tr), tr.spec.index, task.cfg.eval.feature_window))
    return results, features, (traces if task.keep_traces else None)


def run_protocol(cfg: Config, controller, seed: int, episodes_per_bin=None, nonthreat=None, workers: int = 1,
                 keep_lanes=()):
    """Run the full protocol; returns (results, features, kept lanes of traces, specs).

    ``keep_lanes`` holds indices of lanes whose full traces are returned (for logs and plots).
    """
    from .training.pool import map_ordered

    specs = protocol_specs(cfg, seed, episodes_per_bin, nonthreat)
    width = cfg.eval.lane_size
    chunks = chunk_specs(specs, width)
    tasks = [LaneTask(cfg, controller, ch, width, keep_traces=i in set(keep_lanes)) for i, ch in enumerate(chunks)]
    outs = map_ordered(evaluate_lane, tasks, workers)
    results = [r for o in outs for r in o[0]]
    features = [f for o in outs for f in o[1]]
    kept = [(i, chunks[i], o[2]) for i, o in enumerate(outs) if o[2] is not None]
    return results, features, kept, specs


# ------------------------------------------------------------------ report


@dataclass
class EvalReport:
    controller: dict
    config_hash: str
    seed: int
    bins: list
    false_positive_rate: float
    nonthreat_episodes: int
    high_share_fast: float | None
    low_share_slow: float | None
    mode_histogram: list
    gait_histogram: dict
    tea_mean: float | None
    tna_mean: float | None
    transient_power: dict
    episodes: int
    outcome_counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def mode_shares(results, fast_below=1.5, slow_above=2.5):
    """Pooled share of post-trigger steps using HIGH (fast threats) and LOW (slow threats)."""
    threats = [r for r in results if r.kind == Kind.THREAT]
    fast = [r for r in threats if r.reaction_time < fast_below]
    slow = [r for r in threats if r.reaction_time > slow_above]
    hf = sum(r.post_trigger_steps["HIGH"] for r in fast)
    nf = sum(r.post_trigger_steps["HIGH"] + r.post_trigger_steps["LOW"] for r in fast)
    ls = sum(r.post_trigger_steps["LOW"] for r in slow)
    ns = sum(r.post_trigger_steps["HIGH"] + r.post_trigger_steps["LOW"] for r in slow)
    return (hf / nf if nf else None), (ls / ns if ns else None)


def build_report(cfg: Config, controller, seed: int, results: list, features: list) -> EvalReport:
    threats = [r for r in results if r.kind == Kind.THREAT]
    nonthreat = [r for r in results if not r.xi]
    bins = em.bin_by_reaction_time(threats, cfg.eval.bin_edges)
    high_fast, low_slow = mode_shares(results)
    hist = []
    for r in threats:
        k = em.bin_index(r.reaction_time, RT_HIST_EDGES)
        a = int(((r.approach_angle + math.pi) / (2 * math.pi)) * ANGLE_BINS) % ANGLE_BINS
        hist.append((k, a, r.post_trigger_steps["LOW"], r.post_trigger_steps["HIGH"]))
    cells = {}
    for k, a, lo, hi in hist:
        c = cells.setdefault((k, a), [0, 0, 0])
        c[0] += 1
        c[1] += lo
        c[2] += hi
    mode_hist = [{"rt_lo": RT_HIST_EDGES[k], "rt_hi": RT_HIST_EDGES[k + 1],
                  "angle_lo_deg": -180 + a * 360 / ANGLE_BINS, "angle_hi_deg": -180 + (a + 1) * 360 / ANGLE_BINS,
                  "episodes": v[0], "low_steps": v[1], "high_steps": v[2]}
                 for (k, a), v in sorted(cells.items()) if k is not None]
    gait = {g.value: 0 for g in em.Gait}
    for row in features:
        rho = row["wheel_frac_mean"]
        label = em.Gait.ROLLING if rho > 0.7 else em.Gait.STEPPING if rho < 0.3 else em.Gait.HYBRID
        gait[label.value] += 1
    teas = [r.tea for r in threats if r.tea is not None]
    tnas = [r.tna for r in threats if r.tna is not None]
    powers = [r.transient_power for r in threats if r.transient_power]
    power = {k: float(np.mean([p[k] for p in powers])) for k in em.CHANNEL_GROUPS} if powers else {}
    counts = {o.name: sum(1 for r in results if r.outcome == o) for o in Outcome if o != Outcome.RUNNING}
    return EvalReport(
        controller=controller.describe(), config_hash=cfg.content_hash(), seed=seed, bins=bins,
        false_positive_rate=float(np.mean([r.triggered for r in nonthreat])) if nonthreat else float("nan"),
        nonthreat_episodes=len(nonthreat), high_share_fast=high_fast, low_share_slow=low_slow,
        mode_histogram=mode_hist, gait_histogram=gait,
        tea_mean=float(np.mean(teas)) if teas else None, tna_mean=float(np.mean(tnas)) if tnas else None,
        transient_power=power, episodes=len(results), outcome_counts=counts,
    )


def write_bin_table(report: EvalReport, path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["react_time_s", "asr_mean", "asr_std", "amd_mean_m", "amd_std_m", "episodes"])
        for b in report.bins:
            w.writerow([f"{b['lo']:g}-{b['hi']:g}", b["asr_mean"], b["asr_std"], b["amd_mean"], b["amd_std"], b["n"]])


def write_mode_table(report: EvalReport, path) -> None:
    with Path(path).open("w", newline="") as f:
        fields = ["rt_lo", "rt_hi", "angle_lo_deg", "angle_hi_deg", "episodes", "low_steps", "high_steps"]
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(report.mode_histogram)


def write_results_table(results: list, path) -> None:
    fields = ["index", "kind", "xi", "outcome", "reaction_time", "min_clearance", "amd", "path_length",
              "triggered", "alpha_ever", "tea", "tna", "low_post", "high_post", "seed_group"]
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for r in results:
            w.writerow([r.index, Kind(r.kind).name, int(r.xi), Outcome(r.outcome).name, r.reaction_time,
                        r.min_clearance, r.amd, r.path_length, int(r.triggered), int(r.alpha_ever),
                        "" if r.tea is None else r.tea, "" if r.tna is None else r.tna,
                        r.post_trigger_steps["LOW"], r.post_trigger_steps["HIGH"], r.seed_group])


def write_report(report: EvalReport, results: list, features: list, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "report": out / "report.json", "bins": out / "asr_amd_by_reaction_time.csv",
        "modes": out / "mode_selection.csv", "episodes": out / "episodes.csv", "features": out / "features.csv",
    }
    files["report"].write_text(report.to_json())
    write_bin_table(report, files["bins"])
    write_mode_table(report, files["modes"])
    write_results_table(results, files["episodes"])
    em.export_features(features, files["features"])
    return files


# ------------------------------------------------------------------ scripted start-ups


def scripted_startup(gait: str, cfg: Config, duration: float = 1.0) -> dict:
    """Constant full-envelope start-up from rest under the agile mode.

    ``rolling`` drives along the body x axis (wheel-dominant); ``stepping``
    pushes sideways (leg-dominant).
    """
    s = cfg.sim
    if gait == "rolling":
        cmd = np.array([s.high_accel_x, 0.0, 0.0])
    elif gait == "stepping":
        cmd = np.array([0.0, s.high_accel_y, 0.0])
    else:
        raise ValueError(f"unknown gait {gait!r}")
    state = sc.initial_state(s)
    n = int(round(duration / s.dt))
    rows = {k: [] for k in ("t", "p", "v_world", "yaw_rate", "channel_torque", "channel_vel", "mode")}
    t = 0.0
    for _ in range(n):
        state = sc.step(state, cmd, Mode.HIGH, s, t=t)
        t += s.dt
        rows["t"].append(t)
        rows["p"].append(state.p.copy())
        rows["v_world"].append(state.v_world.copy())
        rows["yaw_rate"].append(float(state.yaw_rate))
        rows["channel_torque"].append(state.channel_torque.copy())
        rows["channel_vel"].append(state.channel_vel.copy())
        rows["mode"].append(int(Mode.HIGH))
    log = {k: np.array(v) for k, v in rows.items()}
    log["p_init"] = np.zeros(2)
    log["v_init"] = np.zeros(2)
    return log


def startup_metrics(cfg: Config, dt_start: float | None = None) -> dict:
    dt_start = cfg.eval.dt_start if dt_start is None else dt_start
    tau_idle = sc.idle_torque_effort(cfg.sim)
    out = {}
    for gait in ("rolling", "stepping"):
        log = scripted_startup(gait, cfg)
        out[gait] = {
            "tea": em.compute_tea(log, 0.0, dt_start),
            "tna": em.compute_tna(log, 0.0, dt_start, tau_idle),
            "power": em.transient_power(log, 0.0, dt_start),
            "gait": em.classify_gait_surrogate(log).value,
        }
    return out
