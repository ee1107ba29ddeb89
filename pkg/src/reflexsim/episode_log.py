"""Versioned JSON-lines episode logs and bit-exact replay.

Line 1 is a header describing how to regenerate the episode (config, controller,
every spec in the lane and the slot index); each further line is one control
step. Floats are written with ``repr`` precision so values round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import eval_metrics as em
from .config import config_from_dict
from .env import TRACE_FIELDS, EpisodeSpec, EpisodeTrace

SCHEMA = "reflexsim.episode_log"
SCHEMA_VERSION = "1.0"
HEADER_KEYS = ("schema", "version", "config", "config_hash", "controller", "lane_specs", "lane_width", "slot",
               "outcome", "summary")


class LogSchemaError(ValueError):
    pass


class ReplayDivergence(RuntimeError):
    def __init__(self, step: int, field: str, message: str):
        super().__init__(message)
        self.step = step
        self.field = field


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def spec_to_dict(spec: EpisodeSpec) -> dict:
    d = asdict(spec)
    d["seed"] = list(d["seed"])
    d["band"] = list(d["band"])
    return d


def spec_from_dict(d: dict) -> EpisodeSpec:
    return EpisodeSpec(seed=tuple(d["seed"]), band=tuple(d["band"]), kind=d.get("kind"),
                       index=d.get("index", 0), group=d.get("group", ""))


def step_records(trace: EpisodeTrace) -> list:
    """JSON-normalised per-step records of a trace."""
    n = len(trace.t)
    rows = []
    for k in range(n):
        row = {"k": k}
        for name in TRACE_FIELDS:
            row[name] = _plain(getattr(trace, name)[k])
        rows.append(json.loads(json.dumps(row)))
    return rows


def episode_summary(trace: EpisodeTrace) -> dict:
    from .evaluation import trace_view

    view = trace_view(trace)
    return {"amd": em.compute_amd(view), "path_length": em.path_length(view), "steps": len(trace.t),
            "xi": bool(trace.xi), "kind": int(trace.kind), "reaction_time": float(trace.reaction_time)}


def write_episode_log(path, cfg, controller_desc: dict, lane_specs: list, slot: int, width: int,
                      trace: EpisodeTrace) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": SCHEMA, "version": SCHEMA_VERSION, "config": cfg.to_dict(), "config_hash": cfg.content_hash(),
        "controller": controller_desc, "lane_specs": [spec_to_dict(s) for s in lane_specs], "lane_width": width,
        "slot": slot, "outcome": int(trace.outcome), "summary": episode_summary(trace),
    }
    with path.open("w") as f:
        f.write(json.dumps(header, default=_plain) + "\n")
        for row in step_records(trace):
            f.write(json.dumps(row) + "\n")
    return path


def read_episode_log(path):
    """Parse and validate a log; returns (header, steps)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise LogSchemaError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise LogSchemaError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise LogSchemaError(f"bad header in {path}: {exc}") from exc
    if header.get("schema") != SCHEMA:
        raise LogSchemaError(f"{path} is not an episode log")
    major = str(header.get("version", "")).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise LogSchemaError(f"unsupported log version {header.get('version')!r}")
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise LogSchemaError(f"header lacks {missing}")
    steps = []
    for n, line in enumerate(lines[1:]):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogSchemaError(f"step line {n} is not JSON: {exc}") from exc
        absent = [f for f in ("k",) + TRACE_FIELDS if f not in row]
        if absent:
            raise LogSchemaError(f"step line {n} lacks {absent}")
        if row["k"] != n:
            raise LogSchemaError(f"step line {n} carries index {row['k']}")
        steps.append(row)
    return header, steps


@dataclass
class ReplayReport:
    steps: int
    divergent_step: int | None
    divergent_field: str | None
    amd_logged: float
    amd_replayed: float
    trace: EpisodeTrace

    @property
    def ok(self) -> bool:
        return self.divergent_step is None


def replay_episode_log(path) -> ReplayReport:
    """Re-simulate the whole lane from the header and compare the slot step by step."""
    from .evaluation import controller_from_description, run_lane, trace_view

    header, steps = read_episode_log(path)
    cfg = config_from_dict(header["config"])
    if cfg.content_hash() != header["config_hash"]:
        raise LogSchemaError("config snapshot does not match its recorded hash")
    controller = controller_from_description(cfg, header["controller"])
    specs = [spec_from_dict(d) for d in header["lane_specs"]]
    traces = run_lane(cfg, controller, specs, int(header["lane_width"]))
    trace = traces[int(header["slot"])]
    fresh = step_records(trace)
    bad_step, bad_field = None, None
    for k in range(max(len(fresh), len(steps))):
        if k >= len(fresh) or k >= len(steps):
            bad_step, bad_field = k, "length"
            break
        if fresh[k] != steps[k]:
            bad_field = next((f for f in TRACE_FIELDS if fresh[k][f] != steps[k][f]), "k")
            bad_step = k
            break
    if bad_step is None and int(trace.outcome) != int(header["outcome"]):
        bad_step, bad_field = len(steps), "outcome"
    return ReplayReport(steps=len(steps), divergent_step=bad_step, divergent_field=bad_field,
                        amd_logged=float(header["summary"]["amd"]), amd_replayed=em.compute_amd(trace_view(trace)),
                        trace=trace)
