"""Command-line entry point: train, eval, replay, oracle and report.

Settings resolve as flags > environment (``REFLEXSIM__SECTION__KEY``) > config file > defaults.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, load_config
from .policy_net import CheckpointError

log = logging.getLogger("reflexsim")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2
STAGES = ("expert-low", "expert-high", "high-level")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ------------------------------------------------------------------ manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seed: int
    stage: str | None = None
    checkpoints: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__
    argv: list = field(default_factory=list)
    status: str = "ok"

    def verify(self) -> bool:
        return config_hash(self.config) == self.config_hash

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"manifest_{self.command}{'_' + self.stage if self.stage else ''}.json"
        path.write_text(json.dumps(self.__dict__, indent=2, default=str))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _manifest(cmd, cfg, args, seed=None, **kw) -> RunManifest:
    return RunManifest(command=cmd, config=cfg.to_dict(), config_hash=cfg.content_hash(),
                       seed=cfg.train.seed if seed is None else seed,
                       argv=list(sys.argv[1:]) if args is None else list(args), **kw)


def _config(ns):
    overrides = {}
    # for eval/oracle --seed is the evaluation seed; folding it into train.seed would change the model hash
    if getattr(ns, "seed", None) is not None and ns.command == "train":
        overrides["train.seed"] = ns.seed
    if getattr(ns, "episodes", None) is not None:
        overrides["eval.episodes_per_bin"] = ns.episodes
    for item in getattr(ns, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        import yaml

        key, value = item.split("=", 1)
        overrides[key] = yaml.safe_load(value)
    return load_config(ns.config, overrides)


# ------------------------------------------------------------------ commands


def cmd_train(ns, argv=None) -> int:
    from .sim_core import Mode
    from .training.stage1 import train_stage1
    from .training.stage2 import train_stage2

    cfg = _config(ns)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest("train", cfg, argv, stage=ns.stage)
    if ns.stage == "high-level":
        low = Path(ns.expert_low) if ns.expert_low else out / "expert_low.npz"
        high = Path(ns.expert_high) if ns.expert_high else out / "expert_high.npz"
        missing = [str(p) for p in (low, high) if not p.exists()]
        if missing:
            raise UsageError("missing expert checkpoints: " + ", ".join(missing))
        man.checkpoints = {"expert_low": str(low), "expert_high": str(high)}
        path = train_stage2(low, high, cfg, out, workers=ns.workers, resume=not ns.fresh)
        man.outputs = {"checkpoint": str(path), "metrics": str(out / "high_level_metrics.csv")}
    else:
        mode = Mode.LOW if ns.stage == "expert-low" else Mode.HIGH
        path = train_stage1(mode, cfg, out, workers=ns.workers, resume=not ns.fresh)
        man.outputs = {"checkpoint": str(path), "metrics": str(path.with_name(path.stem + "_metrics.csv"))}
    man.write(out)
    print(f"checkpoint written to {path}")
    return EXIT_OK


def _run_eval(ns, cfg, controller, command: str, argv) -> int:
    from . import evaluation as ev
    from .episode_log import write_episode_log

    out = Path(ns.out)
    seed = cfg.train.seed if ns.seed is None else ns.seed
    if cfg.eval.episodes_per_bin <= 0:
        raise UsageError("--episodes must be positive")
    specs = ev.protocol_specs(cfg, seed)
    keep = ev.first_lane_per_group(specs, cfg.eval.lane_size) if (ns.logs or ns.svg) else []
    t0 = time.time()
    results, features, kept, _ = ev.run_protocol(cfg, controller, seed, workers=ns.workers, keep_lanes=keep)
    report = ev.build_report(cfg, controller, seed, results, features)
    files = ev.write_report(report, results, features, out)
    logs = []
    for lane_idx, lane_specs, traces in kept:
        for slot, tr in enumerate(traces):
            if tr is None or slot >= ns.logs_per_lane:
                continue
            path = out / "logs" / f"episode_{tr.spec.index:06d}.jsonl"
            write_episode_log(path, cfg, controller.describe(), lane_specs, slot, cfg.eval.lane_size, tr)
            logs.append(path)
            if ns.svg:
                from .plots import episode_svg

                episode_svg(tr, cfg, out / "plots" / f"episode_{tr.spec.index:06d}.svg")
    man = _manifest(command, cfg, argv, seed=seed, checkpoints=controller.describe().get("checkpoints", {}))
    man.outputs = {k: str(v) for k, v in files.items()}
    man.outputs["logs"] = [str(p) for p in logs]
    man.write(out)
    _print_report(report)
    log.info("evaluation took %.1fs", time.time() - t0)
    return EXIT_OK


def cmd_eval(ns, argv=None) -> int:
    from .evaluation import load_controller

    cfg = _config(ns)
    if not ns.checkpoint:
        raise UsageError("--checkpoint is required for eval")
    controller = load_controller(cfg, ns.checkpoint)
    return _run_eval(ns, cfg, controller, "eval", argv)


def cmd_oracle(ns, argv=None) -> int:
    from .evaluation import ScriptedOracle

    cfg = _config(ns)
    return _run_eval(ns, cfg, ScriptedOracle(cfg), "oracle", argv)


def cmd_replay(ns, argv=None) -> int:
    from .episode_log import ReplayDivergence, read_episode_log, replay_episode_log
    from .config import config_from_dict

    rep = replay_episode_log(ns.log)
    header, _ = read_episode_log(ns.log)
    cfg = config_from_dict(header["config"])
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(ns.log).stem
    summary = {"log": str(ns.log), "steps": rep.steps, "divergent_step": rep.divergent_step,
               "divergent_field": rep.divergent_field, "amd_logged": rep.amd_logged,
               "amd_replayed": rep.amd_replayed}
    (out / f"{stem}_replay.json").write_text(json.dumps(summary, indent=2))
    if ns.svg:
        from .plots import episode_svg

        episode_svg(rep.trace, cfg, out / f"{stem}.svg")
    man = _manifest("replay", cfg, argv)
    man.outputs = {"summary": str(out / f"{stem}_replay.json")}
    man.status = "ok" if rep.ok else "diverged"
    man.write(out)
    if not rep.ok:
        raise ReplayDivergence(rep.divergent_step, rep.divergent_field,
                               f"replay diverged at step {rep.divergent_step} (field {rep.divergent_field})")
    print(f"replay matched all {rep.steps} steps; AMD {rep.amd_replayed:.6f} m (logged {rep.amd_logged:.6f} m)")
    return EXIT_OK


def cmd_report(ns, argv=None) -> int:
    path = Path(ns.report)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise UsageError(f"report not found: {path}")
    data = json.loads(path.read_text())
    lines = ["| React Time (s) | ASR | AMD (m) | N |", "|---|---|---|---|"]
    for b in data["bins"]:
        lines.append(f"| {b['lo']:g}-{b['hi']:g} | {b['asr_mean']:.3f} ± {b['asr_std']:.3f} | "
                     f"{b['amd_mean']:.3f} ± {b['amd_std']:.3f} | {b['n']} |")
    lines.append("")
    lines.append(f"false-positive trigger rate: {data['false_positive_rate']:.3f} "
                 f"over {data['nonthreat_episodes']} non-threat episodes")
    for key in ("high_share_fast", "low_share_slow", "tea_mean", "tna_mean"):
        val = data.get(key)
        lines.append(f"{key}: {'n/a' if val is None else f'{val:.3f}'}")
    text = "\n".join(lines) + "\n"
    out = Path(ns.out) if ns.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(text)
    print(text, end="")
    cfg = load_config(None)
    _manifest("report", cfg, argv).write(out)
    return EXIT_OK


def _print_report(report) -> None:
    for b in report.bins:
        print(f"t_r [{b['lo']:g},{b['hi']:g}): ASR {b['asr_mean']:.3f} ± {b['asr_std']:.3f}  "
              f"AMD {b['amd_mean']:.3f} ± {b['amd_std']:.3f} m  (n={b['n']})")
    print(f"false-positive trigger rate {report.false_positive_rate:.3f} (n={report.nonthreat_episodes})")
    print(f"HIGH share t_r<1.5: {report.high_share_fast}  LOW share t_r>2.5: {report.low_share_slow}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reflexsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=str, default=None, help="YAML config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, required=out_required)
        sp.add_argument("--workers", type=int, default=1, help="parallel worker processes (never changes results)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")

    tr = sub.add_parser("train", help="train one stage")
    tr.add_argument("stage", choices=STAGES)
    common(tr)
    tr.add_argument("--expert-low", type=str, default=None)
    tr.add_argument("--expert-high", type=str, default=None)
    tr.add_argument("--fresh", action="store_true", help="ignore saved state and start over")
    tr.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a trained policy"),
                                 ("oracle", cmd_oracle, "evaluate the analytic dodger")):
        ev = sub.add_parser(name, help=helptext)
        common(ev)
        ev.add_argument("--episodes", type=int, default=None, help="episodes per reaction-time bin")
        ev.add_argument("--svg", type=_bool, default=False)
        ev.add_argument("--logs", type=_bool, default=True, help="write episode logs for sample lanes")
        ev.add_argument("--logs-per-lane", type=int, default=5)
        if name == "eval":
            ev.add_argument("--checkpoint", type=str, default=None,
                            help="run directory or high_level.npz (experts are read from the same directory)")
        ev.set_defaults(func=func)

    rp = sub.add_parser("replay", help="re-simulate an episode log and check it bit for bit")
    rp.add_argument("log", type=str)
    rp.add_argument("--out", type=str, required=True)
    rp.add_argument("--svg", type=_bool, default=True)
    rp.set_defaults(func=cmd_replay)

    rep = sub.add_parser("report", help="render a Table-style summary from report.json")
    rep.add_argument("report", type=str)
    rep.add_argument("--out", type=str, default=None)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .episode_log import LogSchemaError, ReplayDivergence
    from .training.common import DivergenceError
    from .training.ppo import PPOError

    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        return ns.func(ns, argv)
    except (UsageError, ConfigError, CheckpointError, LogSchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}; diagnostics at {exc.diagnostics}", file=sys.stderr)
        return EXIT_DIVERGED
    except ReplayDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PPOError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
