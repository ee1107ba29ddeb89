"""Shared trainer plumbing: RNG streams, batch assembly, metrics and divergence checks."""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from pathlib import Path

import numpy as np

from .ppo import Batch, gae


class DivergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: Path | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics


def slot_rngs(seed: int, stage: int, lane: int, width: int):
    """Two independent streams per slot: environment draws and action noise."""
    env, act = [], []
    for slot in range(width):
        ss = np.random.SeedSequence([seed, stage, lane, slot])
        a, b = ss.spawn(2)
        env.append(np.random.default_rng(a))
        act.append(np.random.default_rng(b))
    return env, act


def assemble(results: list, gamma: float, lam: float) -> Batch:
    """GAE per lane, then flatten in (lane, step, slot) order."""
    parts = []
    for r in results:
        adv, ret = gae(r["reward"], r["value"], r["done"], gamma, lam, r["last_value"])
        parts.append((r, adv, ret))

    def cat(key, arrs=None):
        arrs = arrs if arrs is not None else [p[0][key] for p in parts]
        return np.concatenate([a.reshape((-1,) + a.shape[2:]) for a in arrs])

    mode = cat("mode").astype(int) if "mode" in results[0] else None
    head = cat("head_mode").astype(int) if "head_mode" in results[0] else None
    return Batch(
        obs=cat("obs"), act=cat("act"), logp=cat("logp"),
        adv=cat(None, [p[1] for p in parts]), ret=cat(None, [p[2] for p in parts]),
        mask=cat("mask").astype(bool), mode=mode, head_mode=head,
    )


class MetricsWriter:
    def __init__(self, path: Path, fields: list, resume: bool = False):
        self.path = Path(path)
        self.fields = fields
        if not resume or not self.path.exists():
            with self.path.open("w", newline="") as f:
                csv.DictWriter(f, fieldnames=fields).writeheader()

    def write(self, row: dict) -> None:
        with self.path.open("a", newline="") as f:
            csv.DictWriter(f, fieldnames=self.fields, extrasaction="ignore").writerow(
                {k: _fmt(row.get(k, "")) for k in self.fields})

    def truncate_after(self, iteration: int) -> None:
        """Drop rows past ``iteration`` so a resumed run does not duplicate them."""
        if not self.path.exists():
            return
        with self.path.open(newline="") as f:
            rows = [r for r in csv.DictReader(f) if int(r["iteration"]) <= iteration]
        with self.path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.fields)
            w.writeheader()
            w.writerows(rows)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


class DivergenceDetector:
    """Halts when the moving-average episode return collapses or goes non-finite.

    Collapse means the average falls below the best average seen by more than
    ``drop`` times the larger of 1 and the best average's magnitude.
    """

    def __init__(self, window: int, drop: float):
        self.window = deque(maxlen=window)
        self.drop = drop
        self.best = -math.inf

    def update(self, value: float) -> str | None:
        if not math.isfinite(value):
            return f"non-finite mean return {value}"
        self.window.append(value)
        if len(self.window) < self.window.maxlen:
            return None
        ma = float(np.mean(self.window))
        self.best = max(self.best, ma)
        margin = self.drop * max(1.0, abs(self.best))
        if ma < self.best - margin:
            return f"moving-average return {ma:.3f} fell more than {margin:.3f} below best {self.best:.3f}"
        return None


def write_diagnostics(out_dir: Path, name: str, payload: dict) -> Path:
    path = Path(out_dir) / name
    path.write_text(json.dumps(payload, indent=2, default=float))
    return path
