"""Run lane methods in-process or spread over persistent worker processes.

Lane ``i`` always lives on worker ``i % workers`` and results are returned in lane
order, so the worker count never changes what is computed.
"""

from __future__ import annotations

import multiprocessing as mp
import traceback


def _worker(conn, lanes):
    while True:
        msg = conn.recv()
        if msg is None:
            break
        method, args = msg
        try:
            if method == "__get__":
                out = lanes
            else:
                out = [getattr(lane, method)(*args) for lane in lanes]
            conn.send(("ok", out))
        except Exception:  # forwarded to the parent
            conn.send(("err", traceback.format_exc()))
    conn.close()


class LanePool:
    def __init__(self, lanes: list, workers: int = 1):
        self.n = len(lanes)
        self.workers = max(1, min(int(workers), self.n))
        self._lanes = lanes
        self._procs = []
        self._conns = []
        if self.workers > 1:
            ctx = mp.get_context("fork")
            for k in range(self.workers):
                mine = [lanes[i] for i in range(self.n) if i % self.workers == k]
                parent, child = ctx.Pipe()
                proc = ctx.Process(target=_worker, args=(child, mine), daemon=True)
                proc.start()
                child.close()
                self._procs.append(proc)
                self._conns.append(parent)
            self._lanes = None

    def run(self, method: str, *args) -> list:
        if self.workers == 1:
            return [getattr(lane, method)(*args) for lane in self._lanes]
        for c in self._conns:
            c.send((method, args))
        per_worker = []
        for c in self._conns:
            status, out = c.recv()
            if status != "ok":
                raise RuntimeError(f"lane worker failed:\n{out}")
            per_worker.append(out)
        results = [None] * self.n
        for k, outs in enumerate(per_worker):
            for j, res in enumerate(outs):
                results[k + j * self.workers] = res
        return results

    def lanes(self) -> list:
        if self.workers == 1:
            return self._lanes
        return self._gather()

    def _gather(self) -> list:
        for c in self._conns:
            c.send(("__get__", ()))
        per_worker = []
        for c in self._conns:
            status, out = c.recv()
            if status != "ok":
                raise RuntimeError(out)
            per_worker.append(out)
        lanes = [None] * self.n
        for k, outs in enumerate(per_worker):
            for j, lane in enumerate(outs):
                lanes[k + j * self.workers] = lane
        return lanes

    def close(self) -> None:
        for c in self._conns:
            try:
                c.send(None)
                c.close()
            except (OSError, BrokenPipeError):
                pass
        for p in self._procs:
            p.join(timeout=5)
        self._procs, self._conns = [], []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def map_ordered(fn, items: list, workers: int = 1) -> list:
    """Order-preserving map over independent tasks (used for evaluation lanes)."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = mp.get_context("fork")
    with ctx.Pool(min(workers, len(items))) as pool:
        return pool.map(fn, items, chunksize=1)
