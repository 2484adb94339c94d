"""Thread-pool execution of blocked sweeps.

Every blocked phase runs the same schedule:

    [non-causal only] accumulate full-sequence states     (items)
    for each row chunk, in sweep order:
        sweep the chunk, writing per-block partials      (items)
        -- barrier --
        fold partials into the output in tree order      (groups)
        -- barrier --

Items of one chunk write disjoint ``partial`` slots and groups write disjoint
output rows, so results do not depend on the worker count or on which worker
ran an item.  The kernels release the GIL.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import plan as _plan


def chunk_bounds(n_rows: int, chunk: int, descending: bool) -> list[tuple[int, int]]:
    bounds = [(s, min(s + chunk, n_rows)) for s in range(0, n_rows, chunk)]
    return bounds[::-1] if descending else bounds


class _Scheduler:
    """Hands each worker its share of an index range for one step."""

    def __init__(self, n: int, workers: int, deterministic: bool):
        self.n = n
        self.workers = workers
        self.deterministic = deterministic
        self.fixed = _plan.assign_round_robin(n, workers)
        self._counters = {}
        self._lock = threading.Lock()

    def take(self, worker: int, step):
        if self.deterministic:
            if self.fixed[worker].size:
                yield self.fixed[worker]
            return
        with self._lock:
            counter = self._counters.setdefault(step, itertools.count())
        while True:
            idx = next(counter)
            if idx >= self.n:
                return
            yield np.array([idx], dtype=np.int64)


def run_workers(workers: int, body: Callable[[int, Callable[[], None]], None]):
    """Run ``body(worker, sync)`` on ``workers`` threads; ``sync`` is a full barrier."""
    if workers == 1:
        body(0, lambda: None)
        return
    barrier = threading.Barrier(workers)
    errors: list[BaseException] = []

    def target(w):
        try:
            body(w, barrier.wait)
        except threading.BrokenBarrierError:
            pass
        except BaseException as exc:  # noqa: BLE001 - re-raised on the caller thread
            errors.append(exc)
            barrier.abort()

    threads = [threading.Thread(target=target, args=(w,), daemon=True) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


@dataclass
class BlockedPhase:
    """One blocked sweep: ``sweep(items, i0, i1, descending, update, emit, worker)``
    fills partials; ``combine(groups, i0, i1, worker)`` folds them."""

    sweep: Callable
    combine: Callable
    descending: bool
    causal: bool
    pre_combine: Callable | None = None


def run_phase(plan: _plan.BlockPlan, n_rows: int, phase: BlockedPhase):
    n_items = plan.groups * plan.reduction_blocks
    workers = min(plan.workers, max(n_items, 1))
    items = _Scheduler(n_items, workers, plan.deterministic)
    groups = _Scheduler(plan.groups, workers, plan.deterministic)
    chunks = chunk_bounds(n_rows, min(plan.chunk_rows, n_rows), phase.descending)

    def body(w, sync):
        if not phase.causal:
            for batch in items.take(w, "acc"):
                phase.sweep(batch, 0, n_rows, phase.descending, True, False, w)
            if phase.pre_combine is not None:
                for batch in groups.take(w, "pre"):
                    phase.pre_combine(batch, w)
            sync()
        for c, (i0, i1) in enumerate(chunks):
            for batch in items.take(w, ("sweep", c)):
                phase.sweep(batch, i0, i1, phase.descending, phase.causal, True, w)
            sync()
            for batch in groups.take(w, ("combine", c)):
                phase.combine(batch, i0, i1, w)
            sync()

    run_workers(workers, body)
    return workers


def run_groups(plan: _plan.BlockPlan, fn: Callable[[np.ndarray], None]):
    """Run a per-group kernel over all groups (no inner blocks, no chunking)."""
    workers = min(plan.workers, plan.groups)
    sched = _Scheduler(plan.groups, workers, plan.deterministic)

    def body(w, sync):
        for batch in sched.take(w, "groups"):
            fn(batch)

    run_workers(workers, body)


def blocked_scratch(plan: _plan.BlockPlan, n_rows: int, dtype, *extra_shapes):
    """Transient buffers of one blocked phase, plus any phase-specific state shapes.

    Yields ``(partial, stage, tmp, ctmp, *extra)``: per-block partials for one
    row chunk, a per-worker staging tile, and per-worker reduction scratch.
    """
    G, L, D = plan.groups, plan.reduction_blocks, plan.lanes
    T = min(plan.chunk_rows, n_rows)
    W = min(plan.workers, G * L)
    return _plan.scratch((G, L, D, T), (W, 3, T, D), (W, D), (W, L), *extra_shapes, dtype=dtype)
