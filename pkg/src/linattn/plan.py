"""CPU execution plans for the blocked linear-attention kernels.

A plan mirrors the GPU schedule: ``groups`` outer blocks (one per batch*head
slice), ``reduction_blocks`` inner blocks per group that each own a
contiguous slice of the reduced feature index, and ``lanes`` (= D) output
columns handled inside each block.  Work items are executed by a pool of
``workers`` threads; the sequence loop inside an item is always sequential.
"""

from __future__ import annotations

import enum
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

import numpy as np

from .errors import InvalidPhase, InvalidPlan, MeasurementNested
from .tensor import HeadTensor, Shape

DEFAULT_CHUNK_ROWS = 64


class Phase(enum.Enum):
    CONSTANT_FWD = "ConstantFwd"
    LINEAR_FWD = "LinearFwd"
    ALPHA_BWD = "AlphaBwd"
    BETA_BWD = "BetaBwd"
    Q_PREFIX_BWD = "QPrefixBwd"
    V_SUFFIX_BWD = "VSuffixBwd"


# Phases that must fully complete before the keyed phase starts.
PHASE_BARRIERS = {
    Phase.LINEAR_FWD: (Phase.CONSTANT_FWD,),
    Phase.BETA_BWD: (Phase.ALPHA_BWD,),
}


@dataclass(frozen=True)
class BlockPlan:
    groups: int
    reduction_blocks: int
    lanes: int
    workers: int = 1
    deterministic: bool = True
    chunk_rows: int = DEFAULT_CHUNK_ROWS

    def __post_init__(self):
        if self.groups < 1 or self.lanes < 1:
            raise InvalidPlan(f"groups and lanes must be >= 1 ({self.groups}, {self.lanes})")
        if self.reduction_blocks < 1 or self.lanes % self.reduction_blocks:
            raise InvalidPlan(
                f"reduction_blocks={self.reduction_blocks} must divide D={self.lanes}"
            )
        if self.workers < 1:
            raise InvalidPlan(f"workers must be >= 1, got {self.workers}")
        if self.chunk_rows < 1:
            raise InvalidPlan(f"chunk_rows must be >= 1, got {self.chunk_rows}")

    @property
    def block_width(self) -> int:
        return self.lanes // self.reduction_blocks

    def work_item_count(self, phase) -> int:
        phase = _as_phase(phase)
        if phase is Phase.CONSTANT_FWD:
            return self.groups
        return self.groups * self.reduction_blocks

    def with_(self, **changes) -> BlockPlan:
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return BlockPlan(**values)

    def check(self, groups: int, dim: int):
        if groups != self.groups or dim != self.lanes:
            raise InvalidPlan(
                f"plan built for (G={self.groups}, D={self.lanes}), "
                f"inputs have (G={groups}, D={dim})"
            )


class WorkItem(NamedTuple):
    group: int
    block: int
    lo: int
    hi: int


def _largest_divisor_at_most(n: int, cap: int) -> int:
    for d in range(max(1, min(cap, n)), 0, -1):
        if n % d == 0:
            return d
    return 1


def default_workers() -> int:
    return os.cpu_count() or 1


def default_plan(shape: Shape, workers: int | None = None, *,
                 reduction_blocks: int | None = None,
                 deterministic: bool = True) -> BlockPlan:
    """``L = D/32`` rounded down to a divisor of D (at least 1) unless overridden."""
    d = shape.dim
    if reduction_blocks is None:
        reduction_blocks = _largest_divisor_at_most(d, max(1, d // 32))
    return BlockPlan(
        groups=shape.groups,
        reduction_blocks=reduction_blocks,
        lanes=d,
        workers=workers if workers is not None else default_workers(),
        deterministic=deterministic,
    )


def plan_for(t: HeadTensor, workers: int | None = None, **kwargs) -> BlockPlan:
    return default_plan(Shape(1, t.groups, t.seq_len, t.dim), workers, **kwargs)


def _as_phase(phase) -> Phase:
    if isinstance(phase, Phase):
        return phase
    try:
        return Phase(phase)
    except ValueError:
        raise InvalidPhase(f"unknown phase {phase!r}") from None


def enumerate_work(plan: BlockPlan, phase) -> list[WorkItem]:
    """Work items of ``phase`` in combination order (group-major, block-minor)."""
    phase = _as_phase(phase)
    if phase is Phase.CONSTANT_FWD:
        return [WorkItem(g, 0, 0, plan.lanes) for g in range(plan.groups)]
    w = plan.block_width
    return [
        WorkItem(g, l, l * w, (l + 1) * w)
        for g in range(plan.groups)
        for l in range(plan.reduction_blocks)
    ]


def assign_round_robin(n_items: int, workers: int) -> list[np.ndarray]:
    return [np.arange(w, n_items, workers, dtype=np.int64) for w in range(workers)]


def normalize_qk(q: HeadTensor, k: HeadTensor) -> tuple[HeadTensor, HeadTensor]:
    """Scale every query and key row to unit Euclidean norm; zero rows stay zero."""
    return _unit_rows(q), _unit_rows(k)


def _unit_rows(t: HeadTensor) -> HeadTensor:
    x = t.array()
    norms = np.sqrt(np.einsum("gnd,gnd->gn", x, x))[..., None]
    safe = np.where(norms > 0, norms, 1)
    return HeadTensor.from_array(np.where(norms > 0, x / safe, 0), t.layout).astype(t.dtype)


# ----------------------------------------------------------------------------
# workspace accounting


@dataclass
class WorkspaceReport:
    peak_transient_scalars: int = 0
    retained_scalars: int = 0
    phases: dict[str, int] = field(default_factory=dict)
    result: Any = field(default=None, repr=False, compare=False)


class _Tracker:
    def __init__(self):
        self.lock = threading.Lock()
        self.current = 0
        self.peak = 0
        self.retained = 0
        self.phase = None
        self.phase_peaks: dict[str, int] = {}

    def grab(self, n):
        with self.lock:
            self.current += n
            self.peak = max(self.peak, self.current)
            if self.phase is not None:
                self.phase_peaks[self.phase] = max(self.phase_peaks.get(self.phase, 0), self.current)

    def drop(self, n):
        with self.lock:
            self.current -= n


_tracker: _Tracker | None = None
_tracker_lock = threading.Lock()


def measure_workspace(run: Callable[[], Any]) -> WorkspaceReport:
    """Run ``run()`` and report the scalars it drew from the instrumented allocator."""
    global _tracker
    with _tracker_lock:
        if _tracker is not None:
            raise MeasurementNested("measure_workspace calls cannot be nested")
        _tracker = tracker = _Tracker()
    try:
        result = run()
    finally:
        with _tracker_lock:
            _tracker = None
    return WorkspaceReport(tracker.peak, tracker.retained, dict(tracker.phase_peaks), result)


@contextmanager
def phase_scope(phase: Phase):
    tracker = _tracker
    if tracker is None:
        yield
        return
    previous, tracker.phase = tracker.phase, phase.value
    try:
        yield
    finally:
        tracker.phase = previous


@contextmanager
def scratch(*shapes, dtype=np.float64):
    """Zeroed transient buffers, counted against the active measurement."""
    bufs = [np.zeros(s, dtype=dtype) for s in shapes]
    total = sum(b.size for b in bufs)
    tracker = _tracker
    if tracker is not None:
        tracker.grab(total)
    try:
        yield bufs[0] if len(bufs) == 1 else bufs
    finally:
        if tracker is not None:
            tracker.drop(total)


def retained(shape, dtype=np.float64) -> np.ndarray:
    """Zeroed buffer that outlives the call (outputs, saved forward state)."""
    buf = np.zeros(shape, dtype=dtype)
    tracker = _tracker
    if tracker is not None:
        with tracker.lock:
            tracker.retained += buf.size
    return buf
