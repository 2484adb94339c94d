"""Scaling sweeps, log-log slope fits, CSV output and the oracle verification suite."""

from __future__ import annotations

import contextlib
import csv
import enum
import gc
import logging
import math
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import plan as _plan
from .backward import backward_causal, backward_full
from .errors import DegenerateDenominator, InsufficientData
from .forward import forward_causal, forward_full
from .plan import default_plan, measure_workspace, normalize_qk
from .reference import (
    augment_constant_feature,
    finite_diff_grads,
    quadratic_la,
    recurrent_la,
    softmax_attention,
)
from .tensor import (
    Fill,
    HeadTensor,
    Layout,
    LinearKernelCoeffs,
    Mask,
    Shape,
    make_tensor,
    max_abs_diff,
)

log = logging.getLogger(__name__)

CSV_HEADER = [
    "impl", "pass", "mask", "B", "H", "N", "D", "L", "workers", "precision",
    "wall_time_s", "peak_transient_scalars", "checksum",
]
FIT_HEADER = ["impl", "pass", "axis", "slope", "intercept", "r2", "points"]

QUADRATIC_MAX_N = 4096
# Above this many scalars in one implementation's sweep, points are timed one at a time.
INTERLEAVE_MAX_SCALARS = 1 << 27


class Impl(enum.Enum):
    FAST = "FastLA"
    QUADRATIC = "QuadraticLA"
    SOFTMAX = "Softmax"
    RECURRENT = "RecurrentLA"


IMPL_FLAGS = {"fast": Impl.FAST, "quad": Impl.QUADRATIC,
              "softmax": Impl.SOFTMAX, "recurrent": Impl.RECURRENT}


class Pass(enum.Enum):
    FORWARD = "Forward"
    BACKWARD = "Backward"


@dataclass
class SweepConfig:
    impls: list[str] = field(default_factory=lambda: ["fast"])
    passes: str = "fwd"
    mask: str = "causal"
    B: int = 4
    H: int = 16
    N: list[int] = field(default_factory=lambda: [1024, 2048, 4096])
    D: list[int] = field(default_factory=lambda: [128])
    sweep_axis: str = "N"
    L: int | None = None
    workers: int | None = None
    precision: str = "f64"
    repeats: int = 5
    seed: int = 0
    normalize: bool = True
    a: float = 1.0
    b: float = 1.0
    mem_budget_scalars: int | None = None
    deterministic: bool = True
    input_layout: str = "sequence"

    def points(self) -> list[tuple[int, int]]:
        """(N, D) pairs in sweep order."""
        if self.sweep_axis == "N":
            if len(self.D) != 1:
                raise ValueError("an N sweep takes a single --D value")
            return [(n, self.D[0]) for n in self.N]
        if self.sweep_axis == "D":
            if len(self.N) != 1:
                raise ValueError("a D sweep takes a single --N value")
            return [(self.N[0], d) for d in self.D]
        raise ValueError(f"sweep axis must be N or D, got {self.sweep_axis!r}")

    def pass_list(self) -> list[Pass]:
        return {"fwd": [Pass.FORWARD], "bwd": [Pass.BACKWARD],
                "both": [Pass.FORWARD, Pass.BACKWARD]}[self.passes]

    def validate(self):
        for name in self.impls:
            if name not in IMPL_FLAGS:
                raise ValueError(f"unknown impl {name!r}")
        if self.passes not in ("fwd", "bwd", "both"):
            raise ValueError(f"unknown pass {self.passes!r}")
        Mask(self.mask)
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.repeats < 3:
            raise ValueError("repeats must be >= 3")
        for n, d in self.points():
            Shape(self.B, self.H, n, d)
            if self.L is not None and d % self.L:
                raise ValueError(f"--L {self.L} does not divide D={d}")
        LinearKernelCoeffs(self.a, self.b)
        Layout(self.input_layout)


@dataclass
class BenchRecord:
    impl: Impl
    pass_: Pass
    mask: Mask
    B: int
    H: int
    N: int
    D: int
    L: int
    workers: int
    precision: str
    wall_time_s: float
    peak_transient_scalars: int
    checksum: float
    repeats: int = 5
    status: str = "ok"

    def row(self) -> list[str]:
        oom = self.status != "ok"
        return [
            self.impl.value, self.pass_.value, self.mask.value,
            str(self.B), str(self.H), str(self.N), str(self.D), str(self.L),
            str(self.workers), self.precision.upper(),
            "OOM" if oom else f"{self.wall_time_s:.9g}",
            "OOM" if oom else str(self.peak_transient_scalars),
            "OOM" if oom else f"{self.checksum:.9g}",
        ]


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    points: list[tuple[float, float]]
    impl: str = ""
    pass_: str = ""
    axis: str = ""

    def row(self) -> list[str]:
        pts = ";".join(f"{x:.9g}:{y:.9g}" for x, y in self.points)
        return [self.impl, self.pass_, self.axis, f"{self.slope:.9g}",
                f"{self.intercept:.9g}", f"{self.r2:.9g}", pts]


# ----------------------------------------------------------------------------
# sweeps


def estimate_scalars(impl: Impl, pass_: Pass, shape: Shape, plan: _plan.BlockPlan) -> int:
    """Predicted peak scalars (inputs + outputs + workspace) of one call."""
    G, N, D = shape.groups, shape.seq_len, shape.dim
    io = 4 * G * N * D + G * N
    if impl is Impl.FAST:
        T = min(plan.chunk_rows, N)
        W = min(plan.workers, G * plan.reduction_blocks)
        work = G * D * D + G * D + G * plan.reduction_blocks * D * T + W * (3 * T * D + D + plan.reduction_blocks)
        if pass_ is Pass.BACKWARD:
            io += 4 * G * N * D
        return io + work
    if impl is Impl.RECURRENT:
        return io + (D + 1) * (D + 1) + 2 * G * N
    return io + N


def _inputs(cfg: SweepConfig, shape: Shape, dtype):
    layout = Layout(cfg.input_layout)
    q, k, v, om = (make_tensor(shape, layout, Fill.UNIFORM, seed=cfg.seed + i, dtype=dtype)
                   for i in range(4))
    if cfg.normalize:
        q, k = normalize_qk(q, k)
    return q, k, v, om


def _checksum(*tensors) -> float:
    return float(sum(np.sum(t.data, dtype=np.float64) for t in tensors))


def _runner_for(impl: Impl, pass_: Pass, mask: Mask, c, plan, q, k, v, om):
    """Callable that executes one timed call and returns the tensors to checksum."""
    causal = mask is Mask.CAUSAL
    if impl is Impl.FAST:
        fwd = forward_causal if causal else forward_full
        if pass_ is Pass.FORWARD:
            return lambda: (fwd(q, k, v, c, plan).O,)
        art = fwd(q, k, v, c, plan)
        bwd = backward_causal if causal else backward_full
        return lambda: tuple(bwd(art, om, c, plan))
    if impl is Impl.QUADRATIC:
        return lambda: (quadratic_la(q, k, v, c, mask)[0],)
    if impl is Impl.SOFTMAX:
        return lambda: (softmax_attention(q, k, v, mask),)
    qa, ka = augment_constant_feature(q), augment_constant_feature(k)
    return lambda: (recurrent_la(qa, ka, v, normalize=True),)


def _supported(impl: Impl, pass_: Pass, mask: Mask, n: int) -> str | None:
    if pass_ is Pass.BACKWARD and impl is not Impl.FAST:
        return "only FastLA has a backward pass"
    if impl is Impl.RECURRENT and mask is not Mask.CAUSAL:
        return "the recurrent form is causal only"
    if impl is Impl.QUADRATIC and n > QUADRATIC_MAX_N:
        return f"QuadraticLA is limited to N <= {QUADRATIC_MAX_N}"
    return None


@contextlib.contextmanager
def _gc_paused():
    """Pause the garbage collector during timed calls, as timeit does."""
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


def _time_rounds(calls, repeats) -> list[list[float]]:
    """``repeats`` timed rounds over all calls, alternating direction each round.

    Interleaving spreads any slow period of the machine over every point
    instead of concentrating it in one, so the per-point median rejects it.
    """
    times = [[] for _ in calls]
    order = list(range(len(calls)))
    with _gc_paused():
        for r in range(repeats):
            for idx in (order if r % 2 == 0 else order[::-1]):
                t0 = time.perf_counter()
                calls[idx]()
                times[idx].append(time.perf_counter() - t0)
    return times


@dataclass
class _Entry:
    base: dict
    shape: Shape
    plan: _plan.BlockPlan
    call: object = None
    warm: object = None
    times: list = field(default_factory=list)


def _entries(cfg: SweepConfig, impl: Impl, mask: Mask) -> list[_Entry]:
    out = []
    for n, d in cfg.points():
        shape = Shape(cfg.B, cfg.H, n, d)
        plan = default_plan(shape, cfg.workers, reduction_blocks=cfg.L,
                            deterministic=cfg.deterministic)
        for pass_ in cfg.pass_list():
            reason = _supported(impl, pass_, mask, n)
            if reason:
                log.info("skipping %s %s N=%d: %s", impl.value, pass_.value, n, reason)
                continue
            base = dict(impl=impl, pass_=pass_, mask=mask, B=cfg.B, H=cfg.H, N=n, D=d,
                        L=plan.reduction_blocks, workers=plan.workers,
                        precision=cfg.precision, repeats=cfg.repeats)
            out.append(_Entry(base, shape, plan))
    return out


def _prepare(entry: _Entry, cfg: SweepConfig, c, dtype):
    q, k, v, om = _inputs(cfg, entry.shape, dtype)
    b = entry.base
    entry.call = _runner_for(b["impl"], b["pass_"], b["mask"], c, entry.plan, q, k, v, om)
    entry.warm = measure_workspace(entry.call)


def _record(entry: _Entry) -> BenchRecord:
    if entry.call is None:
        return BenchRecord(**entry.base, wall_time_s=math.nan, peak_transient_scalars=0,
                           checksum=math.nan, status="OOM-skipped")
    rec = BenchRecord(**entry.base, wall_time_s=statistics.median(entry.times),
                      peak_transient_scalars=entry.warm.peak_transient_scalars,
                      checksum=_checksum(*entry.warm.result))
    log.info("%s %s N=%d D=%d: %.4gs", rec.impl.value, rec.pass_.value, rec.N, rec.D, rec.wall_time_s)
    entry.call = entry.warm = None
    return rec


def run_sweep(cfg: SweepConfig) -> list[BenchRecord]:
    """Time every (impl, point, pass): one warm-up call, then the median of ``repeats``.

    Repeats of one implementation are interleaved across its points when
    their combined inputs fit in ``INTERLEAVE_MAX_SCALARS``; larger sweeps
    time each point on its own.
    """
    cfg.validate()
    mask = Mask(cfg.mask)
    c = LinearKernelCoeffs(cfg.a, cfg.b)
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    records = []
    for impl in (IMPL_FLAGS[name] for name in cfg.impls):
        entries = _entries(cfg, impl, mask)
        live = []
        for e in entries:
            size = estimate_scalars(impl, e.base["pass_"], e.shape, e.plan)
            if cfg.mem_budget_scalars is None or size <= cfg.mem_budget_scalars:
                live.append((e, size))
        if sum(size for _, size in live) <= INTERLEAVE_MAX_SCALARS:
            for e, _ in live:
                _prepare(e, cfg, c, dtype)
            for e, t in zip([e for e, _ in live], _time_rounds([e.call for e, _ in live], cfg.repeats)):
                e.times = t
            records.extend(_record(e) for e in entries)
            continue
        ready = {id(e) for e, _ in live}
        for e in entries:
            if id(e) in ready:
                _prepare(e, cfg, c, dtype)
                e.times = _time_rounds([e.call], cfg.repeats)[0]
            records.append(_record(e))
    return records


def fit_slope(records: list[BenchRecord], axis: str = "N") -> SlopeFit:
    """Least-squares line through (log axis, log wall time) of successful records."""
    pts = sorted((float(getattr(r, axis)), r.wall_time_s) for r in records if r.status == "ok")
    return fit_points(pts, axis=axis,
                      impl=records[0].impl.value if records else "",
                      pass_=records[0].pass_.value if records else "")


def fit_points(points, axis="N", impl="", pass_="") -> SlopeFit:
    xs = [x for x, _ in points]
    if len(points) < 3 or len(set(xs)) < 3:
        raise InsufficientData(f"need >= 3 distinct {axis} values, got {len(set(xs))}")
    lx = np.log([x for x, _ in points])
    ly = np.log([y for _, y in points])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), min(max(r2, 0.0), 1.0),
                    list(zip(lx.tolist(), ly.tolist())), impl, pass_, axis)


def emit_csv(rows, path=None):
    """Write sweep records or slope fits to ``path`` (stdout if None); raises OSError on IO failure."""
    rows = list(rows)
    header = FIT_HEADER if rows and isinstance(rows[0], SlopeFit) else CSV_HEADER
    if path is None:
        _write_rows(sys.stdout, header, rows)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(fh, header, rows)


def _write_rows(fh, header, rows):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow(r.row())


def read_csv(path) -> list[BenchRecord]:
    impls = {i.value: i for i in Impl}
    passes = {p.value: p for p in Pass}
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            oom = row["wall_time_s"] == "OOM"
            out.append(BenchRecord(
                impl=impls[row["impl"]], pass_=passes[row["pass"]], mask=Mask(row["mask"]),
                B=int(row["B"]), H=int(row["H"]), N=int(row["N"]), D=int(row["D"]),
                L=int(row["L"]), workers=int(row["workers"]),
                precision=row["precision"].lower(),
                wall_time_s=math.nan if oom else float(row["wall_time_s"]),
                peak_transient_scalars=0 if oom else int(row["peak_transient_scalars"]),
                checksum=math.nan if oom else float(row["checksum"]),
                status="OOM-skipped" if oom else "ok",
            ))
    return out


# ----------------------------------------------------------------------------
# verification

SUITES = ("forward", "recurrent", "gradients", "plan", "workspace")
COEFF_SET_FORWARD = ((1.0, 1.0), (1.0, 0.5), (0.3, 1.0))
COEFF_SET_GRADIENT = ((1.0, 1.0), (1.0, 0.3))


@dataclass
class VerifyConfig:
    suites: tuple[str, ...] = SUITES
    seed: int = 0
    forward_cases: int = 200
    gradient_cases: int = 100
    recurrent_cases: int = 50
    workers: int = 1
    fd_step: float = 1e-6
    workspace_dim: int = 32
    workspace_lengths: tuple[int, ...] = (1024, 4096, 16384)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    max_deviation: float
    detail: str = ""


@dataclass
class VerifyReport:
    results: list[SuiteResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "suites": [asdict(r) for r in self.results]}


def random_case(rng: np.random.Generator, n: int, d: int, groups: int = 1):
    """Unit-norm q, k rows scaled by 1/2 (|q.k| <= 1/4) plus uniform v and cotangent."""
    shape = Shape(1, groups, n, d)
    seeds = rng.integers(0, 2**31, size=4)
    q, k, v, om = (make_tensor(shape, fill=Fill.UNIFORM, seed=int(s)) for s in seeds)
    q, k = normalize_qk(q, k)
    q, k = (HeadTensor.from_array(0.5 * t.array(), t.layout) for t in (q, k))
    return q, k, v, om


def _suite_forward(cfg: VerifyConfig, rng) -> SuiteResult:
    worst, cases = 0.0, 0
    for case in range(cfg.forward_cases):
        n, d = int(rng.integers(1, 65)), int(rng.integers(1, 33))
        a, b = COEFF_SET_FORWARD[case % len(COEFF_SET_FORWARD)]
        mask = Mask.CAUSAL if case % 2 == 0 else Mask.NONE
        q, k, v, _ = random_case(rng, n, d, groups=int(rng.integers(1, 3)))
        c = LinearKernelCoeffs(a, b)
        plan = _plan.plan_for(q, cfg.workers)
        fast = (forward_causal if mask is Mask.CAUSAL else forward_full)(q, k, v, c, plan)
        ref, _ = quadratic_la(q, k, v, c, mask)
        worst = max(worst, max_abs_diff(fast.O, ref))
        cases += 1
    return SuiteResult("forward", worst <= 1e-10, cases, worst, "max |fast - quadratic| <= 1e-10")


def _suite_recurrent(cfg: VerifyConfig, rng) -> SuiteResult:
    worst = 0.0
    for _ in range(cfg.recurrent_cases):
        n, d = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        q, k, v, _ = random_case(rng, n, d)
        rec = recurrent_la(augment_constant_feature(q), augment_constant_feature(k), v, normalize=True)
        fast = forward_causal(q, k, v, LinearKernelCoeffs(1.0, 1.0), _plan.plan_for(q, cfg.workers))
        worst = max(worst, max_abs_diff(fast.O, rec))
    return SuiteResult("recurrent", worst <= 1e-10, cfg.recurrent_cases, worst,
                       "max |fast - recurrent| <= 1e-10")


def gradient_violation(analytic, fd) -> tuple[float, float]:
    """(max |analytic - fd|, max of |analytic - fd| / (1e-7 + 1e-5 |fd|))."""
    worst_abs, worst_ratio = 0.0, 0.0
    for x, y in zip(analytic, fd):
        xa, ya = x.array(), y.array()
        err = np.abs(xa - ya)
        worst_abs = max(worst_abs, float(err.max()))
        worst_ratio = max(worst_ratio, float((err / (1e-7 + 1e-5 * np.abs(ya))).max()))
    return worst_abs, worst_ratio


def _suite_gradients(cfg: VerifyConfig, rng) -> SuiteResult:
    worst_abs, worst_ratio = 0.0, 0.0
    for case in range(cfg.gradient_cases):
        n, d = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        a, b = COEFF_SET_GRADIENT[case % len(COEFF_SET_GRADIENT)]
        mask = Mask.CAUSAL if case % 2 == 0 else Mask.NONE
        q, k, v, om = random_case(rng, n, d)
        c = LinearKernelCoeffs(a, b)
        plan = _plan.plan_for(q, cfg.workers)
        if mask is Mask.CAUSAL:
            grads = backward_causal(forward_causal(q, k, v, c, plan), om, c, plan)
        else:
            grads = backward_full(forward_full(q, k, v, c, plan), om, c, plan)
        fd = finite_diff_grads(q, k, v, om, c, mask, cfg.fd_step)
        ab, ratio = gradient_violation(grads, fd)
        worst_abs, worst_ratio = max(worst_abs, ab), max(worst_ratio, ratio)
    return SuiteResult("gradients", worst_ratio <= 1.0, cfg.gradient_cases, worst_abs,
                       f"|analytic - fd| <= 1e-7 + 1e-5|fd| (worst ratio {worst_ratio:.3g})")


def _suite_plan(cfg: VerifyConfig, rng) -> SuiteResult:
    q, k, v, om = random_case(rng, 96, 64, groups=3)
    outputs = {}
    for causal in (True, False):
        for L in (1, 2, 4):
            for workers in (1, 4, 8):
                plan = default_plan(Shape(1, 3, 96, 64), workers, reduction_blocks=L).with_(chunk_rows=40)
                fwd, bwd = (forward_causal, backward_causal) if causal else (forward_full, backward_full)
                art = fwd(q, k, v, None, plan)
                grads = bwd(art, om, None, plan)
                outputs[(causal, L, workers)] = [art.O.data] + [g.data for g in grads]
    mismatched = 0
    worst = 0.0
    for (causal, L, workers), arrays in outputs.items():
        base = outputs[(causal, 1, 1)]
        for x, y in zip(arrays, base):
            if not np.array_equal(x, y):
                mismatched += 1
                worst = max(worst, float(np.abs(x - y).max()))
    return SuiteResult("plan", mismatched == 0, len(outputs), worst,
                       "bitwise-identical outputs and gradients for L in {1,2,4}, workers in {1,4,8}")


def workspace_profile(n_values, d=32, groups=1, workers=1):
    """Peak transient scalars of the causal forward and backward passes for each N."""
    fwd, bwd = [], []
    for n in n_values:
        shape = Shape(1, groups, n, d)
        q, k, v, om = (make_tensor(shape, fill=Fill.UNIFORM, seed=i) for i in range(4))
        q, k = normalize_qk(q, k)
        plan = default_plan(shape, workers)
        rep = measure_workspace(lambda: forward_causal(q, k, v, None, plan))
        fwd.append(rep.peak_transient_scalars)
        rep = measure_workspace(lambda: backward_causal(forward_causal(q, k, v, None, plan), om, None, plan))
        bwd.append(rep.peak_transient_scalars)
    return fwd, bwd


def relative_spread(values) -> float:
    return (max(values) - min(values)) / min(values)


def _suite_workspace(cfg: VerifyConfig, rng) -> SuiteResult:
    fwd, bwd = workspace_profile(cfg.workspace_lengths, cfg.workspace_dim, workers=cfg.workers)
    spread = max(relative_spread(fwd), relative_spread(bwd))
    return SuiteResult("workspace", spread <= 0.10, len(cfg.workspace_lengths), spread,
                       f"transient peak spread across N: fwd {fwd}, bwd {bwd}")


_SUITE_FUNCS = {
    "forward": _suite_forward,
    "recurrent": _suite_recurrent,
    "gradients": _suite_gradients,
    "plan": _suite_plan,
    "workspace": _suite_workspace,
}


def verify(cfg: VerifyConfig | None = None) -> VerifyReport:
    """Run the selected oracle suites; a suite that raises counts as failed."""
    cfg = cfg or VerifyConfig()
    results = []
    for name in cfg.suites:
        rng = np.random.default_rng([cfg.seed, SUITES.index(name)])
        try:
            results.append(_SUITE_FUNCS[name](cfg, rng))
        except DegenerateDenominator as exc:
            results.append(SuiteResult(name, False, 0, math.inf, f"error: {exc}"))
    return VerifyReport(results)
