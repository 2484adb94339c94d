"""Factorized linear-attention forward pass, O(N D^2) time and O(D^2) state.

With ``f(x) = a + b x`` every output row is ``o_i = f_i / g_i`` where

    f_ij = x1_ij + sum_m q_im x2_ijm        g_i = y1_i + sum_m q_im y2_im

and ``x1, x2, y1, y2`` are running sums over the visible keys.  ``f`` is
built in two phases: the constant term (a-weighted running sum of V), then
the linear term (q-contracted running k (x) v state), split over the plan's
reduction blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels, _runner
from . import plan as _plan
from .errors import DegenerateDenominator
from .plan import BlockPlan, Phase, phase_scope, retained, scratch
from .tensor import HeadTensor, Layout, LinearKernelCoeffs, check_same_shape, relayout

DEFAULT_COEFFS = LinearKernelCoeffs(1.0, 1.0)


def denominator_eps(dtype) -> float:
    return 1e-4 if np.dtype(dtype) == np.float32 else 1e-8


@dataclass
class PrefixState:
    """Running sums after consuming a prefix of (k, v) rows, for one head."""

    x1: np.ndarray  # (D,)   a * sum v
    x2: np.ndarray  # (D, D) x2[j, m] = b * sum k_m v_j
    y1: float       # a * count
    y2: np.ndarray  # (D,)   b * sum k

    @classmethod
    def zeros(cls, dim: int) -> PrefixState:
        return cls(np.zeros(dim), np.zeros((dim, dim)), 0.0, np.zeros(dim))


def prefix_advance(state: PrefixState, k_row, v_row, c: LinearKernelCoeffs) -> PrefixState:
    k_row = np.asarray(k_row, dtype=np.float64)
    v_row = np.asarray(v_row, dtype=np.float64)
    return PrefixState(
        x1=state.x1 + c.a * v_row,
        x2=state.x2 + c.b * np.outer(v_row, k_row),
        y1=state.y1 + c.a,
        y2=state.y2 + c.b * k_row,
    )


@dataclass
class ForwardArtifacts:
    """Everything the backward pass needs: inputs, outputs and denominators."""

    O: HeadTensor
    g: np.ndarray | None      # (G, N) denominators at compute precision
    q: HeadTensor
    k: HeadTensor
    v: HeadTensor
    coeffs: LinearKernelCoeffs
    causal: bool


def _compute_dtype(*tensors):
    return np.result_type(*(t.dtype for t in tensors))


def _operands(q, k, v, dtype):
    qs = np.ascontiguousarray(relayout(q, Layout.SEQUENCE_MAJOR).stored(), dtype=dtype)
    ks = np.ascontiguousarray(relayout(k, Layout.SEQUENCE_MAJOR).stored(), dtype=dtype)
    vf = np.ascontiguousarray(relayout(v, Layout.FEATURE_MAJOR).stored(), dtype=dtype)
    return qs, ks, vf


def constant_term_pass(v: np.ndarray, c: LinearKernelCoeffs, f: np.ndarray,
                       plan: BlockPlan, *, causal: bool = True):
    """Overwrite ``f`` (G, D, N) with the a-weighted running (or total) sum of ``v``."""
    with phase_scope(Phase.CONSTANT_FWD):
        _runner.run_groups(plan, lambda groups: _kernels.fwd_constant(
            v, f, f.dtype.type(c.a), groups, causal))


def denominator_pass(q: np.ndarray, k: np.ndarray, c: LinearKernelCoeffs,
                     den: np.ndarray, plan: BlockPlan, *, causal: bool = True):
    """Fill ``den`` (G, N) with ``g_i``; uses a (G, D) running key sum as scratch."""
    G, _, D = q.shape
    with phase_scope(Phase.CONSTANT_FWD), scratch((G, D), dtype=q.dtype) as y2:
        _runner.run_groups(plan, lambda groups: _kernels.fwd_denominator(
            q, k, den, y2, q.dtype.type(c.a), q.dtype.type(c.b), groups, causal))


def linear_term_pass(q: np.ndarray, k: np.ndarray, v: np.ndarray, c: LinearKernelCoeffs,
                     plan: BlockPlan, f: np.ndarray, *, causal: bool = True):
    """Add ``sum_m q_im x2_ijm`` to ``f``; block l owns x2 columns [l*D/L, (l+1)*D/L)."""
    G, N, D = q.shape
    L, w = plan.reduction_blocks, plan.block_width
    dt = q.dtype
    b = dt.type(c.b)
    with phase_scope(Phase.LINEAR_FWD), \
            _runner.blocked_scratch(plan, N, dt, (G, L, D, w)) as (partial, stage, tmp, ctmp, state):
        phase = _runner.BlockedPhase(
            sweep=lambda items, i0, i1, desc, upd, emit, wk: _kernels.fwd_linear_sweep(
                q, k, v, state, partial, items, L, b, i0, i1, desc, upd, emit, stage[wk], tmp[wk]),
            combine=lambda groups, i0, i1, wk: _kernels.combine_chunk(
                f, partial, groups, L, i0, i1, _kernels.MODE_ADD, ctmp[wk]),
            descending=False,
            causal=causal,
        )
        _runner.run_phase(plan, N, phase)


def _check_denominators(den: np.ndarray):
    eps = denominator_eps(den.dtype)
    bad = np.abs(den) < eps
    if bad.any():
        g, i = (int(x) for x in np.argwhere(bad)[0])
        raise DegenerateDenominator(g, i, float(den[g, i]))


def _forward(q, k, v, c, plan, causal) -> ForwardArtifacts:
    check_same_shape(q, k, v)
    G, N, D = q.shape
    c = c or DEFAULT_COEFFS
    plan = plan or _plan.plan_for(q)
    plan.check(G, D)
    dt = _compute_dtype(q, k, v)
    qs, ks, vf = _operands(q, k, v, dt)

    den = retained((G, N), dtype=dt)
    denominator_pass(qs, ks, c, den, plan, causal=causal)
    _check_denominators(den)

    f = retained((G, D, N), dtype=dt)
    constant_term_pass(vf, c, f, plan, causal=causal)
    linear_term_pass(qs, ks, vf, c, plan, f, causal=causal)
    f /= den[:, None, :]
    return ForwardArtifacts(HeadTensor._wrap(f, Layout.FEATURE_MAJOR), den, q, k, v, c, causal)


def forward_causal(q: HeadTensor, k: HeadTensor, v: HeadTensor,
                   c: LinearKernelCoeffs | None = None,
                   plan: BlockPlan | None = None) -> ForwardArtifacts:
    """Causal linear attention: row i attends to keys 1..i."""
    return _forward(q, k, v, c, plan, causal=True)


def forward_full(q: HeadTensor, k: HeadTensor, v: HeadTensor,
                 c: LinearKernelCoeffs | None = None,
                 plan: BlockPlan | None = None) -> ForwardArtifacts:
    """Unmasked linear attention: state is summed over the full sequence once, then applied."""
    return _forward(q, k, v, c, plan, causal=False)
