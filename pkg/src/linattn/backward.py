"""Analytic backward pass in O(N D^2) time from (Q, K, V, O, g) and a cotangent.

With ``omh = omega / g`` (row-rescaled cotangent) and f(x) = a + b x:

    dQ_ir = sum_j omh_ij * (alphaQ_irj - betaQ_ir * o_ij)    prefix sums over n <= i
    dK_pr = sum_j alphaK_prj * v_pj  -  sum_j betaK_prj      suffix sums over i >= p
    dV_pj = alphaV_pj + sum_r betaV_pjr * k_pr               suffix sums over i >= p

    alphaQ_irj = b sum k_nr v_nj      betaQ_ir  = b sum k_nr
    alphaK_prj = b sum q_ir omh_ij    betaK_prj = b sum q_ir o_ij omh_ij
    alphaV_pj  = a sum omh_ij         betaV_pjr = b sum q_ir omh_ij

Without a mask every prefix/suffix sum becomes a full-sequence sum.
"""

from __future__ import annotations

import numpy as np

from . import _kernels, _runner
from . import plan as _plan
from .errors import MissingForwardState, ShapeMismatch
from .forward import ForwardArtifacts, _operands
from .plan import BlockPlan, Phase, phase_scope, retained
from .tensor import Gradients, HeadTensor, Layout, LinearKernelCoeffs, relayout


def cotangent_hat(omega: HeadTensor, g: np.ndarray) -> HeadTensor:
    """Omega divided row-wise by the forward denominators, feature-major."""
    om = relayout(omega, Layout.FEATURE_MAJOR).stored()
    return HeadTensor._wrap(np.ascontiguousarray(om / g[:, None, :]), Layout.FEATURE_MAJOR)


def q_prefix_pass(k, v, o, omh, c: LinearKernelCoeffs, plan: BlockPlan,
                  dq: np.ndarray, *, causal: bool = True):
    """dQ from prefix states; block l owns the summed j range."""
    G, N, D = k.shape
    L, w = plan.reduction_blocks, plan.block_width
    b = k.dtype.type(c.b)
    with phase_scope(Phase.Q_PREFIX_BWD), \
            _runner.blocked_scratch(plan, N, k.dtype, (G, L, D, w), (G, L, D)) as (partial, stage, tmp, ctmp, alpha, beta):
        _runner.run_phase(plan, N, _runner.BlockedPhase(
            sweep=lambda items, i0, i1, desc, upd, emit, wk: _kernels.q_prefix_sweep(
                k, v, o, omh, alpha, beta, partial, items, L, b,
                i0, i1, desc, upd, emit, stage[wk], tmp[wk]),
            combine=lambda groups, i0, i1, wk: _kernels.combine_chunk(
                dq, partial, groups, L, i0, i1, _kernels.MODE_ASSIGN, ctmp[wk]),
            descending=False,
            causal=causal,
        ))


def alpha_term_pass(q, v, omh, c: LinearKernelCoeffs, plan: BlockPlan,
                    dk: np.ndarray, *, causal: bool = True):
    """Overwrite dK with the alpha term, sweeping rows from N down to 1."""
    G, N, D = q.shape
    L, w = plan.reduction_blocks, plan.block_width
    b = q.dtype.type(c.b)
    with phase_scope(Phase.ALPHA_BWD), \
            _runner.blocked_scratch(plan, N, q.dtype, (G, L, D, w)) as (partial, stage, tmp, ctmp, alpha):
        _runner.run_phase(plan, N, _runner.BlockedPhase(
            sweep=lambda items, i0, i1, desc, upd, emit, wk: _kernels.k_alpha_sweep(
                q, v, omh, alpha, partial, items, L, b,
                i0, i1, desc, upd, emit, stage[wk], tmp[wk]),
            combine=lambda groups, i0, i1, wk: _kernels.combine_chunk(
                dk, partial, groups, L, i0, i1, _kernels.MODE_ASSIGN, ctmp[wk]),
            descending=True,
            causal=causal,
        ))


# Combination mode of the beta term into dK.
BETA_MODE = _kernels.MODE_SUB


def beta_term_pass(q, o, omh, c: LinearKernelCoeffs, plan: BlockPlan,
                   dk: np.ndarray, *, causal: bool = True):
    """Subtract the beta term from dK; must run after alpha_term_pass."""
    G, N, D = q.shape
    L, w = plan.reduction_blocks, plan.block_width
    b = q.dtype.type(c.b)
    with phase_scope(Phase.BETA_BWD), \
            _runner.blocked_scratch(plan, N, q.dtype, (G, L, D, w)) as (partial, stage, tmp, ctmp, beta):
        _runner.run_phase(plan, N, _runner.BlockedPhase(
            sweep=lambda items, i0, i1, desc, upd, emit, wk: _kernels.k_beta_sweep(
                q, o, omh, beta, partial, items, L, b,
                i0, i1, desc, upd, emit, stage[wk], tmp[wk]),
            combine=lambda groups, i0, i1, wk: _kernels.combine_chunk(
                dk, partial, groups, L, i0, i1, BETA_MODE, ctmp[wk]),
            descending=True,
            causal=causal,
        ))


def v_suffix_pass(q, k, omh, c: LinearKernelCoeffs, plan: BlockPlan,
                  dv: np.ndarray, *, causal: bool = True):
    """dV in one suffix sweep: the a-term is folded in while combining block partials."""
    G, N, D = q.shape
    L, w = plan.reduction_blocks, plan.block_width
    dt = q.dtype
    a, b = dt.type(c.a), dt.type(c.b)
    with phase_scope(Phase.V_SUFFIX_BWD), \
            _runner.blocked_scratch(plan, N, dt, (G, L, D, w), (G, D)) as (partial, stage, tmp, ctmp, beta, alpha_v):
        _runner.run_phase(plan, N, _runner.BlockedPhase(
            sweep=lambda items, i0, i1, desc, upd, emit, wk: _kernels.v_suffix_sweep(
                q, k, omh, beta, partial, items, L, b, i0, i1, desc, upd, emit, stage[wk], tmp[wk]),
            combine=lambda groups, i0, i1, wk: _kernels.v_combine_chunk(
                dv, partial, omh, alpha_v, a, groups, L, i0, i1, causal, ctmp[wk]),
            pre_combine=lambda groups, wk: _kernels.v_alpha_total(omh, alpha_v, a, groups),
            descending=True,
            causal=causal,
        ))


def _backward(art: ForwardArtifacts, omega: HeadTensor, c, plan, causal) -> Gradients:
    if art is None or art.g is None or art.O is None:
        raise MissingForwardState("forward artifacts lack the saved denominators")
    if art.causal != causal:
        kind = "causal" if art.causal else "unmasked"
        raise ValueError(f"artifacts come from the {kind} forward pass")
    if omega.shape != art.O.shape:
        raise ShapeMismatch(f"cotangent {omega.shape} vs output {art.O.shape}")
    G, N, D = art.O.shape
    if c is not None and c != art.coeffs:
        raise ValueError(f"coefficients {c} differ from the forward pass's {art.coeffs}")
    c = art.coeffs
    plan = plan or _plan.plan_for(art.q)
    plan.check(G, D)
    dt = art.g.dtype
    qs, ks, vf = _operands(art.q, art.k, art.v, dt)
    of = np.ascontiguousarray(relayout(art.O, Layout.FEATURE_MAJOR).stored(), dtype=dt)

    # Materialized once and shared by every phase (O(N D), kept with the outputs).
    omh = retained((G, D, N), dtype=dt)
    np.divide(relayout(omega, Layout.FEATURE_MAJOR).stored(), art.g[:, None, :], out=omh)

    dq = retained((G, D, N), dtype=dt)
    dk = retained((G, D, N), dtype=dt)
    dv = retained((G, D, N), dtype=dt)
    q_prefix_pass(ks, vf, of, omh, c, plan, dq, causal=causal)
    alpha_term_pass(qs, vf, omh, c, plan, dk, causal=causal)
    beta_term_pass(qs, of, omh, c, plan, dk, causal=causal)
    v_suffix_pass(qs, ks, omh, c, plan, dv, causal=causal)
    wrap = lambda x: HeadTensor._wrap(x, Layout.FEATURE_MAJOR)  # noqa: E731
    return Gradients(wrap(dq), wrap(dk), wrap(dv))


def backward_causal(art: ForwardArtifacts, omega: HeadTensor,
                    c: LinearKernelCoeffs | None = None,
                    plan: BlockPlan | None = None) -> Gradients:
    return _backward(art, omega, c, plan, causal=True)


def backward_full(art: ForwardArtifacts, omega: HeadTensor,
                  c: LinearKernelCoeffs | None = None,
                  plan: BlockPlan | None = None) -> Gradients:
    return _backward(art, omega, c, plan, causal=False)
