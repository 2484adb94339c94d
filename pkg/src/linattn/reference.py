"""Brute-force oracles: quadratic linear attention, softmax attention, the
recurrent (RNN-style) formulation and central-difference gradients.

These are deliberately naive loops that share no code with the blocked
kernels; they define ground truth for the fast path.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import DegenerateDenominator, ShapeMismatch
from .tensor import Gradients, HeadTensor, Layout, LinearKernelCoeffs, Mask

DEFAULT_FD_STEP = 1e-6


def _eps(dtype):
    return 1e-4 if np.dtype(dtype) == np.float32 else 1e-8


def _logical(t: HeadTensor) -> np.ndarray:
    return np.array(t.array(), dtype=np.float64, order="C")


def _check(*tensors):
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape != first.shape:
            raise ShapeMismatch(f"{first.shape} vs {t.shape}")


@njit(cache=True)
def _quadratic_group(q, k, v, a, b, causal, g, out, den):
    N, D = q.shape[1], q.shape[2]
    Dv = v.shape[2]
    for i in range(N):
        stop = i + 1 if causal else N
        total = 0.0
        for j in range(Dv):
            out[g, i, j] = 0.0
        for n in range(stop):
            s = 0.0
            for m in range(D):
                s += q[g, i, m] * k[g, n, m]
            weight = a + b * s
            total += weight
            for j in range(Dv):
                out[g, i, j] += weight * v[g, n, j]
        den[g, i] = total


@njit(cache=True)
def _quadratic(q, k, v, a, b, causal, out, den):
    for g in range(q.shape[0]):
        _quadratic_group(q, k, v, a, b, causal, g, out, den)


def _raise_if_degenerate(den, eps, group_offset=0):
    bad = np.argwhere(np.abs(den) < eps)
    if bad.size:
        g, i = (int(x) for x in bad[0])
        raise DegenerateDenominator(g + group_offset, i, float(den[g, i]))


def quadratic_la(q: HeadTensor, k: HeadTensor, v: HeadTensor,
                 c: LinearKernelCoeffs = LinearKernelCoeffs(),
                 mask: Mask = Mask.CAUSAL) -> tuple[HeadTensor, np.ndarray]:
    """Linear attention by direct double summation over (query, key) pairs, O(N^2 D)."""
    _check(q, k, v)
    qa, ka, va = _logical(q), _logical(k), _logical(v)
    out = np.zeros_like(va)
    den = np.zeros(qa.shape[:2])
    _quadratic(qa, ka, va, float(c.a), float(c.b), Mask(mask) is Mask.CAUSAL, out, den)
    _raise_if_degenerate(den, _eps(q.dtype))
    out /= den[:, :, None]
    return HeadTensor.from_array(out, Layout.SEQUENCE_MAJOR), den


@njit(cache=True)
def _softmax(q, k, v, causal, out):
    G, N, D = q.shape
    scale = 1.0 / np.sqrt(D)
    scores = np.empty(N)
    for g in range(G):
        for i in range(N):
            stop = i + 1 if causal else N
            top = -np.inf
            for n in range(stop):
                s = 0.0
                for m in range(D):
                    s += q[g, i, m] * k[g, n, m]
                scores[n] = s * scale
                if scores[n] > top:
                    top = scores[n]
            total = 0.0
            for n in range(stop):
                scores[n] = np.exp(scores[n] - top)
                total += scores[n]
            for j in range(v.shape[2]):
                acc = 0.0
                for n in range(stop):
                    acc += scores[n] * v[g, n, j]
                out[g, i, j] = acc / total


def softmax_attention(q: HeadTensor, k: HeadTensor, v: HeadTensor,
                      mask: Mask = Mask.CAUSAL) -> HeadTensor:
    """Regular attention with kernel exp(q.k / sqrt(D)); the row max is subtracted first."""
    _check(q, k, v)
    out = np.zeros(v.shape)
    _softmax(_logical(q), _logical(k), _logical(v), Mask(mask) is Mask.CAUSAL, out)
    return HeadTensor.from_array(out, Layout.SEQUENCE_MAJOR)


@njit(cache=True)
def _recurrent(q, k, v, normalize, out, den):
    G, N, Dk = q.shape
    Dv = v.shape[2]
    S = np.zeros((Dk, Dv))
    z = np.zeros(Dk)
    for g in range(G):
        S[:, :] = 0.0
        z[:] = 0.0
        for t in range(N):
            for r in range(Dk):
                z[r] += k[g, t, r]
                for j in range(Dv):
                    S[r, j] += k[g, t, r] * v[g, t, j]
            qz = 0.0
            for r in range(Dk):
                qz += q[g, t, r] * z[r]
            den[g, t] = qz
            for j in range(Dv):
                acc = 0.0
                for r in range(Dk):
                    acc += q[g, t, r] * S[r, j]
                out[g, t, j] = acc


def recurrent_la(q: HeadTensor, k: HeadTensor, v: HeadTensor,
                 normalize: bool = True) -> HeadTensor:
    """Causal linear attention as an RNN with identity feature map.

    Hidden state ``S_t = S_{t-1} + k_t v_t^T`` and key sum ``z_t``; the output
    is ``q_t S_t / (q_t . z_t)`` when ``normalize`` else ``q_t S_t``.  Q and K
    may have a different feature width than V.
    """
    if q.shape != k.shape or q.shape[:2] != v.shape[:2]:
        raise ShapeMismatch(f"q {q.shape}, k {k.shape}, v {v.shape}")
    out = np.zeros(v.shape)
    den = np.zeros(q.shape[:2])
    _recurrent(_logical(q), _logical(k), _logical(v), normalize, out, den)
    if normalize:
        _raise_if_degenerate(den, _eps(q.dtype))
        out /= den[:, :, None]
    return HeadTensor.from_array(out, Layout.SEQUENCE_MAJOR)


def augment_constant_feature(t: HeadTensor) -> HeadTensor:
    """Append a constant-1 feature so that [q;1].[k;1] = 1 + q.k."""
    x = t.array()
    ones = np.ones(x.shape[:2] + (1,), dtype=x.dtype)
    return HeadTensor.from_array(np.concatenate([x, ones], axis=2), t.layout)


def finite_diff_grads(q: HeadTensor, k: HeadTensor, v: HeadTensor, omega: HeadTensor,
                      c: LinearKernelCoeffs = LinearKernelCoeffs(),
                      mask: Mask = Mask.CAUSAL,
                      h: float = DEFAULT_FD_STEP) -> Gradients:
    """Central differences of ``sum(omega * quadratic_la(q, k, v))`` per input element.

    Costs O(N D) forward evaluations of O(N^2 D) each, so keep instances small.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    _check(q, k, v, omega)
    causal = Mask(mask) is Mask.CAUSAL
    a, b = float(c.a), float(c.b)
    eps = _eps(np.float64)
    arrays = [_logical(q), _logical(k), _logical(v)]
    om = _logical(omega)
    out = np.zeros_like(arrays[2])
    den = np.zeros(arrays[0].shape[:2])
    G, N, D = arrays[0].shape

    def psi(g):
        _quadratic_group(arrays[0], arrays[1], arrays[2], a, b, causal, g, out, den)
        _raise_if_degenerate(den[g:g + 1], eps, g)
        return float(np.sum(om[g] * out[g] / den[g][:, None]))

    grads = []
    for x in arrays:
        grad = np.zeros_like(x)
        for g in range(G):
            for i in range(N):
                for j in range(D):
                    saved = x[g, i, j]
                    x[g, i, j] = saved + h
                    up = psi(g)
                    x[g, i, j] = saved - h
                    down = psi(g)
                    x[g, i, j] = saved
                    grad[g, i, j] = (up - down) / (2 * h)
        grads.append(HeadTensor.from_array(grad, Layout.SEQUENCE_MAJOR))
    return Gradients(*grads)
