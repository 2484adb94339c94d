"""Compiled inner loops of the blocked forward and backward passes.

Array conventions (all C-contiguous):
  q, k                 (G, N, D)  sequence-major
  v, o, omh, outputs   (G, D, N)  feature-major
  state                (G, L, D, w)  per-block running sums, w = D // L
  partial              (G, L, D, T)  per-block contributions for one row chunk

Work item ``it`` addresses group ``it // L`` and reduction block ``it % L``;
block ``l`` owns the reduced index range ``[l*w, (l+1)*w)``.

Sweeps copy the feature-major operands of up to ``T`` rows at a time into a
row-major ``stage`` tile before the row loop, so the inner loops read
contiguous memory whatever N is.

Every contraction over the reduced index is summed with ``tree_sum``.  When
``w`` is a power of two, reducing each block with the tree and then the L block
totals with the same tree is exactly the tree over all D terms, so results do
not depend on L.
"""

from numba import njit

_JIT = dict(nogil=True, cache=True)


@njit(**_JIT)
def tree_sum(buf, n):
    """Stride-doubling pairwise sum of buf[:n]; destroys buf."""
    s = 1
    while s < n:
        for t in range(0, n - s, 2 * s):
            buf[t] += buf[t + s]
        s *= 2
    return buf[0]


@njit(**_JIT)
def _row(i_start, i_stop, t, descending):
    if descending:
        return i_stop - 1 - t
    return i_start + t


@njit(**_JIT)
def _span(i_start, i_stop, c0, T, descending):
    """Row range of the sub-chunk starting ``c0`` rows into the sweep."""
    if descending:
        hi = i_stop - c0
        return max(i_start, hi - T), hi
    lo = i_start + c0
    return lo, min(i_stop, lo + T)


@njit(**_JIT)
def _stage(dst, src, g, col0, ncols, r0, r1):
    """dst[t, c] = src[g, col0 + c, r0 + t]: feature-major rows into a row-major tile."""
    for c in range(ncols):
        for i in range(r0, r1):
            dst[i - r0, c] = src[g, col0 + c, i]


# ---------------------------------------------------------------------------
# forward


@njit(**_JIT)
def fwd_constant(v, f, a, groups, causal):
    """f[g, j, i] = a * sum of v[g, j, n] over n <= i (causal) or all n."""
    D, N = v.shape[1], v.shape[2]
    for g in groups:
        for j in range(D):
            x = 0.0
            if causal:
                for i in range(N):
                    x += a * v[g, j, i]
                    f[g, j, i] = x
            else:
                for i in range(N):
                    x += a * v[g, j, i]
                for i in range(N):
                    f[g, j, i] = x


@njit(**_JIT)
def fwd_denominator(q, k, den, y2, a, b, groups, causal):
    """den[g, i] = a*count + sum_m q[g,i,m] * b*sum(k[g,n,m]); y2 is (G, D) scratch."""
    N, D = q.shape[1], q.shape[2]
    for g in groups:
        ys = y2[g]
        if not causal:
            for i in range(N):
                for m in range(D):
                    ys[m] += b * k[g, i, m]
        for i in range(N):
            if causal:
                for m in range(D):
                    ys[m] += b * k[g, i, m]
                y1 = a * (i + 1)
            else:
                y1 = a * N
            s = 0.0
            for m in range(D):
                s += q[g, i, m] * ys[m]
            den[g, i] = y1 + s


@njit(**_JIT)
def fwd_linear_sweep(q, k, v, state, partial, items, L, b,
                     i_start, i_stop, descending, update, emit, stage, tmp):
    """Linear term: state[j, m] accumulates b*k[m]*v[j]; emits sum_m q[m]*state[j, m]."""
    D = q.shape[2]
    w = D // L
    T = stage.shape[1]
    sv = stage[0]
    for it in items:
        g = it // L
        l = it % L
        lo = l * w
        st = state[g, l]
        for c0 in range(0, i_stop - i_start, T):
            r0, r1 = _span(i_start, i_stop, c0, T, descending)
            if update:
                _stage(sv, v, g, 0, D, r0, r1)
            for t in range(r1 - r0):
                i = _row(r0, r1, t, descending)
                for j in range(D):
                    if update:
                        bv = b * sv[i - r0, j]
                        for mm in range(w):
                            st[j, mm] += bv * k[g, i, lo + mm]
                    if emit:
                        for mm in range(w):
                            tmp[mm] = q[g, i, lo + mm] * st[j, mm]
                        partial[g, l, j, i - i_start] = tree_sum(tmp, w)


# ---------------------------------------------------------------------------
# backward


@njit(**_JIT)
def q_prefix_sweep(k, v, o, omh, alpha, beta, partial, items, L, b,
                   i_start, i_stop, descending, update, emit, stage, tmp):
    """dQ[i, r] = sum_j omh[i, j] * (alpha[r, j] - beta[r] * o[i, j]).

    alpha[r, j] = b*sum k[n, r]*v[n, j] and beta[r] = b*sum k[n, r] over the
    prefix n <= i; block l owns the j range.
    """
    D = k.shape[2]
    w = D // L
    T = stage.shape[1]
    sv = stage[0]
    so = stage[1]
    sw = stage[2]
    for it in items:
        g = it // L
        l = it % L
        lo = l * w
        sa = alpha[g, l]
        sb = beta[g, l]
        for c0 in range(0, i_stop - i_start, T):
            r0, r1 = _span(i_start, i_stop, c0, T, descending)
            if update:
                _stage(sv, v, g, lo, w, r0, r1)
            if emit:
                _stage(so, o, g, lo, w, r0, r1)
                _stage(sw, omh, g, lo, w, r0, r1)
            for t in range(r1 - r0):
                i = _row(r0, r1, t, descending)
                ii = i - r0
                for r in range(D):
                    if update:
                        bk = b * k[g, i, r]
                        sb[r] += bk
                        for jj in range(w):
                            sa[r, jj] += bk * sv[ii, jj]
                    if emit:
                        br = sb[r]
                        for jj in range(w):
                            tmp[jj] = sw[ii, jj] * (sa[r, jj] - br * so[ii, jj])
                        partial[g, l, r, i - i_start] = tree_sum(tmp, w)


@njit(**_JIT)
def k_alpha_sweep(q, v, omh, alpha, partial, items, L, b,
                  i_start, i_stop, descending, update, emit, stage, tmp):
    """Alpha term of dK: alpha[r, m] = b*sum q[t, r]*omh[t, m]; emits sum_m alpha[r, m]*v[i, m]."""
    D = q.shape[2]
    w = D // L
    T = stage.shape[1]
    sv = stage[0]
    sw = stage[1]
    for it in items:
        g = it // L
        l = it % L
        lo = l * w
        st = alpha[g, l]
        for c0 in range(0, i_stop - i_start, T):
            r0, r1 = _span(i_start, i_stop, c0, T, descending)
            if update:
                _stage(sw, omh, g, lo, w, r0, r1)
            if emit:
                _stage(sv, v, g, lo, w, r0, r1)
            for t in range(r1 - r0):
                i = _row(r0, r1, t, descending)
                ii = i - r0
                for r in range(D):
                    if update:
                        bq = b * q[g, i, r]
                        for mm in range(w):
                            st[r, mm] += bq * sw[ii, mm]
                    if emit:
                        for mm in range(w):
                            tmp[mm] = st[r, mm] * sv[ii, mm]
                        partial[g, l, r, i - i_start] = tree_sum(tmp, w)


@njit(**_JIT)
def k_beta_sweep(q, o, omh, beta, partial, items, L, b,
                 i_start, i_stop, descending, update, emit, stage, tmp):
    """Beta term of dK: beta[r, m] = b*sum q[t, r]*o[t, m]*omh[t, m]; emits sum_m beta[r, m]."""
    D = q.shape[2]
    w = D // L
    T = stage.shape[1]
    so = stage[0]
    sw = stage[1]
    for it in items:
        g = it // L
        l = it % L
        lo = l * w
        st = beta[g, l]
        for c0 in range(0, i_stop - i_start, T):
            r0, r1 = _span(i_start, i_stop, c0, T, descending)
            if update:
                _stage(so, o, g, lo, w, r0, r1)
                _stage(sw, omh, g, lo, w, r0, r1)
            for t in range(r1 - r0):
                i = _row(r0, r1, t, descending)
                ii = i - r0
                for r in range(D):
                    if update:
                        bq = b * q[g, i, r]
                        for mm in range(w):
                            st[r, mm] += bq * (so[ii, mm] * sw[ii, mm])
                    if emit:
                        for mm in range(w):
                            tmp[mm] = st[r, mm]
                        partial[g, l, r, i - i_start] = tree_sum(tmp, w)


@njit(**_JIT)
def v_suffix_sweep(q, k, omh, beta, partial, items, L, b,
                   i_start, i_stop, descending, update, emit, stage, tmp):
    """k-weighted part of dV: beta[j, r] = b*sum q[t, r]*omh[t, j]; emits sum_r beta[j, r]*k[i, r]."""
    D = q.shape[2]
    w = D // L
    T = stage.shape[1]
    sw = stage[0]
    for it in items:
        g = it // L
        l = it % L
        lo = l * w
        st = beta[g, l]
        for c0 in range(0, i_stop - i_start, T):
            r0, r1 = _span(i_start, i_stop, c0, T, descending)
            if update:
                _stage(sw, omh, g, 0, D, r0, r1)
            for t in range(r1 - r0):
                i = _row(r0, r1, t, descending)
                for j in range(D):
                    if update:
                        bo = b * sw[i - r0, j]
                        for rr in range(w):
                            st[j, rr] += bo * q[g, i, lo + rr]
                    if emit:
                        for rr in range(w):
                            tmp[rr] = st[j, rr] * k[g, i, lo + rr]
                        partial[g, l, j, i - i_start] = tree_sum(tmp, w)


# ---------------------------------------------------------------------------
# combination of per-block partials

MODE_ADD = 0
MODE_ASSIGN = 1
MODE_SUB = 2


@njit(**_JIT)
def combine_chunk(out, partial, groups, L, i_start, i_stop, mode, tmp):
    """Fold the L block partials of each (g, lane, row) in fixed tree order into out."""
    D = out.shape[1]
    for g in groups:
        for j in range(D):
            for t in range(i_stop - i_start):
                for l in range(L):
                    tmp[l] = partial[g, l, j, t]
                s = tree_sum(tmp, L)
                i = i_start + t
                if mode == MODE_ADD:
                    out[g, j, i] += s
                elif mode == MODE_ASSIGN:
                    out[g, j, i] = s
                else:
                    out[g, j, i] -= s


@njit(**_JIT)
def v_alpha_total(omh, alpha_v, a, groups):
    """Non-causal a-term of dV: alpha_v[g, j] = a * sum over all rows of omh."""
    D, N = omh.shape[1], omh.shape[2]
    for g in groups:
        for j in range(D):
            s = 0.0
            for i in range(N):
                s += a * omh[g, j, i]
            alpha_v[g, j] = s


@njit(**_JIT)
def v_combine_chunk(out, partial, omh, alpha_v, a, groups, L,
                    i_start, i_stop, update, tmp):
    """dV[i, j] = alpha_v[j] + tree(partials); alpha_v grows by a*omh[i, j] first when causal.

    Rows are visited from i_stop - 1 down to i_start so the suffix recurrence
    of alpha_v stays sequential across chunks.
    """
    D = out.shape[1]
    for g in groups:
        av = alpha_v[g]
        for j in range(D):
            for t in range(i_stop - i_start - 1, -1, -1):
                i = i_start + t
                if update:
                    av[j] += a * omh[g, j, i]
                for l in range(L):
                    tmp[l] = partial[g, l, j, t]
                out[g, j, i] = av[j] + tree_sum(tmp, L)
