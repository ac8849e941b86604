"""Compiled fixed-point Taylor recurrences on balanced 26-bit limbs.

A number is ``sum(l[i] * 2**(26 i)) / 2**F`` with ``F = 26 * FL`` and signed
limbs kept in ``[-2**25, 2**25]`` after every operation (the top limb holds the
integer part).  A limb product then fits in 51 bits, so a whole Cauchy product
of a few hundred limb terms accumulates exactly in int64.  Products skip limb
pairs landing more than two limbs below the binary point; their total weight
is far below one unit in the last place.

Arrays carry the batch of integration points in the last axis, so every inner
loop is a straight vector loop over points.  Limb storage is int32.

The recurrences mirror ``flowmap._Engine`` line by line; that pure Python
engine is the reference implementation.
"""
from __future__ import annotations

import numpy as np
from numba import int64, njit

BITS = 26
BASE = 1 << BITS
HALF = 1 << (BITS - 1)
MASK = BASE - 1

# known-series slots
K_CU, K_SU, K_W, K_Q, K_QA, K_QB = 0, 1, 2, 3, 4, 5
K_A, K_C, K_D, K_B = 6, 7, 8, 9
K_R, K_Q1E, K_QAE, K_QBE, K_SQ, K_SQE = 10, 11, 12, 13, 14, 15
K_AE, K_CE, K_DE, K_BE = 16, 17, 18, 19
NKNOWN = 20

# constant slots
C_ONE, C_E, C_EPS, C_MU, C_RT, C_RTE, C_MURT, C_MURTE = 0, 1, 2, 3, 4, 5, 6, 7
C_MULB, C_MUNB, C_MULBE, C_MUNBE = 8, 9, 10, 11
NCONST = 12


def int_to_limbs(x: int, nl: int) -> list:
    out = [0] * nl
    for i in range(nl - 1):
        l = x & MASK
        x >>= BITS
        if l >= HALF:
            l -= BASE
            x += 1
        out[i] = l
    if abs(x) > HALF:
        raise OverflowError("value exceeds the limb range")
    out[nl - 1] = x
    return out


def pack(ints, nl: int) -> np.ndarray:
    """Python ints -> (nl, n) int32 limb array."""
    out = np.empty((nl, len(ints)), dtype=np.int32)
    for p, x in enumerate(ints):
        out[:, p] = int_to_limbs(int(x), nl)
    return out


def unpack(limbs) -> list:
    """(nl, n) limb array -> Python ints."""
    nl, n = limbs.shape
    cols = limbs.T.tolist()
    out = []
    for col in cols:
        x = 0
        for i in range(nl - 1, -1, -1):
            x = (x << BITS) + col[i]
        out.append(x)
    return out


@njit(cache=True)
def _finish(acc, out, fl, cr, err):
    """out = acc / 2**F with balanced limbs; clears acc."""
    nl = out.shape[0]
    n = out.shape[1]
    cr[:] = 0
    for i in range(fl + nl - 1):
        a = acc[i]
        for p in range(n):
            v = a[p] + cr[p]
            a[p] = 0
            c = (v + HALF) >> BITS
            cr[p] = c
            if i >= fl:
                out[i - fl, p] = v - (c << BITS)
    top_i = fl + nl - 1
    for p in range(n):
        hi = int64(0)
        for i in range(acc.shape[0] - 1, top_i - 1, -1):
            if hi > (1 << 34) or hi < -(1 << 34):
                err[0] = 1
            hi = (hi << BITS) + acc[i, p]
            acc[i, p] = 0
        top = hi + cr[p]
        if top > HALF or top < -HALF:
            err[0] = 1
        out[nl - 1, p] = top


@njit(cache=True)
def _acc_mul(acc, x, y, sign, fl):
    nl = x.shape[0]
    n = x.shape[1]
    lo = fl - 2
    for i in range(nl):
        xi = x[i]
        start = lo - i
        if start < 0:
            start = 0
        for m in range(start, nl):
            o = acc[i + m]
            ym = y[m]
            if sign > 0:
                for p in range(n):
                    o[p] += int64(xi[p]) * int64(ym[p])
            else:
                for p in range(n):
                    o[p] -= int64(xi[p]) * int64(ym[p])


@njit(cache=True)
def _acc_conv(acc, a, b, k, sign, fl):
    for j in range(k + 1):
        _acc_mul(acc, a[j], b[k - j], sign, fl)


@njit(cache=True)
def _acc_add(acc, x, scale, fl):
    """acc += scale * x (x a number, scale a small integer)."""
    nl = x.shape[0]
    n = x.shape[1]
    for i in range(nl):
        o = acc[fl + i]
        xi = x[i]
        for p in range(n):
            o[p] += scale * int64(xi[p])


@njit(cache=True)
def _div_int(x, k, out, acc, fl, cr, err):
    """out = floor(x / k) for a small positive integer k."""
    nl = x.shape[0]
    n = x.shape[1]
    cr[:] = 0
    for i in range(nl - 1, -1, -1):
        xi = x[i]
        o = acc[fl + i]
        for p in range(n):
            cur = (cr[p] << BITS) + xi[p]
            q = cur // k
            cr[p] = cur - q * k
            o[p] = q
    _finish(acc, out, fl, cr, err)


@njit(cache=True)
def _lincomb(out, a, sa, b, sb, acc, fl, cr, err):
    _acc_add(acc, a, sa, fl)
    _acc_add(acc, b, sb, fl)
    _finish(acc, out, fl, cr, err)


@njit(cache=True)
def _conv_all(out, a, b, scale, fl, acc, cr, err):
    for k in range(a.shape[0]):
        _acc_conv(acc, a, b, k, 1, fl)
        _finish(acc, out[k], fl, cr, err)
        if scale != 1:
            _acc_add(acc, out[k], scale, fl)
            _finish(acc, out[k], fl, cr, err)


@njit(cache=True)
def _scale_series(out, c, a, sign, fl, acc, cr, err):
    for k in range(a.shape[0]):
        _acc_mul(acc, c, a[k], sign, fl)
        _finish(acc, out[k], fl, cr, err)


@njit(cache=True)
def _powers(p, w, q0, p0, alpha, fl, acc, acc2, t1, cr, err):
    """Series of w**alpha from p[0] = p0 (J.C.P. Miller recurrence)."""
    n1 = w.shape[0]
    p[0] = p0
    for k in range(1, n1):
        for j in range(k):
            _acc_mul(acc2, w[k - j], p[j], 1, fl)
            _finish(acc2, t1, fl, cr, err)
            _acc_add(acc, t1, alpha * (k - j) - j, fl)
        _finish(acc, t1, fl, cr, err)
        _acc_mul(acc, t1, q0, 1, fl)
        _finish(acc, t1, fl, cr, err)
        _div_int(t1, k, p[k], acc, fl, cr, err)


@njit(cache=True)
def _known(KN, c0, s0, qp, consts, inv_fact, fl, averaged, jets, acc, acc2, t1, cr, err):
    n1 = inv_fact.shape[0]
    cu = KN[K_CU]
    su = KN[K_SU]
    w = KN[K_W]
    for k in range(n1):
        m = k % 4
        # derivative cycle of (cos, sin)
        if m == 0:
            ca, cs_, sa, ss = c0, 1, s0, 1
        elif m == 1:
            ca, cs_, sa, ss = s0, -1, c0, 1
        elif m == 2:
            ca, cs_, sa, ss = c0, -1, s0, -1
        else:
            ca, cs_, sa, ss = s0, 1, c0, -1
        _acc_mul(acc, ca, inv_fact[k], cs_, fl)
        _finish(acc, cu[k], fl, cr, err)
        _acc_mul(acc, sa, inv_fact[k], ss, fl)
        _finish(acc, su[k], fl, cr, err)
    _scale_series(w, consts[C_E], cu, -1, fl, acc, cr, err)
    _lincomb(w[0], w[0], 1, consts[C_ONE], 1, acc, fl, cr, err)
    q0 = qp[0]
    q = KN[K_Q]
    _powers(q, w, q0, qp[0], -1, fl, acc, acc2, t1, cr, err)
    if averaged:
        _powers(KN[K_QA], w, q0, qp[1], -2, fl, acc, acc2, t1, cr, err)
    else:
        _powers(KN[K_QA], w, q0, qp[1], -5, fl, acc, acc2, t1, cr, err)
        _powers(KN[K_QB], w, q0, qp[2], -6, fl, acc, acc2, t1, cr, err)
    _scale_series(KN[K_D], consts[C_RT], q, 1, fl, acc, cr, err)
    if not averaged:
        _conv_all(KN[K_SQ], su, q, 1, fl, acc, cr, err)
        for k in range(n1):
            _acc_mul(acc, consts[C_E], KN[K_SQ, k], 1, fl)
            _acc_mul(acc, consts[C_MU], KN[K_QA, k], -1, fl)
            _finish(acc, KN[K_A, k], fl, cr, err)
        _scale_series(KN[K_C], consts[C_EPS], q, 1, fl, acc, cr, err)
        _scale_series(KN[K_B], consts[C_MURT], KN[K_QB], 1, fl, acc, cr, err)
    if not jets:
        return
    # e-derivatives: d(w**-a)/de = a cos(u) w**-(a+1)
    _conv_all(KN[K_R], cu, q, 1, fl, acc, cr, err)
    _conv_all(KN[K_Q1E], KN[K_R], q, 1, fl, acc, cr, err)
    for k in range(n1):
        _acc_mul(acc, consts[C_RTE], q[k], 1, fl)
        _acc_mul(acc, consts[C_RT], KN[K_Q1E, k], 1, fl)
        _finish(acc, KN[K_DE, k], fl, cr, err)
    if averaged:
        _conv_all(KN[K_QAE], KN[K_R], KN[K_QA], 2, fl, acc, cr, err)
        return
    _conv_all(KN[K_QAE], KN[K_R], KN[K_QA], 5, fl, acc, cr, err)
    _conv_all(KN[K_QBE], KN[K_R], KN[K_QB], 6, fl, acc, cr, err)
    _conv_all(KN[K_SQE], su, KN[K_Q1E], 1, fl, acc, cr, err)
    for k in range(n1):
        _acc_add(acc, KN[K_SQ, k], 1, fl)
        _acc_mul(acc, consts[C_E], KN[K_SQE, k], 1, fl)
        _acc_mul(acc, consts[C_MU], KN[K_QAE, k], -1, fl)
        _finish(acc, KN[K_AE, k], fl, cr, err)
        _acc_mul(acc, consts[C_EPS], KN[K_Q1E, k], 1, fl)
        _finish(acc, KN[K_CE, k], fl, cr, err)
        _acc_mul(acc, consts[C_MURTE], KN[K_QB, k], 1, fl)
        _acc_mul(acc, consts[C_MURT], KN[K_QBE, k], 1, fl)
        _finish(acc, KN[K_BE, k], fl, cr, err)


@njit(cache=True)
def _phase_rows(X, G, k, npart, s_or_c, sign, p, acc, fl):
    """acc += sign * (G0 * phase_p + G_p * phase_0) at order k."""
    _acc_conv(acc, G[0], X[s_or_c * npart + p], k, sign, fl)
    if p > 0:
        _acc_conv(acc, G[p], X[s_or_c * npart], k, sign, fl)


@njit(cache=True)
def _recur_nonaveraged(X, KN, G, fl, jets, acc, t1, cr, err):
    N = X.shape[1] - 1
    npart = 4 if jets else 1
    A = KN[K_A]
    C = KN[K_C]
    for k in range(N):
        k1 = k + 1
        _lincomb(G[0, k], X[npart, k], 2, KN[K_D, k], -2, acc, fl, cr, err)
        if jets:
            _lincomb(G[1, k], X[npart + 1, k], 2, X[npart + 1, k], 0, acc, fl, cr, err)
            _lincomb(G[2, k], X[npart + 2, k], 2, X[npart + 2, k], 0, acc, fl, cr, err)
            _lincomb(G[3, k], X[npart + 3, k], 2, KN[K_DE, k], -2, acc, fl, cr, err)
        for p in range(npart):
            b = X[p]
            g = X[npart + p]
            s = X[2 * npart + p]
            c = X[3 * npart + p]
            _div_int(g[k], k1, b[k1], acc, fl, cr, err)
            _acc_conv(acc, A, g, k, 1, fl)
            _acc_conv(acc, C, s, k, -1, fl)
            if p == 0:
                _acc_add(acc, KN[K_B, k], 1, fl)
            elif p == 3:
                _acc_conv(acc, KN[K_AE], X[npart], k, 1, fl)
                _acc_conv(acc, KN[K_CE], X[2 * npart], k, -1, fl)
                _acc_add(acc, KN[K_BE, k], 1, fl)
            _finish(acc, t1, fl, cr, err)
            _div_int(t1, k1, g[k1], acc, fl, cr, err)
            _phase_rows(X, G, k, npart, 3, 1, p, acc, fl)
            _finish(acc, t1, fl, cr, err)
            _div_int(t1, k1, s[k1], acc, fl, cr, err)
            _phase_rows(X, G, k, npart, 2, -1, p, acc, fl)
            _finish(acc, t1, fl, cr, err)
            _div_int(t1, k1, c[k1], acc, fl, cr, err)


@njit(cache=True)
def _recur_averaged(X, KN, G, WY, consts, fl, jets, acc, t1, cr, err):
    N = X.shape[1] - 1
    npart = 4 if jets else 1
    w = KN[K_W]
    cu = KN[K_CU]
    for k in range(N):
        k1 = k + 1
        for p in range(npart):
            _acc_conv(acc, w, X[npart + p], k, 1, fl)
            if p == 3:
                # d w / d e = -cos u
                _acc_conv(acc, cu, X[npart], k, -1, fl)
            _finish(acc, WY[p, k], fl, cr, err)
        _lincomb(G[0, k], WY[0, k], 2, KN[K_D, k], -2, acc, fl, cr, err)
        if jets:
            _lincomb(G[1, k], WY[1, k], 2, WY[1, k], 0, acc, fl, cr, err)
            _lincomb(G[2, k], WY[2, k], 2, WY[2, k], 0, acc, fl, cr, err)
            _lincomb(G[3, k], WY[3, k], 2, KN[K_DE, k], -2, acc, fl, cr, err)
        for p in range(npart):
            x = X[p]
            y = X[npart + p]
            s = X[2 * npart + p]
            c = X[3 * npart + p]
            _div_int(WY[p, k], k1, x[k1], acc, fl, cr, err)
            _acc_conv(acc, KN[K_QA], s, k, 1, fl)
            if p == 3:
                _acc_conv(acc, KN[K_QAE], X[2 * npart], k, 1, fl)
            _finish(acc, t1, fl, cr, err)
            _acc_mul(acc, consts[C_EPS], t1, -1, fl)
            _acc_mul(acc, consts[C_MULB], WY[p, k], -1, fl)
            if p == 0:
                _acc_mul(acc, consts[C_MUNB], w[k], 1, fl)
            elif p == 3:
                _acc_mul(acc, consts[C_MULBE], WY[0, k], -1, fl)
                _acc_mul(acc, consts[C_MUNB], cu[k], -1, fl)
                _acc_mul(acc, consts[C_MUNBE], w[k], 1, fl)
            _finish(acc, t1, fl, cr, err)
            _div_int(t1, k1, y[k1], acc, fl, cr, err)
            _phase_rows(X, G, k, npart, 3, 1, p, acc, fl)
            _finish(acc, t1, fl, cr, err)
            _div_int(t1, k1, s[k1], acc, fl, cr, err)
            _phase_rows(X, G, k, npart, 2, -1, p, acc, fl)
            _finish(acc, t1, fl, cr, err)
            _div_int(t1, k1, c[k1], acc, fl, cr, err)


@njit(cache=True)
def _log2_norms(X, order, fl, out):
    """out[p] = max over components of log2|X[comp, order, :, p]|."""
    ncomp = X.shape[0]
    nl = X.shape[2]
    n = X.shape[3]
    for p in range(n):
        best = -np.inf
        for comp in range(ncomp):
            for i in range(nl - 1, -1, -1):
                li = X[comp, order, i, p]
                if li != 0:
                    v = float(li) * BASE
                    if i > 0:
                        v += float(X[comp, order, i - 1, p])
                    if v != 0.0:
                        lv = np.log2(abs(v)) + BITS * (i - 1 - fl)
                        if lv > best:
                            best = lv
                    break
        out[p] = best


@njit(cache=True)
def taylor_series(state, c0, s0, qp, consts, inv_fact, fl, averaged, jets):
    """Taylor coefficients of the augmented system for every point.

    state: (ncomp, NL, n); c0, s0: (NL, n) cos/sin of the expansion point;
    qp: (3, NL, n) powers of ``1/(1 - e cos u0)``; consts and inv_fact are
    broadcast over points.  Returns the series ``(ncomp, N+1, NL, n)``, log2
    norms ``(3, n)`` at orders 0, N-1, N, and an overflow flag.
    """
    ncomp, nl, n = state.shape
    N = inv_fact.shape[0] - 1
    npart = 4 if jets else 1
    X = np.zeros((ncomp, N + 1, nl, n), dtype=np.int32)
    err = np.zeros(1, dtype=np.int64)
    acc = np.zeros((2 * nl + 2, n), dtype=np.int64)
    acc2 = np.zeros((2 * nl + 2, n), dtype=np.int64)
    cr = np.zeros(n, dtype=np.int64)
    t1 = np.zeros((nl, n), dtype=np.int32)
    KN = np.zeros((NKNOWN, N + 1, nl, n), dtype=np.int32)
    G = np.zeros((npart, N + 1, nl, n), dtype=np.int32)
    for comp in range(ncomp):
        X[comp, 0] = state[comp]
    _known(KN, c0, s0, qp, consts, inv_fact, fl, averaged, jets, acc, acc2, t1, cr, err)
    if averaged:
        WY = np.zeros((npart, N + 1, nl, n), dtype=np.int32)
        _recur_averaged(X, KN, G, WY, consts, fl, jets, acc, t1, cr, err)
    else:
        _recur_nonaveraged(X, KN, G, fl, jets, acc, t1, cr, err)
    norms = np.empty((3, n))
    _log2_norms(X, 0, fl, norms[0])
    _log2_norms(X, N - 1, fl, norms[1])
    _log2_norms(X, N, fl, norms[2])
    return X, norms, err[0]


@njit(cache=True)
def horner(X, h, fl):
    """Evaluate every series at its own step h (NL, n)."""
    ncomp, n1, nl, n = X.shape
    out = np.zeros((ncomp, nl, n), dtype=np.int32)
    err = np.zeros(1, dtype=np.int64)
    acc = np.zeros((2 * nl + 2, n), dtype=np.int64)
    cr = np.zeros(n, dtype=np.int64)
    t = np.zeros((nl, n), dtype=np.int32)
    for comp in range(ncomp):
        t[:] = X[comp, n1 - 1]
        for k in range(n1 - 2, -1, -1):
            _acc_mul(acc, t, h, 1, fl)
            _acc_add(acc, X[comp, k], 1, fl)
            _finish(acc, t, fl, cr, err)
        out[comp] = t
    return out, err[0]
