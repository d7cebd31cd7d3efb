"""Compiled uint64 modular-arithmetic kernels.

Polynomial data lives in uint64 arrays of shape (limbs, n), one row per RNS
modulus.  Every kernel takes a `rows` selector mapping data row i to row
rows[i] of the stacked per-modulus tables, so the same tables serve prefix
bases (levels) and prefix-plus-special-modulus bases without copying.

Conventions:
  * moduli q < 2^60, so lazy Harvey butterflies stay below 2^64;
  * Shoup multiplication uses w_sh = floor(w * 2^64 / q), exact for any
    64-bit left operand;
  * key material and encoded plaintexts are kept in Montgomery form
    (R = 2^64), which needs only one scalar constant per modulus instead of
    a per-element precomputed table.
"""

import numpy as np
from numba import njit

_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_U0 = np.uint64(0)
_U1 = np.uint64(1)


@njit(inline="always")
def _mulhi(a, b):
    # high 64 bits of the 128-bit product, via 32-bit split
    a0 = a & _M32
    a1 = a >> _S32
    b0 = b & _M32
    b1 = b >> _S32
    t = a0 * b0
    m1 = a1 * b0 + (t >> _S32)
    m2 = a0 * b1 + (m1 & _M32)
    return a1 * b1 + (m1 >> _S32) + (m2 >> _S32)


@njit(inline="always")
def _shoup_lazy(a, w, wsh, q):
    # a * w mod q, result in [0, 2q); any a < 2^64, w < q
    hi = _mulhi(a, wsh)
    return a * w - hi * q


@njit(inline="always")
def _barrett(v, q, mu):
    # v mod q for any v < 2^64, mu = floor(2^64 / q)
    r = v - _mulhi(v, mu) * q
    if r >= q:
        r -= q
    if r >= q:
        r -= q
    return r


@njit(inline="always")
def _redc(hi, lo, q, qinv):
    # Montgomery reduce of the 128-bit value (hi:lo); qinv = -q^{-1} mod 2^64
    m = lo * qinv
    t = hi + _mulhi(m, q)
    if lo != _U0:
        t += _U1
    if t >= q:
        t -= q
    return t


@njit(inline="always")
def _mont_mul(a, b_mont, q, qinv):
    # a (plain) times b (Montgomery form) -> plain-form product
    hi = _mulhi(a, b_mont)
    lo = a * b_mont
    return _redc(hi, lo, q, qinv)


@njit(cache=True)
def ntt_batch(a, rows, psi_rev, psi_sh, qs):
    """Forward negacyclic NTT, in place, per selected limb.

    Cooley-Tukey with the 2n-th root powers stored in bit-reversed order.
    Lazy reductions keep intermediate values < 4q (Harvey).
    """
    nl, n = a.shape
    for ri in range(nl):
        li = rows[ri]
        q = qs[li]
        two_q = q + q
        row = a[ri]
        tw = psi_rev[li]
        tsh = psi_sh[li]
        t = n
        m = 1
        while m < n:
            t >>= 1
            for i in range(m):
                s = tw[m + i]
                ssh = tsh[m + i]
                j1 = 2 * i * t
                for j in range(j1, j1 + t):
                    u = row[j]
                    if u >= two_q:
                        u -= two_q
                    v = _shoup_lazy(row[j + t], s, ssh, q)
                    row[j] = u + v
                    row[j + t] = u - v + two_q
            m <<= 1
        for j in range(n):
            u = row[j]
            if u >= two_q:
                u -= two_q
            if u >= q:
                u -= q
            row[j] = u


@njit(cache=True)
def intt_batch(a, rows, ipsi_rev, ipsi_sh, qs, ninv, ninv_sh):
    """Inverse negacyclic NTT (Gentleman-Sande), in place, per selected limb."""
    nl, n = a.shape
    for ri in range(nl):
        li = rows[ri]
        q = qs[li]
        two_q = q + q
        row = a[ri]
        tw = ipsi_rev[li]
        tsh = ipsi_sh[li]
        t = 1
        m = n
        while m > 1:
            h = m >> 1
            j1 = 0
            for i in range(h):
                s = tw[h + i]
                ssh = tsh[h + i]
                for j in range(j1, j1 + t):
                    u = row[j]
                    v = row[j + t]
                    w = u + v
                    if w >= two_q:
                        w -= two_q
                    row[j] = w
                    row[j + t] = _shoup_lazy(u - v + two_q, s, ssh, q)
                j1 += t << 1
            t <<= 1
            m = h
        s = ninv[li]
        ssh = ninv_sh[li]
        for j in range(n):
            v = _shoup_lazy(row[j], s, ssh, q)
            if v >= q:
                v -= q
            row[j] = v


@njit(cache=True)
def to_mont(a, rows, r2, qs, qinvs):
    """In place a -> a * R mod q (Montgomery form), r2[li] = R^2 mod q."""
    nl, n = a.shape
    for ri in range(nl):
        li = rows[ri]
        q = qs[li]
        qinv = qinvs[li]
        w = r2[li]
        row = a[ri]
        for j in range(n):
            row[j] = _mont_mul(row[j], w, q, qinv)


@njit(cache=True)
def mul_mont(out, a, b_mont, rows, qs, qinvs):
    """out = a * b elementwise, b in Montgomery form; out/a may alias."""
    nl, n = a.shape
    for ri in range(nl):
        li = rows[ri]
        q = qs[li]
        qinv = qinvs[li]
        ar = a[ri]
        br = b_mont[ri]
        orow = out[ri]
        for j in range(n):
            orow[j] = _mont_mul(ar[j], br[j], q, qinv)


@njit(cache=True)
def ksw_accumulate(acc_b, acc_a, ext, kb, ka, rows, qs, qinvs):
    """acc_b += ext * kb, acc_a += ext * ka (kb/ka Montgomery form).

    `ext` is one decomposed digit extended to the full selected basis; kb/ka
    are the matching key-switching key rows (same row count, full stacked
    arrays indexed by rows).
    """
    nl, n = ext.shape
    for ri in range(nl):
        li = rows[ri]
        q = qs[li]
        qinv = qinvs[li]
        er = ext[ri]
        kbr = kb[li]
        kar = ka[li]
        ab = acc_b[ri]
        aa = acc_a[ri]
        for j in range(n):
            x = er[j]
            vb = ab[j] + _mont_mul(x, kbr[j], q, qinv)
            if vb >= q:
                vb -= q
            ab[j] = vb
            va = aa[j] + _mont_mul(x, kar[j], q, qinv)
            if va >= q:
                va -= q
            aa[j] = va


@njit(cache=True)
def extend_digit(src, q_src, out, rows, qs, mus, qsrc_mod):
    """Centered lift of residues mod q_src, reduced into each selected modulus.

    qsrc_mod[li] must hold q_src mod q_li.  Rows of `out` follow `rows`.
    """
    n = src.shape[0]
    nl = rows.shape[0]
    half = q_src >> _U1
    for ri in range(nl):
        li = rows[ri]
        q = qs[li]
        mu = mus[li]
        corr = q - qsrc_mod[li]
        orow = out[ri]
        for j in range(n):
            v = src[j]
            r = _barrett(v, q, mu)
            if v > half:
                r += corr
                if r >= q:
                    r -= q
            orow[j] = r
    return out


@njit(cache=True)
def sub_mul_shoup(acc, ext, rows, w, wsh, qs):
    """acc = (acc - ext) * w[li] mod q, elementwise (mod-down / rescale tail)."""
    nl, n = acc.shape
    for ri in range(nl):
        li = rows[ri]
        q = qs[li]
        s = w[li]
        ssh = wsh[li]
        ar = acc[ri]
        er = ext[ri]
        for j in range(n):
            d = ar[j] + q - er[j]
            v = _shoup_lazy(d, s, ssh, q)
            if v >= q:
                v -= q
            ar[j] = v


@njit(cache=True)
def scalar_mul(a, rows, w, wsh, qs):
    """In place a[ri] *= w[li] (per-limb scalar, Shoup precomputed)."""
    nl, n = a.shape
    for ri in range(nl):
        li = rows[ri]
        q = qs[li]
        s = w[li]
        ssh = wsh[li]
        row = a[ri]
        for j in range(n):
            v = _shoup_lazy(row[j], s, ssh, q)
            if v >= q:
                v -= q
            row[j] = v


def add_batch(a, b, qs_sel):
    """a + b mod q (strictly reduced inputs), plain numpy."""
    s = a + b
    np.subtract(s, qs_sel[:, None], out=s, where=s >= qs_sel[:, None])
    return s


def sub_batch(a, b, qs_sel):
    s = a + (qs_sel[:, None] - b)
    np.subtract(s, qs_sel[:, None], out=s, where=s >= qs_sel[:, None])
    return s


def neg_batch(a, qs_sel):
    out = (qs_sel[:, None] - a) % qs_sel[:, None]  # keeps zeros at zero
    return out.astype(np.uint64)
