"""Negacyclic polynomial rings Z[X]/(X^n + 1) in RNS form.

Coefficients are held as residues modulo a chain of word-size primes
(shape ``(limbs, n)`` uint64), each prime ≡ 1 (mod 2n) so the negacyclic
NTT exists.  A ciphertext at level ``lv`` occupies the first ``lv`` limbs;
key-switching temporarily extends a polynomial with one special limb that
sits in the last row of the stacked per-modulus tables.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import _kernels as K
from .errors import BasisMismatchError

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(p: int) -> bool:
    """Miller-Rabin, deterministic for p < 2^64."""
    if p < 2:
        return False
    for sp in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if p % sp == 0:
            return p == sp
    d = p - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_BASES:
        x = pow(a, d, p)
        if x == 1 or x == p - 1:
            continue
        for _ in range(r - 1):
            x = x * x % p
            if x == p - 1:
                break
        else:
            return False
    return True


def scan_primes(bits: int, count: int, two_n: int, avoid=()) -> list[int]:
    """First ``count`` primes ≡ 1 (mod two_n) below 2^bits, descending."""
    avoid = set(avoid)
    out = []
    p = (1 << bits) - ((1 << bits) - 1) % two_n  # largest ≡ 1 below 2^bits
    while len(out) < count:
        if p < two_n:
            raise ValueError("prime scan exhausted")
        if p not in avoid and is_prime(p):
            out.append(p)
        p -= two_n
    return out


def scan_primes_balanced(bits: int, count: int, two_n: int, avoid=()) -> list[int]:
    """``count`` primes ≡ 1 (mod two_n) nearest 2^bits, closest first.

    Rescaling multiplies the tracked scale by q_i / 2^bits, so picking the
    moduli alternately above and below 2^bits keeps products of those
    ratios near one; ciphertexts reaching a level along different
    multiplication paths then carry nearly identical scales.
    """
    avoid = set(avoid)
    target = 1 << bits
    lo = target - (target - 1) % two_n
    hi = lo + two_n
    out = []
    while len(out) < count:
        if target - lo <= hi - target:
            p, lo = lo, lo - two_n
        else:
            p, hi = hi, hi + two_n
        if lo < two_n or hi >= 1 << 62:
            raise ValueError("prime scan exhausted")
        if p not in avoid and is_prime(p):
            out.append(p)
    return out


def find_root_2n(q: int, two_n: int) -> int:
    """A primitive two_n-th root of unity mod q."""
    assert (q - 1) % two_n == 0
    for g in range(2, q):
        psi = pow(g, (q - 1) // two_n, q)
        if pow(psi, two_n // 2, q) == q - 1:
            return psi
    raise ValueError(f"no 2n-th root mod {q}")


def _bit_reverse(i: int, bits: int) -> int:
    r = 0
    for _ in range(bits):
        r = (r << 1) | (i & 1)
        i >>= 1
    return r


def _shoup(w: int, q: int) -> int:
    return (w << 64) // q


class RnsBasis:
    """Modulus chain plus all per-prime NTT/Montgomery precomputation.

    ``moduli`` lists the ciphertext primes in drop order (last one is
    removed first by rescaling) followed by the single special prime used
    for key switching.  Row ``sp = n_ct`` of every stacked table belongs
    to the special prime.
    """

    def __init__(self, n: int, ct_moduli: list[int], special: int):
        if n & (n - 1) or n < 4:
            raise ValueError("ring degree must be a power of two >= 4")
        self.n = n
        self.slots = n // 2
        self.moduli = list(ct_moduli) + [special]
        self.n_ct = len(ct_moduli)
        self.sp = self.n_ct
        self.special = special
        if len(set(self.moduli)) != len(self.moduli):
            raise ValueError("duplicate primes in modulus chain")
        for q in self.moduli:
            if q >= 1 << 60:
                raise ValueError("primes must stay below 2^60")
            if (q - 1) % (2 * n) != 0:
                raise ValueError(f"{q} is not NTT-friendly for n={n}")

        nl = len(self.moduli)
        logn = n.bit_length() - 1
        brv = np.array([_bit_reverse(i, logn) for i in range(n)])

        self.qs = np.array(self.moduli, dtype=np.uint64)
        self.mus = np.array([(1 << 64) // q for q in self.moduli], dtype=np.uint64)
        self.qinvs = np.array(
            [(-pow(q, -1, 1 << 64)) % (1 << 64) for q in self.moduli], dtype=np.uint64
        )
        self.r2s = np.array([(1 << 128) % q for q in self.moduli], dtype=np.uint64)

        self.psi_rev = np.empty((nl, n), dtype=np.uint64)
        self.psi_sh = np.empty((nl, n), dtype=np.uint64)
        self.ipsi_rev = np.empty((nl, n), dtype=np.uint64)
        self.ipsi_sh = np.empty((nl, n), dtype=np.uint64)
        self.ninv = np.empty(nl, dtype=np.uint64)
        self.ninv_sh = np.empty(nl, dtype=np.uint64)
        self.roots = []
        for li, q in enumerate(self.moduli):
            psi = find_root_2n(q, 2 * n)
            self.roots.append(psi)
            ipsi = pow(psi, -1, q)
            pw = np.empty(n, dtype=np.uint64)
            ipw = np.empty(n, dtype=np.uint64)
            x = y = 1
            for k in range(n):
                pw[k] = x
                ipw[k] = y
                x = x * psi % q
                y = y * ipsi % q
            self.psi_rev[li] = pw[brv]
            self.ipsi_rev[li] = ipw[brv]
            self.psi_sh[li] = np.array(
                [_shoup(int(w), q) for w in self.psi_rev[li]], dtype=np.uint64
            )
            self.ipsi_sh[li] = np.array(
                [_shoup(int(w), q) for w in self.ipsi_rev[li]], dtype=np.uint64
            )
            ni = pow(n, -1, q)
            self.ninv[li] = ni
            self.ninv_sh[li] = _shoup(ni, q)

        # qmod[i, j] = q_i mod q_j ; qinv_mod[i, j] = q_i^{-1} mod q_j (j != i)
        self.qmod = np.zeros((nl, nl), dtype=np.uint64)
        self.qinv_mod = np.zeros((nl, nl), dtype=np.uint64)
        self.qinv_mod_sh = np.zeros((nl, nl), dtype=np.uint64)
        for i, qi in enumerate(self.moduli):
            for j, qj in enumerate(self.moduli):
                self.qmod[i, j] = qi % qj
                if i != j:
                    inv = pow(qi, -1, qj)
                    self.qinv_mod[i, j] = inv
                    self.qinv_mod_sh[i, j] = _shoup(inv, qj)

        self._exp_of_pos = None
        self._perm_cache: dict[int, np.ndarray] = {}

    # -- row selectors ------------------------------------------------------

    @lru_cache(maxsize=None)
    def _rows(self, level: int, special: bool) -> np.ndarray:
        if not 1 <= level <= self.n_ct:
            raise BasisMismatchError(f"level {level} outside 1..{self.n_ct}")
        r = list(range(level)) + ([self.sp] if special else [])
        return np.array(r, dtype=np.int64)

    def rows(self, level: int, special: bool = False) -> np.ndarray:
        return self._rows(level, special)

    def q_product(self, level: int) -> int:
        out = 1
        for q in self.moduli[:level]:
            out *= q
        return out

    # -- NTT-domain automorphism permutations --------------------------------

    def _probe_exponents(self) -> np.ndarray:
        """exp_of_pos[p] = e with NTT output slot p evaluating at psi^e.

        Derived empirically: transform the monomial X and look each output
        value up in a psi-power table.  The pattern is fixed by the butterfly
        layout, hence identical for every limb.
        """
        if self._exp_of_pos is not None:
            return self._exp_of_pos
        n, q, psi = self.n, self.moduli[0], self.roots[0]
        pow_to_exp = {}
        x = 1
        for e in range(2 * n):
            if e % 2 == 1:
                pow_to_exp[x] = e
            x = x * psi % q
        a = np.zeros((1, n), dtype=np.uint64)
        a[0, 1] = 1
        K.ntt_batch(a, np.array([0], dtype=np.int64), self.psi_rev, self.psi_sh, self.qs)
        self._exp_of_pos = np.array([pow_to_exp[int(v)] for v in a[0]], dtype=np.int64)
        return self._exp_of_pos

    def automorphism_perm(self, g: int) -> np.ndarray:
        """Index map so that ntt(sigma_g(a)) = ntt(a)[perm]."""
        g = g % (2 * self.n)
        if g in self._perm_cache:
            return self._perm_cache[g]
        if g % 2 == 0 or g == 0:
            raise ValueError("automorphism index must be odd")
        exp = self._probe_exponents()
        pos_of_exp = np.empty(2 * self.n, dtype=np.int64)
        pos_of_exp[exp] = np.arange(self.n)
        perm = pos_of_exp[(g * exp) % (2 * self.n)]
        perm.setflags(write=False)
        self._perm_cache[g] = perm
        return perm

    def rotation_group_element(self, k: int) -> int:
        """Galois element carrying slot j to slot j+k (cyclic over n/2 slots)."""
        return pow(5, k % (self.n // 2), 2 * self.n)


class RingPoly:
    """One RNS polynomial: residue rows for the first ``level`` ct primes,
    plus optionally the special prime as the final row."""

    __slots__ = ("basis", "data", "level", "special", "ntt", "mont")

    def __init__(self, basis, data, level, special=False, ntt=True, mont=False):
        self.basis = basis
        self.data = data
        self.level = level
        self.special = special
        self.ntt = ntt
        self.mont = mont

    # -- constructors --------------------------------------------------------

    @classmethod
    def zero(cls, basis, level, special=False, ntt=True):
        rows = level + (1 if special else 0)
        return cls(basis, np.zeros((rows, basis.n), dtype=np.uint64), level, special, ntt)

    @classmethod
    def from_signed(cls, basis, coeffs, level, special=False):
        """Small signed integer coefficients -> residues (coefficient domain)."""
        rows = basis.rows(level, special)
        data = np.empty((len(rows), basis.n), dtype=np.uint64)
        c = np.asarray(coeffs, dtype=np.int64)
        for ri, li in enumerate(rows):
            q = int(basis.qs[li])
            data[ri] = np.mod(c, q).astype(np.uint64)
        return cls(basis, data, level, special, ntt=False)

    @classmethod
    def from_int_coeffs(cls, basis, coeffs, level, special=False):
        """Arbitrary python-int coefficients (e.g. CRT lifts) -> residues."""
        rows = basis.rows(level, special)
        data = np.empty((len(rows), basis.n), dtype=np.uint64)
        for ri, li in enumerate(rows):
            q = int(basis.qs[li])
            data[ri] = np.array([c % q for c in coeffs], dtype=np.uint64)
        return cls(basis, data, level, special, ntt=False)

    # -- helpers -------------------------------------------------------------

    @property
    def rows_sel(self) -> np.ndarray:
        return self.basis.rows(self.level, self.special)

    def _check_mate(self, other: "RingPoly"):
        if self.basis is not other.basis:
            raise BasisMismatchError("operands built on different bases")
        if (self.level, self.special, self.ntt) != (other.level, other.special, other.ntt):
            raise BasisMismatchError(
                f"operand shape mismatch: (lv={self.level},sp={self.special},ntt={self.ntt})"
                f" vs (lv={other.level},sp={other.special},ntt={other.ntt})"
            )

    def copy(self) -> "RingPoly":
        return RingPoly(self.basis, self.data.copy(), self.level, self.special, self.ntt, self.mont)

    # -- domain transforms ----------------------------------------------------

    def ntt_(self):
        assert not self.ntt
        b = self.basis
        K.ntt_batch(self.data, self.rows_sel, b.psi_rev, b.psi_sh, b.qs)
        self.ntt = True
        return self

    def intt_(self):
        assert self.ntt
        b = self.basis
        K.intt_batch(self.data, self.rows_sel, b.ipsi_rev, b.ipsi_sh, b.qs, b.ninv, b.ninv_sh)
        self.ntt = False
        return self

    def to_mont_(self):
        assert not self.mont
        b = self.basis
        K.to_mont(self.data, self.rows_sel, b.r2s, b.qs, b.qinvs)
        self.mont = True
        return self

    # -- arithmetic ------------------------------------------------------------

    def add(self, other) -> "RingPoly":
        self._check_mate(other)
        qsel = self.basis.qs[self.rows_sel]
        return RingPoly(
            self.basis, K.add_batch(self.data, other.data, qsel),
            self.level, self.special, self.ntt, self.mont,
        )

    def sub(self, other) -> "RingPoly":
        self._check_mate(other)
        qsel = self.basis.qs[self.rows_sel]
        return RingPoly(
            self.basis, K.sub_batch(self.data, other.data, qsel),
            self.level, self.special, self.ntt, self.mont,
        )

    def neg(self) -> "RingPoly":
        qsel = self.basis.qs[self.rows_sel]
        return RingPoly(
            self.basis, K.neg_batch(self.data, qsel),
            self.level, self.special, self.ntt, self.mont,
        )

    def mul_mont(self, other) -> "RingPoly":
        """Pointwise product; ``other`` must be in Montgomery form."""
        assert self.ntt and other.ntt and other.mont and not self.mont
        out = np.empty_like(self.data)
        b = self.basis
        K.mul_mont(out, self.data, other.data, self.rows_sel, b.qs, b.qinvs)
        return RingPoly(b, out, self.level, self.special, True, False)

    def automorph(self, g: int) -> "RingPoly":
        """sigma_g : X -> X^g, NTT domain (a slot permutation)."""
        assert self.ntt
        perm = self.basis.automorphism_perm(g)
        return RingPoly(
            self.basis, np.ascontiguousarray(self.data[:, perm]),
            self.level, self.special, True, self.mont,
        )

    # -- level machinery --------------------------------------------------------

    def drop_last_(self):
        """Forget the last ct limb (plain modulus reduction, no scaling)."""
        assert not self.special
        if self.level <= 1:
            raise BasisMismatchError("cannot drop below level 1")
        self.data = np.ascontiguousarray(self.data[:-1])
        self.level -= 1
        return self

    def rescale_(self):
        """Divide by the last ct prime with centered rounding; level -= 1."""
        assert self.ntt and not self.special and not self.mont
        if self.level <= 1:
            raise BasisMismatchError("cannot rescale below level 1")
        b = self.basis
        last = self.level - 1
        tail = np.ascontiguousarray(self.data[last:last + 1])
        K.intt_batch(tail, np.array([last], dtype=np.int64),
                     b.ipsi_rev, b.ipsi_sh, b.qs, b.ninv, b.ninv_sh)
        keep_rows = b.rows(last) if last >= 1 else np.empty(0, dtype=np.int64)
        ext = np.empty((last, b.n), dtype=np.uint64)
        K.extend_digit(tail[0], b.qs[last], ext, keep_rows, b.qs, b.mus, b.qmod[last])
        K.ntt_batch(ext, keep_rows, b.psi_rev, b.psi_sh, b.qs)
        self.data = np.ascontiguousarray(self.data[:last])
        K.sub_mul_shoup(self.data, ext, keep_rows,
                        b.qinv_mod[last], b.qinv_mod_sh[last], b.qs)
        self.level = last
        return self

    def mod_down_(self):
        """Remove the special limb, dividing by the special prime (rounded)."""
        assert self.ntt and self.special and not self.mont
        b = self.basis
        tail = np.ascontiguousarray(self.data[-1:])
        K.intt_batch(tail, np.array([b.sp], dtype=np.int64),
                     b.ipsi_rev, b.ipsi_sh, b.qs, b.ninv, b.ninv_sh)
        keep_rows = b.rows(self.level)
        ext = np.empty((self.level, b.n), dtype=np.uint64)
        K.extend_digit(tail[0], b.qs[b.sp], ext, keep_rows, b.qs, b.mus, b.qmod[b.sp])
        K.ntt_batch(ext, keep_rows, b.psi_rev, b.psi_sh, b.qs)
        self.data = np.ascontiguousarray(self.data[:-1])
        K.sub_mul_shoup(self.data, ext, keep_rows,
                        b.qinv_mod[b.sp], b.qinv_mod_sh[b.sp], b.qs)
        self.special = False
        return self

    # -- exact reconstruction ------------------------------------------------

    def to_centered_ints(self) -> list[int]:
        """CRT-lift all coefficients to centered python ints (coeff domain)."""
        p = self.copy().intt_() if self.ntt else self
        b = self.basis
        qs = [int(b.qs[li]) for li in p.rows_sel]
        m = 1
        for q in qs:
            m *= q
        recomb = []
        for q in qs:
            mi = m // q
            recomb.append(mi * pow(mi, -1, q))
        half = m // 2
        cols = p.data.T
        out = []
        for j in range(b.n):
            v = 0
            for ri, rc in enumerate(recomb):
                v += int(cols[j, ri]) * rc
            v %= m
            if v > half:
                v -= m
            out.append(v)
        return out


# -- samplers -----------------------------------------------------------------


def sample_ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, n, dtype=np.int64)


def sample_gaussian(rng: np.random.Generator, n: int, sigma: float = 3.2) -> np.ndarray:
    return np.rint(rng.normal(0.0, sigma, n)).astype(np.int64)


def sample_uniform(rng: np.random.Generator, basis: RnsBasis, level: int,
                   special: bool = False) -> RingPoly:
    rows = basis.rows(level, special)
    data = np.empty((len(rows), basis.n), dtype=np.uint64)
    for ri, li in enumerate(rows):
        data[ri] = rng.integers(0, int(basis.qs[li]), basis.n, dtype=np.uint64)
    return RingPoly(basis, data, level, special, ntt=True)
