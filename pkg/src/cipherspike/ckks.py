"""Leveled RNS-CKKS over the negacyclic ring: encoding, keys, ciphertext ops.

Scope notes:
  * one special prime, per-limb digit decomposition for key switching;
  * eager rescaling — every multiplication immediately divides by the top
    prime, and the exact (float) scale is tracked on the ciphertext;
  * ciphertext refreshing is delegated to a decrypt-and-re-encrypt
    authority, which is a stand-in for a hardware rekeying path and is
    clearly surfaced as such in logs and reports.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import BasisMismatchError, KeyFormatError, ScaleMismatchError, ValidationError
from .ring import (
    RingPoly,
    RnsBasis,
    find_root_2n,
    sample_gaussian,
    sample_ternary,
    sample_uniform,
    scan_primes,
    scan_primes_balanced,
)

MAGIC = b"CKKS\x00\x00\x00\x01"


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class CkksParams:
    n: int
    depth: int  # multiplicative levels available to a fresh ciphertext - 1
    scale_bits: int
    q0_bits: int
    special_bits: int
    sigma: float = 3.2

    @property
    def slots(self) -> int:
        return self.n // 2

    @property
    def fresh_level(self) -> int:
        return self.depth + 1

    def validate(self):
        if self.n & (self.n - 1) or self.n < 8:
            raise ValidationError("ring degree must be a power of two >= 8")
        if not (self.scale_bits <= self.q0_bits <= self.special_bits < 60):
            raise ValidationError("need scale_bits <= q0_bits <= special_bits < 60")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")

    def digest(self) -> bytes:
        blob = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def build_basis(params: CkksParams) -> RnsBasis:
    params.validate()
    two_n = 2 * params.n
    q0 = scan_primes(params.q0_bits, 1, two_n)[0]
    mids = scan_primes_balanced(params.scale_bits, params.depth, two_n,
                                avoid={q0})
    special = scan_primes(params.special_bits, 1, two_n, avoid={q0, *mids})[0]
    if special < max([q0] + mids):
        raise ValidationError("special prime must dominate every ciphertext prime")
    return RnsBasis(params.n, [q0] + mids, special)


# ---------------------------------------------------------------------------
# canonical-embedding codec


class Codec:
    """Real-slot encode/decode for one ring degree.

    Slot j corresponds to evaluation at zeta^(5^j mod 2n) with zeta the
    primitive 2n-th complex root; the conjugate half carries the mirrored
    values so coefficients come out real.
    """

    def __init__(self, n: int):
        self.n = n
        self.slots = n // 2
        two_n = 2 * n
        e = 1
        idx = np.empty(self.slots, dtype=np.int64)
        for j in range(self.slots):
            idx[j] = (e - 1) // 2
            e = e * 5 % two_n
        self.idx = idx
        self.conj_idx = n - 1 - idx  # (2n - e - 1)/2
        k = np.arange(n)
        self.zeta_pow = np.exp(1j * np.pi * k / n)

    def encode_coeffs(self, values, scale: float) -> np.ndarray:
        """Real slot values -> rounded integer coefficients (int64)."""
        z = np.zeros(self.slots, dtype=np.complex128)
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 1 or len(v) > self.slots:
            raise ValidationError(f"encode expects <= {self.slots} values")
        z[: len(v)] = v
        full = np.empty(self.n, dtype=np.complex128)
        full[self.idx] = z * scale
        full[self.conj_idx] = np.conj(z) * scale
        b = np.fft.fft(full) / self.n
        coeffs = np.rint(np.real(b * np.conj(self.zeta_pow)))
        if np.max(np.abs(coeffs)) >= 2**62:
            raise ValidationError("encoded coefficient overflow; lower the scale")
        return coeffs.astype(np.int64)

    def decode_coeffs(self, coeffs, scale: float) -> np.ndarray:
        a = np.asarray(coeffs, dtype=np.float64)
        b = a * self.zeta_pow
        full = self.n * np.fft.ifft(b)
        return np.real(full[self.idx]) / scale


# ---------------------------------------------------------------------------
# keys


@dataclass
class SwitchKey:
    """Per-digit pairs (b_i, a_i) over the full basis, NTT + Montgomery."""

    b: list[np.ndarray]
    a: list[np.ndarray]


@dataclass
class Ciphertext:
    c0: RingPoly
    c1: RingPoly
    scale: float

    @property
    def level(self) -> int:
        return self.c0.level

    def copy(self) -> "Ciphertext":
        return Ciphertext(self.c0.copy(), self.c1.copy(), self.scale)


class CkksContext:
    """Parameters, key material, and every ciphertext-level operation.

    Evaluation keys are derived deterministically from (secret key, seed),
    so a stored key file only needs those two ingredients; rotation keys are
    created on demand for whatever offsets a network plan asks for.
    """

    def __init__(self, params: CkksParams, seed: int, sk_coeffs=None):
        params.validate()
        self.params = params
        self.seed = int(seed)
        self.basis = build_basis(params)
        self.codec = Codec(params.n)
        b = self.basis
        if sk_coeffs is None:
            rng = np.random.default_rng((self.seed, 1))
            sk_coeffs = sample_ternary(rng, params.n)
        self.sk_coeffs = np.asarray(sk_coeffs, dtype=np.int64)
        s = RingPoly.from_signed(b, self.sk_coeffs, b.n_ct, special=True).ntt_()
        self._s = s
        self._s_mont = s.copy().to_mont_()
        # special-prime residue of each ct prime, for the switch-key gadget
        self._p_mod = np.array([int(b.special) % int(q) for q in b.qs], dtype=np.uint64)
        self._p_sh = np.array(
            [(int(w) << 64) // int(q) for w, q in zip(self._p_mod, b.qs)], dtype=np.uint64
        )
        self._enc_rng = np.random.default_rng((self.seed, 11))
        self._pk = self._make_public_key()
        self._relin: SwitchKey | None = None
        self._rot: dict[int, SwitchKey] = {}
        self._pt_cache: dict = {}
        self.provisioned_rotations: tuple[int, ...] | None = None

    # -- key generation -----------------------------------------------------

    def _s_at(self, level: int, mont: bool = True) -> RingPoly:
        src = self._s_mont if mont else self._s
        return RingPoly(self.basis, src.data[:level], level, False, True, mont)

    def _make_public_key(self):
        b = self.basis
        rng = np.random.default_rng((self.seed, 3))
        a = sample_uniform(rng, b, b.n_ct)
        e = RingPoly.from_signed(b, sample_gaussian(rng, b.n, self.params.sigma), b.n_ct).ntt_()
        pb = e.sub(a.mul_mont(self._s_at(b.n_ct)))
        return (pb.to_mont_(), a.to_mont_())

    def _make_switch_key(self, src: RingPoly, tag: int) -> SwitchKey:
        """Keys switching src -> s.  src is over the full basis, NTT domain."""
        b = self.basis
        rng = np.random.default_rng((self.seed, tag))
        bs, as_ = [], []
        full = b.rows(b.n_ct, True)
        for i in range(b.n_ct):
            a = sample_uniform(rng, b, b.n_ct, special=True)
            e = RingPoly.from_signed(
                b, sample_gaussian(rng, b.n, self.params.sigma), b.n_ct, special=True
            ).ntt_()
            bi = e.sub(a.mul_mont(self._s_mont))
            # gadget: add (P mod q_i) * src into ct limb i only
            row = np.ascontiguousarray(src.data[i : i + 1]).copy()
            K.scalar_mul(row, np.array([i], dtype=np.int64), self._p_mod, self._p_sh, b.qs)
            qi = b.qs[i]
            v = bi.data[i] + row[0]
            np.subtract(v, qi, out=v, where=v >= qi)
            bi.data[i] = v
            bi.to_mont_()
            a.to_mont_()
            bs.append(bi.data)
            as_.append(a.data)
        return SwitchKey(bs, as_)

    def relin_key(self) -> SwitchKey:
        if self._relin is None:
            s2 = self._s.mul_mont(self._s_mont)
            self._relin = self._make_switch_key(s2, 7)
        return self._relin

    def rotation_key(self, k: int) -> SwitchKey:
        k = k % self.params.slots
        if k not in self._rot:
            g = self.basis.rotation_group_element(k)
            s_rot = self._s.automorph(g)
            self._rot[k] = self._make_switch_key(s_rot, 1_000_003 + k)
        return self._rot[k]

    def ensure_rotation_keys(self, offsets):
        for k in offsets:
            self.rotation_key(int(k))

    # -- encode / decode ------------------------------------------------------

    def encode(self, values, scale: float, level: int, mont: bool = False) -> RingPoly:
        coeffs = self.codec.encode_coeffs(values, scale)
        pt = RingPoly.from_signed(self.basis, coeffs, level).ntt_()
        if mont:
            pt.to_mont_()
        return pt

    def decode(self, poly: RingPoly, scale: float) -> np.ndarray:
        ints = poly.to_centered_ints()
        return self.codec.decode_coeffs([float(c) for c in ints], scale)

    # -- encrypt / decrypt ------------------------------------------------------

    def encrypt_poly(self, pt: RingPoly, scale: float) -> Ciphertext:
        b = self.basis
        lv = pt.level
        rng = self._enc_rng
        v = RingPoly.from_signed(b, sample_ternary(rng, b.n), lv).ntt_()
        e0 = RingPoly.from_signed(b, sample_gaussian(rng, b.n, self.params.sigma), lv).ntt_()
        e1 = RingPoly.from_signed(b, sample_gaussian(rng, b.n, self.params.sigma), lv).ntt_()
        pkb = RingPoly(b, self._pk[0].data[:lv], lv, False, True, True)
        pka = RingPoly(b, self._pk[1].data[:lv], lv, False, True, True)
        c0 = v.mul_mont(pkb).add(e0).add(pt)
        c1 = v.mul_mont(pka).add(e1)
        return Ciphertext(c0, c1, float(scale))

    def encrypt(self, values, scale: float | None = None, level: int | None = None) -> Ciphertext:
        scale = float(scale if scale is not None else 2.0**self.params.scale_bits)
        level = level if level is not None else self.basis.n_ct
        return self.encrypt_poly(self.encode(values, scale, level), scale)

    def decrypt_poly(self, ct: Ciphertext) -> RingPoly:
        return ct.c0.add(ct.c1.mul_mont(self._s_at(ct.level)))

    def decrypt(self, ct: Ciphertext) -> np.ndarray:
        return self.decode(self.decrypt_poly(ct), ct.scale)

    # -- additive ops -----------------------------------------------------------

    def add(self, x: Ciphertext, y: Ciphertext) -> Ciphertext:
        return Ciphertext(x.c0.add(y.c0), x.c1.add(y.c1), x.scale)

    def sub(self, x: Ciphertext, y: Ciphertext) -> Ciphertext:
        return Ciphertext(x.c0.sub(y.c0), x.c1.sub(y.c1), x.scale)

    def add_plain_poly(self, x: Ciphertext, pt: RingPoly) -> Ciphertext:
        return Ciphertext(x.c0.add(pt), x.c1.copy(), x.scale)

    def negate(self, x: Ciphertext) -> Ciphertext:
        return Ciphertext(x.c0.neg(), x.c1.neg(), x.scale)

    # -- level utilities ----------------------------------------------------------

    def top_prime(self, level: int) -> float:
        return float(int(self.basis.qs[level - 1]))

    def level_down(self, x: Ciphertext, target: int) -> Ciphertext:
        if target > x.level:
            raise BasisMismatchError(f"cannot raise level {x.level} -> {target}")
        out = x.copy()
        while out.c0.level > target:
            out.c0.drop_last_()
            out.c1.drop_last_()
        return out

    def rescale(self, x: Ciphertext) -> Ciphertext:
        q = self.top_prime(x.level)
        out = Ciphertext(x.c0.copy().rescale_(), x.c1.copy().rescale_(), x.scale / q)
        return out

    # -- multiplicative ops ---------------------------------------------------------

    def mul_plain_poly(self, x: Ciphertext, pt_mont: RingPoly, pt_scale: float) -> Ciphertext:
        out = Ciphertext(x.c0.mul_mont(pt_mont), x.c1.mul_mont(pt_mont), x.scale * pt_scale)
        return self.rescale(out)

    def mul_scalar_raw(self, x: Ciphertext, s: float, enc_scale: float) -> Ciphertext:
        """Multiply by the constant polynomial round(s * enc_scale); no rescale."""
        b = self.basis
        w_int = round(float(s) * enc_scale)
        lv = x.level
        w = np.zeros(len(b.qs), dtype=np.uint64)
        wsh = np.zeros(len(b.qs), dtype=np.uint64)
        for li in range(lv):
            q = int(b.qs[li])
            wi = w_int % q
            w[li] = wi
            wsh[li] = (wi << 64) // q
        out = x.copy()
        rows = out.c0.rows_sel
        K.scalar_mul(out.c0.data, rows, w, wsh, b.qs)
        K.scalar_mul(out.c1.data, rows, w, wsh, b.qs)
        out.scale = x.scale * enc_scale
        return out

    def mul(self, x: Ciphertext, y: Ciphertext) -> Ciphertext:
        if x.level != y.level:
            raise BasisMismatchError("ct-ct multiply needs equal levels")
        c0m = y.c0.copy().to_mont_()
        c1m = y.c1.copy().to_mont_()
        d0 = x.c0.mul_mont(c0m)
        d1 = x.c0.mul_mont(c1m).add(x.c1.mul_mont(c0m))
        d2 = x.c1.mul_mont(c1m)
        kb, ka = self._key_switch(d2, self.relin_key())
        out = Ciphertext(d0.add(kb), d1.add(ka), x.scale * y.scale)
        return self.rescale(out)

    # -- key switching ------------------------------------------------------------

    def _decompose(self, poly: RingPoly) -> list[np.ndarray]:
        """Digits of poly: limb i centered-lifted and spread over (level, special)."""
        b = self.basis
        lv = poly.level
        coeff = poly.copy().intt_()
        rows_ext = b.rows(lv, True)
        digits = []
        for i in range(lv):
            ext = np.empty((lv + 1, b.n), dtype=np.uint64)
            K.extend_digit(coeff.data[i], b.qs[i], ext, rows_ext, b.qs, b.mus, b.qmod[i])
            K.ntt_batch(ext, rows_ext, b.psi_rev, b.psi_sh, b.qs)
            digits.append(ext)
        return digits

    def _accumulate(self, digits, key: SwitchKey, lv: int, perm=None):
        b = self.basis
        rows_ext = b.rows(lv, True)
        acc_b = RingPoly.zero(b, lv, special=True)
        acc_a = RingPoly.zero(b, lv, special=True)
        for i, d in enumerate(digits):
            if perm is not None:
                d = np.ascontiguousarray(d[:, perm])
            K.ksw_accumulate(
                acc_b.data, acc_a.data, d, key.b[i], key.a[i], rows_ext, b.qs, b.qinvs
            )
        acc_b.mod_down_()
        acc_a.mod_down_()
        return acc_b, acc_a

    def _key_switch(self, poly: RingPoly, key: SwitchKey):
        return self._accumulate(self._decompose(poly), key, poly.level)

    # -- rotations ----------------------------------------------------------------

    def rotate_many(self, x: Ciphertext, offsets) -> dict[int, Ciphertext]:
        """Hoisted rotations: decompose once, permute digits per offset."""
        b = self.basis
        slots = self.params.slots
        out: dict[int, Ciphertext] = {}
        todo = sorted({int(k) % slots for k in offsets})
        if todo and todo[0] == 0:
            out[0] = x.copy()
            todo = todo[1:]
        if not todo:
            return out
        digits = self._decompose(x.c1)
        for k in todo:
            g = b.rotation_group_element(k)
            perm = b.automorphism_perm(g)
            kb, ka = self._accumulate(digits, self.rotation_key(k), x.level, perm=perm)
            c0 = x.c0.automorph(g).add(kb)
            out[k] = Ciphertext(c0, ka, x.scale)
        return out

    def rotate(self, x: Ciphertext, k: int) -> Ciphertext:
        return self.rotate_many(x, [k])[k % self.params.slots]


# ---------------------------------------------------------------------------
# refresh authority (decrypt-and-re-encrypt; stand-in for a rekeying device)


class RecryptionAuthority:
    """Holds the secret key and rebuilds ciphertexts at the fresh level.

    This models an out-of-band rekeying path.  Every use is recorded so
    reports can state exactly how often plaintext was exposed to it.
    """

    def __init__(self, ctx: CkksContext):
        self.ctx = ctx
        self.refresh_count = 0
        self.compare_count = 0
        self.events: list[str] = []

    def refresh(self, ct: Ciphertext, note: str = "") -> Ciphertext:
        ctx = self.ctx
        canonical = 2.0 ** ctx.params.scale_bits
        self.refresh_count += 1
        self.events.append(f"refresh level={ct.level} {note}".rstrip())
        if ct.scale == canonical:
            # exact integer lift: no re-encoding roundoff
            pt = ctx.decrypt_poly(ct)
            ints = pt.to_centered_ints()
            fresh = RingPoly.from_int_coeffs(
                ctx.basis, ints, ctx.basis.n_ct).ntt_()
            return ctx.encrypt_poly(fresh, ct.scale)
        # the ciphertext scale drifted off the canonical chain (ct-ct
        # multiplications divide by actual primes, not 2^scale_bits);
        # re-encode so every refresh output restarts at the exact default —
        # otherwise path-dependent scale drift compounds across timesteps.
        values = ctx.decode(ctx.decrypt_poly(ct), ct.scale)
        return ctx.encrypt(values, canonical, ctx.basis.n_ct)

    def compare_le(self, v: Ciphertext, threshold: Ciphertext) -> Ciphertext:
        """Encrypted indicator of (v <= threshold), slot-wise, at fresh level.

        Exact comparison is not a native homomorphic capability here; this
        authority performs it after decryption, mirroring an evaluator that
        offloads the nonlinearity to a trusted unit.
        """
        ctx = self.ctx
        vals = ctx.decrypt(v)
        th = ctx.decrypt(threshold)
        ind = (vals <= th).astype(np.float64)
        self.compare_count += 1
        self.events.append(f"compare level={v.level}")
        scale = 2.0**ctx.params.scale_bits
        return ctx.encrypt(ind, scale, ctx.basis.n_ct)


# ---------------------------------------------------------------------------
# serialization


def _pack_section(tag: bytes, payload: bytes) -> bytes:
    assert len(tag) == 4
    return tag + struct.pack("<Q", len(payload)) + payload


def save_keys(path: str, ctx: CkksContext, rotations=None):
    """Key file: params + seed + secret key.  Evaluation keys are rederived,
    so provisioning a rotation set only records which offsets are allowed.
    rotations=None omits the section (no restriction); an empty set is a
    valid provisioning (a network that needs no rotations at all)."""
    params_blob = json.dumps(ctx.params.__dict__, sort_keys=True).encode()
    sk_blob = ctx.sk_coeffs.astype("<i8").tobytes()
    seed_blob = struct.pack("<q", ctx.seed)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(ctx.params.digest())
        f.write(_pack_section(b"PRMS", params_blob))
        f.write(_pack_section(b"SEED", seed_blob))
        f.write(_pack_section(b"SECK", sk_blob))
        if rotations is not None:
            rot = np.asarray(sorted(set(int(r) for r in rotations)), dtype="<i4")
            f.write(_pack_section(b"ROTS", rot.tobytes()))


def _read_sections(buf: io.BytesIO) -> dict[bytes, bytes]:
    out = {}
    while True:
        tag = buf.read(4)
        if not tag:
            break
        if len(tag) != 4:
            raise KeyFormatError("truncated section tag")
        (ln,) = struct.unpack("<Q", buf.read(8))
        payload = buf.read(ln)
        if len(payload) != ln:
            raise KeyFormatError("truncated section payload")
        out[tag] = payload
    return out


def load_keys(path: str) -> CkksContext:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise KeyFormatError("bad magic; not a key file")
    digest = blob[len(MAGIC) : len(MAGIC) + 32]
    buf = io.BytesIO(blob[len(MAGIC) + 32 :])
    sec = _read_sections(buf)
    for tag in (b"PRMS", b"SEED", b"SECK"):
        if tag not in sec:
            raise KeyFormatError(f"missing section {tag.decode()}")
    params = CkksParams(**json.loads(sec[b"PRMS"]))
    if params.digest() != digest:
        raise KeyFormatError("parameter digest mismatch")
    (seed,) = struct.unpack("<q", sec[b"SEED"])
    sk = np.frombuffer(sec[b"SECK"], dtype="<i8")
    if len(sk) != params.n:
        raise KeyFormatError("secret key length does not match ring degree")
    ctx = CkksContext(params, seed, sk_coeffs=sk)
    if b"ROTS" in sec:
        ctx.provisioned_rotations = tuple(
            int(v) for v in np.frombuffer(sec[b"ROTS"], dtype="<i4"))
    else:
        ctx.provisioned_rotations = None
    return ctx
