"""Evaluator backends: real CKKS and a plaintext simulator.

Both backends run the *same* level ledger — every operation's level
arithmetic and contract checks live in the shared base class, so a plan
that survives the simulator is guaranteed to carry identical level
semantics on the encrypted path.  The simulator just stores float slot
vectors (optionally with injected Gaussian noise); the CKKS backend stores
real ciphertexts.
"""

from __future__ import annotations

import time
from collections import defaultdict

import numpy as np

from .ckks import Ciphertext, CkksContext, RecryptionAuthority
from .errors import (
    LevelExhaustedError,
    MissingRotationKeyError,
    ScaleMismatchError,
)

ADD_SCALE_RTOL = 1e-4  # adds tolerate this much relative scale drift


class CipherVector:
    """One packed slot vector moving through the network."""

    __slots__ = ("payload", "level", "scale_domain", "slots")

    def __init__(self, payload, level: int, slots: int, scale_domain: str = "raw"):
        self.payload = payload
        self.level = level
        self.slots = slots
        self.scale_domain = scale_domain

    def clone_meta(self, payload, level=None, scale_domain=None) -> "CipherVector":
        return CipherVector(
            payload,
            self.level if level is None else level,
            self.slots,
            self.scale_domain if scale_domain is None else scale_domain,
        )


class Backend:
    """Level accounting, auditing and counters; subclasses do the math."""

    name = "abstract"

    def __init__(self, fresh_level: int, slots: int):
        self.fresh_level = fresh_level
        self.slots = slots
        self.counters = defaultdict(int)
        self.op_seconds = defaultdict(float)
        self.audit: list[str] = []
        self.refresh_log: list[dict] = []
        self.compare_log: list[dict] = []
        self._layer = "-"
        self._t = "-"

    # -- context / bookkeeping ------------------------------------------------

    def set_context(self, layer: str | None = None, timestep=None):
        if layer is not None:
            self._layer = layer
        if timestep is not None:
            self._t = str(timestep)

    def _log(self, op: str, before: int, after: int):
        self.audit.append(f"{op} {self._layer} {self._t} {before} {after}")

    def _need(self, vec: CipherVector, levels: int, op: str):
        if vec.level < levels:
            raise LevelExhaustedError(op, vec.level, levels)

    def _align(self, x: CipherVector, y: CipherVector):
        lv = min(x.level, y.level)
        if x.level > lv:
            x = self.trim(x, lv)
        if y.level > lv:
            y = self.trim(y, lv)
        return x, y

    # -- public ops -------------------------------------------------------------

    def encrypt(self, values, level: int | None = None, scale_domain: str = "raw"):
        level = self.fresh_level if level is None else level
        t = time.perf_counter()
        payload = self._encrypt_impl(np.asarray(values, dtype=np.float64), level)
        self.op_seconds["encrypt"] += time.perf_counter() - t
        return CipherVector(payload, level, self.slots, scale_domain)

    def decrypt(self, vec: CipherVector) -> np.ndarray:
        return self._decrypt_impl(vec)

    def add(self, x: CipherVector, y: CipherVector) -> CipherVector:
        if x.scale_domain != y.scale_domain:
            raise ScaleMismatchError(
                f"add mixes scale domains: {x.scale_domain!r} + "
                f"{y.scale_domain!r} at {self._layer} t={self._t}")
        x, y = self._align(x, y)
        t = time.perf_counter()
        out = x.clone_meta(self._add_impl(x, y))
        self.op_seconds["add"] += time.perf_counter() - t
        self.counters["adds"] += 1
        return out

    def add_plain(self, x: CipherVector, values) -> CipherVector:
        t = time.perf_counter()
        out = x.clone_meta(self._add_plain_impl(x, np.asarray(values, dtype=np.float64)))
        self.op_seconds["add"] += time.perf_counter() - t
        return out

    def negate(self, x: CipherVector) -> CipherVector:
        return x.clone_meta(self._negate_impl(x))

    def sub(self, x: CipherVector, y: CipherVector) -> CipherVector:
        return self.add(x, self.negate(y))

    def mul(self, x: CipherVector, y: CipherVector) -> CipherVector:
        x, y = self._align(x, y)
        self._need(x, 2, "mul")
        t = time.perf_counter()
        domain = "scaled" if "scaled" in (x.scale_domain, y.scale_domain) \
            else x.scale_domain
        out = x.clone_meta(self._mul_impl(x, y), level=x.level - 1,
                           scale_domain=domain)
        self.op_seconds["mul"] += time.perf_counter() - t
        self.counters["mults"] += 1
        self._log("mul", x.level, out.level)
        return out

    def mul_plain(self, x: CipherVector, values, scale_domain=None) -> CipherVector:
        self._need(x, 2, "mul_plain")
        t = time.perf_counter()
        payload = self._mul_plain_impl(x, np.asarray(values, dtype=np.float64))
        self.op_seconds["mul_plain"] += time.perf_counter() - t
        out = x.clone_meta(payload, level=x.level - 1, scale_domain=scale_domain)
        self.counters["plain_mults"] += 1
        self._log("mul_plain", x.level, out.level)
        return out

    def mul_scalar(self, x: CipherVector, s: float) -> CipherVector:
        self._need(x, 2, "mul_scalar")
        t = time.perf_counter()
        out = x.clone_meta(self._mul_scalar_impl(x, float(s)), level=x.level - 1)
        self.op_seconds["mul_plain"] += time.perf_counter() - t
        self.counters["scalar_mults"] += 1
        self._log("mul_scalar", x.level, out.level)
        return out

    def linear_combine(self, vecs, coeffs, const: float = 0.0) -> CipherVector:
        """sum_i coeffs[i] * vecs[i] + const, spending one level total."""
        assert vecs and len(vecs) == len(coeffs)
        lv = min(v.level for v in vecs)
        vecs = [self.trim(v, lv) for v in vecs]
        self._need(vecs[0], 2, "linear_combine")
        t = time.perf_counter()
        payload = self._linear_combine_impl(vecs, [float(c) for c in coeffs], float(const))
        self.op_seconds["mul_plain"] += time.perf_counter() - t
        out = vecs[0].clone_meta(payload, level=lv - 1)
        self.counters["scalar_mults"] += len(coeffs)
        self._log("linear_combine", lv, out.level)
        return out

    def rotate(self, x: CipherVector, k: int) -> CipherVector:
        return self.rotate_many(x, [k])[k % self.slots]

    def rotate_many(self, x: CipherVector, offsets) -> dict[int, CipherVector]:
        offs = sorted({int(k) % self.slots for k in offsets})
        self._check_rotations([k for k in offs if k])
        t = time.perf_counter()
        payloads = self._rotate_many_impl(x, offs)
        self.op_seconds["rotate"] += time.perf_counter() - t
        out = {}
        for k in offs:
            out[k] = x.clone_meta(payloads[k])
            if k:
                self.counters["rotations"] += 1
                self._log("rotate", x.level, x.level)
        return out

    def trim(self, x: CipherVector, target: int) -> CipherVector:
        if target == x.level:
            return x
        self._need(x, target, "trim")  # cannot trim upward
        out = x.clone_meta(self._trim_impl(x, target), level=target)
        self._log("trim", x.level, target)
        return out

    def refresh(self, x: CipherVector, note: str = "") -> CipherVector:
        t = time.perf_counter()
        payload = self._refresh_impl(x)
        self.op_seconds["refresh"] += time.perf_counter() - t
        out = x.clone_meta(payload, level=self.fresh_level)
        self.counters["refreshes"] += 1
        self._log("refresh", x.level, out.level)
        self.refresh_log.append({
            "layer": self._layer, "timestep": self._t,
            "level_before": x.level, "note": note,
        })
        return out

    def exact_compare_le(self, x: CipherVector, threshold: CipherVector) -> CipherVector:
        """Slot-wise indicator of x <= threshold, returned at the fresh level."""
        t = time.perf_counter()
        payload = self._compare_impl(x, threshold)
        self.op_seconds["compare"] += time.perf_counter() - t
        out = CipherVector(payload, self.fresh_level, self.slots, "raw")
        self.counters["compares"] += 1
        self._log("compare", x.level, out.level)
        self.compare_log.append({
            "layer": self._layer, "timestep": self._t,
            "level_before": x.level,
        })
        return out

    def _check_rotations(self, offsets):
        pass

    def counter_snapshot(self) -> dict:
        return dict(self.counters)


class SimBackend(Backend):
    """Plaintext mirror of the encrypted evaluator.

    Payloads are float slot vectors.  With ``noise_sigma`` set, every lossy
    operation adds centered Gaussian noise so approximation margins can be
    stress-tested without paying for real ciphertexts.
    """

    name = "sim"

    def __init__(self, fresh_level: int, slots: int, noise_sigma: float = 0.0, seed: int = 0,
                 allowed_rotations=None):
        super().__init__(fresh_level, slots)
        self.noise_sigma = float(noise_sigma)
        self._rng = np.random.default_rng(seed)
        self.allowed_rotations = None if allowed_rotations is None else set(allowed_rotations)

    def _noise(self, a: np.ndarray) -> np.ndarray:
        if self.noise_sigma > 0:
            a = a + self._rng.normal(0.0, self.noise_sigma, len(a))
        return a

    def _check_rotations(self, offsets):
        if self.allowed_rotations is None:
            return
        for k in offsets:
            if k not in self.allowed_rotations:
                raise MissingRotationKeyError(k)

    def _encrypt_impl(self, values, level):
        buf = np.zeros(self.slots)
        buf[: len(values)] = values
        return self._noise(buf)

    def _decrypt_impl(self, vec):
        return vec.payload.copy()

    def _add_impl(self, x, y):
        return x.payload + y.payload

    def _add_plain_impl(self, x, values):
        buf = np.zeros(self.slots)
        buf[: len(values)] = values
        return x.payload + buf

    def _negate_impl(self, x):
        return -x.payload

    def _mul_impl(self, x, y):
        return self._noise(x.payload * y.payload)

    def _mul_plain_impl(self, x, values):
        buf = np.zeros(self.slots)
        buf[: len(values)] = values
        return self._noise(x.payload * buf)

    def _mul_scalar_impl(self, x, s):
        return self._noise(x.payload * s)

    def _linear_combine_impl(self, vecs, coeffs, const):
        acc = np.full(self.slots, const)
        for v, c in zip(vecs, coeffs):
            acc += c * v.payload
        return self._noise(acc)

    def _rotate_many_impl(self, x, offsets):
        return {k: (x.payload.copy() if k == 0 else self._noise(np.roll(x.payload, -k)))
                for k in offsets}

    def _trim_impl(self, x, target):
        return x.payload.copy()

    def _refresh_impl(self, x):
        return self._noise(x.payload.copy())

    def _compare_impl(self, x, threshold):
        return (x.payload <= threshold.payload).astype(np.float64)


class CkksBackend(Backend):
    """The real encrypted evaluator, wrapping a CKKS context."""

    name = "ckks"

    def __init__(self, ctx: CkksContext, allowed_rotations=None):
        super().__init__(ctx.basis.n_ct, ctx.params.slots)
        self.ctx = ctx
        self.authority = RecryptionAuthority(ctx)
        self.allowed_rotations = None if allowed_rotations is None else set(allowed_rotations)
        if self.allowed_rotations:
            ctx.ensure_rotation_keys(self.allowed_rotations)
        self._default_scale = 2.0 ** ctx.params.scale_bits

    def _check_rotations(self, offsets):
        if self.allowed_rotations is None:
            return
        for k in offsets:
            if k not in self.allowed_rotations:
                raise MissingRotationKeyError(k)

    def _check_scales(self, a: Ciphertext, b: Ciphertext):
        if abs(a.scale - b.scale) > ADD_SCALE_RTOL * abs(a.scale):
            raise ScaleMismatchError(
                f"scale drift too large for add: {a.scale:.6e} vs {b.scale:.6e}"
            )

    def _encrypt_impl(self, values, level):
        return self.ctx.encrypt(values, self._default_scale, level)

    def _decrypt_impl(self, vec):
        return self.ctx.decrypt(vec.payload)

    def _add_impl(self, x, y):
        self._check_scales(x.payload, y.payload)
        return self.ctx.add(x.payload, y.payload)

    def _add_plain_impl(self, x, values):
        ct = x.payload
        pt = self.ctx.encode(values, ct.scale, ct.level)
        return self.ctx.add_plain_poly(ct, pt)

    def _negate_impl(self, x):
        return self.ctx.negate(x.payload)

    def _mul_impl(self, x, y):
        return self.ctx.mul(x.payload, y.payload)

    def _mul_plain_impl(self, x, values):
        ct = x.payload
        qt = self.ctx.top_prime(ct.level)
        key = (values.tobytes(), ct.level)
        pt = self.ctx._pt_cache.get(key)
        if pt is None:
            pt = self.ctx.encode(values, qt, ct.level, mont=True)
            self.ctx._pt_cache[key] = pt
        return self.ctx.mul_plain_poly(ct, pt, qt)

    def _mul_scalar_impl(self, x, s):
        ct = x.payload
        qt = self.ctx.top_prime(ct.level)
        return self.ctx.rescale(self.ctx.mul_scalar_raw(ct, s, qt))

    def _linear_combine_impl(self, vecs, coeffs, const):
        ct0 = vecs[0].payload
        qt = self.ctx.top_prime(ct0.level)
        acc = None
        for v, c in zip(vecs, coeffs):
            if c == 0.0:
                continue
            term = self.ctx.mul_scalar_raw(v.payload, c, qt)
            acc = term if acc is None else self.ctx.add(acc, term)
        if acc is None:
            acc = self.ctx.mul_scalar_raw(ct0, 0.0, qt)
        acc = self.ctx.rescale(acc)
        if const != 0.0:
            pt = self.ctx.encode(np.full(self.slots, const), acc.scale, acc.level)
            acc = self.ctx.add_plain_poly(acc, pt)
        return acc

    def _rotate_many_impl(self, x, offsets):
        return {k: v for k, v in self.ctx.rotate_many(x.payload, offsets).items()}

    def _trim_impl(self, x, target):
        return self.ctx.level_down(x.payload, target)

    def _refresh_impl(self, x):
        return self.authority.refresh(x.payload)

    def _compare_impl(self, x, threshold):
        return self.authority.compare_le(x.payload, threshold.payload)
