"""Packed network layers over encrypted slot vectors.

Packing: channel-major, row-major — value (ch, i, j) of a (c, h, w)
feature map lives in slot ch*h*w + i*w + j.  Each layer is a *plan*: built
once from weights and geometry, it exposes the exact rotation offsets it
will use (so keys can be provisioned ahead of time), a fixed level cost,
an encrypted `run`, and a numerically identical plaintext twin
`run_plain` for reference traces.

Convolution padding is never materialised: tap weight vectors hold zeros
wherever a shifted read would fall outside the real input, which both
implements zero padding and neutralises rotation wrap-around.  Output
repacking is a two-hop gather (per-channel hop, then per-row hop) so the
rotation-key set stays small while slots end up dense again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import Backend, CipherVector
from .errors import CapacityError, ValidationError


def next_pow2(x: int) -> int:
    return 1 << max(0, x - 1).bit_length()


@dataclass(frozen=True)
class Geometry:
    c: int
    h: int
    w: int

    @property
    def flat(self) -> int:
        return self.c * self.h * self.w


class LayerPlan:
    name: str
    level_cost: int
    in_geom: Geometry
    out_geom: Geometry

    def rotations(self) -> set[int]:
        raise NotImplementedError

    def run(self, be: Backend, x: CipherVector) -> CipherVector:
        raise NotImplementedError

    def run_plain(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _gather_rotate(be: Backend, x: CipherVector, offsets: list[int]) -> dict[int, CipherVector]:
    """Rotations of x by each offset; falls back to binary offset chains
    when the distinct-offset set is large, to bound the number of keys."""
    offs = sorted({o % be.slots for o in offsets})
    if len(offs) <= 16:
        return be.rotate_many(x, offs)
    out = {}
    for o in offs:
        cur, rem, bit = x, o, 0
        while rem:
            if rem & 1:
                cur = be.rotate(cur, 1 << bit)
            rem >>= 1
            bit += 1
        out[o] = cur
    return out


def _binary_offsets(offsets, slots: int) -> set[int]:
    offs = {o % slots for o in offsets}
    if len(offs) <= 16:
        return offs
    bits = set()
    for o in offs:
        b = 0
        while o:
            if o & 1:
                bits.add((1 << b) % slots)
            o >>= 1
            b += 1
    return bits


def _gather_rotation_ops(offsets, slots: int) -> int:
    """Exact rotation-op count _gather_rotate will charge for these offsets."""
    offs = {o % slots for o in offsets}
    if len(offs) <= 16:
        return len(offs - {0})
    return sum(bin(o).count("1") for o in offs)


def _many_rotation_ops(offsets, slots: int) -> int:
    """Exact rotation-op count of one hoisted rotate_many call."""
    return len({o % slots for o in offsets} - {0})


class ConvPlan(LayerPlan):
    """2-D convolution: shared tap rotations, per-output-channel weighted
    sums, log-depth channel fold, then dense repack (strided column
    compaction first when stride > 1)."""

    def __init__(self, name: str, in_geom: Geometry, c_out: int, k: int, stride: int,
                 padding: int, weights: np.ndarray, bias: np.ndarray | None,
                 slots: int, scale_fold: float = 1.0):
        c_in, h, w = in_geom.c, in_geom.h, in_geom.w
        if weights.shape != (c_out, c_in, k, k):
            raise ValidationError(f"{name}: weight shape {weights.shape} != "
                                  f"{(c_out, c_in, k, k)}")
        h_out = (h + 2 * padding - k) // stride + 1
        w_out = (w + 2 * padding - k) // stride + 1
        if h_out < 1 or w_out < 1:
            raise ValidationError(f"{name}: kernel does not fit input")
        self.name = name
        self.in_geom = in_geom
        self.out_geom = Geometry(c_out, h_out, w_out)
        self.k, self.stride, self.padding = k, stride, padding
        self.slots = slots
        self.level_cost = 3 if stride > 1 else 2
        hw = h * w
        fold_blocks = next_pow2(c_in)
        if in_geom.flat > slots or self.out_geom.flat > slots:
            raise CapacityError(name, max(in_geom.flat, self.out_geom.flat), slots)
        if fold_blocks * hw > slots and not (c_in == fold_blocks and c_in * hw == slots):
            raise CapacityError(name, fold_blocks * hw, slots)

        bias = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64)
        self.w_eff = np.asarray(weights, dtype=np.float64) * scale_fold
        self.b_eff = bias * scale_fold

        # tap rotations + per-(tap, co) weight vectors with virtual padding
        self.taps = []
        ii = np.arange(h)
        jj = np.arange(w)
        for di in range(k):
            for dj in range(k):
                off = (di - padding) * w + (dj - padding)
                wv = np.zeros((c_out, slots))
                ivalid = (ii + di - padding >= 0) & (ii + di - padding < h)
                jvalid = (jj + dj - padding >= 0) & (jj + dj - padding < w)
                cell = np.outer(ivalid, jvalid).reshape(-1)  # (h*w,) validity
                for ci in range(c_in):
                    base = ci * hw
                    for co in range(c_out):
                        wv[co, base : base + hw][cell] = self.w_eff[co, ci, di, dj]
                self.taps.append((off, wv))

        self.fold_offsets = [hw << t for t in range(max(0, c_in - 1).bit_length())]

        # stage A: column compaction for stride > 1
        self.stage_a = []
        if stride > 1:
            for jp in range(w_out):
                mask = np.zeros(slots)
                sel = (np.arange(h) * w)[:, None] + jp
                mask[sel.reshape(-1)] = 1.0
                self.stage_a.append((jp * (stride - 1), mask))

        # stage B: two-hop dense repack, masks grouped by second-hop offset
        out_hw = h_out * w_out
        self.hop1 = [(-co * out_hw) % slots for co in range(c_out)]
        self.hop2_groups = []  # per co: dict off2 -> mask
        for co in range(c_out):
            groups: dict[int, np.ndarray] = {}
            for ip in range(h_out):
                off2 = (ip * (stride * w - w_out)) % slots
                m = groups.setdefault(off2, np.zeros(slots))
                t0 = co * out_hw + ip * w_out
                m[t0 : t0 + w_out] = 1.0
            self.hop2_groups.append(groups)

        self.bias_vec = np.repeat(self.b_eff, out_hw)

    def rotations(self) -> set[int]:
        r = {off % self.slots for off, _ in self.taps}
        r |= {o % self.slots for o in self.fold_offsets}
        r |= {o % self.slots for o, _ in self.stage_a}
        r |= set(self.hop1)
        for groups in self.hop2_groups:
            r |= set(groups)
        r.discard(0)
        return r

    def tap_rotation_ops(self) -> int:
        """Window-shift rotations alone: k^2 - 1 for any distinct-offset kernel."""
        return _many_rotation_ops([off for off, _ in self.taps], self.slots)

    def compaction_rotation_ops(self) -> int:
        """Channel-fold plus repack rotations (everything past the taps)."""
        c_out = self.out_geom.c
        n = c_out * sum(1 for o in self.fold_offsets if o % self.slots)
        if self.stage_a:
            n += c_out * _many_rotation_ops(
                [o for o, _ in self.stage_a], self.slots)
        n += sum(1 for o in self.hop1 if o)
        n += sum(_many_rotation_ops(list(g), self.slots)
                 for g in self.hop2_groups)
        return n

    def expected_rotation_ops(self) -> int:
        return self.tap_rotation_ops() + self.compaction_rotation_ops()

    def run(self, be: Backend, x: CipherVector) -> CipherVector:
        rots = be.rotate_many(x, [off for off, _ in self.taps])
        acc = None
        for co in range(self.out_geom.c):
            part = None
            for off, wv in self.taps:
                t = be.mul_plain(rots[off % self.slots], wv[co])
                part = t if part is None else be.add(part, t)
            for foff in self.fold_offsets:
                part = be.add(part, be.rotate(part, foff))
            if self.stage_a:
                sa = be.rotate_many(part, [o for o, _ in self.stage_a])
                part = None
                for o, mask in self.stage_a:
                    t = be.mul_plain(sa[o % self.slots], mask)
                    part = t if part is None else be.add(part, t)
            h1 = be.rotate(part, self.hop1[co]) if self.hop1[co] else part
            groups = self.hop2_groups[co]
            r2 = be.rotate_many(h1, list(groups))
            for off2, mask in sorted(groups.items()):
                t = be.mul_plain(r2[off2], mask)
                acc = t if acc is None else be.add(acc, t)
        return be.add_plain(acc, self.bias_vec)

    def run_plain(self, x: np.ndarray) -> np.ndarray:
        c_out, h_out, w_out = self.out_geom.c, self.out_geom.h, self.out_geom.w
        p, s, k = self.padding, self.stride, self.k
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        out = np.zeros((c_out, h_out, w_out))
        for di in range(k):
            for dj in range(k):
                patch = xp[:, di : di + (h_out - 1) * s + 1 : s,
                           dj : dj + (w_out - 1) * s + 1 : s]
                out += np.tensordot(self.w_eff[:, :, di, dj], patch, axes=(1, 0))
        return out + self.b_eff[:, None, None]


class AvgPoolPlan(LayerPlan):
    """Average pooling: window-sum rotations, then dense repack with the
    1/k^2 normalisation folded into the repack masks."""

    def __init__(self, name: str, in_geom: Geometry, k: int, stride: int, slots: int,
                 scale_fold: float = 1.0):
        c, h, w = in_geom.c, in_geom.h, in_geom.w
        h_out = (h - k) // stride + 1
        w_out = (w - k) // stride + 1
        if h_out < 1 or w_out < 1:
            raise ValidationError(f"{name}: pool window does not fit input")
        self.name = name
        self.in_geom = in_geom
        self.out_geom = Geometry(c, h_out, w_out)
        self.k, self.stride, self.slots = k, stride, slots
        self.scale_fold = scale_fold
        self.is_global = h_out == 1 and w_out == 1
        self.level_cost = 1 if self.is_global else 2
        if in_geom.flat > slots:
            raise CapacityError(name, in_geom.flat, slots)
        hw = h * w
        inv = scale_fold / (k * k)

        self.window_offsets = [di * w + dj for di in range(k) for dj in range(k) if di or dj]

        if self.is_global:
            # one masked gather straight to slot c
            self.single = []
            for ch in range(c):
                off = (ch * (hw - 1)) % slots
                mask = np.zeros(slots)
                mask[ch] = inv
                self.single.append((off, mask))
        else:
            self.stage_a = []
            for jp in range(w_out):
                mask = np.zeros(slots)
                sel = (np.arange(c * h) * w)[:, None] + jp  # every row of every channel
                mask[sel.reshape(-1)] = inv
                self.stage_a.append((jp * (stride - 1), mask))
            out_hw = h_out * w_out
            self.hop1 = [(ch * (hw - out_hw)) % slots for ch in range(c)]
            self.hop2_groups = []
            for ch in range(c):
                groups: dict[int, np.ndarray] = {}
                for ip in range(h_out):
                    off2 = (ip * (stride * w - w_out)) % slots
                    m = groups.setdefault(off2, np.zeros(slots))
                    t0 = ch * out_hw + ip * w_out
                    m[t0 : t0 + w_out] = 1.0
                self.hop2_groups.append(groups)

    def rotations(self) -> set[int]:
        r = {o % self.slots for o in self.window_offsets}
        if self.is_global:
            r |= _binary_offsets([o for o, _ in self.single], self.slots)
        else:
            r |= {o % self.slots for o, _ in self.stage_a}
            r |= set(self.hop1)
            for groups in self.hop2_groups:
                r |= set(groups)
        r.discard(0)
        return r

    def tap_rotation_ops(self) -> int:
        return _many_rotation_ops([0] + self.window_offsets, self.slots)

    def compaction_rotation_ops(self) -> int:
        if self.is_global:
            return _gather_rotation_ops([o for o, _ in self.single], self.slots)
        n = _many_rotation_ops([o for o, _ in self.stage_a], self.slots)
        n += _many_rotation_ops(self.hop1, self.slots)
        n += sum(_many_rotation_ops(list(g), self.slots)
                 for g in self.hop2_groups)
        return n

    def expected_rotation_ops(self) -> int:
        return self.tap_rotation_ops() + self.compaction_rotation_ops()

    def run(self, be: Backend, x: CipherVector) -> CipherVector:
        rots = be.rotate_many(x, [0] + self.window_offsets)
        y = None
        for off in [0] + self.window_offsets:
            t = rots[off % self.slots]
            y = t if y is None else be.add(y, t)
        acc = None
        if self.is_global:
            g = _gather_rotate(be, y, [o for o, _ in self.single])
            for off, mask in self.single:
                t = be.mul_plain(g[off % self.slots], mask)
                acc = t if acc is None else be.add(acc, t)
            return acc
        sa = be.rotate_many(y, [o for o, _ in self.stage_a])
        ya = None
        for o, mask in self.stage_a:
            t = be.mul_plain(sa[o % self.slots], mask)
            ya = t if ya is None else be.add(ya, t)
        h1s = be.rotate_many(ya, self.hop1)
        for ch in range(self.in_geom.c):
            groups = self.hop2_groups[ch]
            r2 = be.rotate_many(h1s[self.hop1[ch]], list(groups))
            for off2, mask in sorted(groups.items()):
                t = be.mul_plain(r2[off2], mask)
                acc = t if acc is None else be.add(acc, t)
        return acc

    def run_plain(self, x: np.ndarray) -> np.ndarray:
        c, h_out, w_out = self.out_geom.c, self.out_geom.h, self.out_geom.w
        k, s = self.k, self.stride
        out = np.zeros((c, h_out, w_out))
        for ip in range(h_out):
            for jp in range(w_out):
                out[:, ip, jp] = x[:, ip * s : ip * s + k, jp * s : jp * s + k].mean((1, 2))
        return out * self.scale_fold


class FcPlan(LayerPlan):
    """Fully connected layer: one weighted slot product per neuron, a
    log-depth rotate-and-add tree to fold it, then a masked gather that
    parks neuron k's total in slot k."""

    def __init__(self, name: str, n_in: int, n_out: int, weights: np.ndarray,
                 bias: np.ndarray | None, slots: int, scale_fold: float = 1.0):
        if weights.shape != (n_out, n_in):
            raise ValidationError(f"{name}: weight shape {weights.shape} != {(n_out, n_in)}")
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.in_geom = Geometry(1, 1, n_in)
        self.out_geom = Geometry(1, 1, n_out)
        self.slots = slots
        self.level_cost = 2
        self.n_pad = next_pow2(n_in)
        if self.n_pad > slots or n_out > slots:
            raise CapacityError(name, max(self.n_pad, n_out), slots)
        bias = np.zeros(n_out) if bias is None else np.asarray(bias, dtype=np.float64)
        self.w_eff = np.asarray(weights, dtype=np.float64) * scale_fold
        self.b_eff = bias * scale_fold
        self.w_rows = np.zeros((n_out, slots))
        self.w_rows[:, :n_in] = self.w_eff
        self.tree_offsets = [1 << t for t in range(self.n_pad.bit_length() - 1)]
        self.combine_offsets = [(-kk) % slots for kk in range(n_out)]
        self.bias_vec = np.zeros(n_out)
        self.bias_vec[:] = self.b_eff

    def rotations(self) -> set[int]:
        r = {o % self.slots for o in self.tree_offsets}
        r |= set(self.combine_offsets)
        r.discard(0)
        return r

    def expected_rotation_ops(self) -> int:
        per_neuron = sum(1 for o in self.tree_offsets if o % self.slots)
        return self.n_out * per_neuron + sum(
            1 for o in self.combine_offsets if o)

    def run(self, be: Backend, x: CipherVector) -> CipherVector:
        acc = None
        for kk in range(self.n_out):
            prod = be.mul_plain(x, self.w_rows[kk])
            for off in self.tree_offsets:
                prod = be.add(prod, be.rotate(prod, off))
            if self.combine_offsets[kk]:
                prod = be.rotate(prod, self.combine_offsets[kk])
            mask = np.zeros(self.slots)
            mask[kk] = 1.0
            t = be.mul_plain(prod, mask)
            acc = t if acc is None else be.add(acc, t)
        return be.add_plain(acc, self.bias_vec)

    def run_plain(self, x: np.ndarray) -> np.ndarray:
        return self.w_eff @ x.reshape(-1) + self.b_eff


class ScaleMaskPlan(LayerPlan):
    """Multiply the live region by a constant and zero everything else.
    Used to bring identity shortcuts into a block's scaled domain."""

    def __init__(self, name: str, geom: Geometry, scale: float, slots: int):
        self.name = name
        self.in_geom = self.out_geom = geom
        self.slots = slots
        self.level_cost = 1
        self.mask = np.zeros(slots)
        self.mask[: geom.flat] = scale

    def rotations(self) -> set[int]:
        return set()

    def run(self, be: Backend, x: CipherVector) -> CipherVector:
        return be.mul_plain(x, self.mask)

    def run_plain(self, x: np.ndarray) -> np.ndarray:
        return x * self.mask[: x.size].reshape(x.shape)
