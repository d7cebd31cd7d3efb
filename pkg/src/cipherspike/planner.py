"""Offline analysis and the inference driver.

A network spec compiles to a short register program — ``apply`` a packed
layer, step a ``lif``, ``copy`` a register (residual shortcut capture),
``join`` two registers — over per-timestep ciphertext registers.  The same
program serves four consumers:

* rotation harvesting (key provisioning, independent of timestep count),
* a backward level-need pass that places refreshes as late as legality
  allows,
* the encrypted driver, which evaluates each instruction across all
  timesteps before moving on (so one layer's weights are live at a time),
* the plaintext twin used as the oracle in differential tests, and the
  static ledger simulation (the plain driver on the sim backend).

Refresh policy: a ciphertext is refreshed right before an instruction
whose remaining-depth need exceeds the ciphertext's level.  In approx
mode each LIF additionally refreshes its membrane before the spike series
when short (its internal rule); in switch mode spike outputs restart at
the fresh level by construction, so refreshes happen only on genuine
ledger underflow — strictly less often.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backend import Backend, CipherVector
from .errors import HeContractError, ValidationError
from .layers import (
    AvgPoolPlan,
    ConvPlan,
    FcPlan,
    Geometry,
    LayerPlan,
    ScaleMaskPlan,
)
from .lif import LifPlan
from .model_io import LayerEntry, LifSettings, NetworkSpec, weight_units


@dataclass(frozen=True)
class RotationPlan:
    """Every rotation index inference will ever ask a key for."""
    indices: tuple[int, ...]
    provenance: dict[str, tuple[int, ...]] = field(hash=False, default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class RefreshEvent:
    layer: str
    timestep: int
    reason: str          # pre-spike | pre-pool | interval
    level_before: int


@dataclass(frozen=True)
class RefreshSchedule:
    events: tuple[RefreshEvent, ...]

    @property
    def count(self) -> int:
        return len(self.events)

    def by_reason(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.events:
            out[e.reason] = out.get(e.reason, 0) + 1
        return out


@dataclass
class InferenceResult:
    class_sums: np.ndarray
    prediction: int
    schedule: RefreshSchedule
    counters: dict[str, int]
    layer_seconds: dict[str, float]
    compare_events: int = 0
    step_seconds: dict[str, float] = field(default_factory=dict)
    level_ledger: list[dict] = field(default_factory=list)


def decode_output(be: Backend, outputs: list[CipherVector],
                  n_classes: int) -> tuple[int, np.ndarray]:
    """Sum the per-timestep class ciphertexts, decrypt once, argmax."""
    if not outputs:
        raise HeContractError("no timestep outputs to decode")
    total = outputs[0]
    for extra in outputs[1:]:
        total = be.add(total, extra)
    sums = be.decrypt(total)[:n_classes]
    return int(np.argmax(sums)), sums


def _make_lif(name: str, geom: Geometry, cfg: LifSettings, mode: str,
              slots: int) -> LifPlan:
    return LifPlan(name, geom, mode, scale=cfg.scale, slots=slots,
                   tau=cfg.tau, threshold=cfg.threshold, degree=cfg.degree)


def _fold(cfg: LifSettings | None, mode: str) -> float:
    """How much the producing layer divides by so the series sees the
    membrane already mapped into its interval.  Switch mode compares in
    natural units and never folds."""
    if cfg is None or mode != "approx":
        return 1.0
    return 1.0 / cfg.scale


class NetworkModel:
    """A spec bound to weights, a LIF mode, and a slot budget."""

    def __init__(self, spec: NetworkSpec, weights=None, mode: str = "approx",
                 slots: int = 0, fresh_level: int = 0):
        if mode not in ("approx", "switch"):
            raise ValidationError(f"unknown lif mode {mode!r}")
        if slots < 1 or fresh_level < 1:
            raise ValidationError("model needs slots and fresh_level")
        self.spec = spec
        self.mode = mode
        self.slots = slots
        self.fresh_level = fresh_level

        units = weight_units(spec)
        if weights is None:
            weights = {u.index: (np.zeros(u.tensor_shape), np.zeros(u.rows))
                       for u in units}
        missing = [u.index for u in units if u.index not in weights]
        if missing:
            raise ValidationError(f"weights missing for units {missing}")

        # program: (op, payload...) with register names; "main" carries the
        # trunk, residual shortcuts get a private register each.
        self.program: list[tuple] = []
        self.lif_plans: list[LifPlan] = []
        wi = 0
        cur = spec.input
        for i, e in enumerate(spec.entries):
            if e.kind == "conv":
                w, b = weights[wi]; wi += 1
                plan = ConvPlan(f"conv{i}", cur, e.out_ch, e.kernel, e.stride,
                                e.padding, np.asarray(w), b, slots,
                                scale_fold=_fold(e.lif, mode))
                self._apply(plan)
                if e.lif:
                    self._lif(_make_lif(f"lif{i}", plan.out_geom, e.lif,
                                        mode, slots))
            elif e.kind == "avgpool":
                plan = AvgPoolPlan(f"pool{i}", cur, e.kernel, e.stride, slots,
                                   scale_fold=_fold(e.lif, mode))
                self._apply(plan)
                if e.lif:
                    self._lif(_make_lif(f"lif{i}", plan.out_geom, e.lif,
                                        mode, slots))
            elif e.kind == "fc":
                w, b = weights[wi]; wi += 1
                plan = FcPlan(f"fc{i}", e.n_in, e.n_out, np.asarray(w), b,
                              slots, scale_fold=_fold(e.lif, mode))
                self._apply(plan)
                if e.lif:
                    self._lif(_make_lif(f"lif{i}", plan.out_geom, e.lif,
                                        mode, slots))
            elif e.kind == "residual":
                w1, b1 = weights[wi]; wi += 1
                w2, b2 = weights[wi]; wi += 1
                skip = f"skip{i}"
                self.program.append(("copy", "main", skip))
                conv1 = ConvPlan(f"block{i}.conv1", cur, e.out_ch, 3,
                                 e.stride, 1, np.asarray(w1), b1, slots,
                                 scale_fold=_fold(e.lif_mid, mode))
                self._apply(conv1)
                self._lif(_make_lif(f"block{i}.lif_mid", conv1.out_geom,
                                    e.lif_mid, mode, slots))
                out_fold = _fold(e.lif_out, mode)
                conv2 = ConvPlan(f"block{i}.conv2", conv1.out_geom, e.out_ch,
                                 3, 1, 1, np.asarray(w2), b2, slots,
                                 scale_fold=out_fold)
                self._apply(conv2)
                if e.stride != 1 or e.in_ch != e.out_ch:
                    ws, bs = weights[wi]; wi += 1
                    short = ConvPlan(f"block{i}.shortcut", cur, e.out_ch, 1,
                                     e.stride, 0, np.asarray(ws), bs, slots,
                                     scale_fold=out_fold)
                    self._apply(short, reg=skip)
                elif out_fold != 1.0:
                    self._apply(ScaleMaskPlan(f"block{i}.shortcut", cur,
                                              out_fold, slots), reg=skip)
                if conv2.out_geom != spec.geometries[i]:
                    raise ValidationError(
                        f"block{i}: main path produces {conv2.out_geom}, "
                        f"spec says {spec.geometries[i]}")
                self.program.append(("join", "main", skip))
                self._lif(_make_lif(f"block{i}.lif_out", conv2.out_geom,
                                    e.lif_out, mode, slots))
            cur = spec.geometries[i]
        self.out_geom = cur
        self.need_in = self._backward_needs()

    def _apply(self, plan: LayerPlan, reg: str = "main"):
        self.program.append(("apply", plan, reg))

    def _lif(self, plan: LifPlan):
        self.lif_plans.append(plan)
        self.program.append(("lif", plan, "main"))

    # -- static analysis ---------------------------------------------------

    def _backward_needs(self) -> list[int]:
        """Remaining level each instruction requires of its input register.

        LIF instructions are barriers: they manage their own membrane
        refreshes, and only ever *add* into the membrane, so upstream just
        needs a live ciphertext (level >= 1).
        """
        need: dict[str, int] = {"main": 1}
        needs = [1] * len(self.program)
        for idx in range(len(self.program) - 1, -1, -1):
            op = self.program[idx]
            if op[0] == "apply":
                _, plan, reg = op
                n = need.pop(reg, 1) + plan.level_cost
                need[reg] = n
                needs[idx] = n
            elif op[0] == "lif":
                need.pop("main", None)
                need["main"] = 1
                needs[idx] = 1
            elif op[0] == "join":
                _, a, b = op
                n = need.pop(a, 1)
                need[a] = max(need.get(a, 1), n)
                need[b] = max(need.get(b, 1), n)
                needs[idx] = n
            elif op[0] == "copy":
                # both branches read the same physical value, so the copy
                # point must satisfy whichever branch asks for more
                _, src, dst = op
                n = need.pop(dst, 1)
                need[src] = max(need.get(src, 1), n)
                needs[idx] = need[src]
        return needs

    def rotation_plan(self) -> RotationPlan:
        provenance: dict[str, tuple[int, ...]] = {}
        all_idx: set[int] = set()
        for op in self.program:
            if op[0] in ("apply", "lif"):
                plan = op[1]
                rots = sorted(set(plan.rotations()))
                if rots:
                    provenance[plan.name] = tuple(rots)
                    all_idx.update(rots)
        return RotationPlan(indices=tuple(sorted(all_idx)),
                            provenance=provenance)

    # -- drivers -------------------------------------------------------------

    def _admit(self, be: Backend, x: CipherVector, needed: int,
               reasons: list, reason: str, name: str, t: int) -> CipherVector:
        if x.level < needed:
            before = x.level
            x = be.refresh(x, note=f"{name} t={t}")
            reasons.append(RefreshEvent(name, t, reason, before))
        return x

    def run(self, be: Backend, packed: np.ndarray,
            input_level: int | None = None) -> InferenceResult:
        """Encrypted forward pass over (T, slots) packed input rows."""
        T = packed.shape[0]
        base_compares = be.counters["compares"]
        regs: dict[str, list[CipherVector]] = {
            "main": [be.encrypt(packed[t], level=input_level)
                     for t in range(T)]}
        events: list[RefreshEvent] = []
        seconds: dict[str, float] = {}
        step_seconds: dict[str, float] = {}
        ledger: list[dict] = []
        for idx, op in enumerate(self.program):
            if op[0] == "apply":
                _, plan, reg = op
                t0 = time.perf_counter()
                vec = regs[reg]
                reason = "pre-pool" if isinstance(plan, AvgPoolPlan) else "interval"
                for t in range(1, T + 1):
                    ts = time.perf_counter()
                    be.set_context(plan.name, t)
                    x = self._admit(be, vec[t - 1], self.need_in[idx],
                                    events, reason, plan.name, t)
                    lv_in = x.level
                    out = plan.run(be, x)
                    # a folding layer hands the next LIF pre-scaled currents
                    out.scale_domain = "scaled" \
                        if getattr(plan, "scale_fold", 1.0) != 1.0 else "raw"
                    vec[t - 1] = out
                    step_seconds[f"{plan.name}@{t}"] = time.perf_counter() - ts
                    ledger.append({"layer": plan.name, "timestep": t,
                                   "level_in": lv_in,
                                   "level_out": vec[t - 1].level})
                seconds[plan.name] = seconds.get(plan.name, 0.0) \
                    + time.perf_counter() - t0
            elif op[0] == "lif":
                _, plan, _ = op
                t0 = time.perf_counter()
                plan.reset_state()
                vec = regs["main"]
                for t in range(1, T + 1):
                    ts = time.perf_counter()
                    be.set_context(plan.name, t)
                    x = vec[t - 1]
                    got = be.counters["refreshes"]
                    vec[t - 1] = plan.step(be, x, t)
                    for _ in range(be.counters["refreshes"] - got):
                        events.append(RefreshEvent(plan.name, t, "pre-spike",
                                                   x.level))
                    step_seconds[f"{plan.name}@{t}"] = time.perf_counter() - ts
                    ledger.append({"layer": plan.name, "timestep": t,
                                   "level_in": x.level,
                                   "level_out": vec[t - 1].level})
                seconds[plan.name] = seconds.get(plan.name, 0.0) \
                    + time.perf_counter() - t0
            elif op[0] == "join":
                _, a, b = op
                va, vb = regs[a], regs[b]
                be.set_context(f"join:{b}")
                regs[a] = [be.add(va[t], vb[t]) for t in range(T)]
                del regs[b]
            elif op[0] == "copy":
                # shortcut capture: lift the shared value high enough for
                # the longer branch now, so both branches reuse one refresh
                _, src, dst = op
                vec = regs[src]
                for t in range(1, T + 1):
                    be.set_context(f"copy:{dst}", t)
                    vec[t - 1] = self._admit(be, vec[t - 1],
                                             self.need_in[idx], events,
                                             "interval", f"copy:{dst}", t)
                regs[dst] = list(vec)
        be.set_context("readout", T)
        outputs = regs["main"]
        prediction, sums = decode_output(be, outputs, self.out_geom.flat)
        return InferenceResult(
            class_sums=sums,
            prediction=prediction,
            schedule=RefreshSchedule(tuple(events)),
            counters=dict(be.counters),
            layer_seconds=seconds,
            compare_events=be.counters["compares"] - base_compares,
            step_seconds=step_seconds,
            level_ledger=ledger,
        )

    def run_plain(self, sample: np.ndarray,
                  trace: dict | None = None) -> tuple[int, np.ndarray]:
        """Float twin of run(): same program, same layer-wise order.

        sample: (T, c, h, w) natural-unit input frames.
        trace: optional dict collecting post-spiking activations keyed
        "<lif name>@<t>" (flat arrays), for golden-trace fixtures.
        """
        T = sample.shape[0]
        regs: dict[str, list[np.ndarray]] = {
            "main": [np.asarray(sample[t], dtype=np.float64) for t in range(T)]}
        for op in self.program:
            if op[0] == "apply":
                _, plan, reg = op
                vec = regs[reg]
                for t in range(T):
                    x = vec[t]
                    if isinstance(plan, FcPlan):
                        x = x.reshape(-1)[: plan.n_in]
                    elif isinstance(plan, ScaleMaskPlan):
                        x = x.reshape(-1)
                        out = plan.run_plain(x)
                        vec[t] = out.reshape(plan.out_geom.c,
                                             plan.out_geom.h,
                                             plan.out_geom.w)
                        continue
                    vec[t] = plan.run_plain(x)
                    if isinstance(plan, FcPlan):
                        vec[t] = vec[t].reshape(1, 1, plan.n_out)
            elif op[0] == "lif":
                _, plan, _ = op
                plan.reset_state()
                vec = regs["main"]
                for t in range(T):
                    shape = vec[t].shape
                    vec[t] = plan.plain_step(vec[t].reshape(-1),
                                             t + 1).reshape(shape)
                    if trace is not None:
                        trace[f"{plan.name}@{t + 1}"] = vec[t].reshape(-1).copy()
            elif op[0] == "join":
                _, a, b = op
                regs[a] = [regs[a][t] + regs[b][t] for t in range(T)]
                del regs[b]
            elif op[0] == "copy":
                _, src, dst = op
                regs[dst] = [x.copy() for x in regs[src]]
        sums = np.zeros(self.out_geom.flat)
        for x in regs["main"]:
            sums = sums + x.reshape(-1)
        return int(np.argmax(sums)), sums


# --------------------------------------------------------------------------
# offline entry points
# --------------------------------------------------------------------------

def harvest_rotations(spec: NetworkSpec, slots: int,
                      fresh_level: int) -> RotationPlan:
    """Key-provisioning rotation set; independent of the timestep count and
    of the LIF mode (weight values never move data between slots)."""
    model = NetworkModel(spec, weights=None, mode="switch", slots=slots,
                         fresh_level=fresh_level)
    return model.rotation_plan()


def simulate_ledger(spec: NetworkSpec, params, mode: str,
                    timesteps: int | None = None,
                    weights=None) -> tuple[RefreshSchedule, dict]:
    """Static depth simulation: run the whole program on the float
    simulator with zero input and record the refresh schedule.  Raises
    LevelExhaustedError if the refresh policy ever lets a level underflow
    (it must not, for any shipped profile)."""
    from .backend import SimBackend

    T = timesteps or spec.timesteps
    model = NetworkModel(spec, weights=weights, mode=mode,
                         slots=params.slots, fresh_level=params.fresh_level)
    be = SimBackend(fresh_level=params.fresh_level, slots=params.slots)
    packed = np.zeros((T, params.slots))
    result = model.run(be, packed)
    return result.schedule, dict(be.counters)


def memory_estimate(params, rotation_count: int, timesteps: int) -> dict:
    """Bytes held by keys and live ciphertexts (upper-bound estimate)."""
    n = params.n
    n_ct = params.depth + 1
    poly = (n_ct + 1) * n * 8           # full-basis polynomial, uint64 limbs
    switch_key = 2 * n_ct * poly        # digit pairs over the extended basis
    ct = 2 * n_ct * n * 8
    keys = (rotation_count + 1) * switch_key + 2 * poly  # + relin + pk
    live = (timesteps + 8) * ct          # per-step registers + working set
    return {"key_bytes": keys, "ciphertext_bytes": live,
            "total_bytes": keys + live}
