"""Deterministic test assets: weights, inputs, and golden plaintext traces.

The generator is seeded random-then-calibrated: weights are redrawn until
every spiking layer actually fires on a healthy fraction of its slots,
per-layer scale values are then measured off plaintext membrane ranges
(so the approximate evaluator's series interval is honoured), and inputs
are filtered for a comfortable class margin so backend noise cannot move
the argmax.  Regeneration under the same seed is byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .backend import SimBackend
from .errors import ValidationError
from .model_io import (
    DatasetFrames,
    LifSettings,
    NetworkSpec,
    network_to_json,
    pack_frames,
    save_weights_csv,
    weight_units,
    write_frames_bin,
)
from .planner import NetworkModel

TINY_NET = {
    "name": "tiny-fixture",
    "input": {"channels": 1, "height": 8, "width": 8},
    "timesteps": 2,
    "layers": [
        {"type": "conv", "in_ch": 1, "out_ch": 4, "kernel": 3, "stride": 1,
         "padding": 0, "lif": {"scale": 1.0}},
        {"type": "avgpool", "kernel": 2, "stride": 2},
        {"type": "fc", "in": 36, "out": 8, "lif": {"scale": 1.0}},
        {"type": "fc", "in": 8, "out": 10},
    ],
}

CALIBRATION_SAMPLES = 32
SCALE_MARGIN = 1.3
LOGIT_MARGIN = 0.15


def calibrate_scales(spec: NetworkSpec, weights, samples: np.ndarray,
                     margin: float = SCALE_MARGIN) -> NetworkSpec:
    """Measure per-LIF membrane peaks on plaintext runs and set each scale
    so scaled membranes stay inside the series interval [-1, 1]."""
    # switch mode = natural units everywhere, so peaks come out unscaled
    model = NetworkModel(spec, weights, mode="switch", slots=spec.input.flat * 4,
                         fresh_level=2)
    for plan in model.lif_plans:
        plan.plain_v_peak = 0.0
    for sample in samples:
        model.run_plain(sample)
    peaks = [plan.plain_v_peak for plan in model.lif_plans]

    it = iter(peaks)

    def scaled(cfg: LifSettings) -> LifSettings:
        peak = next(it)
        return dataclasses.replace(cfg, scale=max(1.0, margin * peak))

    entries = []
    for e in spec.entries:
        if e.kind == "residual":
            e = dataclasses.replace(e, lif_mid=scaled(e.lif_mid),
                                    lif_out=scaled(e.lif_out))
        elif e.lif is not None:
            e = dataclasses.replace(e, lif=scaled(e.lif))
        entries.append(e)
    return dataclasses.replace(spec, entries=tuple(entries))


def _draw_weights(spec: NetworkSpec, rng: np.random.Generator) -> dict:
    weights = {}
    for u in weight_units(spec):
        fan_in = u.cols
        w = rng.normal(0.0, 1.6 / np.sqrt(fan_in), size=u.tensor_shape)
        b = rng.normal(0.0, 0.05, size=u.rows)
        weights[u.index] = (w, b)
    return weights


def _spike_rates(spec: NetworkSpec, weights, samples: np.ndarray) -> list[float]:
    model = NetworkModel(spec, weights, mode="switch",
                         slots=spec.input.flat * 4, fresh_level=2)
    counts = [0.0] * len(model.lif_plans)
    total = [0.0] * len(model.lif_plans)
    for sample in samples:
        regsample = sample
        # step manually to collect spike rates per LIF
        trace: dict = {}
        model.run_plain(regsample, trace=trace)
        for i, plan in enumerate(model.lif_plans):
            arrs = [v for k, v in trace.items() if k.startswith(plan.name + "@")]
            counts[i] += float(sum(a.sum() for a in arrs))
            total[i] += float(sum(a.size for a in arrs))
    return [c / t if t else 0.0 for c, t in zip(counts, total)]


def build_fixture_model(seed: int = 42):
    """Weights + calibrated spec for the tiny network (no files written)."""
    from .model_io import parse_network

    rng = np.random.default_rng(seed)
    spec = parse_network(json.dumps(TINY_NET))
    cal_inputs = rng.uniform(0.0, 1.0,
                             size=(CALIBRATION_SAMPLES, spec.timesteps,
                                   spec.input.c, spec.input.h, spec.input.w))
    for _ in range(64):
        weights = _draw_weights(spec, rng)
        rates = _spike_rates(spec, weights, cal_inputs)
        if all(0.05 <= r <= 0.7 for r in rates):
            break
    else:
        raise ValidationError("could not draw fixture weights with live spiking")
    spec = calibrate_scales(spec, weights, cal_inputs)
    return spec, weights


def generate_inputs(spec: NetworkSpec, weights, count: int, seed: int,
                    margin: float = LOGIT_MARGIN) -> DatasetFrames:
    """Random input frames whose class decision has a margin under BOTH
    evaluators (exact-compare plaintext twin, and the polynomial evaluator
    in float simulation), so noise-tolerant exactness statements hold
    robustly.  Inputs whose membranes graze the polynomial dead zone get
    rejected here rather than tolerated downstream."""
    from .backend import SimBackend
    from .model_io import pack_frames as _pack

    rng = np.random.default_rng(seed ^ 0x5EED)
    slots = spec.input.flat * 4
    model = NetworkModel(spec, weights, mode="switch", slots=slots,
                         fresh_level=2)
    model_ap = NetworkModel(spec, weights, mode="approx", slots=slots,
                            fresh_level=12)
    picked, labels = [], []
    attempts = 0
    while len(picked) < count:
        attempts += 1
        if attempts > count * 400:
            raise ValidationError("input generation stalled; loosen margin")
        sample = rng.uniform(0.0, 1.0, size=(spec.timesteps, spec.input.c,
                                             spec.input.h, spec.input.w))
        pred, sums = model.run_plain(sample)
        order = np.sort(sums)
        if order[-1] - order[-2] < margin:
            continue
        be = SimBackend(fresh_level=12, slots=slots)
        res = model_ap.run(be, _pack(sample, spec.timesteps, slots))
        order_a = np.sort(res.class_sums)
        if res.prediction != pred or order_a[-1] - order_a[-2] < margin:
            continue
        picked.append(sample)
        labels.append(pred)
    data = np.stack(picked).astype("<f4").astype(np.float64)
    return DatasetFrames(data=data, labels=np.asarray(labels, dtype=np.uint8))


def golden_trace(spec: NetworkSpec, weights, sample: np.ndarray) -> dict:
    """Per-layer per-timestep plaintext activations for one sample."""
    model = NetworkModel(spec, weights, mode="switch",
                         slots=spec.input.flat * 4, fresh_level=2)
    trace: dict = {}
    pred, sums = model.run_plain(sample, trace=trace)
    return {
        "prediction": pred,
        "class_sums": [float(v) for v in sums],
        "activations": {k: [float(x) for x in v.reshape(-1)]
                        for k, v in trace.items()},
    }


def gen_fixture(seed: int, out_dir, count: int = 100) -> dict:
    """Write the full fixture set; returns paths plus content digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec, weights = build_fixture_model(seed)
    frames = generate_inputs(spec, weights, count, seed)

    net_path = out / "net.json"
    net_path.write_text(network_to_json(spec))
    save_weights_csv(out, spec, weights)
    inputs_path = out / "inputs.spkf"
    write_frames_bin(inputs_path, frames)

    trace = golden_trace(spec, weights, frames.data[0])
    trace_path = out / "golden_trace.json"
    trace_path.write_text(json.dumps(trace, indent=1) + "\n")

    digests = {}
    for p in sorted(out.iterdir()):
        digests[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return {"dir": str(out), "spec": spec, "weights": weights,
            "frames": frames, "digests": digests}
