"""Acceptance gate: one test (and one pass/fail line) per shipped claim.

Run with ``pytest -v tests/test_acceptance.py`` — each criterion reports
as its own line; prints carry the measured numbers.
"""

import dataclasses
import struct
import time

import numpy as np
import pytest

from cipherspike import (
    CkksBackend,
    CkksContext,
    LifPlan,
    NetworkModel,
    PROFILES,
    SimBackend,
    get_profile,
    harvest_rotations,
    lif_reference,
    load_network,
    simulate_ledger,
)
from cipherspike.chebyshev import clenshaw, dead_zone, fit_step
from cipherspike.errors import FormatError, ValidationError
from cipherspike.layers import AvgPoolPlan, ConvPlan, FcPlan, Geometry
from cipherspike.model_io import (
    DatasetFrames,
    load_weights_csv,
    pack_frames,
    read_frames_bin,
    read_mnist_idx,
    save_weights_csv,
    weight_units,
    write_frames_bin,
)
from cipherspike.ring import RingPoly, RnsBasis, scan_primes

RNG = np.random.default_rng(20240817)


@pytest.fixture(scope="module")
def test_ctx():
    return CkksContext(get_profile("test"), seed=1001)


def _passline(n, name, detail=""):
    print(f"\nACCEPTANCE {n} {name}: PASS {detail}".rstrip())


# -- 1 ------------------------------------------------------------------------

def school_negacyclic(a, c, q):
    n = len(a)
    out = [0] * n
    for i in range(n):
        for j in range(n):
            k = i + j
            v = int(a[i]) * int(c[j])
            if k >= n:
                out[k - n] = (out[k - n] - v) % q
            else:
                out[k] = (out[k] + v) % q
    return np.array(out, dtype=np.uint64)


def test_criterion_1_ckks_correctness(test_ctx):
    """Primitive homomorphic ops stay within 1e-3 of the float result over
    100 random trials at the fast profile; the NTT path is bit-exact
    against a schoolbook negacyclic product."""
    t0 = time.monotonic()
    n = 64
    qs = scan_primes(30, 3, 2 * n)
    sp = scan_primes(32, 1, 2 * n)[0]
    basis = RnsBasis(n, qs, sp)
    for _ in range(20):
        a = RNG.integers(-50, 50, n)
        c = RNG.integers(-50, 50, n)
        pa = RingPoly.from_signed(basis, a, 3).ntt_()
        pc = RingPoly.from_signed(basis, c, 3).ntt_().to_mont_()
        prod = pa.mul_mont(pc).intt_()
        for ri in range(3):
            assert np.array_equal(prod.data[ri],
                                  school_negacyclic(a, c, qs[ri]))

    ctx = test_ctx
    slots = ctx.params.slots
    worst = {"add": 0.0, "mul": 0.0, "rotate": 0.0}
    for _ in range(100):
        a = RNG.uniform(-1, 1, slots)
        b = RNG.uniform(-1, 1, slots)
        k = int(RNG.integers(1, slots))
        ca, cb = ctx.encrypt(a), ctx.encrypt(b)
        worst["add"] = max(worst["add"],
                           np.abs(ctx.decrypt(ctx.add(ca, cb)) - (a + b)).max())
        worst["mul"] = max(worst["mul"],
                           np.abs(ctx.decrypt(ctx.mul(ca, cb)) - a * b).max())
        worst["rotate"] = max(worst["rotate"],
                              np.abs(ctx.decrypt(ctx.rotate(ca, k))
                                     - np.roll(a, -k)).max())
    for op, err in worst.items():
        assert err <= 1e-3, f"{op} error {err}"
    dt = time.monotonic() - t0
    assert dt < 60
    _passline(1, "ckks-correctness",
              f"(worst add {worst['add']:.2e}, mul {worst['mul']:.2e}, "
              f"rotate {worst['rotate']:.2e}; {dt:.1f}s)")


# -- 2 ------------------------------------------------------------------------

def dense_conv(x, w, b, stride, padding):
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (x.shape[1] + 2 * padding - k) // stride + 1
    wo = (x.shape[2] + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for co in range(c_out):
        for i in range(ho):
            for j in range(wo):
                out[co, i, j] = np.sum(
                    xp[:, i * stride: i * stride + k,
                       j * stride: j * stride + k] * w[co]) + b[co]
    return out


def dense_pool(x, k, s):
    c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((c, ho, wo))
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                out[ci, i, j] = x[ci, i * s: i * s + k, j * s: j * s + k].mean()
    return out


def test_criterion_2_layer_equivalence(test_ctx):
    """50 random layer shapes on the encrypted backend agree with dense
    float oracles to 1e-3 per slot, and the measured rotation count equals
    the plan's declared tap + compaction budget exactly."""
    t0 = time.monotonic()
    ctx = test_ctx
    slots = ctx.params.slots
    for trial in range(50):
        kind = ("conv", "pool", "fc")[trial % 3]
        if kind == "conv":
            c_in = int(RNG.integers(1, 5))
            c_out = int(RNG.integers(1, 7))
            k = int(RNG.choice([1, 3, 5]))
            s = int(RNG.choice([1, 2]))
            p = int(RNG.choice([0, k // 2]))
            h = int(RNG.integers(k, 11))
            x = RNG.uniform(-1, 1, (c_in, h, h))
            w = RNG.normal(0, 0.4, (c_out, c_in, k, k))
            b = RNG.normal(0, 0.2, c_out)
            plan = ConvPlan(f"c{trial}", Geometry(c_in, h, h), c_out, k, s,
                            p, w, b, slots)
            ref = dense_conv(x, w, b, s, p)
            assert plan.tap_rotation_ops() == k * k - 1
        elif kind == "pool":
            c = int(RNG.integers(1, 9))
            k = int(RNG.choice([2, 3]))
            h = k * int(RNG.integers(1, 5))
            x = RNG.uniform(-1, 1, (c, h, h))
            plan = AvgPoolPlan(f"p{trial}", Geometry(c, h, h), k, k, slots)
            ref = dense_pool(x, k, k)
        else:
            n_in = int(RNG.integers(2, 200))
            n_out = int(RNG.integers(1, 30))
            x = RNG.uniform(-1, 1, n_in)
            w = RNG.normal(0, 0.4, (n_out, n_in))
            b = RNG.normal(0, 0.2, n_out)
            plan = FcPlan(f"f{trial}", n_in, n_out, w, b, slots)
            ref = w @ x + b
        be = CkksBackend(ctx, allowed_rotations=set(plan.rotations()))
        buf = np.zeros(slots)
        buf[: x.size] = x.reshape(-1)
        got = be.decrypt(plan.run(be, be.encrypt(buf)))[: ref.size]
        assert np.abs(got - ref.reshape(-1)).max() <= 1e-3
        assert be.counters["rotations"] == plan.expected_rotation_ops()
    dt = time.monotonic() - t0
    assert dt < 600
    _passline(2, "layer-equivalence", f"(50 shapes, {dt:.1f}s)")


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_chebyshev_series(test_ctx):
    """Encrypted degree-50 step series: exactly 7 multiplicative levels and
    1e-2 agreement with plaintext recurrence evaluation off the measured
    dead zone."""
    from cipherspike.chebyshev import evaluate_series

    ctx = test_ctx
    th = 0.25
    coeffs = fit_step(th, 50)
    zone = dead_zone(coeffs, th)
    x = np.linspace(-1, 1, ctx.params.slots)
    be = CkksBackend(ctx)
    ct = be.encrypt(x)
    out = evaluate_series(be, ct, [coeffs])[0]
    assert ct.level - out.level == 7
    got = be.decrypt(out)
    want = clenshaw(coeffs, x)
    off = np.abs(x - th) > zone
    err = np.abs(got - want)[off].max()
    assert err <= 1e-2
    _passline(3, "chebyshev-series",
              f"(7 levels, off-zone err {err:.2e}, zone {zone:.3f})")


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_switch_exactness(test_ctx):
    """1000 random membrane traces, 5 steps, packed as slots of a single
    ciphertext: switch-mode spikes are bit-equal to the float reference in
    simulation and equal after decryption rounding on the real backend."""
    n, T = 1000, 5
    traces = RNG.uniform(-1.5, 1.5, (T, n))
    want = lif_reference(traces)[0]

    plan = LifPlan("lif", Geometry(1, 1, n), "switch", 1.0, 1024)
    be = SimBackend(fresh_level=12, slots=1024)
    for t in range(T):
        buf = np.zeros(1024)
        buf[:n] = traces[t]
        got = be.decrypt(plan.step(be, be.encrypt(buf), t + 1))[:n]
        assert np.array_equal(got, want[t]), f"sim mismatch at step {t}"

    ctx = test_ctx
    slots = ctx.params.slots
    bec = CkksBackend(ctx)
    plan_c = LifPlan("lif", Geometry(1, 1, n), "switch", 1.0, slots)
    for t in range(T):
        buf = np.zeros(slots)
        buf[:n] = traces[t]
        got = np.rint(bec.decrypt(plan_c.step(bec, bec.encrypt(buf),
                                              t + 1))[:n])
        assert np.array_equal(got, want[t]), f"ckks mismatch at step {t}"
    _passline(4, "switch-exactness", f"({n} traces x {T} steps)")


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_approx_agreement():
    """Series-mode spikes agree with the reference on >=99% of slots once
    membranes within 0.06 of the scaled threshold are excluded; the
    series' own measured dead zone is recorded alongside."""
    scale, n, T = 3.0, 1000, 5
    currents = np.clip(RNG.normal(0.3, 0.6, (T, n)), -1.5, 2.0)
    plan = LifPlan("lif", Geometry(1, 1, n), "approx", scale, 1024)
    be = SimBackend(fresh_level=12, slots=1024)
    got = np.zeros((T, n))
    for t in range(T):
        buf = np.zeros(1024)
        buf[:n] = currents[t] / scale
        got[t] = be.decrypt(plan.step(be, be.encrypt(buf), t + 1))[:n]
    want, membranes = lif_reference(currents / scale,
                                    threshold=0.5 / scale)
    clear = np.abs(membranes - plan.scaled_threshold) > 0.06
    agreement = ((np.abs(got - want) < 0.5) | ~clear).mean()
    assert agreement >= 0.99
    _passline(5, "approx-agreement",
              f"(agreement {agreement:.4f}, measured dead zone "
              f"{plan.dead_zone:.4f}, exclusion half-width 0.06)")


# -- 6 ------------------------------------------------------------------------

def test_criterion_6_e2e_differential(assets, test_ctx):
    """The whole pipeline on the real backend: 100 fixture inputs, switch
    mode reproduces every plaintext argmax, series mode at least 95."""
    t0 = time.monotonic()
    spec, weights, frames = (assets["spec"], assets["weights"],
                             assets["frames"])
    ctx = test_ctx
    params = ctx.params
    allowed = set(harvest_rotations(spec, params.slots,
                                    params.fresh_level).indices)
    models = {m: NetworkModel(spec, weights, mode=m, slots=params.slots,
                              fresh_level=params.fresh_level)
              for m in ("switch", "approx")}
    backends = {m: CkksBackend(ctx, allowed_rotations=allowed)
                for m in ("switch", "approx")}
    hits = {"switch": 0, "approx": 0}
    count = frames.count
    assert count == 100
    for i in range(count):
        packed = pack_frames(frames.data[i], spec.timesteps, params.slots)
        plain_pred, _ = models["switch"].run_plain(frames.data[i])
        assert plain_pred == frames.labels[i]  # labels are plain argmaxes
        for m in ("switch", "approx"):
            res = models[m].run(backends[m], packed)
            hits[m] += res.prediction == plain_pred
    dt = time.monotonic() - t0
    assert hits["switch"] == count, f"switch {hits['switch']}/{count}"
    assert hits["approx"] >= 0.95 * count, f"approx {hits['approx']}/{count}"
    assert dt < 1800
    _passline(6, "e2e-differential",
              f"(switch {hits['switch']}/100, approx {hits['approx']}/100, "
              f"{dt:.0f}s)")


# -- 7 ------------------------------------------------------------------------

def test_criterion_7_planner_invariants():
    """Rotation plans do not depend on the timestep count; the static level
    ledger passes with zero underflows on every shipped profile; exact
    comparison always schedules strictly fewer refreshes than the series."""
    for net, prof in (("lenet5-mnist", "lenet5"),
                      ("resnet19-cifar10", "resnet19")):
        spec = load_network(net)
        params = get_profile(prof)
        plans = {harvest_rotations(dataclasses.replace(spec, timesteps=T),
                                   params.slots, params.fresh_level).indices
                 for T in (1, 2, 5, 10)}
        assert len(plans) == 1, f"{net}: rotation plan varies with T"

    detail = []
    for net, prof in (("lenet5-mnist", "lenet5"),
                      ("lenet5-nmnist", "lenet5"),
                      ("resnet19-cifar10", "resnet19"),
                      ("resnet19-dvs", "resnet19")):
        spec = load_network(net)
        params = get_profile(prof)
        # raises LevelExhaustedError on any underflow
        sched_a, _ = simulate_ledger(spec, params, "approx")
        sched_s, _ = simulate_ledger(spec, params, "switch")
        assert sched_s.count < sched_a.count, \
            f"{net}: switch {sched_s.count} !< approx {sched_a.count}"
        detail.append(f"{net} {sched_a.count}/{sched_s.count}")
    _passline(7, "planner-invariants",
              "(refreshes approx/switch: " + ", ".join(detail) + ")")


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_profile_fidelity():
    """Shipped parameter profiles and network tables carry the exact
    published numbers."""
    lenet = PROFILES["lenet5"]
    assert (lenet.n, lenet.slots, lenet.depth, lenet.scale_bits) == \
        (16384, 8192, 12, 56)
    resnet = PROFILES["resnet19"]
    assert (resnet.n, resnet.slots, resnet.depth, resnet.scale_bits) == \
        (32768, 16384, 12, 56)

    for name, in_geom, fc1_in in (("lenet5-mnist", (1, 28, 28), 256),
                                  ("lenet5-nmnist", (2, 36, 36), 576)):
        spec = load_network(name)
        assert (spec.input.c, spec.input.h, spec.input.w) == in_geom
        kinds = [e.kind for e in spec.entries]
        assert kinds == ["conv", "avgpool", "conv", "avgpool",
                         "fc", "fc", "fc"]
        assert (spec.entries[0].out_ch, spec.entries[0].kernel) == (6, 5)
        assert (spec.entries[2].out_ch, spec.entries[2].kernel) == (16, 5)
        fcs = [(e.n_in, e.n_out) for e in spec.entries if e.kind == "fc"]
        assert fcs == [(fc1_in, 120), (120, 84), (84, 10)]

    for name, in_ch in (("resnet19-cifar10", 3), ("resnet19-dvs", 2)):
        spec = load_network(name)
        assert spec.input.c == in_ch and (spec.input.h, spec.input.w) == (32, 32)
        kinds = [e.kind for e in spec.entries]
        assert kinds == ["conv"] + ["residual"] * 8 + ["avgpool", "fc"]
        widths = [e.out_ch for e in spec.entries if e.kind == "residual"]
        assert widths == [16, 16, 16, 32, 32, 32, 64, 64]
        strides = [e.stride for e in spec.entries if e.kind == "residual"]
        assert strides == [1, 1, 1, 2, 1, 1, 2, 1]
        assert spec.entries[-1].n_in == 64 and spec.entries[-1].n_out == 10
    _passline(8, "profile-fidelity")


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_format_conformance(tmp_path):
    """Hand-built IDX files parse to the exact expected tensors, corrupt
    magics are rejected, frame files round-trip bit-exactly, and weight
    CSVs with off-by-one shapes are refused."""
    # IDX fixture 1: one 2x2 image
    (tmp_path / "i1").write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2)
                                  + bytes([0, 128, 255, 64]))
    (tmp_path / "l1").write_bytes(struct.pack(">II", 0x801, 1) + bytes([7]))
    ds = read_mnist_idx(tmp_path / "i1", tmp_path / "l1")
    assert np.allclose(ds.data[0, 0, 0], [[0, 128 / 255], [1, 64 / 255]])
    assert ds.labels.tolist() == [7]
    # IDX fixture 2: two 3x2 images, row-major
    (tmp_path / "i2").write_bytes(struct.pack(">IIII", 0x803, 2, 3, 2)
                                  + bytes(range(12)))
    (tmp_path / "l2").write_bytes(struct.pack(">II", 0x801, 2)
                                  + bytes([1, 9]))
    ds = read_mnist_idx(tmp_path / "i2", tmp_path / "l2")
    assert np.allclose(ds.data[1, 0, 0] * 255, [[6, 7], [8, 9], [10, 11]])
    # IDX fixture 3: empty set is well-formed
    (tmp_path / "i3").write_bytes(struct.pack(">IIII", 0x803, 0, 28, 28))
    (tmp_path / "l3").write_bytes(struct.pack(">II", 0x801, 0))
    assert read_mnist_idx(tmp_path / "i3", tmp_path / "l3").count == 0
    # malformed magic
    (tmp_path / "bad").write_bytes(struct.pack(">IIII", 0x804, 1, 2, 2)
                                   + bytes(4))
    with pytest.raises(FormatError):
        read_mnist_idx(tmp_path / "bad", tmp_path / "l1")

    # SPKF: bit-exact roundtrip
    frames = DatasetFrames(
        data=RNG.normal(0, 1, (4, 2, 1, 5, 5)).astype("<f4").astype(float),
        labels=np.array([3, 1, 4, 1], dtype=np.uint8))
    write_frames_bin(tmp_path / "a.spkf", frames)
    back = read_frames_bin(tmp_path / "a.spkf")
    assert np.array_equal(back.data, frames.data)
    assert np.array_equal(back.labels, frames.labels)
    write_frames_bin(tmp_path / "b.spkf", back)
    assert (tmp_path / "a.spkf").read_bytes() == \
        (tmp_path / "b.spkf").read_bytes()

    # weight CSV off-by-one
    from cipherspike.model_io import parse_network
    spec = parse_network(
        '{"name": "w", "input": {"channels": 1, "height": 6, "width": 6},'
        ' "timesteps": 1, "layers": [{"type": "conv", "out_ch": 2,'
        ' "kernel": 3, "stride": 1, "padding": 0}]}')
    w = {0: (RNG.normal(0, 1, (2, 1, 3, 3)), np.zeros(2))}
    save_weights_csv(tmp_path, spec, w)
    u = weight_units(spec)[0]
    for rows, cols in ((u.rows + 1, u.cols), (u.rows, u.cols - 1)):
        np.savetxt(tmp_path / "layer0_weight.csv",
                   RNG.normal(0, 1, (rows, cols)), delimiter=",")
        with pytest.raises(ValidationError) as ei:
            load_weights_csv(tmp_path, spec)
        assert f"{u.rows}x{u.cols}" in str(ei.value)
    _passline(9, "format-conformance")
