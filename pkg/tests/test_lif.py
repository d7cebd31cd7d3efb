"""LIF neuron dynamics: reference oracle, exact switch path, approx path."""

import numpy as np
import pytest

from cipherspike import LifPlan, SimBackend, lif_reference
from cipherspike.errors import ValidationError
from cipherspike.layers import Geometry

TAU = 0.25
TH = 0.5


def test_reference_hand_trace():
    spikes, membranes = lif_reference(
        np.array([[0.6], [0.3], [0.3]]), TAU, TH)
    # t0 fires and resets; leak then carries 0.3 -> 0.25*0.3 + 0.3
    assert spikes.tolist() == [[1.0], [0.0], [0.0]]
    assert membranes.tolist() == [[0.6], [0.3], [0.375]]

    spikes, membranes = lif_reference(np.array([[0.4], [0.45]]), TAU, TH)
    assert spikes.tolist() == [[0.0], [1.0]]
    assert membranes[1, 0] == pytest.approx(0.55)


def test_reference_threshold_is_strict():
    spikes, _ = lif_reference(np.array([[TH]]), TAU, TH)
    assert spikes[0, 0] == 0.0


def test_reference_rejects_flat_input():
    with pytest.raises(ValidationError):
        lif_reference(np.zeros(5))


def encrypted_spikes(plan, currents, slots, fresh=12):
    be = SimBackend(fresh_level=fresh, slots=slots)
    steps, n = currents.shape
    out = np.zeros_like(currents)
    plan.reset_state()
    for t in range(steps):
        buf = np.zeros(slots)
        buf[:n] = currents[t]
        s = plan.step(be, be.encrypt(buf), t + 1)
        out[t] = be.decrypt(s)[:n]
    return out, be


def test_switch_mode_bit_exact(rng):
    """200 random membrane traces packed as slots, 5 steps: switch mode
    reproduces the float reference spike train exactly, not approximately."""
    currents = rng.normal(0.3, 0.6, (5, 200))
    plan = LifPlan("lif", Geometry(1, 1, 200), "switch", 1.0, 256,
                   tau=TAU, threshold=TH)
    got, _ = encrypted_spikes(plan, currents, 256)
    want, _ = lif_reference(currents, TAU, TH)
    assert np.array_equal(got, want)


def test_switch_reset_zeroes_carried_state(rng):
    plan = LifPlan("lif", Geometry(1, 1, 4), "switch", 1.0, 8)
    be = SimBackend(fresh_level=10, slots=8)
    buf = np.zeros(8)
    buf[:4] = [0.9, 0.9, 0.1, 0.9]  # three fire, one holds
    plan.step(be, be.encrypt(buf), 1)
    carry = be.decrypt(plan._state)[:4]
    assert carry[0] == 0.0 and carry[1] == 0.0 and carry[3] == 0.0
    assert carry[2] == pytest.approx(0.1)


def test_approx_mode_agreement_outside_dead_zone(rng):
    """Chebyshev firing decision: >=99% slot agreement with the reference
    once membranes inside the measured dead zone are excluded."""
    # scale chosen like calibration does: membranes must stay inside the
    # series interval, |V| <= |I|max / (1 - tau) = 2.0 / 0.75 < 3
    scale = 3.0
    n = 500
    currents = np.clip(rng.normal(0.3, 0.6, (5, n)), -1.5, 2.0)
    plan = LifPlan("lif", Geometry(1, 1, n), "approx", scale, 512,
                   tau=TAU, threshold=TH)
    got, _ = encrypted_spikes(plan, currents / scale, 512)
    want, membranes = lif_reference(currents / scale, TAU, TH / scale)
    clear = np.abs(membranes - plan.scaled_threshold) > plan.dead_zone
    assert clear.sum() > 0.5 * clear.size  # zone must not swallow the sample
    agree = (np.abs(got - want) < 0.5) | ~clear  # series spikes are ~0/1
    assert agree.mean() >= 0.99


def test_approx_matches_natural_unit_reference(rng):
    """Scaled-domain evaluation fires on the same inputs as the natural
    neuron; check directly against the unscaled reference off-zone."""
    scale = 3.0
    currents = np.clip(rng.normal(0.3, 0.6, (3, 300)), -1.5, 2.0)
    plan = LifPlan("lif", Geometry(1, 1, 300), "approx", scale, 512)
    got, _ = encrypted_spikes(plan, currents / scale, 512)
    want, membranes = lif_reference(currents, TAU, TH)
    clear = np.abs(membranes / scale - plan.scaled_threshold) > plan.dead_zone
    assert ((np.abs(got - want) < 0.5) | ~clear).mean() >= 0.99


@pytest.mark.parametrize("mode,scale", [("switch", 1.0), ("approx", 2.0)])
def test_plain_step_mirrors_reference(mode, scale, rng):
    currents = rng.normal(0.3, 0.6, (6, 64))
    plan = LifPlan("lif", Geometry(1, 1, 64), mode, scale, 64)
    want, membranes = lif_reference(currents, TAU, TH)
    plan.reset_state()
    for t in range(6):
        got = plan.plain_step(currents[t] / scale, t + 1)
        assert np.array_equal(got, want[t])
    assert plan.plain_v_peak == pytest.approx(np.abs(membranes).max() / scale)


def test_min_input_level_by_mode():
    p_approx = LifPlan("a", Geometry(1, 1, 4), "approx", 2.0, 8, degree=50)
    p_switch = LifPlan("s", Geometry(1, 1, 4), "switch", 1.0, 8)
    assert p_approx.series_depth == 7
    assert p_approx.min_input_level == 9
    assert p_switch.min_input_level == 2


def test_no_rotations_needed():
    plan = LifPlan("lif", Geometry(2, 3, 3), "switch", 1.0, 32)
    assert plan.rotations() == []
    # and the encrypted step really issues none
    be = SimBackend(fresh_level=8, slots=32, allowed_rotations=set())
    plan.step(be, be.encrypt(np.zeros(32)), 1)
    assert be.counters["rotations"] == 0


def test_validation_errors():
    g = Geometry(1, 1, 4)
    with pytest.raises(ValidationError):
        LifPlan("x", g, "relu", 1.0, 8)
    with pytest.raises(ValidationError):
        LifPlan("x", g, "switch", 1.0, 8, tau=0.0)
    with pytest.raises(ValidationError):
        LifPlan("x", g, "switch", 1.0, 8, tau=1.5)
    with pytest.raises(ValidationError):
        LifPlan("x", g, "switch", -1.0, 8)
    with pytest.raises(ValidationError):
        # threshold/scale = 1.25 falls outside the series interval
        LifPlan("x", g, "approx", 0.4, 8)


def test_approx_refreshes_when_too_low(rng):
    plan = LifPlan("lif", Geometry(1, 1, 8), "approx", 2.0, 16)
    be = SimBackend(fresh_level=12, slots=16)
    cur = be.encrypt(rng.normal(0, 0.3, 16), level=plan.min_input_level - 1)
    plan.step(be, cur, 1)
    assert len(be.refresh_log) == 1
    assert "membrane" in be.refresh_log[0]["note"]
