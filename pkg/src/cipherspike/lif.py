"""Leaky integrate-and-fire evaluators.

Three interchangeable implementations of the same neuron dynamics:

* ``lif_reference`` — plain float forward pass, the oracle everything else
  is measured against.
* ``LifPlan`` in ``approx`` mode — the firing decision is a Chebyshev step
  series evaluated directly on the ciphertext; membrane values live in a
  scaled domain so they fit the series' [-1, 1] interval.
* ``LifPlan`` in ``switch`` mode — the firing decision is an exact
  encrypted comparison against a threshold ciphertext; spike trains are
  bit-equal to the reference.

Dynamics (reset-to-zero):

    V(1) = I(1)
    V(t) = tau * V'(t-1) + I(t)          t > 1
    s(t) = 1  iff  V(t) > threshold      (strict)
    V'(t) = (1 - s(t)) * V(t)
"""

from __future__ import annotations

import numpy as np

from .backend import Backend, CipherVector
from .chebyshev import (
    dead_zone,
    decay_from_step,
    evaluate_series,
    fit_step,
    series_levels,
)
from .errors import ValidationError
from .layers import Geometry

DEFAULT_TAU = 0.25
DEFAULT_THRESHOLD = 0.5
DEFAULT_DEGREE = 50


def lif_reference(currents: np.ndarray, tau: float = DEFAULT_TAU,
                  threshold: float = DEFAULT_THRESHOLD):
    """Plain LIF forward pass over a (T, n) array of input currents.

    Returns (spikes, membranes) both shaped (T, n); membranes holds the
    pre-reset potential V(t) at each step (the value the firing decision
    looks at).
    """
    currents = np.asarray(currents, dtype=np.float64)
    if currents.ndim != 2:
        raise ValidationError("currents must be (timesteps, n)")
    steps, n = currents.shape
    spikes = np.zeros((steps, n))
    membranes = np.zeros((steps, n))
    v = np.zeros(n)
    for t in range(steps):
        v = currents[t] if t == 0 else tau * v + currents[t]
        s = (v > threshold).astype(np.float64)
        membranes[t] = v
        spikes[t] = s
        v = (1.0 - s) * v
    return spikes, membranes


class LifPlan:
    """Stateful encrypted LIF layer for one network position.

    The plan owns the membrane ciphertext between timesteps; callers feed
    it one input-current vector per step and get the spike vector back.

    approx mode expects inputs already divided by ``scale`` (the producing
    layer folds 1/scale into its weights), so the step series with
    threshold ``threshold/scale`` fires on the same inputs as the plain
    neuron.  The carried state folds leak and reset into one multiply:
        carry = tau * (1 - s(V)) * V
    which is exactly tau * V' — next step just adds the new current.

    switch mode runs in natural units and compares against an encrypted
    all-``threshold`` vector; the comparison result c = [V <= th] is the
    inverse spike mask, so spikes = 1 - c and V' = c * V.
    """

    def __init__(self, name: str, geom: Geometry, mode: str, scale: float,
                 slots: int, tau: float = DEFAULT_TAU,
                 threshold: float = DEFAULT_THRESHOLD,
                 degree: int = DEFAULT_DEGREE):
        if mode not in ("approx", "switch"):
            raise ValidationError(f"{name}: unknown lif mode {mode!r}")
        if not 0.0 < tau < 1.0:
            raise ValidationError(f"{name}: tau must lie in (0,1)")
        if scale <= 0:
            raise ValidationError(f"{name}: scale must be positive")
        self.name = name
        self.geom = geom
        self.mode = mode
        self.scale = float(scale)
        self.tau = float(tau)
        self.threshold = float(threshold)
        self.degree = int(degree)
        self.slots = slots
        self.level_cost = 0  # consumed per step, not per pass; see min_input_level
        self.in_geom = geom
        self.out_geom = geom

        if mode == "approx":
            self.scaled_threshold = self.threshold / self.scale
            if not -1.0 < self.scaled_threshold < 1.0:
                raise ValidationError(
                    f"{name}: threshold/scale = {self.scaled_threshold} "
                    "outside the series interval (-1, 1)")
            self.step_coeffs = fit_step(self.scaled_threshold, self.degree)
            self.decay_coeffs = decay_from_step(self.step_coeffs, self.tau)
            self.series_depth = series_levels(self.degree)
            # series + one reset/leak multiply, plus one level so the next
            # layer's add of fresh input currents still has room.
            self.min_input_level = self.series_depth + 2
            self.dead_zone = dead_zone(self.step_coeffs, self.scaled_threshold)
        else:
            self.scaled_threshold = self.threshold
            self.min_input_level = 2  # compare is free-standing; reset mul needs 1
            self.dead_zone = 0.0
        self._state: CipherVector | None = None
        self._plain_v: np.ndarray | None = None
        self._th_vec: CipherVector | None = None
        self._ones = np.ones(slots)
        self.plain_v_peak = 0.0  # running max |V| seen by plain_step

    # -- state management ------------------------------------------------

    def reset_state(self):
        self._state = None
        self._plain_v = None
        self._th_vec = None

    def rotations(self):
        return []

    # -- encrypted step ---------------------------------------------------

    def step(self, be: Backend, current: CipherVector, t: int) -> CipherVector:
        if self.mode == "approx":
            return self._step_approx(be, current, t)
        return self._step_switch(be, current, t)

    def _accumulate(self, be: Backend, current: CipherVector, t: int,
                    leak_in_state: bool) -> CipherVector:
        if t == 1 or self._state is None:
            return current
        state = self._state
        if not leak_in_state:
            state = be.mul_scalar(state, self.tau)
        return be.add(state, current)

    def _step_approx(self, be: Backend, current: CipherVector, t: int):
        v = self._accumulate(be, current, t, leak_in_state=True)
        if v.level < self.min_input_level:
            v = be.refresh(v, note=f"{self.name} membrane t={t}")
        spikes, damp = evaluate_series(
            be, v, [self.step_coeffs, self.decay_coeffs])
        # series outputs are natural-unit values (spikes ~ {0,1}, damp
        # ~ {0,tau}) even though the argument was scaled
        spikes.scale_domain = "raw"
        damp.scale_domain = "raw"
        # damp = tau * (1 - spikes) evaluated on the same membrane values;
        # one multiply yields the leaked-and-reset carry state.
        self._state = be.mul(damp, v)
        return spikes

    def _step_switch(self, be: Backend, current: CipherVector, t: int):
        v = self._accumulate(be, current, t, leak_in_state=False)
        if v.level < self.min_input_level:
            v = be.refresh(v, note=f"{self.name} membrane t={t}")
        if self._th_vec is None:
            self._th_vec = be.encrypt(
                np.full(self.slots, self.threshold))
        inverse = be.exact_compare_le(v, self._th_vec)
        spikes = be.add_plain(be.negate(inverse), self._ones)
        self._state = be.mul(inverse, v)
        return spikes

    # -- plain twin --------------------------------------------------------

    def plain_step(self, current: np.ndarray, t: int) -> np.ndarray:
        """Reference dynamics on a float vector, carrying plain state.

        Operates in whatever domain the encrypted path uses (scaled for
        approx, natural for switch) — the dynamics are scale-invariant, so
        comparing against ``scaled_threshold`` reproduces the natural-unit
        spike train exactly.
        """
        current = np.asarray(current, dtype=np.float64)
        if t == 1 or self._plain_v is None:
            v = current.copy()
        else:
            v = self.tau * self._plain_v + current
        s = (v > self.scaled_threshold).astype(np.float64)
        self._plain_v = (1.0 - s) * v
        if v.size:
            self.plain_v_peak = max(self.plain_v_peak, float(np.abs(v).max()))
        return s

    def run_plain_trace(self, currents: np.ndarray):
        """Reference spikes for a full (T, n) trace in natural units."""
        return lif_reference(currents, self.tau, self.threshold)[0]
