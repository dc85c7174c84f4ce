"""Reference predictors: raw argmax, static-prior subtraction, orbit
averaging, and the two attention readouts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .calibration import DEFAULT_SMOOTHING, AttentionPrior
from .debias import DebiasConfig, select_layers, layer_strength, visual_posterior
from .scoring import score_candidates
from .traces import InferenceTrace
from .util import LadcalibError


class OrbitError(LadcalibError):
    """Cyclic orbit incomplete or inconsistent."""


@dataclass
class GlobalPrior:
    """Single static position-preference vector shared by all instances."""

    p: np.ndarray


def vanilla_predict(trace: InferenceTrace) -> int:
    """Argmax of the raw candidate probabilities (ties to the lowest index)."""
    return int(np.argmax(score_candidates(trace).probs)) + 1


def estimate_global_prior(
    traces: Sequence[InferenceTrace], smoothing: float = DEFAULT_SMOOTHING
) -> GlobalPrior:
    """Position-wise mean candidate probability over a calibration set."""
    traces = list(traces)
    if not traces:
        raise LadcalibError("empty calibration set for the global prior")
    n = traces[0].n
    for t in traces:
        if t.n != n:
            raise LadcalibError(f"mixed candidate counts in calibration set: {n} vs {t.n}")
    p = np.mean(np.stack([score_candidates(t).probs for t in traces]), axis=0)
    if smoothing:
        p = (1.0 - smoothing) * p + smoothing / n
    return GlobalPrior(p=p)


def pride_predict(trace: InferenceTrace, prior: GlobalPrior) -> int:
    """Argmax after subtracting the log of the static global prior."""
    if np.any(prior.p <= 0):
        raise LadcalibError("global prior has non-positive entries")
    scores = score_candidates(trace).log_probs - np.log(prior.p)
    return int(np.argmax(scores)) + 1


def _rotation_of(base: tuple[str, ...], order: tuple[str, ...]) -> int | None:
    n = len(base)
    for s in range(n):
        if base[s:] + base[:s] == order:
            return s
    return None


def permutation_average_predict(
    orbit: Sequence[InferenceTrace], log_domain: bool = False
) -> str:
    """Image identity with the highest identity-aligned mean probability.

    The orbit must contain each cyclic shift of one presentation exactly
    once. `log_domain` switches the mean to log-probabilities; the default
    averages probabilities. Ties break toward the lexicographically
    smallest identity.
    """
    orbit = list(orbit)
    if not orbit:
        raise OrbitError("empty orbit")
    n = orbit[0].n
    base = orbit[0].images
    if len(orbit) != n:
        raise OrbitError(f"orbit has {len(orbit)} traces for n={n}")
    shifts_seen = set()
    totals: dict[str, float] = {img: 0.0 for img in base}
    for t in orbit:
        if t.n != n or set(t.images) != set(base):
            raise OrbitError(f"{t.instance_id}: orbit identity mismatch")
        s = _rotation_of(base, t.images)
        if s is None:
            raise OrbitError(f"{t.instance_id}: presentation is not a cyclic shift of the orbit base")
        if s in shifts_seen:
            raise OrbitError(f"{t.instance_id}: duplicate cyclic shift {s} in orbit")
        shifts_seen.add(s)
        scored = score_candidates(t)
        values = scored.log_probs if log_domain else scored.probs
        for k, img in enumerate(t.images):
            totals[img] += float(values[k])
    if shifts_seen != set(range(n)):
        raise OrbitError(f"incomplete orbit: shifts {sorted(shifts_seen)} of 0..{n - 1}")
    best = max(totals.values())
    return min(img for img, v in totals.items() if v == best)


def attention_readout_predict(trace: InferenceTrace, k: int = 2) -> int:
    """Argmax of raw attention mass summed over the k strongest layers."""
    selected = select_layers(layer_strength(trace), k)
    pooled = np.asarray(trace.attention, dtype=float)[[l - 1 for l in selected]].sum(axis=0)
    return int(np.argmax(pooled)) + 1


def purified_attention_predict(
    trace: InferenceTrace, prior: AttentionPrior, cfg: DebiasConfig = DebiasConfig()
) -> int:
    """Argmax of the prior-corrected attention posterior alone."""
    return int(np.argmax(visual_posterior(trace, prior, cfg).pi)) + 1
