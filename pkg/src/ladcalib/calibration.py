"""Conditional bias, visual gain, and attention prior estimation.

Calibration consumes a symmetrized trace set (every ground-truth position
covered, built from cyclic shifts of a handful of base instances) and
produces three things: the conditional selection matrix observed per
ground-truth position, the visual gain implied by its strongest
diagonal-to-off-diagonal margin, and the per-layer attention prior that
captures structural attention artifacts independent of content.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .scoring import score_candidates
from .traces import InferenceTrace
from .util import LadcalibError, atomic_write_text, canonical_json

log = logging.getLogger("ladcalib.calibration")

PROFILE_VERSION = 1
DEFAULT_SMOOTHING = 1e-4
ATTENTION_FLOOR = 1e-12


class CalibrationError(LadcalibError):
    """Calibration input does not satisfy the estimator preconditions."""


@dataclass
class ObsMatrix:
    """Row i is the mean candidate distribution when the target sits at i."""

    matrix: np.ndarray
    counts: np.ndarray


@dataclass
class ConditionalBiasMatrix:
    """Row-stochastic structural bias: row i is the bias profile for target i."""

    matrix: np.ndarray


@dataclass
class AttentionPrior:
    """Per-layer mean attention mass over positions (layers x n), floored > 0."""

    matrix: np.ndarray


@dataclass
class CalibrationProfile:
    """Everything inference-time correction needs, keyed by (n, scheme, layers)."""

    n: int
    scheme: str
    bias: ConditionalBiasMatrix
    attn_prior: AttentionPrior
    gamma: float
    meta: dict

    @property
    def layers(self) -> int:
        return self.attn_prior.matrix.shape[0]

    def check_trace(self, trace: InferenceTrace) -> None:
        if trace.n != self.n or trace.scheme != self.scheme or trace.layers != self.layers:
            raise CalibrationError(
                f"profile (n={self.n}, scheme={self.scheme}, layers={self.layers}) does not "
                f"match trace {trace.instance_id} (n={trace.n}, scheme={trace.scheme}, "
                f"layers={trace.layers})"
            )


def _check_same_shape(traces: Sequence[InferenceTrace]) -> None:
    if not traces:
        raise CalibrationError("empty calibration set")
    n, scheme = traces[0].n, traces[0].scheme
    for t in traces:
        if t.n != n:
            raise CalibrationError(f"mixed candidate counts: {n} vs {t.n} ({t.instance_id})")
        if t.scheme != scheme:
            raise CalibrationError(f"mixed label schemes: {scheme} vs {t.scheme} ({t.instance_id})")


def estimate_obs_matrix(
    traces: Sequence[InferenceTrace], smoothing: float = DEFAULT_SMOOTHING
) -> ObsMatrix:
    """Mean candidate distribution per ground-truth position, lightly smoothed.

    Smoothing mixes each row with the uniform distribution,
    P <- (1 - lambda) P + lambda / n, which keeps later ratios and logs
    defined when a probability collapses to zero.
    """
    _check_same_shape(traces)
    n = traces[0].n
    rows: list[list[np.ndarray]] = [[] for _ in range(n)]
    for t in traces:
        if t.gt_position is None:
            raise CalibrationError(f"{t.instance_id}: calibration trace lacks a ground-truth position")
        rows[t.gt_position - 1].append(score_candidates(t).probs)
    counts = np.array([len(r) for r in rows])
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise CalibrationError(f"no calibration trace with ground truth at position {missing[0] + 1}")
    if counts.max() > 2 * counts.min():
        log.warning("uneven ground-truth coverage in calibration set: counts=%s", counts.tolist())
    matrix = np.stack([np.mean(np.stack(r), axis=0) for r in rows])
    if smoothing:
        matrix = (1.0 - smoothing) * matrix + smoothing / n
    return ObsMatrix(matrix=matrix, counts=counts)


def estimate_gamma(obs: ObsMatrix) -> float:
    """Largest diagonal-to-off-diagonal ratio, clamped below at 1.

    The structural bias is assumed never to favor the target, so every
    observed margin lower-bounds the visual gain; the max is the tightest
    estimate that avoids over-correction.
    """
    m = obs.matrix
    n = m.shape[0]
    if n < 2:
        raise CalibrationError("need at least 2 positions to estimate the visual gain")
    if np.any(m <= 0):
        raise CalibrationError("observation matrix has non-positive entries; smooth it first")
    off = ~np.eye(n, dtype=bool)
    ratios = (np.diag(m)[:, None] / m)[off]
    gamma = float(ratios.max())
    if gamma < 1.0:
        log.warning("max observed margin %.6g < 1 (anti-correct calibration model); clamping to 1", gamma)
        return 1.0
    return gamma


def recover_bias(obs: ObsMatrix, gamma: float) -> ConditionalBiasMatrix:
    """Divide the visual gain out of the diagonal and renormalize each row."""
    if gamma < 1.0:
        raise CalibrationError(f"gamma={gamma} < 1")
    m = obs.matrix.copy()
    n = m.shape[0]
    m[np.diag_indices(n)] /= gamma
    m /= m.sum(axis=1, keepdims=True)
    return ConditionalBiasMatrix(matrix=m)


def estimate_attention_prior(traces: Sequence[InferenceTrace]) -> AttentionPrior:
    """Mean per-layer attention mass over the set, floored at 1e-12."""
    if not traces:
        raise CalibrationError("empty trace set for attention prior")
    layers = traces[0].layers
    for t in traces:
        if t.layers != layers:
            raise CalibrationError(f"mixed layer counts: {layers} vs {t.layers} ({t.instance_id})")
    mean = np.mean(np.stack([np.asarray(t.attention, dtype=float) for t in traces]), axis=0)
    return AttentionPrior(matrix=np.maximum(mean, ATTENTION_FLOOR))


def build_profile(
    traces: Sequence[InferenceTrace],
    smoothing: float = DEFAULT_SMOOTHING,
    created: str | None = None,
) -> CalibrationProfile:
    """Run the full estimation chain on a symmetrized calibration set."""
    traces = list(traces)
    obs = estimate_obs_matrix(traces, smoothing=smoothing)
    gamma = estimate_gamma(obs)
    bias = recover_bias(obs, gamma)
    prior = estimate_attention_prior(traces)
    if created is None:
        created = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    meta = {
        "traces": len(traces),
        "counts": obs.counts.tolist(),
        "layers": prior.matrix.shape[0],
        "smoothing": smoothing,
        "created": created,
    }
    return CalibrationProfile(
        n=traces[0].n,
        scheme=traces[0].scheme,
        bias=bias,
        attn_prior=prior,
        gamma=gamma,
        meta=meta,
    )


def profile_to_dict(profile: CalibrationProfile) -> dict:
    return {
        "v": PROFILE_VERSION,
        "n": profile.n,
        "scheme": profile.scheme,
        "layers": profile.layers,
        "gamma": float(profile.gamma),
        "bias": [[float(x) for x in row] for row in profile.bias.matrix],
        "attn_prior": [[float(x) for x in row] for row in profile.attn_prior.matrix],
        "meta": profile.meta,
    }


def profile_from_dict(doc: dict) -> CalibrationProfile:
    try:
        if doc.get("v") != PROFILE_VERSION:
            raise CalibrationError(f"unsupported profile version {doc.get('v')!r}")
        profile = CalibrationProfile(
            n=int(doc["n"]),
            scheme=str(doc["scheme"]),
            bias=ConditionalBiasMatrix(matrix=np.asarray(doc["bias"], dtype=float)),
            attn_prior=AttentionPrior(matrix=np.asarray(doc["attn_prior"], dtype=float)),
            gamma=float(doc["gamma"]),
            meta=dict(doc.get("meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CalibrationError(f"malformed profile document ({exc})") from exc
    b = profile.bias.matrix
    if b.shape != (profile.n, profile.n) or np.any(b <= 0):
        raise CalibrationError("bias matrix must be strictly positive and n x n")
    if not np.allclose(b.sum(axis=1), 1.0, atol=1e-9):
        raise CalibrationError("bias matrix rows must sum to 1")
    p = profile.attn_prior.matrix
    if p.ndim != 2 or p.shape[1] != profile.n or np.any(p < ATTENTION_FLOOR):
        raise CalibrationError("attention prior must be (layers x n) with entries >= 1e-12")
    if int(doc["layers"]) != p.shape[0]:
        raise CalibrationError("declared layer count does not match the attention prior")
    if profile.gamma < 1.0:
        raise CalibrationError(f"gamma={profile.gamma} < 1")
    return profile


def save_profile(path, profile: CalibrationProfile) -> None:
    atomic_write_text(path, canonical_json(profile_to_dict(profile), indent=1) + "\n")


def load_profile(path) -> CalibrationProfile:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise CalibrationError(f"{path}: invalid JSON ({exc})") from exc
    return profile_from_dict(doc)
