"""Inference-time attention-guided correction.

The corrector picks the layers with the strongest total attention on the
candidate images, divides the static attention prior out of their
per-image mass to recover an intrinsic visual posterior, mixes the
conditional bias rows under that posterior into an instance-specific
expected prior, and subtracts its log from the observed candidate
log-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import ATTENTION_FLOOR, AttentionPrior, CalibrationProfile, ConditionalBiasMatrix
from .scoring import CandidateProbabilities, score_candidates
from .traces import InferenceTrace
from .util import LadcalibError, softmax


class DebiasError(LadcalibError):
    pass


@dataclass(frozen=True)
class DebiasConfig:
    """Correction knobs: how many layers to pool and how sharp the posterior is."""

    k: int = 2
    tau: float = 5.0

    def validate(self) -> None:
        if self.k < 1:
            raise DebiasError(f"k={self.k} < 1")
        if not self.tau > 0:
            raise DebiasError(f"tau={self.tau} must be positive")


@dataclass
class VisualPosterior:
    """Temperature-sharpened belief over candidate positions, and its layers."""

    pi: np.ndarray
    selected_layers: tuple[int, ...]


@dataclass
class DebiasResult:
    """Full per-instance correction output (argmax ties go to the lowest index)."""

    predicted_index: int
    calibrated_log_scores: np.ndarray
    calibrated_probs: np.ndarray
    posterior: VisualPosterior
    expected_prior: np.ndarray
    raw: CandidateProbabilities

    def to_record(self, trace: InferenceTrace) -> dict:
        return {
            "instance_id": trace.instance_id,
            "shuffle_id": int(trace.shuffle_id),
            "predicted_index": self.predicted_index,
            "predicted_image": trace.images[self.predicted_index - 1],
            "calibrated_log_scores": [float(x) for x in self.calibrated_log_scores],
            "calibrated_probs": [float(x) for x in self.calibrated_probs],
            "posterior": [float(x) for x in self.posterior.pi],
            "selected_layers": list(self.posterior.selected_layers),
            "expected_prior": [float(x) for x in self.expected_prior],
            "raw_probs": [float(x) for x in self.raw.probs],
            "raw_log_probs": [float(x) for x in self.raw.log_probs],
        }


def layer_strength(trace: InferenceTrace) -> np.ndarray:
    """Total attention mass on candidate images per layer."""
    return np.asarray(trace.attention, dtype=float).sum(axis=1)


def select_layers(strength: np.ndarray, k: int) -> tuple[int, ...]:
    """1-based indices of the k strongest layers, ties toward the lower index.

    Asking for more layers than exist degrades to all layers.
    """
    if k < 1:
        raise DebiasError(f"k={k} < 1")
    order = np.argsort(-np.asarray(strength, dtype=float), kind="stable")
    picked = sorted(int(i) + 1 for i in order[: min(k, len(order))])
    return tuple(picked)


def visual_posterior(
    trace: InferenceTrace, prior: AttentionPrior, cfg: DebiasConfig = DebiasConfig()
) -> VisualPosterior:
    """Prior-corrected attention belief over candidates.

    Pools mean log-ratios log(a / a_prior) over the selected layers and
    sharpens with softmax(tau * v). Zero attention mass is floored before
    the log so one empty span cannot dominate the pool.
    """
    cfg.validate()
    attn = np.asarray(trace.attention, dtype=float)
    pm = prior.matrix
    if attn.shape != pm.shape:
        raise DebiasError(
            f"{trace.instance_id}: attention {attn.shape} vs prior {pm.shape} dimension mismatch"
        )
    selected = select_layers(layer_strength(trace), cfg.k)
    idx = [l - 1 for l in selected]
    v = np.mean(
        np.log(np.maximum(attn[idx], ATTENTION_FLOOR)) - np.log(np.maximum(pm[idx], ATTENTION_FLOOR)),
        axis=0,
    )
    return VisualPosterior(pi=softmax(cfg.tau * v), selected_layers=selected)


def expected_prior(posterior: VisualPosterior, bias: ConditionalBiasMatrix) -> np.ndarray:
    """Posterior-weighted mixture of the conditional bias rows."""
    m = bias.matrix
    if m.shape[0] != posterior.pi.shape[0]:
        raise DebiasError(f"posterior length {posterior.pi.shape[0]} vs bias {m.shape}")
    return posterior.pi @ m


def debias_scores(raw: CandidateProbabilities, p_prior: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the expected prior in log domain; also return softmax for reporting."""
    if np.any(p_prior <= 0):
        raise DebiasError("expected prior has non-positive entries")
    log_scores = raw.log_probs - np.log(p_prior)
    return log_scores, softmax(log_scores)


def predict(
    trace: InferenceTrace, profile: CalibrationProfile, cfg: DebiasConfig = DebiasConfig()
) -> DebiasResult:
    """Full correction for one trace against a matching profile."""
    profile.check_trace(trace)
    raw = score_candidates(trace)
    posterior = visual_posterior(trace, profile.attn_prior, cfg)
    prior_vec = expected_prior(posterior, profile.bias)
    log_scores, probs = debias_scores(raw, prior_vec)
    return DebiasResult(
        predicted_index=int(np.argmax(log_scores)) + 1,
        calibrated_log_scores=log_scores,
        calibrated_probs=probs,
        posterior=posterior,
        expected_prior=prior_vec,
        raw=raw,
    )
