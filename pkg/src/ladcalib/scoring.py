"""Candidate probabilities from the scoring tree via restricted softmax.

Each generation step normalizes its raw logits over only the tokens that
are valid continuations of some candidate, and a candidate's probability
is the product of its step probabilities (including the terminal EOS step
when the trace declares one). Accumulation happens in log domain with
max-subtracted log-sum-exp, so logits anywhere in [-1e4, 1e4] are safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .traces import EOS_TOKEN, InferenceTrace, StepLogits
from .util import LadcalibError, logsumexp

# Probabilities are floored after exponentiation because downstream
# corrections take their logs.
PROB_FLOOR = 1e-300
_LOG_FLOOR = float(np.log(PROB_FLOOR))


class ScoringError(LadcalibError):
    """Scoring tree inconsistent with the declared candidates."""


@dataclass
class CandidateProbabilities:
    """Normalized distribution over the n candidates, kept in both domains."""

    probs: np.ndarray
    log_probs: np.ndarray


def _step_logprob(step: StepLogits, token: int, where: str) -> float:
    try:
        idx = step.tokens.index(token)
    except ValueError:
        raise ScoringError(f"{where}: token {token} not in valid set {list(step.tokens)}") from None
    if not np.all(np.isfinite(step.logits)):
        raise ScoringError(f"{where}: non-finite logits")
    return float(step.logits[idx]) - logsumexp(step.logits)


def score_candidates(trace: InferenceTrace) -> CandidateProbabilities:
    """Joint restricted-softmax probability of each candidate's token path."""
    firsts = {c.ids[0] for c in trace.cand_tokens}
    if set(trace.first_step.tokens) != firsts:
        raise ScoringError(
            f"{trace.instance_id}: first-step valid set {sorted(trace.first_step.tokens)} "
            f"does not match candidate first tokens {sorted(firsts)}"
        )
    seen: dict[tuple[int, ...], int] = {}
    for k, cand in enumerate(trace.cand_tokens):
        path = cand.path()
        if path in seen:
            raise ScoringError(
                f"{trace.instance_id}: candidates {seen[path] + 1} and {k + 1} share token path {list(path)}"
            )
        seen[path] = k

    log_probs = np.empty(trace.n)
    for k, cand in enumerate(trace.cand_tokens):
        where = f"{trace.instance_id}: candidate {k + 1}"
        lp = _step_logprob(trace.first_step, cand.ids[0], where)
        for j in range(1, len(cand.ids)):
            prefix = cand.ids[:j]
            step = trace.continuations.get(prefix)
            if step is None:
                raise ScoringError(f"{where}: missing continuation for prefix {list(prefix)}")
            lp += _step_logprob(step, cand.ids[j], where)
        if cand.eos:
            step = trace.continuations.get(cand.ids)
            if step is None:
                raise ScoringError(f"{where}: missing EOS continuation for {list(cand.ids)}")
            lp += _step_logprob(step, EOS_TOKEN, where)
        log_probs[k] = lp

    log_probs = np.maximum(log_probs, _LOG_FLOOR)
    return CandidateProbabilities(probs=np.exp(log_probs), log_probs=log_probs)
