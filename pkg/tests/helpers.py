"""Shared test fixtures: independent oracles and trace builders."""

from __future__ import annotations

import numpy as np

from ladcalib.traces import (
    EOS_TOKEN,
    SCHEME_KINDS,
    CandidateTokenization,
    InferenceTrace,
    StepLogits,
    scheme_labels,
    tokenize_label,
)
from ladcalib.evaluation import Episode
from ladcalib.synthetic import generate_eval_episodes


def brute_force_scores(trace: InferenceTrace) -> np.ndarray:
    """Token-tree enumeration oracle, independent of the scoring module.

    Walks every candidate's root-to-leaf path and multiplies plain
    per-step softmax probabilities over each step's valid set.
    """
    probs = []
    for cand in trace.cand_tokens:
        path = cand.ids + ((EOS_TOKEN,) if cand.eos else ())
        p = 1.0
        for j, token in enumerate(path):
            step = trace.first_step if j == 0 else trace.continuations[path[:j]]
            weights = np.exp(step.logits - step.logits.max())
            weights = weights / weights.sum()
            p *= float(weights[step.tokens.index(token)])
        probs.append(p)
    return np.array(probs)


def single_token_trace(
    probs,
    attention=None,
    gt=None,
    instance_id="fix",
    shuffle_id=0,
    images=None,
    scheme="upper-alpha",
) -> InferenceTrace:
    """Minimal trace whose candidate probabilities equal `probs` exactly."""
    q = np.asarray(probs, dtype=float)
    n = len(q)
    labels = scheme_labels(scheme, n)
    tokens = tuple(tokenize_label(scheme, lbl)[0] for lbl in labels)
    if attention is None:
        attention = np.full((1, n), 0.5 / n)
    attention = np.asarray(attention, dtype=float)
    return InferenceTrace(
        instance_id=instance_id,
        shuffle_id=shuffle_id,
        n=n,
        scheme=scheme,
        labels=labels,
        images=tuple(images) if images else tuple(f"{instance_id}-v{k}" for k in range(1, n + 1)),
        gt_position=gt,
        first_step=StepLogits(tokens=tokens, logits=np.log(q)),
        continuations={},
        cand_tokens=tuple(CandidateTokenization(ids=(t,), eos=False) for t in tokens),
        attention=attention,
    )


def random_tree_trace(
    rng: np.random.Generator,
    n: int | None = None,
    scheme: str | None = None,
    logit_scale: float = 3.0,
    instance_id: str = "rnd",
) -> InferenceTrace:
    """Random valid scoring tree: random scheme, mixed token lengths,
    random logits at every step, forced EOS only where a candidate's path
    is a proper prefix of another's."""
    if n is None:
        n = int(rng.integers(2, 13))
    if scheme is None:
        scheme = SCHEME_KINDS[int(rng.integers(0, len(SCHEME_KINDS)))]
    labels = scheme_labels(scheme, n)
    idss = [tokenize_label(scheme, lbl) for lbl in labels]
    prefix_of_other = {
        i
        for i, a in enumerate(idss)
        for j, b in enumerate(idss)
        if i != j and len(a) < len(b) and b[: len(a)] == a
    }
    cands = tuple(
        CandidateTokenization(
            ids=ids, eos=True if i in prefix_of_other else bool(rng.integers(0, 2))
        )
        for i, ids in enumerate(idss)
    )
    children: dict[tuple[int, ...], set[int]] = {}
    for cand in cands:
        path = cand.path()
        for j in range(len(path)):
            children.setdefault(path[:j], set()).add(path[j])

    def mkstep(tokens: set[int]) -> StepLogits:
        toks = tuple(sorted(tokens))
        return StepLogits(tokens=toks, logits=rng.normal(0.0, logit_scale, len(toks)))

    layers = int(rng.integers(1, 5))
    attn = rng.random((layers, n))
    attn = attn / attn.sum(axis=1, keepdims=True) * rng.uniform(0.05, 0.95, (layers, 1))
    return InferenceTrace(
        instance_id=instance_id,
        shuffle_id=0,
        n=n,
        scheme=scheme,
        labels=labels,
        images=tuple(f"{instance_id}-v{k}" for k in range(1, n + 1)),
        gt_position=int(rng.integers(1, n + 1)),
        first_step=mkstep(children[()]),
        continuations={node: mkstep(toks) for node, toks in children.items() if node},
        cand_tokens=cands,
        attention=attn,
    )


def permute_trace(trace: InferenceTrace, sigma: tuple[int, ...]) -> InferenceTrace:
    """Relabel positions by sigma (old position k moves to sigma[k-1]).

    Only supports single-token candidates; position labels stay attached
    to positions, so logits, images, attention columns, and gt move.
    """
    n = trace.n
    assert sorted(sigma) == list(range(1, n + 1))
    assert all(len(c.ids) == 1 for c in trace.cand_tokens)
    inv = [0] * n  # inv[new - 1] = old position
    for old, new in enumerate(sigma, start=1):
        inv[new - 1] = old
    token_of = {j + 1: trace.cand_tokens[j].ids[0] for j in range(n)}
    old_logit = dict(zip(trace.first_step.tokens, trace.first_step.logits))
    new_logits = np.array([old_logit[token_of[inv[j - 1]]] for j in range(1, n + 1)])
    new_conts = {}
    for j in range(1, n + 1):
        cand = trace.cand_tokens[inv[j - 1] - 1]
        if cand.eos:
            new_conts[(token_of[j],)] = trace.continuations[cand.ids]
    attn = np.asarray(trace.attention)
    new_attn = np.empty_like(attn)
    for j in range(1, n + 1):
        new_attn[:, j - 1] = attn[:, inv[j - 1] - 1]
    return InferenceTrace(
        instance_id=trace.instance_id,
        shuffle_id=trace.shuffle_id,
        n=n,
        scheme=trace.scheme,
        labels=trace.labels,
        images=tuple(trace.images[inv[j - 1] - 1] for j in range(1, n + 1)),
        gt_position=None if trace.gt_position is None else sigma[trace.gt_position - 1],
        first_step=StepLogits(tokens=tuple(token_of[j] for j in range(1, n + 1)), logits=new_logits),
        continuations=new_conts,
        cand_tokens=tuple(
            CandidateTokenization(ids=(token_of[j],), eos=trace.cand_tokens[inv[j - 1] - 1].eos)
            for j in range(1, n + 1)
        ),
        attention=new_attn,
    )


def episodes_in_memory(cfg, count, t, **kwargs) -> list[Episode]:
    specs, eval_traces, _ = generate_eval_episodes(cfg, count, t, **kwargs)
    by_key = {(tr.instance_id, tr.shuffle_id): tr for tr in eval_traces}
    return [
        Episode(
            instance_id=s.episode_id,
            images=s.images,
            gt_image=s.gt_image,
            presentations=tuple(by_key[(s.episode_id, i)] for i in range(t)),
        )
        for s in specs
    ]
