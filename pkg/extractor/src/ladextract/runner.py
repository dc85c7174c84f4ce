"""Drive a model session over a job and emit trace-format records.

Scoring follows the grouped-pass discipline: one restricted call for the
candidates' first tokens, then one call per unique continuation prefix.
Steps whose only valid token is the end-of-sequence marker are emitted
with a zero logit and no model call, because a single-token restricted
softmax normalizes to probability 1 regardless of the raw score.

The output is the primary engine's line-delimited trace format, version 1;
the end-of-sequence marker is recorded as token id -1.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .attention import RawAttentionCapture, aggregate_attention
from .job import ExtractionJob, InstanceSpec, scheme_labels
from .session import ModelSession, PreparedInstance
from .spans import locate_image_spans

log = logging.getLogger("ladextract.runner")

EOS_MARKER = -1
TRACE_VERSION = 1


class ExtractionError(ValueError):
    pass


def load_template(name: str) -> str:
    path = resources.files("ladextract").joinpath("prompts", f"{name}.txt")
    if not path.is_file():
        raise ExtractionError(f"unknown prompt template {name!r}")
    return path.read_text(encoding="utf-8")


def render_prompt(template: str, n: int, caption: str) -> str:
    return template.format(n=n, caption=caption)


def _eos_policy(paths: Sequence[tuple[int, ...]]) -> list[bool]:
    """Score a terminal EOS step for single-token identifiers and for any
    identifier that is a proper prefix of another (required to keep the
    restricted normalization a proper distribution)."""
    flags = []
    for i, p in enumerate(paths):
        prefix_of_other = any(
            i != j and len(p) < len(q) and q[: len(p)] == p for j, q in enumerate(paths)
        )
        flags.append(len(p) == 1 or prefix_of_other)
    return flags


@dataclass
class _Presentation:
    shuffle_id: int
    order: tuple[int, ...]        # presented order as indices into the base paths
    gt_position: int | None


def _plan_presentations(job: ExtractionJob, inst: InstanceSpec) -> list[_Presentation]:
    n = len(inst.image_paths)
    base = tuple(range(n))
    if job.plan == "single":
        return [_Presentation(0, base, inst.gt)]
    if job.plan == "cyclic":
        out = []
        for s in range(n):
            order = base[s:] + base[:s]
            gt = (inst.gt - 1 - s) % n + 1
            out.append(_Presentation(s, order, gt))
        return out
    out = []
    inst_key = zlib.crc32(inst.instance_id.encode("utf-8"))  # stable across processes
    for ti in range(job.t):
        rng = np.random.default_rng(np.random.SeedSequence((job.seed, inst_key, ti)))
        order = tuple(int(i) for i in rng.permutation(n))
        gt = order.index(inst.gt - 1) + 1 if inst.gt is not None else None
        out.append(_Presentation(ti, order, gt))
    return out


def _score_tree(
    session: ModelSession,
    prepared: PreparedInstance,
    paths: Sequence[tuple[int, ...]],
    eos_flags: Sequence[bool],
) -> tuple[dict, list[dict]]:
    """First-step and continuation records for the candidates' token tree."""
    firsts: list[int] = []
    for p in paths:
        if p[0] not in firsts:
            firsts.append(p[0])
    first_logits = np.asarray(session.step_logits(prepared, (), firsts), dtype=float)
    if first_logits.shape != (len(firsts),):
        raise ExtractionError("session returned misshapen first-step logits")

    nodes: dict[tuple[int, ...], list[int]] = {}
    for p, eos in zip(paths, eos_flags):
        full = p + ((EOS_MARKER,) if eos else ())
        for j in range(1, len(full)):
            prefix = full[:j]
            tokens = nodes.setdefault(prefix, [])
            if full[j] not in tokens:
                tokens.append(full[j])
    continuations = []
    for prefix in sorted(nodes):
        tokens = nodes[prefix]
        if tokens == [EOS_MARKER]:
            logits = [0.0]  # singleton step: restricted softmax is 1 regardless
        else:
            restrict = [session.eos_token_id if t == EOS_MARKER else t for t in tokens]
            logits = [float(x) for x in session.step_logits(prepared, prefix, restrict)]
            if len(logits) != len(tokens):
                raise ExtractionError(f"misshapen logits for prefix {list(prefix)}")
        continuations.append(
            {"prefix": [int(t) for t in prefix], "tokens": [int(t) for t in tokens], "logits": logits}
        )
    first = {"tokens": [int(t) for t in firsts], "logits": [float(x) for x in first_logits]}
    return first, continuations


def extract_traces(job: ExtractionJob, session: ModelSession, out_path) -> int:
    """Run the job and append one trace record per (instance, presentation).

    Instances whose identifier tokenizations collide are skipped and
    reported. Returns the number of records written.
    """
    job.validate()
    n = job.n
    labels = scheme_labels(job.scheme, n)
    paths = [tuple(int(t) for t in session.encode_label(lbl)) for lbl in labels]
    for lbl, p in zip(labels, paths):
        if not p:
            raise ExtractionError(f"tokenizer produced no tokens for label {lbl!r}")
    eos_flags = _eos_policy(paths)
    full_paths = [p + ((EOS_MARKER,) if e else ()) for p, e in zip(paths, eos_flags)]
    if len(set(full_paths)) != len(full_paths):
        raise ExtractionError(f"candidate identifiers collide under this tokenizer: {labels}")
    template = load_template(job.template)

    written = 0
    with open(out_path, "w", encoding="utf-8") as out:
        for inst in job.instances:
            try:
                records = _extract_instance(job, session, inst, labels, paths, eos_flags, template)
            except ExtractionError as exc:
                log.warning("skipping %s: %s", inst.instance_id, exc)
                continue
            for rec in records:
                out.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")
                written += 1
    return written


def _extract_instance(job, session, inst, labels, paths, eos_flags, template) -> list[dict]:
    n = len(inst.image_paths)
    prompt = render_prompt(template, n, inst.query)
    records = []
    for pres in _plan_presentations(job, inst):
        presented = tuple(inst.image_paths[i] for i in pres.order)
        prepared = session.prepare(prompt, presented)
        first, continuations = _score_tree(session, prepared, paths, eos_flags)
        spans = locate_image_spans(prepared.token_ids, session.image_token_id, n)
        capture = RawAttentionCapture(weights=session.last_token_attention(prepared), spans=spans)
        attn = aggregate_attention(capture)
        if attn.shape[0] != session.num_layers:
            log.info(
                "%s: captured %d of %d layers", inst.instance_id, attn.shape[0], session.num_layers
            )
        rec: dict = {
            "v": TRACE_VERSION,
            "instance_id": inst.instance_id,
            "shuffle_id": pres.shuffle_id,
            "n": n,
            "scheme": job.scheme,
            "labels": list(labels),
            "images": list(presented),
        }
        if pres.gt_position is not None:
            rec["gt"] = pres.gt_position
        rec["first_step"] = first
        rec["continuations"] = continuations
        rec["cand_tokens"] = [
            {"ids": [int(t) for t in p], "eos": bool(e)} for p, e in zip(paths, eos_flags)
        ]
        rec["attn"] = [[float(x) for x in row] for row in attn]
        records.append(rec)
    return records
