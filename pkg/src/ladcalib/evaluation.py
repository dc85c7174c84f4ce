"""Permutation-robustness metrics, confusion matrices, and diagnostics.

An episode is one retrieval instance presented T times under different
candidate orders. Accuracy is averaged over the T shuffle rounds, the
recall spread is the population standard deviation over the n physical
positions, and consistency asks whether the selected image identity
survives reshuffling.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .debias import DebiasConfig, layer_strength, select_layers
from .scoring import score_candidates
from .traces import InferenceTrace
from .util import LadcalibError, atomic_write_text


class EvalError(LadcalibError):
    pass


Predictor = Callable[[InferenceTrace], int]


@dataclass
class Episode:
    """One instance with its T shuffled presentations (traces carry gt)."""

    instance_id: str
    images: tuple[str, ...]
    gt_image: str
    presentations: tuple[InferenceTrace, ...]

    def validate(self) -> None:
        if not self.presentations:
            raise EvalError(f"{self.instance_id}: episode has no presentations")
        base = set(self.images)
        for t in self.presentations:
            if set(t.images) != base:
                raise EvalError(f"{self.instance_id}: shuffle identity set mismatch")
            if self.gt_image not in t.images:
                raise EvalError(f"{self.instance_id}: ground-truth image missing from a shuffle")
            if t.gt_position is None:
                raise EvalError(f"{self.instance_id}: evaluation trace lacks gt position")
            if t.images[t.gt_position - 1] != self.gt_image:
                raise EvalError(f"{self.instance_id}: gt position inconsistent with gt image")


@dataclass
class EvalReport:
    n: int
    t: int
    episodes: int
    acc_mean: float
    acc_std: float
    round_accuracies: tuple[float, ...]
    rstd: float
    consistency: float
    confusion: np.ndarray          # gt position x predicted position, percent
    per_position_recall: np.ndarray


def recall_std(recalls: Sequence[float]) -> float:
    """Population standard deviation of the per-position recall rates."""
    values = np.asarray(recalls, dtype=float)
    if values.size < 2:
        raise EvalError("need at least 2 recall values")
    if np.any(values < 0) or np.any(values > 100):
        raise EvalError("recall values must be percentages in [0, 100]")
    return float(values.std())


def consistency(selections: Sequence[Sequence[str]]) -> float:
    """Percent of episodes whose selected identity is identical across shuffles."""
    if not selections:
        raise EvalError("no episodes")
    t = len(selections[0])
    for sel in selections:
        if len(sel) != t:
            raise EvalError("every episode must contribute the same number of selections")
    stable = sum(1 for sel in selections if len(set(sel)) == 1)
    return 100.0 * stable / len(selections)


def evaluate(predictor: Predictor, episodes: Sequence[Episode]) -> EvalReport:
    """Run a predictor over all (episode, shuffle) pairs and aggregate."""
    episodes = list(episodes)
    if not episodes:
        raise EvalError("no episodes to evaluate")
    n = len(episodes[0].images)
    t = len(episodes[0].presentations)
    for ep in episodes:
        ep.validate()
        if len(ep.images) != n:
            raise EvalError(f"{ep.instance_id}: mixed candidate counts in evaluation set")
        if len(ep.presentations) != t:
            raise EvalError(f"{ep.instance_id}: mixed shuffle counts in evaluation set")

    confusion_counts = np.zeros((n, n), dtype=float)
    round_correct = np.zeros(t, dtype=float)
    selections: list[list[str]] = []
    for ep in episodes:
        chosen: list[str] = []
        for round_idx, trace in enumerate(ep.presentations):
            pred = predictor(trace)
            if not 1 <= pred <= n:
                raise EvalError(f"{ep.instance_id}: predictor returned {pred}, outside 1..{n}")
            gt = trace.gt_position
            confusion_counts[gt - 1, pred - 1] += 1
            if pred == gt:
                round_correct[round_idx] += 1
            chosen.append(trace.images[pred - 1])
        selections.append(chosen)

    round_acc = 100.0 * round_correct / len(episodes)
    row_totals = confusion_counts.sum(axis=1, keepdims=True)
    if np.any(row_totals == 0):
        empty = int(np.nonzero(row_totals[:, 0] == 0)[0][0]) + 1
        raise EvalError(f"no evaluation pair with ground truth at position {empty}")
    confusion = 100.0 * confusion_counts / row_totals
    recalls = np.diag(confusion).copy()
    return EvalReport(
        n=n,
        t=t,
        episodes=len(episodes),
        acc_mean=float(round_acc.mean()),
        acc_std=float(round_acc.std()),
        round_accuracies=tuple(float(a) for a in round_acc),
        rstd=recall_std(recalls),
        consistency=consistency(selections),
        confusion=confusion,
        per_position_recall=recalls,
    )


def assemble_episodes(
    manifest: Sequence[dict], traces: Sequence[InferenceTrace]
) -> list[Episode]:
    """Join manifest records with their traces via (instance_id, shuffle_id)."""
    by_key = {(t.instance_id, t.shuffle_id): t for t in traces}
    episodes = []
    for rec in manifest:
        eid = rec["episode"]
        presentations = []
        for idx in range(len(rec["presentations"])):
            trace = by_key.get((eid, idx))
            if trace is None:
                raise EvalError(f"{eid}: missing trace for shuffle {idx}")
            presentations.append(trace)
        ep = Episode(
            instance_id=eid,
            images=tuple(rec["images"]),
            gt_image=rec["gt_image"],
            presentations=tuple(presentations),
        )
        ep.validate()
        episodes.append(ep)
    return episodes


# ---------------------------------------------------------------------------
# Diagnostics: per-gt logit profiles and the attention/logit divergence table.


@dataclass
class ProfileRow:
    gt: int
    count: int
    mean_log_probs: np.ndarray
    samples: list[np.ndarray]


def logit_profile_report(traces: Sequence[InferenceTrace]) -> list[ProfileRow]:
    """Per ground-truth position: mean and individual candidate log-prob vectors."""
    groups: dict[int, list[np.ndarray]] = {}
    for t in traces:
        if t.gt_position is None:
            raise EvalError(f"{t.instance_id}: diagnostics need traces with gt positions")
        groups.setdefault(t.gt_position, []).append(score_candidates(t).log_probs)
    return [
        ProfileRow(gt=gt, count=len(vs), mean_log_probs=np.mean(np.stack(vs), axis=0), samples=vs)
        for gt, vs in sorted(groups.items())
    ]


@dataclass
class DivergenceRow:
    gt: int
    count: int
    mean_attention: np.ndarray   # normalized readout over selected layers
    mean_probs: np.ndarray
    attention_accuracy: float    # fraction of traces whose attention argmax hits gt
    logit_accuracy: float


@dataclass
class DivergenceReport:
    rows: list[DivergenceRow]
    attention_accuracy: float
    logit_accuracy: float


def divergence_report(
    traces: Sequence[InferenceTrace], cfg: DebiasConfig = DebiasConfig()
) -> DivergenceReport:
    """Where the model looks vs what it says, grouped by ground-truth position."""
    groups: dict[int, list[InferenceTrace]] = {}
    for t in traces:
        if t.gt_position is None:
            raise EvalError(f"{t.instance_id}: diagnostics need traces with gt positions")
        groups.setdefault(t.gt_position, []).append(t)
    rows = []
    attn_hits = logit_hits = total = 0
    for gt, group in sorted(groups.items()):
        readouts, probs = [], []
        a_hit = l_hit = 0
        for t in group:
            selected = select_layers(layer_strength(t), cfg.k)
            pooled = np.asarray(t.attention, dtype=float)[[l - 1 for l in selected]].sum(axis=0)
            s = pooled.sum()
            readouts.append(pooled / s if s > 0 else np.full(t.n, 1.0 / t.n))
            p = score_candidates(t).probs
            probs.append(p)
            if int(np.argmax(pooled)) + 1 == gt:
                a_hit += 1
            if int(np.argmax(p)) + 1 == gt:
                l_hit += 1
        rows.append(
            DivergenceRow(
                gt=gt,
                count=len(group),
                mean_attention=np.mean(np.stack(readouts), axis=0),
                mean_probs=np.mean(np.stack(probs), axis=0),
                attention_accuracy=a_hit / len(group),
                logit_accuracy=l_hit / len(group),
            )
        )
        attn_hits += a_hit
        logit_hits += l_hit
        total += len(group)
    if total == 0:
        raise EvalError("no traces for the divergence report")
    return DivergenceReport(
        rows=rows, attention_accuracy=attn_hits / total, logit_accuracy=logit_hits / total
    )


# ---------------------------------------------------------------------------
# CSV export. Percentages print with 2 decimals; everything else full precision.


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def write_confusion_csv(path, report: EvalReport) -> None:
    header = ["gt_position"] + [f"p{j}" for j in range(1, report.n + 1)]
    rows = [[i + 1] + [f"{x:.2f}" for x in report.confusion[i]] for i in range(report.n)]
    _write_csv(path, header, rows)


def write_recalls_csv(path, report: EvalReport) -> None:
    rows = [[i + 1, f"{r:.2f}"] for i, r in enumerate(report.per_position_recall)]
    _write_csv(path, ["position", "recall"], rows)


def write_summary_csv(path, rows: list[tuple[str, EvalReport]]) -> None:
    out = [
        [
            method,
            f"{rep.acc_mean:.2f}",
            f"{rep.acc_std:.2f}",
            f"{rep.rstd:.2f}",
            f"{rep.consistency:.2f}",
            rep.episodes,
            rep.t,
            rep.n,
        ]
        for method, rep in rows
    ]
    _write_csv(path, ["method", "acc", "acc_std", "rstd", "consistency", "episodes", "t", "n"], out)


def write_profiles_csv(path, rows: list[ProfileRow]) -> None:
    if not rows:
        raise EvalError("empty profile report")
    n = rows[0].mean_log_probs.shape[0]
    header = ["gt", "kind", "sample"] + [f"c{j}" for j in range(1, n + 1)]
    out = []
    for row in rows:
        out.append([row.gt, "mean", ""] + [repr(float(x)) for x in row.mean_log_probs])
        for i, sample in enumerate(row.samples):
            out.append([row.gt, "sample", i] + [repr(float(x)) for x in sample])
    _write_csv(path, header, out)


def write_divergence_csv(path, report: DivergenceReport) -> None:
    if not report.rows:
        raise EvalError("empty divergence report")
    n = report.rows[0].mean_attention.shape[0]
    header = (
        ["gt", "count", "attn_acc", "logit_acc"]
        + [f"attn{j}" for j in range(1, n + 1)]
        + [f"prob{j}" for j in range(1, n + 1)]
    )
    out = [
        [row.gt, row.count, f"{100 * row.attention_accuracy:.2f}", f"{100 * row.logit_accuracy:.2f}"]
        + [repr(float(x)) for x in row.mean_attention]
        + [repr(float(x)) for x in row.mean_probs]
        for row in report.rows
    ]
    _write_csv(path, header, out)
