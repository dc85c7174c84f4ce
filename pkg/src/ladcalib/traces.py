"""Trace data contract: per-candidate step logits plus aggregated attention.

A trace is everything the calibration engine needs to know about one
scored instance: the candidate identifiers and their token paths, the
restricted step logits of the scoring tree, and the per-layer per-image
attention mass captured from the final query token. Traces are stored one
JSON record per line with canonical field order and shortest round-trip
float formatting, so writing is byte-stable under re-parse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np

from .util import LadcalibError, canonical_json

TRACE_VERSION = 1

# Sentinel token id for the terminal end-of-sequence step. Real token ids
# are nonnegative, so -1 never collides.
EOS_TOKEN = -1

# Per-layer attention mass over images is a fraction of total attention.
ATTN_ROW_TOL = 1e-6

SCHEME_KINDS = ("numeric", "upper-alpha", "lower-alpha", "roman", "ordinal-word")

_ORDINAL_WORDS = (
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh",
    "eighth", "ninth", "tenth", "eleventh", "twelfth", "thirteenth",
    "fourteenth", "fifteenth", "sixteenth", "seventeenth", "eighteenth",
    "nineteenth", "twentieth",
)

_ROMAN_DIGITS = ((10, "X"), (9, "IX"), (5, "V"), (4, "IV"), (1, "I"))


class TraceError(LadcalibError):
    """Malformed trace record or violated trace invariant."""


def _roman(k: int) -> str:
    out = []
    for value, digits in _ROMAN_DIGITS:
        while k >= value:
            out.append(digits)
            k -= value
    return "".join(out)


def scheme_labels(kind: str, n: int) -> tuple[str, ...]:
    """Ordered candidate identifier strings c_1..c_n for a scheme."""
    if kind not in SCHEME_KINDS:
        raise TraceError(f"unknown label scheme {kind!r}; known: {SCHEME_KINDS}")
    if n < 2:
        raise TraceError(f"need at least 2 candidates, got n={n}")
    if kind == "numeric":
        return tuple(str(k) for k in range(1, n + 1))
    if kind == "upper-alpha":
        if n > 26:
            raise TraceError("upper-alpha scheme supports at most 26 candidates")
        return tuple(chr(ord("A") + k) for k in range(n))
    if kind == "lower-alpha":
        if n > 26:
            raise TraceError("lower-alpha scheme supports at most 26 candidates")
        return tuple(chr(ord("a") + k) for k in range(n))
    if kind == "roman":
        if n > 30:
            raise TraceError("roman scheme supports at most 30 candidates")
        return tuple(_roman(k) for k in range(1, n + 1))
    if n > len(_ORDINAL_WORDS):
        raise TraceError(f"ordinal-word scheme supports at most {len(_ORDINAL_WORDS)} candidates")
    return tuple(_ORDINAL_WORDS[:n])


def tokenize_label(kind: str, label: str) -> tuple[int, ...]:
    """Token id sequence for a label under the scheme's toy tokenizer.

    Alphabetic identifiers are single tokens; numeric, roman, and
    ordinal-word identifiers split per character, which produces shared
    prefixes and multi-token paths (e.g. "1" vs "10").
    """
    if kind in ("upper-alpha", "lower-alpha"):
        return (ord(label),)
    return tuple(ord(c) for c in label)


@dataclass(frozen=True)
class LabelScheme:
    """A candidate identifier scheme: its kind and the n ordered labels."""

    kind: str
    labels: tuple[str, ...]

    @classmethod
    def for_n(cls, kind: str, n: int) -> "LabelScheme":
        return cls(kind, scheme_labels(kind, n))

    def tokenize(self, label: str) -> tuple[int, ...]:
        return tokenize_label(self.kind, label)


@dataclass
class StepLogits:
    """Raw scores over the valid token set of one generation step."""

    tokens: tuple[int, ...]
    logits: np.ndarray

    def validate(self, where: str) -> None:
        if len(self.tokens) < 1:
            raise TraceError(f"{where}: empty valid token set")
        if len(self.tokens) != len(self.logits):
            raise TraceError(f"{where}: {len(self.tokens)} tokens vs {len(self.logits)} logits")
        if len(set(self.tokens)) != len(self.tokens):
            raise TraceError(f"{where}: duplicate tokens in valid set")
        if not np.all(np.isfinite(self.logits)):
            raise TraceError(f"{where}: non-finite logits")


@dataclass
class CandidateTokenization:
    """Token path of one candidate identifier, plus its terminal-EOS flag."""

    ids: tuple[int, ...]
    eos: bool

    def path(self) -> tuple[int, ...]:
        """Full scoring path, with the EOS step appended when scored."""
        return self.ids + ((EOS_TOKEN,) if self.eos else ())


@dataclass(frozen=True)
class ShiftSpec:
    """Result of cyclically left-shifting a presentation order by s."""

    shift: int
    order: tuple[str, ...]
    gt_position: int


def cyclic_shift(order: Iterable[str], gt: int, s: int) -> ShiftSpec:
    """Rotate a presentation order left by s and track the ground truth.

    Position p maps to ((p - 1 - s) mod n) + 1, so the orbit over
    s = 0..n-1 places the ground truth at every position exactly once.
    """
    order = tuple(order)
    n = len(order)
    if not 0 <= s < n:
        raise TraceError(f"shift {s} out of range 0..{n - 1}")
    if not 1 <= gt <= n:
        raise TraceError(f"gt position {gt} out of range 1..{n}")
    shifted = order[s:] + order[:s]
    new_gt = (gt - 1 - s) % n + 1
    return ShiftSpec(shift=s, order=shifted, gt_position=new_gt)


@dataclass
class InferenceTrace:
    """One scored instance: identity, scoring tree, and attention summary.

    `first_step` holds the shared first-token step; `continuations` maps a
    token-id prefix to the step record scored after that prefix, so shared
    prefixes are stored once. `attention` is the (layers x n) matrix of
    head-averaged per-image attention mass from the last query token.
    """

    instance_id: str
    shuffle_id: int
    n: int
    scheme: str
    labels: tuple[str, ...]
    images: tuple[str, ...]
    gt_position: int | None
    first_step: StepLogits
    continuations: dict[tuple[int, ...], StepLogits] = field(default_factory=dict)
    cand_tokens: tuple[CandidateTokenization, ...] = ()
    attention: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))

    @property
    def layers(self) -> int:
        return self.attention.shape[0]

    def validate(self) -> None:
        if self.n < 2:
            raise TraceError(f"{self.instance_id}: n={self.n} < 2")
        if len(self.labels) != self.n or len(set(self.labels)) != self.n:
            raise TraceError(f"{self.instance_id}: labels must be {self.n} distinct strings")
        if len(self.images) != self.n or len(set(self.images)) != self.n:
            raise TraceError(f"{self.instance_id}: images must be {self.n} distinct identifiers")
        if self.scheme not in SCHEME_KINDS:
            raise TraceError(f"{self.instance_id}: unknown scheme {self.scheme!r}")
        if self.gt_position is not None and not 1 <= self.gt_position <= self.n:
            raise TraceError(f"{self.instance_id}: gt={self.gt_position} out of range 1..{self.n}")
        self.first_step.validate(f"{self.instance_id}: first_step")
        for prefix, step in self.continuations.items():
            step.validate(f"{self.instance_id}: continuation {list(prefix)}")
        if len(self.cand_tokens) != self.n:
            raise TraceError(f"{self.instance_id}: {len(self.cand_tokens)} tokenizations for n={self.n}")
        paths = set()
        for label, cand in zip(self.labels, self.cand_tokens):
            if not cand.ids:
                raise TraceError(f"{self.instance_id}: empty token path for label {label!r}")
            p = cand.path()
            if p in paths:
                raise TraceError(f"{self.instance_id}: duplicate token path for label {label!r}")
            paths.add(p)
            self._check_path(label, cand)
        attn = np.asarray(self.attention, dtype=float)
        if attn.ndim != 2 or attn.shape[0] < 1 or attn.shape[1] != self.n:
            raise TraceError(f"{self.instance_id}: attention must be (layers x {self.n})")
        if np.any(attn < 0):
            raise TraceError(f"{self.instance_id}: negative attention mass")
        sums = attn.sum(axis=1)
        bad = np.nonzero(sums > 1.0 + ATTN_ROW_TOL)[0]
        if bad.size:
            layer = int(bad[0]) + 1
            raise TraceError(
                f"{self.instance_id}: attention mass sums to {sums[bad[0]]:.6g} > 1 at layer {layer}"
            )

    def _check_path(self, label: str, cand: CandidateTokenization) -> None:
        if cand.ids[0] not in self.first_step.tokens:
            raise TraceError(f"{self.instance_id}: first token of {label!r} missing from first step")
        for j in range(1, len(cand.ids)):
            prefix = cand.ids[:j]
            step = self.continuations.get(prefix)
            if step is None:
                raise TraceError(f"{self.instance_id}: no continuation for prefix {list(prefix)} ({label!r})")
            if cand.ids[j] not in step.tokens:
                raise TraceError(
                    f"{self.instance_id}: token {cand.ids[j]} missing after prefix {list(prefix)} ({label!r})"
                )
        if cand.eos:
            step = self.continuations.get(cand.ids)
            if step is None or EOS_TOKEN not in step.tokens:
                raise TraceError(f"{self.instance_id}: missing EOS step after {label!r}")


def write_trace(trace: InferenceTrace) -> bytes:
    """Serialize one trace to its canonical single-line record."""
    trace.validate()
    rec: dict = {
        "v": TRACE_VERSION,
        "instance_id": trace.instance_id,
        "shuffle_id": int(trace.shuffle_id),
        "n": int(trace.n),
        "scheme": trace.scheme,
        "labels": list(trace.labels),
        "images": list(trace.images),
    }
    if trace.gt_position is not None:
        rec["gt"] = int(trace.gt_position)
    rec["first_step"] = {
        "tokens": [int(t) for t in trace.first_step.tokens],
        "logits": [float(x) for x in trace.first_step.logits],
    }
    rec["continuations"] = [
        {
            "prefix": [int(t) for t in prefix],
            "tokens": [int(t) for t in step.tokens],
            "logits": [float(x) for x in step.logits],
        }
        for prefix, step in sorted(trace.continuations.items())
    ]
    rec["cand_tokens"] = [
        {"ids": [int(t) for t in c.ids], "eos": bool(c.eos)} for c in trace.cand_tokens
    ]
    rec["attn"] = [[float(x) for x in row] for row in np.asarray(trace.attention, dtype=float)]
    return canonical_json(rec).encode("utf-8")


def _trace_from_record(rec: dict, where: str) -> InferenceTrace:
    try:
        if rec.get("v") != TRACE_VERSION:
            raise TraceError(f"unsupported trace version {rec.get('v')!r}")
        first = rec["first_step"]
        trace = InferenceTrace(
            instance_id=str(rec["instance_id"]),
            shuffle_id=int(rec["shuffle_id"]),
            n=int(rec["n"]),
            scheme=str(rec["scheme"]),
            labels=tuple(str(x) for x in rec["labels"]),
            images=tuple(str(x) for x in rec["images"]),
            gt_position=int(rec["gt"]) if "gt" in rec else None,
            first_step=StepLogits(
                tokens=tuple(int(t) for t in first["tokens"]),
                logits=np.asarray(first["logits"], dtype=float),
            ),
            continuations={
                tuple(int(t) for t in c["prefix"]): StepLogits(
                    tokens=tuple(int(t) for t in c["tokens"]),
                    logits=np.asarray(c["logits"], dtype=float),
                )
                for c in rec.get("continuations", ())
            },
            cand_tokens=tuple(
                CandidateTokenization(ids=tuple(int(t) for t in c["ids"]), eos=bool(c["eos"]))
                for c in rec["cand_tokens"]
            ),
            attention=np.asarray(rec["attn"], dtype=float),
        )
    except TraceError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceError(f"{where}: malformed trace record ({exc})") from exc
    try:
        trace.validate()
    except TraceError as exc:
        raise TraceError(f"{where}: {exc}") from None
    return trace


def read_traces(stream: IO[bytes] | IO[str] | Iterable[bytes | str]) -> Iterator[InferenceTrace]:
    """Parse a line-delimited trace stream, validating every record.

    Malformed records raise TraceError naming the 1-based line number.
    """
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        line = line.strip()
        if not line:
            continue
        where = f"line {lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"{where}: invalid JSON ({exc})") from exc
        yield _trace_from_record(rec, where)


def load_traces(path) -> list[InferenceTrace]:
    with open(path, "rb") as f:
        return list(read_traces(f))


def save_traces(path, traces: Iterable[InferenceTrace]) -> None:
    from .util import atomic_write_bytes

    atomic_write_bytes(path, b"".join(write_trace(t) + b"\n" for t in traces))
