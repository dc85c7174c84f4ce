"""Extraction job description: instances, identifier scheme, and shift plan."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class JobError(ValueError):
    pass


SCHEME_KINDS = ("numeric", "upper-alpha", "lower-alpha", "roman", "ordinal-word")
PLANS = ("single", "cyclic", "shuffles")

_ORDINAL_WORDS = (
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh",
    "eighth", "ninth", "tenth", "eleventh", "twelfth",
)

_ROMAN = ((10, "X"), (9, "IX"), (5, "V"), (4, "IV"), (1, "I"))


def scheme_labels(kind: str, n: int) -> tuple[str, ...]:
    """Candidate identifier strings for the trace format's scheme names."""
    if kind not in SCHEME_KINDS:
        raise JobError(f"unknown scheme {kind!r}; known: {SCHEME_KINDS}")
    if kind == "numeric":
        return tuple(str(k) for k in range(1, n + 1))
    if kind in ("upper-alpha", "lower-alpha"):
        if n > 26:
            raise JobError("alphabetic schemes support at most 26 candidates")
        start = "A" if kind == "upper-alpha" else "a"
        return tuple(chr(ord(start) + k) for k in range(n))
    if kind == "roman":
        out = []
        for k in range(1, n + 1):
            s, rem = "", k
            for value, digits in _ROMAN:
                while rem >= value:
                    s += digits
                    rem -= value
            out.append(s)
        return tuple(out)
    if n > len(_ORDINAL_WORDS):
        raise JobError(f"ordinal-word scheme supports at most {len(_ORDINAL_WORDS)} candidates")
    return _ORDINAL_WORDS[:n]


@dataclass
class InstanceSpec:
    instance_id: str
    query: str
    image_paths: tuple[str, ...]
    gt: int | None = None

    def validate(self) -> None:
        if len(self.image_paths) < 2:
            raise JobError(f"{self.instance_id}: needs at least 2 images")
        if self.gt is not None and not 1 <= self.gt <= len(self.image_paths):
            raise JobError(f"{self.instance_id}: gt={self.gt} outside 1..{len(self.image_paths)}")


@dataclass
class ExtractionJob:
    model: str
    instances: tuple[InstanceSpec, ...]
    scheme: str = "numeric"
    template: str = "vanilla"
    plan: str = "single"
    t: int = 5
    seed: int = 0

    def validate(self) -> None:
        if not self.instances:
            raise JobError("job has no instances")
        if self.plan not in PLANS:
            raise JobError(f"unknown plan {self.plan!r}; known: {PLANS}")
        n = len(self.instances[0].image_paths)
        for inst in self.instances:
            inst.validate()
            if len(inst.image_paths) != n:
                raise JobError(f"{inst.instance_id}: mixed image counts in one job")
            if self.plan == "cyclic" and inst.gt is None:
                raise JobError(f"{inst.instance_id}: the cyclic plan needs ground-truth positions")
        scheme_labels(self.scheme, n)

    @property
    def n(self) -> int:
        return len(self.instances[0].image_paths)


def job_from_dict(doc: dict) -> ExtractionJob:
    try:
        job = ExtractionJob(
            model=str(doc["model"]),
            instances=tuple(
                InstanceSpec(
                    instance_id=str(i["id"]),
                    query=str(i["query"]),
                    image_paths=tuple(str(p) for p in i["images"]),
                    gt=int(i["gt"]) if i.get("gt") is not None else None,
                )
                for i in doc["instances"]
            ),
            scheme=str(doc.get("scheme", "numeric")),
            template=str(doc.get("template", "vanilla")),
            plan=str(doc.get("plan", "single")),
            t=int(doc.get("t", 5)),
            seed=int(doc.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise JobError(f"malformed job description ({exc})") from exc
    job.validate()
    return job


def load_job(path) -> ExtractionJob:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise JobError(f"{path}: invalid JSON ({exc})") from exc
    return job_from_dict(doc)
