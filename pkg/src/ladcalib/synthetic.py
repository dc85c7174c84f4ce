"""Parametric trace generator with closed-form ground truth.

Generated candidate distributions follow the multiplicative factorization
the estimators assume: a row-stochastic structural bias plus a single
multiplicative gain on the target position, with optional log-domain
noise. Attention factorizes the same way per layer: a structural sink row
times a multiplicative boost on the target in the semantic layers. Both
factors are therefore recoverable exactly from noiseless symmetrized
sets, which is what makes the generator usable as an estimation oracle.

Bias rows always satisfy the conservative constraint the gain estimator
relies on: each row's diagonal equals its smallest off-diagonal entry, so
the structural prior never favors the target and the max observed margin
equals the true gain.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .traces import (
    EOS_TOKEN,
    CandidateTokenization,
    InferenceTrace,
    LabelScheme,
    StepLogits,
    cyclic_shift,
)
from .util import LadcalibError, atomic_write_text, canonical_json, softmax


class GeneratorError(LadcalibError):
    pass


BIAS_KINDS = ("uniform", "stripe", "homog-tail")

# Sub-stream tags so parallel generation of any item is order-independent.
_CAL_NOISE, _EVAL_NOISE, _EVAL_PERM, _CAL_GT, _EVAL_GT = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class BiasSpec:
    """Structural position-preference pattern.

    `peaks` lists (anchor, weight) pairs over 1-based positions; negative
    anchors count from the end (-1 is the last position). Positions not
    named get `base`. `tail` only applies to the homog-tail kind: the last
    `tail` ground-truth positions share one observed profile.
    """

    kind: str = "uniform"
    peaks: tuple[tuple[int, float], ...] = ()
    base: float = 1.0
    tail: int = 0


@dataclass(frozen=True)
class SinkSpec:
    """Structural attention pattern: per-layer mass and boundary elevation."""

    base_mass: float = 0.25
    semantic_mass: float = 0.7
    boundary_factor: float = 1.0


@dataclass(frozen=True)
class GeneratorConfig:
    n: int
    layers: int
    semantic_layers: tuple[int, ...]
    scheme: str = "numeric"
    bias: BiasSpec = BiasSpec()
    sink: SinkSpec = SinkSpec()
    gamma: float = 4.0
    attn_boost: float = 5.0
    noise_sigma: float = 0.0
    hardness: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n < 2:
            raise GeneratorError(f"n={self.n} < 2")
        if self.layers < 1:
            raise GeneratorError(f"layers={self.layers} < 1")
        if any(not 1 <= l <= self.layers for l in self.semantic_layers):
            raise GeneratorError(f"semantic layers {self.semantic_layers} outside 1..{self.layers}")
        if self.bias.kind not in BIAS_KINDS:
            raise GeneratorError(f"unknown bias kind {self.bias.kind!r}; known: {BIAS_KINDS}")
        if self.bias.base <= 0 or any(w <= 0 for _, w in self.bias.peaks):
            raise GeneratorError("bias weights must be positive")
        if self.bias.kind == "homog-tail" and not 1 <= self.bias.tail <= self.n - 1:
            raise GeneratorError(f"homog-tail needs 1 <= tail <= {self.n - 1}, got {self.bias.tail}")
        if not self.gamma > 1.0:
            raise GeneratorError(f"gamma={self.gamma} must exceed 1")
        if not self.attn_boost > 1.0:
            raise GeneratorError(f"attn_boost={self.attn_boost} must exceed 1")
        if self.noise_sigma < 0:
            raise GeneratorError("noise_sigma must be >= 0")
        if not 0.0 <= self.hardness <= 1.0:
            raise GeneratorError("hardness must lie in [0, 1]")
        for name, mass in (("base_mass", self.sink.base_mass), ("semantic_mass", self.sink.semantic_mass)):
            if not 0.0 < mass <= 1.0:
                raise GeneratorError(f"sink {name}={mass} must lie in (0, 1]")
        if self.sink.boundary_factor <= 0:
            raise GeneratorError("sink boundary_factor must be positive")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "layers": self.layers,
            "semantic_layers": list(self.semantic_layers),
            "scheme": self.scheme,
            "bias": {
                "kind": self.bias.kind,
                "peaks": [[a, w] for a, w in self.bias.peaks],
                "base": self.bias.base,
                "tail": self.bias.tail,
            },
            "sink": {
                "base_mass": self.sink.base_mass,
                "semantic_mass": self.sink.semantic_mass,
                "boundary_factor": self.sink.boundary_factor,
            },
            "gamma": self.gamma,
            "attn_boost": self.attn_boost,
            "noise_sigma": self.noise_sigma,
            "hardness": self.hardness,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        try:
            bias = doc.get("bias", {})
            sink = doc.get("sink", {})
            cfg = cls(
                n=int(doc["n"]),
                layers=int(doc["layers"]),
                semantic_layers=tuple(int(x) for x in doc.get("semantic_layers", ())),
                scheme=str(doc.get("scheme", "numeric")),
                bias=BiasSpec(
                    kind=str(bias.get("kind", "uniform")),
                    peaks=tuple((int(a), float(w)) for a, w in bias.get("peaks", ())),
                    base=float(bias.get("base", 1.0)),
                    tail=int(bias.get("tail", 0)),
                ),
                sink=SinkSpec(
                    base_mass=float(sink.get("base_mass", 0.25)),
                    semantic_mass=float(sink.get("semantic_mass", 0.7)),
                    boundary_factor=float(sink.get("boundary_factor", 1.0)),
                ),
                gamma=float(doc.get("gamma", 4.0)),
                attn_boost=float(doc.get("attn_boost", 5.0)),
                noise_sigma=float(doc.get("noise_sigma", 0.0)),
                hardness=float(doc.get("hardness", 0.0)),
                seed=int(doc.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GeneratorError(f"malformed generator config ({exc})") from exc
        cfg.validate()
        return cfg


def _stripe_weights(spec: BiasSpec, n: int) -> np.ndarray:
    w = np.full(n, spec.base, dtype=float)
    for anchor, weight in spec.peaks:
        idx = anchor if anchor > 0 else n + 1 + anchor
        if 1 <= idx <= n:
            w[idx - 1] = weight
    return w / w.sum()


@lru_cache(maxsize=128)
def bias_matrix(cfg: GeneratorConfig) -> np.ndarray:
    """Row-stochastic structural bias B with B[i, i] = min of row i's off-diagonal."""
    cfg.validate()
    n = cfg.n
    if cfg.bias.kind == "uniform":
        return np.full((n, n), 1.0 / n)
    w = _stripe_weights(cfg.bias, n)
    rows = np.empty((n, n))
    if cfg.bias.kind == "stripe":
        for i in range(n):
            row = w.copy()
            row[i] = np.delete(w, i).min()
            rows[i] = row / row.sum()
        return rows
    # homog-tail: the last `tail` target positions produce one shared observed
    # profile. Their bias rows carry the gain pre-divided out of the other
    # tail positions, so multiplying the gain back in during generation makes
    # the observed rows coincide entrywise.
    head = n - cfg.bias.tail
    c = w[:head].min()
    for i in range(n):
        if i < head:
            row = w.copy()
            row[i] = np.delete(w, i).min()
        else:
            row = np.empty(n)
            row[:head] = w[:head]
            row[head:] = c * cfg.gamma
            row[i] = c
        rows[i] = row / row.sum()
    return rows


@lru_cache(maxsize=128)
def sink_matrix(cfg: GeneratorConfig) -> np.ndarray:
    """Per-layer structural attention rows (layers x n), each summing to its mass."""
    cfg.validate()
    row = np.ones(cfg.n)
    row[0] *= cfg.sink.boundary_factor
    row[-1] *= cfg.sink.boundary_factor
    row /= row.sum()
    semantic = set(cfg.semantic_layers)
    out = np.empty((cfg.layers, cfg.n))
    for l in range(1, cfg.layers + 1):
        mass = cfg.sink.semantic_mass if l in semantic else cfg.sink.base_mass
        out[l - 1] = row * mass
    return out


@lru_cache(maxsize=1024)
def attention_matrix(cfg: GeneratorConfig, gt_position: int) -> np.ndarray:
    """Deterministic per-layer attention for a target at gt_position."""
    sink = sink_matrix(cfg)
    out = sink.copy()
    boost = np.full(cfg.n, cfg.attn_boost**cfg.hardness)
    boost[gt_position - 1] = cfg.attn_boost
    for l in cfg.semantic_layers:
        row = sink[l - 1] * boost
        out[l - 1] = row / row.sum() * sink[l - 1].sum()
    return out


def expected_obs_matrix(cfg: GeneratorConfig) -> np.ndarray:
    """Noiseless observed rows: softmax of log-bias with the gain on the diagonal."""
    b = bias_matrix(cfg)
    rows = np.empty_like(b)
    for i in range(cfg.n):
        z = np.log(b[i]).copy()
        z[i] += np.log(cfg.gamma)
        rows[i] = softmax(z)
    return rows


def expected_attention_prior(cfg: GeneratorConfig) -> np.ndarray:
    """Mean attention over a uniformly covered symmetrized set."""
    return np.mean([attention_matrix(cfg, p) for p in range(1, cfg.n + 1)], axis=0)


def _build_scoring_tree(
    scheme: LabelScheme, q: np.ndarray
) -> tuple[StepLogits, dict[tuple[int, ...], StepLogits], tuple[CandidateTokenization, ...]]:
    """Distribute the intended candidate distribution over the token tree.

    Every edge's logit is the log of its subtree mass, so each step's
    restricted softmax yields the conditional mass and the per-candidate
    product telescopes back to the intended probability exactly.
    """
    cands = tuple(CandidateTokenization(ids=scheme.tokenize(lbl), eos=True) for lbl in scheme.labels)
    children: dict[tuple[int, ...], dict[int, float]] = {}
    for q_k, cand in zip(q, cands):
        path = cand.path()
        for j in range(len(path)):
            node = path[:j]
            edges = children.setdefault(node, {})
            edges[path[j]] = edges.get(path[j], 0.0) + float(q_k)

    def step(node: tuple[int, ...]) -> StepLogits:
        edges = children[node]
        return StepLogits(tokens=tuple(edges), logits=np.log(np.fromiter(edges.values(), dtype=float)))

    first = step(())
    continuations = {node: step(node) for node in children if node}
    return first, continuations, cands


def generate_trace(
    cfg: GeneratorConfig,
    order,
    gt_position: int,
    rng: np.random.Generator,
    instance_id: str = "inst",
    shuffle_id: int = 0,
) -> InferenceTrace:
    """One trace with the target at gt_position under the given presentation."""
    cfg.validate()
    if not 1 <= gt_position <= cfg.n:
        raise GeneratorError(f"gt_position={gt_position} outside 1..{cfg.n}")
    order = tuple(order)
    if len(order) != cfg.n:
        raise GeneratorError(f"presentation order has {len(order)} images for n={cfg.n}")
    z = np.log(bias_matrix(cfg)[gt_position - 1]).copy()
    z[gt_position - 1] += np.log(cfg.gamma)
    if cfg.noise_sigma > 0:
        z = z + rng.normal(0.0, cfg.noise_sigma, cfg.n)
    q = softmax(z)
    scheme = LabelScheme.for_n(cfg.scheme, cfg.n)
    first, continuations, cands = _build_scoring_tree(scheme, q)
    return InferenceTrace(
        instance_id=instance_id,
        shuffle_id=shuffle_id,
        n=cfg.n,
        scheme=cfg.scheme,
        labels=scheme.labels,
        images=order,
        gt_position=gt_position,
        first_step=first,
        continuations=continuations,
        cand_tokens=cands,
        attention=attention_matrix(cfg, gt_position).copy(),
    )


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *key)))


def generate_calibration_set(cfg: GeneratorConfig, m: int, seed: int | None = None) -> list[InferenceTrace]:
    """m base instances, each expanded into its full cyclic orbit.

    The original presentation (shift 0) is included, so every ground-truth
    position is covered exactly m times.
    """
    if m < 1:
        raise GeneratorError(f"m={m} < 1")
    seed = cfg.seed if seed is None else seed
    traces = []
    for i in range(m):
        images = tuple(f"cal{i:04d}-v{k}" for k in range(1, cfg.n + 1))
        base_gt = int(_rng(seed, _CAL_GT, i).integers(1, cfg.n + 1))
        for s in range(cfg.n):
            spec = cyclic_shift(images, base_gt, s)
            traces.append(
                generate_trace(
                    cfg,
                    spec.order,
                    spec.gt_position,
                    _rng(seed, _CAL_NOISE, i, s),
                    instance_id=f"cal{i:04d}",
                    shuffle_id=s,
                )
            )
    return traces


@dataclass(frozen=True)
class PresentationSpec:
    perm: tuple[int, ...]          # presented[k] = images[perm[k] - 1]
    seed: tuple[int, ...]


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: str
    images: tuple[str, ...]
    gt_image: str
    presentations: tuple[PresentationSpec, ...]


def manifest_record(spec: EpisodeSpec) -> dict:
    return {
        "v": 1,
        "episode": spec.episode_id,
        "images": list(spec.images),
        "gt_image": spec.gt_image,
        "presentations": [
            {"perm": list(p.perm), "seed": list(p.seed)} for p in spec.presentations
        ],
    }


def write_manifest(path, specs) -> None:
    atomic_write_text(path, "".join(canonical_json(manifest_record(s)) + "\n" for s in specs))


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise GeneratorError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
    return records


def generate_eval_episodes(
    cfg: GeneratorConfig,
    count: int,
    t: int,
    seed: int | None = None,
    presentations: str = "random",
    orbits: bool = False,
) -> tuple[list[EpisodeSpec], list[InferenceTrace], list[InferenceTrace]]:
    """Seeded episodes with t presentations each, plus traces.

    `presentations` is "random" (uniform permutations) or "cyclic"
    (presentation i is the cyclic shift by i). With `orbits`, the full
    cyclic orbit of every presentation is also generated; shift s of
    presentation i carries shuffle_id i * n + s, and shift 0 shares the
    presentation's noise draw.
    """
    if count < 1 or t < 1:
        raise GeneratorError("count and t must be >= 1")
    if presentations not in ("random", "cyclic"):
        raise GeneratorError(f"unknown presentation mode {presentations!r}")
    seed = cfg.seed if seed is None else seed
    n = cfg.n
    specs: list[EpisodeSpec] = []
    traces: list[InferenceTrace] = []
    orbit_traces: list[InferenceTrace] = []
    for e in range(count):
        images = tuple(f"ep{e:05d}-v{k}" for k in range(1, n + 1))
        gt_base = int(_rng(seed, _EVAL_GT, e).integers(1, n + 1))
        gt_image = images[gt_base - 1]
        pres: list[PresentationSpec] = []
        for ti in range(t):
            key = (seed, _EVAL_PERM, e, ti)
            if presentations == "random":
                perm = tuple(int(p) + 1 for p in _rng(*key).permutation(n))
            else:
                s0 = ti % n
                perm = tuple((k + s0) % n + 1 for k in range(n))
            pres.append(PresentationSpec(perm=perm, seed=key))
            presented = tuple(images[p - 1] for p in perm)
            gt_pos = presented.index(gt_image) + 1
            trace = generate_trace(
                cfg,
                presented,
                gt_pos,
                _rng(seed, _EVAL_NOISE, e, ti, 0),
                instance_id=f"ep{e:05d}",
                shuffle_id=ti,
            )
            traces.append(trace)
            if orbits:
                orbit_traces.append(dataclasses.replace(trace, shuffle_id=ti * n))
                for s in range(1, n):
                    shifted = cyclic_shift(presented, gt_pos, s)
                    orbit_traces.append(
                        generate_trace(
                            cfg,
                            shifted.order,
                            shifted.gt_position,
                            _rng(seed, _EVAL_NOISE, e, ti, s),
                            instance_id=f"ep{e:05d}",
                            shuffle_id=ti * n + s,
                        )
                    )
        specs.append(
            EpisodeSpec(
                episode_id=f"ep{e:05d}", images=images, gt_image=gt_image, presentations=tuple(pres)
            )
        )
    return specs, traces, orbit_traces


def generate_homogenized_pair(cfg: GeneratorConfig) -> tuple[InferenceTrace, InferenceTrace]:
    """Two noiseless instances with entrywise-identical candidate
    distributions but different ground truths (the last two tail positions).

    Only the attention tells them apart, which is exactly the situation a
    single static prior cannot resolve.
    """
    if cfg.bias.kind != "homog-tail" or cfg.bias.tail < 2:
        raise GeneratorError("homogenized pair needs a homog-tail bias with tail >= 2")
    gt_a, gt_b = cfg.n - 1, cfg.n
    z = np.log(bias_matrix(cfg)[gt_a - 1]).copy()
    z[gt_a - 1] += np.log(cfg.gamma)
    q = softmax(z)
    scheme = LabelScheme.for_n(cfg.scheme, cfg.n)

    def build(idx: int, gt: int) -> InferenceTrace:
        first, continuations, cands = _build_scoring_tree(scheme, q)
        return InferenceTrace(
            instance_id=f"homog{idx}",
            shuffle_id=0,
            n=cfg.n,
            scheme=cfg.scheme,
            labels=scheme.labels,
            images=tuple(f"homog{idx}-v{k}" for k in range(1, cfg.n + 1)),
            gt_position=gt,
            first_step=first,
            continuations=continuations,
            cand_tokens=cands,
            attention=attention_matrix(cfg, gt).copy(),
        )

    return build(0, gt_a), build(1, gt_b)


def resize_config(cfg: GeneratorConfig, n: int) -> GeneratorConfig:
    """Same generator at a different candidate count (for pool-size sweeps)."""
    tail = min(cfg.bias.tail, n - 1) if cfg.bias.kind == "homog-tail" else cfg.bias.tail
    out = dataclasses.replace(cfg, n=n, bias=dataclasses.replace(cfg.bias, tail=tail))
    out.validate()
    return out


def preset_names() -> list[str]:
    root = resources.files("ladcalib").joinpath("presets")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> GeneratorConfig:
    path = resources.files("ladcalib").joinpath("presets", f"{name}.json")
    if not path.is_file():
        raise GeneratorError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return GeneratorConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))
