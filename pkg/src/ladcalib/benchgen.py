"""Episode construction from precomputed embeddings, with hard-negative mining.

Adversarial episodes pick distractors by maximal visual cosine similarity
to the anchor, after dropping pool entries whose category set matches the
anchor's and entries whose text embedding is too close to the anchor's
caption (those would make the ground truth ambiguous).
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .synthetic import EpisodeSpec
from .util import LadcalibError, atomic_write_bytes, atomic_write_text, canonical_json

_MAGIC = b"EMB1"
_NORM_TOL = 1e-6


class MiningError(LadcalibError):
    pass


@dataclass
class EmbeddingRecord:
    id: str
    vis: np.ndarray
    txt: np.ndarray
    categories: frozenset[str]

    def validate(self) -> None:
        for name, v in (("vis", self.vis), ("txt", self.txt)):
            norm = float(np.linalg.norm(v))
            if abs(norm - 1.0) > _NORM_TOL:
                raise MiningError(f"{self.id}: {name} embedding norm {norm:.8f} != 1")


@dataclass(frozen=True)
class MiningParams:
    num_negatives: int
    txt_threshold: float = 0.9
    exclude_identical_categories: bool = True

    def validate(self) -> None:
        if self.num_negatives < 1:
            raise MiningError(f"num_negatives={self.num_negatives} < 1")
        if not 0.0 < self.txt_threshold <= 1.0:
            raise MiningError(f"txt_threshold={self.txt_threshold} outside (0, 1]")


def _rank(
    anchor_id: str,
    anchor_cats: frozenset[str],
    vis_cos: np.ndarray,
    txt_cos: np.ndarray,
    ids: Sequence[str],
    cats: Sequence[frozenset[str]],
    params: MiningParams,
) -> list[str]:
    pool_size = len(ids)
    if params.exclude_identical_categories and anchor_cats:
        cat_ok = np.fromiter((c != anchor_cats for c in cats), dtype=bool, count=pool_size)
    else:
        cat_ok = np.ones(pool_size, dtype=bool)
    txt_ok = txt_cos < params.txt_threshold
    keep = np.nonzero(cat_ok & txt_ok)[0]
    if keep.size < params.num_negatives:
        raise MiningError(
            f"{anchor_id}: only {keep.size} candidates survive the filters "
            f"(pool {pool_size}, after category filter {int(cat_ok.sum())}, "
            f"after text filter {keep.size}); need {params.num_negatives}"
        )
    ranked = sorted(keep, key=lambda i: (-float(vis_cos[i]), ids[i]))
    return [ids[i] for i in ranked[: params.num_negatives]]


def mine(anchor: EmbeddingRecord, pool: Sequence[EmbeddingRecord], params: MiningParams) -> list[str]:
    """Hardest distractor ids for one anchor, by descending visual cosine.

    The category filter is a no-op when the anchor has no categories.
    Cosine ties break lexicographically by id, so the result does not
    depend on pool ordering.
    """
    params.validate()
    for rec in pool:
        if rec.id == anchor.id:
            raise MiningError(f"pool must exclude the anchor ({anchor.id})")
    vis_cos = np.array([float(rec.vis @ anchor.vis) for rec in pool])
    txt_cos = np.array([float(rec.txt @ anchor.txt) for rec in pool])
    return _rank(
        anchor.id,
        anchor.categories,
        vis_cos,
        txt_cos,
        [rec.id for rec in pool],
        [rec.categories for rec in pool],
        params,
    )


def build_benchmark(
    pool: Sequence[EmbeddingRecord],
    count: int,
    n: int,
    mode: str,
    seed: int,
    params: MiningParams | None = None,
    jobs: int = 1,
) -> list[EpisodeSpec]:
    """Episode manifests with anchors drawn without replacement.

    `random` samples distractors uniformly; `adversarial` mines them. The
    anchor is listed first; presentation shuffling is left to the
    evaluation side, so manifests carry no presentations. Results depend
    only on (pool, count, n, mode, seed, params), never on `jobs`.
    """
    if mode not in ("random", "adversarial"):
        raise MiningError(f"unknown mode {mode!r}")
    if n < 2:
        raise MiningError(f"n={n} < 2")
    if count < 1:
        raise MiningError("count must be >= 1")
    pool = list(pool)
    ids = [rec.id for rec in pool]
    if len(set(ids)) != len(ids):
        raise MiningError("duplicate ids in embedding pool")
    if len(pool) < count:
        raise MiningError(f"pool of {len(pool)} cannot supply {count} distinct anchors")
    if len(pool) < n:
        raise MiningError(f"pool of {len(pool)} cannot fill episodes of {n} candidates")
    for rec in pool:
        rec.validate()
    if params is None:
        params = MiningParams(num_negatives=n - 1)
    params.validate()
    if params.num_negatives != n - 1:
        raise MiningError(f"num_negatives={params.num_negatives} but episodes need {n - 1}")

    anchor_rng = np.random.default_rng(np.random.SeedSequence((seed,)))
    anchor_idx = [int(i) for i in anchor_rng.choice(len(pool), size=count, replace=False)]

    if mode == "random":
        def distractors_for(e_ai: tuple[int, int]) -> list[str]:
            e, ai = e_ai
            rng = np.random.default_rng(np.random.SeedSequence((seed, e)))
            rest = ids[:ai] + ids[ai + 1 :]
            return [rest[int(j)] for j in rng.choice(len(rest), size=n - 1, replace=False)]
    else:
        vis_mat = np.stack([rec.vis for rec in pool])
        txt_mat = np.stack([rec.txt for rec in pool])
        cats = [rec.categories for rec in pool]

        def distractors_for(e_ai: tuple[int, int]) -> list[str]:
            _, ai = e_ai
            vis_cos = vis_mat @ vis_mat[ai]
            txt_cos = txt_mat @ txt_mat[ai]
            mask = np.ones(len(pool), dtype=bool)
            mask[ai] = False
            keep = np.nonzero(mask)[0]
            return _rank(
                ids[ai],
                cats[ai],
                vis_cos[keep],
                txt_cos[keep],
                [ids[i] for i in keep],
                [cats[i] for i in keep],
                params,
            )

    items = list(enumerate(anchor_idx))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            all_distractors = list(ex.map(distractors_for, items))
    else:
        all_distractors = [distractors_for(item) for item in items]

    return [
        EpisodeSpec(
            episode_id=f"bench{e:05d}",
            images=(ids[ai], *dist),
            gt_image=ids[ai],
            presentations=(),
        )
        for (e, ai), dist in zip(items, all_distractors)
    ]


# ---------------------------------------------------------------------------
# Embedding file IO: JSON lines or the EMB1 binary layout. All binary
# integers are little-endian; vectors are f32.


def read_embeddings_jsonl(path) -> list[EmbeddingRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                rec = EmbeddingRecord(
                    id=str(doc["id"]),
                    vis=np.asarray(doc["vis"], dtype=float),
                    txt=np.asarray(doc["txt"], dtype=float),
                    categories=frozenset(str(c) for c in doc.get("cats", ())),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MiningError(f"{path}: line {lineno}: malformed embedding record ({exc})") from exc
            rec.validate()
            records.append(rec)
    return records


def write_embeddings_jsonl(path, records: Sequence[EmbeddingRecord]) -> None:
    lines = []
    for rec in records:
        lines.append(
            canonical_json(
                {
                    "id": rec.id,
                    "vis": [float(x) for x in rec.vis],
                    "txt": [float(x) for x in rec.txt],
                    "cats": sorted(rec.categories),
                }
            )
        )
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_embeddings_binary(path) -> list[EmbeddingRecord]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise MiningError(f"{path}: bad magic {data[:4]!r}, expected {_MAGIC!r}")
    count, vis_dim, txt_dim = struct.unpack_from("<III", data, 4)
    off = 16
    records = []
    try:
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", data, off)
            off += 2
            rid = data[off : off + id_len].decode("utf-8")
            off += id_len
            vis = np.frombuffer(data, dtype="<f4", count=vis_dim, offset=off).astype(float)
            off += 4 * vis_dim
            txt = np.frombuffer(data, dtype="<f4", count=txt_dim, offset=off).astype(float)
            off += 4 * txt_dim
            (ncat,) = struct.unpack_from("<H", data, off)
            off += 2
            cats = []
            for _ in range(ncat):
                (clen,) = struct.unpack_from("<H", data, off)
                off += 2
                cats.append(data[off : off + clen].decode("utf-8"))
                off += clen
            rec = EmbeddingRecord(id=rid, vis=vis, txt=txt, categories=frozenset(cats))
            rec.validate()
            records.append(rec)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise MiningError(f"{path}: truncated or corrupt binary embedding file ({exc})") from exc
    if off != len(data):
        raise MiningError(f"{path}: {len(data) - off} trailing bytes after {count} records")
    return records


def write_embeddings_binary(path, records: Sequence[EmbeddingRecord]) -> None:
    if not records:
        raise MiningError("refusing to write an empty embedding file")
    vis_dim = len(records[0].vis)
    txt_dim = len(records[0].txt)
    out = [_MAGIC, struct.pack("<III", len(records), vis_dim, txt_dim)]
    for rec in records:
        if len(rec.vis) != vis_dim or len(rec.txt) != txt_dim:
            raise MiningError(f"{rec.id}: embedding dimensions differ from the header")
        rid = rec.id.encode("utf-8")
        out.append(struct.pack("<H", len(rid)))
        out.append(rid)
        out.append(np.asarray(rec.vis, dtype="<f4").tobytes())
        out.append(np.asarray(rec.txt, dtype="<f4").tobytes())
        cats = sorted(rec.categories)
        out.append(struct.pack("<H", len(cats)))
        for c in cats:
            cb = c.encode("utf-8")
            out.append(struct.pack("<H", len(cb)))
            out.append(cb)
    atomic_write_bytes(path, b"".join(out))


def read_embeddings(path) -> list[EmbeddingRecord]:
    """Dispatch on the file's leading bytes: EMB1 binary or JSON lines."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == _MAGIC:
        return read_embeddings_binary(path)
    return read_embeddings_jsonl(path)
