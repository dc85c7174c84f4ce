"""Per-image attention aggregation from raw last-query-token captures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Captured head rows are post-softmax; allow fp16-grade rounding.
ROW_SUM_TOL = 1e-2
MASS_TOL = 1e-6


class AttentionError(ValueError):
    pass


@dataclass
class RawAttentionCapture:
    """Attention rows from the last query token: (layers, heads, keys),
    plus the token-index span of each image."""

    weights: np.ndarray
    spans: Sequence[tuple[int, ...]]

    def validate(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 3:
            raise AttentionError(f"weights must be (layers, heads, keys), got shape {w.shape}")
        if np.any(w < 0):
            raise AttentionError("negative attention weight in capture")
        sums = w.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            l, h = np.unravel_index(int(np.argmax(np.abs(sums - 1.0))), sums.shape)
            raise AttentionError(
                f"head row (layer {l + 1}, head {h + 1}) sums to {sums[l, h]:.6f}, not 1"
            )
        if not self.spans:
            raise AttentionError("no image spans")
        seen: set[int] = set()
        keys = w.shape[2]
        for k, span in enumerate(self.spans, start=1):
            if not span:
                raise AttentionError(f"image span {k} is empty")
            for idx in span:
                if not 0 <= idx < keys:
                    raise AttentionError(f"image span {k} index {idx} outside 0..{keys - 1}")
                if idx in seen:
                    raise AttentionError(f"image spans overlap at token index {idx}")
                seen.add(idx)


def aggregate_attention(capture: RawAttentionCapture) -> np.ndarray:
    """Head-averaged attention mass per (layer, image).

    Sums each head's weights over an image's token span, then averages the
    heads. Per layer, the total mass on images is a fraction of the head
    rows' unit mass, which the trace format requires.
    """
    capture.validate()
    w = np.asarray(capture.weights, dtype=float)
    layers = w.shape[0]
    out = np.empty((layers, len(capture.spans)))
    for k, span in enumerate(capture.spans):
        out[:, k] = w[:, :, list(span)].sum(axis=2).mean(axis=1)
    totals = out.sum(axis=1)
    if np.any(totals > 1.0 + MASS_TOL):
        l = int(np.argmax(totals))
        raise AttentionError(f"image mass {totals[l]:.6f} exceeds 1 at layer {l + 1}")
    return out
