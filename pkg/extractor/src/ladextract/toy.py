"""A deterministic fake model session for contract tests and demos.

Token ids, logits, and attention are pure functions of (seed, prompt,
images, prefix), so extraction runs are reproducible without any model
weights. Logits carry a mild preference for the first image's identifier
plus noise; attention concentrates on an arbitrary but deterministic
image, which is enough to exercise the full pipeline.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

from .session import PreparedInstance


class ToySession:
    image_token_id = 9
    eos_token_id = 2
    num_layers = 4
    num_heads = 2
    tokens_per_image = 3

    def __init__(self, seed: int = 0):
        self.seed = seed

    def encode_label(self, label: str) -> list[int]:
        return [1000 + ord(c) for c in label]

    def _rng(self, *parts) -> np.random.Generator:
        key = [self.seed]
        for part in parts:
            for x in part if not isinstance(part, str) else (part,):
                if isinstance(x, str):
                    key.append(zlib.crc32(x.encode("utf-8")))
                else:
                    key.append(int(x) & 0xFFFFFFFF)
        return np.random.default_rng(np.random.SeedSequence(key))

    def prepare(self, prompt: str, image_paths: Sequence[str]) -> PreparedInstance:
        ids: list[int] = [5]
        for path in image_paths:
            ids.extend([self.image_token_id] * self.tokens_per_image)
            ids.append(7)  # separator text token between image blocks
        ids.extend(100 + (b % 64) for b in prompt.encode("utf-8")[:48])
        return PreparedInstance(token_ids=tuple(ids), data=(prompt, tuple(image_paths)))

    def step_logits(self, prepared, prefix: Sequence[int], restrict: Sequence[int]) -> np.ndarray:
        prompt, images = prepared.data
        rng = self._rng(prompt, images, ("prefix",), prefix, ("restrict",), restrict)
        return rng.normal(0.0, 1.5, len(restrict))

    def last_token_attention(self, prepared) -> np.ndarray:
        prompt, images = prepared.data
        rng = self._rng(prompt, images, ("attn",))
        t = len(prepared.token_ids)
        rows = rng.random((self.num_layers, self.num_heads, t)) + 0.05
        # deterministic focus image, elevated in the upper half of the layers
        focus = zlib.crc32(repr(images).encode()) % len(images)
        start = 1 + focus * (self.tokens_per_image + 1)
        rows[self.num_layers // 2 :, :, start : start + self.tokens_per_image] *= 6.0
        return rows / rows.sum(axis=2, keepdims=True)
