"""The model-session surface the extractor drives.

Everything model-specific lives behind this protocol: tokenization of
candidate labels, prompt preparation, restricted step logits, and the raw
attention capture from the final prompt token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Protocol, Sequence, runtime_checkable

import numpy as np


@dataclass
class PreparedInstance:
    """A prompt the session has encoded and is ready to score."""

    token_ids: tuple[int, ...]
    data: Any = None


@runtime_checkable
class ModelSession(Protocol):
    image_token_id: int
    eos_token_id: int
    num_layers: int

    def encode_label(self, label: str) -> list[int]:
        """Token ids of a candidate identifier, as the model would emit it."""

    def prepare(self, prompt: str, image_paths: Sequence[str]) -> PreparedInstance:
        """Encode the prompt with its images for subsequent scoring calls."""

    def step_logits(
        self, prepared: PreparedInstance, prefix: Sequence[int], restrict: Sequence[int]
    ) -> np.ndarray:
        """Raw logits for `restrict` token ids after generating `prefix`."""

    def last_token_attention(self, prepared: PreparedInstance) -> np.ndarray:
        """Post-softmax attention rows (layers, heads, keys) from the final
        prompt token."""
