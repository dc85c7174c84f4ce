"""Locating the visual token span of each image in a tokenized prompt."""

from __future__ import annotations

from typing import Sequence


class SpanError(ValueError):
    pass


def locate_image_spans(
    token_ids: Sequence[int], image_token_id: int, expected_images: int
) -> list[tuple[int, ...]]:
    """Token-index spans of each image, in presentation order.

    A span is one maximal run of consecutive image tokens, so text between
    images separates spans and is never included in one.
    """
    spans: list[tuple[int, ...]] = []
    run: list[int] = []
    for idx, tok in enumerate(token_ids):
        if tok == image_token_id:
            run.append(idx)
        elif run:
            spans.append(tuple(run))
            run = []
    if run:
        spans.append(tuple(run))
    if len(spans) != expected_images:
        raise SpanError(
            f"prompt contains {len(spans)} image spans, expected {expected_images}"
        )
    return spans
