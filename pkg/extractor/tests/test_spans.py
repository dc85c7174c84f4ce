import pytest

from ladextract.spans import SpanError, locate_image_spans
from ladextract.toy import ToySession


def test_two_image_prompt_gives_two_ordered_disjoint_spans():
    ids = [5, 9, 9, 9, 7, 9, 9, 9, 7, 101, 102]
    spans = locate_image_spans(ids, image_token_id=9, expected_images=2)
    assert spans == [(1, 2, 3), (5, 6, 7)]
    assert set(spans[0]).isdisjoint(spans[1])


def test_interleaved_text_is_excluded_from_spans():
    ids = [9, 9, 42, 43, 9, 44]
    spans = locate_image_spans(ids, image_token_id=9, expected_images=2)
    assert spans == [(0, 1), (4,)]
    flat = [i for span in spans for i in span]
    assert all(ids[i] == 9 for i in flat)


def test_placeholder_count_mismatch():
    with pytest.raises(SpanError, match="expected 3"):
        locate_image_spans([9, 9, 7, 9], image_token_id=9, expected_images=3)


def test_span_union_matches_session_visual_token_count():
    session = ToySession(seed=3)
    prepared = session.prepare("caption here", ["a.png", "b.png", "c.png"])
    spans = locate_image_spans(prepared.token_ids, session.image_token_id, 3)
    assert sum(len(s) for s in spans) == 3 * session.tokens_per_image
