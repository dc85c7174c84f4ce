import numpy as np
import pytest

from ladextract.attention import AttentionError, RawAttentionCapture, aggregate_attention


def _capture(weights, spans):
    return RawAttentionCapture(weights=np.asarray(weights, dtype=float), spans=spans)


def test_single_head_span_sum():
    w = np.array([[[0.2, 0.1, 0.4, 0.3]]])  # 1 layer, 1 head, 4 keys
    out = aggregate_attention(_capture(w, [(0, 1)]))
    assert out.shape == (1, 1)
    assert abs(out[0, 0] - 0.3) < 1e-15


def test_identical_heads_average_to_one_head():
    row = np.array([0.25, 0.25, 0.3, 0.2])
    one = aggregate_attention(_capture(row[None, None, :], [(0,), (2, 3)]))
    two = aggregate_attention(_capture(np.stack([row, row])[None, :, :], [(0,), (2, 3)]))
    assert np.abs(one - two).max() < 1e-15


def test_matches_naive_double_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(25):
        layers, heads, keys = rng.integers(1, 5), rng.integers(1, 4), rng.integers(8, 20)
        w = rng.random((layers, heads, keys))
        w /= w.sum(axis=2, keepdims=True)
        cut = sorted(rng.choice(np.arange(1, keys), size=3, replace=False))
        spans = [tuple(range(0, cut[0])), tuple(range(cut[1], cut[2]))]
        got = aggregate_attention(_capture(w, spans))
        oracle = np.zeros((layers, 2))
        for l in range(layers):
            for k, span in enumerate(spans):
                total = 0.0
                for h in range(heads):
                    for t in span:
                        total += w[l, h, t]
                oracle[l, k] = total / heads
        assert np.abs(got - oracle).max() < 1e-9


def test_rejects_non_softmax_rows():
    w = np.full((1, 1, 4), 0.5)  # sums to 2
    with pytest.raises(AttentionError, match="sums to"):
        aggregate_attention(_capture(w, [(0,)]))


def test_rejects_overlapping_or_empty_spans():
    w = np.full((1, 1, 4), 0.25)
    with pytest.raises(AttentionError, match="overlap"):
        aggregate_attention(_capture(w, [(0, 1), (1, 2)]))
    with pytest.raises(AttentionError, match="empty"):
        aggregate_attention(_capture(w, [(0,), ()]))
    with pytest.raises(AttentionError, match="outside"):
        aggregate_attention(_capture(w, [(0,), (9,)]))


def test_per_layer_image_mass_is_a_fraction():
    rng = np.random.default_rng(5)
    w = rng.random((3, 2, 12))
    w /= w.sum(axis=2, keepdims=True)
    out = aggregate_attention(_capture(w, [(0, 1, 2), (4, 5)]))
    assert np.all(out.sum(axis=1) <= 1.0 + 1e-6)
    assert np.all(out >= 0)
