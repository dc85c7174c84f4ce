import dataclasses

import numpy as np
import pytest

from ladcalib.debias import DebiasConfig
from ladcalib.evaluation import (
    Episode,
    EvalError,
    consistency,
    divergence_report,
    evaluate,
    logit_profile_report,
    recall_std,
)
from ladcalib.synthetic import generate_calibration_set, generate_homogenized_pair, load_preset
from ladcalib.baselines import vanilla_predict

from helpers import episodes_in_memory, single_token_trace


def test_recall_std_constant_vectors():
    assert recall_std([100, 100, 100, 100]) == 0.0
    assert recall_std([50, 50]) == 0.0


def test_recall_std_hand_computed():
    assert abs(recall_std([100, 0, 0, 0]) - 43.30) < 0.01


def test_recall_std_input_validation():
    with pytest.raises(EvalError):
        recall_std([100])
    with pytest.raises(EvalError):
        recall_std([120, 10])


def test_consistency_fixture():
    sels = [("A",) * 5, ("B", "B", "B", "B", "C"), ("D",) * 5]
    assert abs(consistency(sels) - 66.67) < 0.01


def test_consistency_degenerate_cases():
    assert consistency([("A",), ("B",)]) == 100.0
    assert consistency([("A", "A"), ("B", "B")]) == 100.0
    with pytest.raises(EvalError):
        consistency([("A", "A"), ("B",)])


def _episode(eid, aligned_probs, perms, gt_image, base=("A", "B")):
    """aligned_probs maps identity -> probability (same content every shuffle)."""
    presentations = []
    for t_idx, perm in enumerate(perms):
        order = tuple(base[p - 1] for p in perm)
        probs = [aligned_probs[i] for i in order]
        presentations.append(
            single_token_trace(
                probs,
                gt=order.index(gt_image) + 1,
                images=order,
                instance_id=eid,
                shuffle_id=t_idx,
            )
        )
    return Episode(instance_id=eid, images=base, gt_image=gt_image, presentations=tuple(presentations))


def test_evaluate_perfect_predictor():
    eps = [
        _episode("e0", {"A": 0.9, "B": 0.1}, [(1, 2), (2, 1)], "A"),
        _episode("e1", {"A": 0.2, "B": 0.8}, [(1, 2), (2, 1)], "B"),
    ]
    report = evaluate(lambda t: t.gt_position, eps)
    assert report.acc_mean == 100.0
    assert report.acc_std == 0.0
    assert report.rstd == 0.0
    assert report.consistency == 100.0
    assert np.allclose(report.confusion, np.eye(2) * 100, atol=1e-9)


def test_evaluate_constant_position_predictor_enumerated():
    # Two episodes, two shuffles each (identity and swap). A constant
    # position-1 predictor selects a different image after the swap, so no
    # episode is consistent; half the (episode, shuffle) pairs hit gt.
    eps = [
        _episode("e0", {"A": 0.9, "B": 0.1}, [(1, 2), (2, 1)], "A"),
        _episode("e1", {"A": 0.2, "B": 0.8}, [(1, 2), (2, 1)], "B"),
    ]
    report = evaluate(lambda t: 1, eps)
    assert report.acc_mean == 50.0
    assert report.consistency == 0.0
    # gt at position 1 twice (picked), gt at position 2 twice (missed)
    assert np.allclose(report.confusion, [[100.0, 0.0], [100.0, 0.0]], atol=1e-9)
    assert np.allclose(report.per_position_recall, [100.0, 0.0], atol=1e-9)
    assert abs(report.rstd - 50.0) < 1e-9


def test_evaluate_oracle_on_hand_computed_fixture():
    # Predictor via lookup table: e0 always right, e1 right once out of twice.
    eps = [
        _episode("e0", {"A": 0.9, "B": 0.1}, [(1, 2), (2, 1)], "A"),
        _episode("e1", {"A": 0.2, "B": 0.8}, [(1, 2), (2, 1)], "B"),
    ]
    answers = {("e0", 0): 1, ("e0", 1): 2, ("e1", 0): 2, ("e1", 1): 2}
    report = evaluate(lambda t: answers[(t.instance_id, t.shuffle_id)], eps)
    # round 0: both right -> 100; round 1: e0 right, e1 picks pos 2 = A wrong -> 50
    assert report.round_accuracies == (100.0, 50.0)
    assert report.acc_mean == 75.0
    assert abs(report.acc_std - 25.0) < 1e-9
    assert report.consistency == 50.0  # e1 selects B then A
    # gt-position rows: pos1 seen twice (e0 r0 hit, e1 r1 miss), pos2 twice (hits)
    assert np.allclose(report.confusion, [[50.0, 50.0], [0.0, 100.0]], atol=1e-9)
    assert abs(report.rstd - 25.0) < 1e-9


def test_evaluate_confusion_rows_sum_to_100():
    cfg = load_preset("stripe-n4")
    eps = episodes_in_memory(cfg, 40, 3)
    report = evaluate(vanilla_predict, eps)
    assert np.abs(report.confusion.sum(axis=1) - 100.0).max() < 1e-6


def test_evaluate_acc_equals_mean_recall_under_uniform_coverage():
    cfg = load_preset("stripe-n4")
    eps = episodes_in_memory(cfg, 30, 4, presentations="cyclic")
    report = evaluate(vanilla_predict, eps)
    assert abs(report.acc_mean - report.per_position_recall.mean()) < 1e-9


def test_evaluate_invariant_to_episode_order():
    cfg = load_preset("stripe-n4")
    eps = episodes_in_memory(cfg, 25, 3)
    a = evaluate(vanilla_predict, eps)
    b = evaluate(vanilla_predict, list(reversed(eps)))
    assert a.acc_mean == b.acc_mean
    assert a.round_accuracies == b.round_accuracies
    assert np.array_equal(a.confusion, b.confusion)
    assert a.consistency == b.consistency


def test_evaluate_identity_predictor_has_zero_rstd():
    cfg = load_preset("stripe-n8")
    eps = episodes_in_memory(cfg, 16, 8, presentations="cyclic")
    report = evaluate(lambda t: t.gt_position, eps)
    assert report.rstd == 0.0


def test_evaluate_rejects_mixed_shapes():
    eps = [
        _episode("e0", {"A": 0.9, "B": 0.1}, [(1, 2)], "A"),
        _episode("e1", {"A": 0.2, "B": 0.8}, [(1, 2), (2, 1)], "B"),
    ]
    with pytest.raises(EvalError, match="mixed shuffle"):
        evaluate(lambda t: 1, eps)


def test_logit_profiles_flat_for_uniform_traces():
    traces = [single_token_trace([0.25] * 4, gt=g) for g in (1, 2, 3, 4)]
    rows = logit_profile_report(traces)
    assert len(rows) == 4
    for row in rows:
        assert np.abs(row.mean_log_probs - row.mean_log_probs[0]).max() < 1e-12


def test_logit_profiles_single_trace_mean_is_sample():
    t = single_token_trace([0.6, 0.4], gt=1)
    rows = logit_profile_report([t])
    assert np.array_equal(rows[0].mean_log_probs, rows[0].samples[0])


def test_logit_profiles_homogenized_groups_share_mean():
    cfg = dataclasses.replace(load_preset("homog-tail-n8"), noise_sigma=0.0)
    a, b = generate_homogenized_pair(cfg)
    rows = logit_profile_report([a, b])
    assert len(rows) == 2
    gap = np.abs(rows[0].mean_log_probs - rows[1].mean_log_probs).max()
    assert gap < 1e-9


def test_divergence_report_stripe_generator():
    cfg = load_preset("stripe-n8")
    traces = generate_calibration_set(cfg, 8)
    report = divergence_report(traces, DebiasConfig(k=2))
    assert report.attention_accuracy >= 0.9
    assert report.logit_accuracy <= 0.5
    assert len(report.rows) == 8


def test_divergence_report_unbiased_generator_agrees():
    cfg = dataclasses.replace(
        load_preset("stripe-n4"),
        bias=dataclasses.replace(load_preset("stripe-n4").bias, kind="uniform"),
        noise_sigma=0.0,
    )
    traces = generate_calibration_set(cfg, 3)
    report = divergence_report(traces)
    assert report.attention_accuracy == 1.0
    assert report.logit_accuracy == 1.0


def test_divergence_row_counts_match_groups():
    traces = [single_token_trace([0.5, 0.5], gt=g) for g in (1, 1, 2)]
    report = divergence_report(traces)
    assert [(r.gt, r.count) for r in report.rows] == [(1, 2), (2, 1)]
