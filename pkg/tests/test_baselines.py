import dataclasses

import numpy as np
import pytest

from ladcalib.baselines import (
    GlobalPrior,
    OrbitError,
    attention_readout_predict,
    estimate_global_prior,
    permutation_average_predict,
    pride_predict,
    purified_attention_predict,
    vanilla_predict,
)
from ladcalib.calibration import AttentionPrior, build_profile
from ladcalib.debias import DebiasConfig
from ladcalib.scoring import score_candidates
from ladcalib.synthetic import (
    expected_attention_prior,
    generate_calibration_set,
    generate_trace,
    load_preset,
)
from ladcalib.traces import cyclic_shift

from helpers import random_tree_trace, single_token_trace


def test_vanilla_argmax():
    assert vanilla_predict(single_token_trace([0.7, 0.3])) == 1


def test_vanilla_tie_breaks_low():
    assert vanilla_predict(single_token_trace([0.25] * 4)) == 1


def test_vanilla_matches_recomputation_oracle():
    rng = np.random.default_rng(21)
    for _ in range(30):
        t = random_tree_trace(rng)
        assert vanilla_predict(t) == int(np.argmax(score_candidates(t).probs)) + 1


def test_global_prior_uniform_inputs():
    traces = [single_token_trace([0.5, 0.5]) for _ in range(3)]
    prior = estimate_global_prior(traces, smoothing=0.0)
    assert np.allclose(prior.p, 0.5, atol=1e-12)


def test_global_prior_direct_average():
    traces = [single_token_trace([0.9, 0.1]), single_token_trace([0.5, 0.5])]
    prior = estimate_global_prior(traces, smoothing=0.0)
    assert np.allclose(prior.p, [0.7, 0.3], atol=1e-12)


def test_global_prior_matches_generator_marginal():
    cfg = dataclasses.replace(load_preset("stripe-n4"), noise_sigma=0.0)
    traces = generate_calibration_set(cfg, 4)
    prior = estimate_global_prior(traces, smoothing=0.0)
    from ladcalib.synthetic import expected_obs_matrix

    marginal = expected_obs_matrix(cfg).mean(axis=0)
    assert np.abs(prior.p - marginal).max() < 1e-9


def test_pride_uniform_prior_equals_vanilla():
    rng = np.random.default_rng(3)
    prior = GlobalPrior(p=np.full(5, 0.2))
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        t = single_token_trace(p)
        assert pride_predict(t, prior) == vanilla_predict(t)


def test_pride_hand_computed():
    t = single_token_trace([0.6, 0.4])
    assert pride_predict(t, GlobalPrior(p=np.array([0.75, 0.25]))) == 2


def test_pride_is_blind_to_gt_behind_identical_observations():
    prior = GlobalPrior(p=np.array([0.5, 0.3, 0.2]))
    a = single_token_trace([0.2, 0.5, 0.3], gt=2)
    b = single_token_trace([0.2, 0.5, 0.3], gt=3)
    assert pride_predict(a, prior) == pride_predict(b, prior)


def _orbit(probs_by_shift, base=("A", "B")):
    """Build an orbit of single-token traces over cyclic shifts of `base`."""
    n = len(base)
    traces = []
    for s, probs in enumerate(probs_by_shift):
        order = cyclic_shift(base, 1, s).order
        traces.append(single_token_trace(probs, images=order, instance_id="orb", shuffle_id=s))
    return traces


def test_permutation_average_identity_aligned_mean():
    orbit = _orbit([[0.9, 0.1], [0.4, 0.6]])
    # A: (0.9 + 0.6) / 2 = 0.75, B: 0.25
    assert permutation_average_predict(orbit) == "A"


def test_permutation_average_of_identical_aligned_distributions():
    base = ("A", "B", "C")
    orbit = []
    aligned = {"A": 0.2, "B": 0.5, "C": 0.3}
    for s in range(3):
        order = cyclic_shift(base, 1, s).order
        orbit.append(single_token_trace([aligned[i] for i in order], images=order, shuffle_id=s))
    assert permutation_average_predict(orbit) == "B"
    assert vanilla_predict(orbit[0]) == list(orbit[0].images).index("B") + 1


def test_permutation_average_invariant_to_shift_labeling():
    rng = np.random.default_rng(17)
    base = tuple(f"im{i}" for i in range(4))
    orbit = []
    for s in range(4):
        order = cyclic_shift(base, 1, s).order
        orbit.append(single_token_trace(rng.dirichlet(np.ones(4)), images=order, shuffle_id=s))
    chosen = permutation_average_predict(orbit)
    for start in range(4):
        rotated_listing = orbit[start:] + orbit[:start]
        assert permutation_average_predict(rotated_listing) == chosen


def test_permutation_average_rejects_incomplete_or_mismatched_orbits():
    orbit = _orbit([[0.9, 0.1], [0.4, 0.6]])
    with pytest.raises(OrbitError, match="orbit has"):
        permutation_average_predict(orbit[:1])
    bad = _orbit([[0.9, 0.1], [0.4, 0.6]])
    bad[1] = single_token_trace([0.4, 0.6], images=("A", "Z"))
    with pytest.raises(OrbitError, match="identity mismatch"):
        permutation_average_predict(bad)
    dup = [orbit[0], orbit[0]]
    with pytest.raises(OrbitError, match="duplicate"):
        permutation_average_predict(dup)


def test_attention_readout_decisive_and_tie():
    t = single_token_trace([0.25] * 4, attention=np.array([[0.05, 0.05, 0.6, 0.05]]))
    assert attention_readout_predict(t, k=1) == 3
    u = single_token_trace([0.25] * 4, attention=np.full((2, 4), 0.1))
    assert attention_readout_predict(u, k=2) == 1


def test_attention_readout_matches_oracle():
    rng = np.random.default_rng(31)
    for _ in range(30):
        t = random_tree_trace(rng)
        k = int(rng.integers(1, 4))
        from ladcalib.debias import layer_strength, select_layers

        sel = select_layers(layer_strength(t), k)
        pooled = np.zeros(t.n)
        for l in sel:
            pooled += np.asarray(t.attention)[l - 1]
        assert attention_readout_predict(t, k) == int(np.argmax(pooled)) + 1


def test_purified_attention_uniform_tie():
    t = single_token_trace([0.25] * 4, attention=np.full((1, 4), 0.1))
    prior = AttentionPrior(matrix=np.full((1, 4), 0.1))
    assert purified_attention_predict(t, prior, DebiasConfig(k=1)) == 1


def test_purified_attention_corrects_boundary_sink():
    cfg = dataclasses.replace(load_preset("sink-boundary"), noise_sigma=0.0)
    prior = AttentionPrior(matrix=np.maximum(expected_attention_prior(cfg), 1e-12))
    rng = np.random.default_rng(0)
    images = tuple(f"s-v{k}" for k in range(1, 9))
    gt = 4  # interior position, overshadowed by the boundary sink
    trace = generate_trace(cfg, images, gt, rng)
    assert attention_readout_predict(trace, k=2) == 1
    assert purified_attention_predict(trace, prior) == gt


def test_purified_attention_argmax_is_tau_invariant():
    rng = np.random.default_rng(12)
    t = single_token_trace([0.25] * 4, attention=rng.random((3, 4)) * 0.2 + 0.01)
    prior = AttentionPrior(matrix=rng.random((3, 4)) * 0.2 + 0.01)
    picks = {
        purified_attention_predict(t, prior, DebiasConfig(k=2, tau=tau)) for tau in (1.0, 5.0, 50.0)
    }
    assert len(picks) == 1
