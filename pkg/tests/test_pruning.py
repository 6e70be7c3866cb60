import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from entroprune.entropy import Criterion, EntropyScores
from entroprune.model import ConfigError, ModelConfig, TokenMatrix, forward, image_tokens
from entroprune.pruning import (
    PruneSchedule,
    gather_tokens,
    keep_count,
    pruned_forward,
    random_prune_baseline,
    select_keep,
    token_trajectory,
)
from entroprune.reference import make_toy, naive_pruned_forward, naive_patch_scores, toy_image

from conftest import toy_params

SHANNON = Criterion("shannon")


def scores(vals, higher=False):
    return EntropyScores(np.asarray(vals, dtype=float), Criterion("evit") if higher else SHANNON, higher_is_important=higher)


def sort_slice(vals, r, higher=False):
    k = keep_count(r, len(vals))
    order = sorted(range(len(vals)), key=lambda i: (-vals[i] if higher else vals[i], i))
    return sorted(order[:k]), sorted(order[k:])


@pytest.mark.parametrize("r,m,k", [(0.9, 10, 9), (0.7, 196, 138), (0.7, 138, 97), (0.7, 97, 68), (0.3, 10, 3), (0.5, 1, 1), (1.0, 7, 7), (0.01, 5, 1)])
def test_keep_count(r, m, k):
    assert keep_count(r, m) == k


def test_select_keep_identity():
    kept, dropped = select_keep(scores([0.3, 0.1, 0.2]), 1.0)
    assert kept.tolist() == [0, 1, 2] and dropped.tolist() == []


def test_select_keep_example():
    vals = [3.0, 1.0, 2.0, 2.5]
    kept, dropped = select_keep(scores(vals), 0.5)
    assert (kept.tolist(), dropped.tolist()) == sort_slice(vals, 0.5) == ([1, 2], [0, 3])


def test_select_keep_ties_by_position():
    kept, dropped = select_keep(scores([1.0] * 4), 0.5)
    assert kept.tolist() == [0, 1] and dropped.tolist() == [2, 3]
    kept, _ = select_keep(scores([1.0] * 4, higher=True), 0.5)
    assert kept.tolist() == [0, 1]


def test_select_keep_evit_polarity():
    kept, dropped = select_keep(scores([0.1, 0.5, 0.2, 0.9], higher=True), 0.5)
    assert kept.tolist() == [1, 3] and dropped.tolist() == [0, 2]


def test_select_keep_errors():
    with pytest.raises(ValueError):
        select_keep(scores([]), 0.5)
    with pytest.raises(ValueError):
        select_keep(scores([1.0]), 0.0)


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 10)),
    st.sampled_from([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3]),
    st.booleans(),
)
def test_select_keep_matches_sort_slice_and_rank_invariant(vals, r, higher):
    kept, dropped = select_keep(scores(vals, higher), r)
    assert (kept.tolist(), dropped.tolist()) == sort_slice(vals.tolist(), r, higher)
    assert len(kept) == keep_count(r, len(vals))
    assert sorted(kept.tolist() + dropped.tolist()) == list(range(len(vals)))
    # strictly increasing transforms: exact scaling and dense ranks
    ranks = np.unique(vals, return_inverse=True)[1].astype(float)
    for transformed in (8.0 * vals, ranks):
        k2, d2 = select_keep(scores(transformed, higher), r)
        assert k2.tolist() == kept.tolist() and d2.tolist() == dropped.tolist()


def test_gather_all_is_identity(rng):
    x = TokenMatrix(rng.standard_normal((4, 3)), np.array([0, 1, 2]))
    y = gather_tokens(x, [0, 1, 2])
    np.testing.assert_array_equal(y.tokens, x.tokens)
    np.testing.assert_array_equal(y.patch_ids, x.patch_ids)


def test_gather_empty_keeps_class(rng):
    x = TokenMatrix(rng.standard_normal((4, 3)), np.array([0, 1, 2]))
    y = gather_tokens(x, [])
    assert y.n == 1
    np.testing.assert_array_equal(y.tokens[0], x.tokens[0])


def test_gather_subset(rng):
    x = TokenMatrix(rng.standard_normal((4, 3)), np.array([0, 1, 2]))
    y = gather_tokens(x, [0, 2])
    assert y.n == 3 and y.patch_ids.tolist() == [0, 2]
    np.testing.assert_array_equal(y.tokens, x.tokens[[0, 1, 3]])


def test_gather_maps_through_surviving_ids(rng):
    x = TokenMatrix(rng.standard_normal((4, 3)), np.array([3, 8, 11]))
    assert gather_tokens(x, [1, 2]).patch_ids.tolist() == [8, 11]


def test_gather_errors(rng):
    x = TokenMatrix(rng.standard_normal((4, 3)), np.array([0, 1, 2]))
    with pytest.raises(IndexError):
        gather_tokens(x, [3])
    with pytest.raises(ValueError):
        gather_tokens(x, [2, 1])


def test_random_baseline():
    a = random_prune_baseline(20, 0.4, seed=3)
    b = random_prune_baseline(20, 0.4, seed=3)
    assert a[0].tolist() == b[0].tolist() and len(a[0]) == 8
    assert random_prune_baseline(20, 1.0, seed=3)[0].tolist() == list(range(20))


def test_random_baseline_is_uniform():
    m, r, draws = 10, 0.3, 10_000
    counts = np.zeros(m)
    for seed in range(draws):
        counts[random_prune_baseline(m, r, seed)[0]] += 1
    p = keep_count(r, m) / m
    sigma = np.sqrt(p * (1 - p) / draws)
    assert np.all(np.abs(counts / draws - p) <= 3 * sigma)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        PruneSchedule(keep_rate=0.0)
    with pytest.raises(ConfigError):
        PruneSchedule(blocks=(0,))
    with pytest.raises(ConfigError):
        PruneSchedule(blocks=(13,)).validate(ModelConfig())


def test_deit_trajectory_arithmetic():
    counts = token_trajectory(ModelConfig(), PruneSchedule((4, 7, 10), 0.7))
    assert counts == [197] * 4 + [139] * 3 + [98] * 3 + [69] * 2


def test_pruned_r1_bit_identical_to_dense(toy):
    spec, params = toy
    img = toy_image(spec, 2)
    probs, trace = pruned_forward(img, params, spec.config, PruneSchedule((1, 2, 3), 1.0))
    assert probs.tobytes() == forward(img, params, spec.config).tobytes()
    assert trace.trajectory == [spec.config.num_patches + 1] * 4


def test_pruned_matches_dense_on_subset_oracle(toy):
    spec, params = toy
    img = toy_image(spec, 4)
    probs, trace = pruned_forward(img, params, spec.config, PruneSchedule((2,), 0.5))
    (event,) = trace.events
    ref, seen = naive_pruned_forward(spec, img, [(2, event.kept_ids.tolist())])
    np.testing.assert_allclose(probs, ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(event.scores.values, naive_patch_scores(seen[2]), rtol=0, atol=1e-9)


def test_trace_invariants_and_json(toy):
    spec, params = toy
    sched = PruneSchedule((1, 2, 3), 0.6, Criterion("renyi", alpha=2.0))
    seen_n = []
    probs, trace = pruned_forward(toy_image(spec, 1), params, spec.config, sched, on_block=lambda i, x, a: seen_n.append(x.n))
    incoming = np.arange(spec.config.num_patches)
    for e in trace.events:
        assert sorted(e.kept_ids.tolist() + e.dropped_ids.tolist()) == incoming.tolist()
        assert len(e.kept_ids) == keep_count(0.6, len(incoming))
        assert e.tokens_after == len(e.kept_ids) + 1
        incoming = e.kept_ids
    assert all(a >= b for a, b in zip(trace.trajectory, trace.trajectory[1:]))
    assert all(n >= 1 for n in seen_n)
    doc = json.loads(json.dumps(trace.to_dict()))
    assert set(doc["events"][0]) >= {"block", "criterion", "alpha", "kept_ids", "dropped_ids", "scores"}
    assert doc["events"][0]["alpha"] == 2.0


def test_schedule_past_depth(toy):
    spec, params = toy
    with pytest.raises(ConfigError):
        pruned_forward(toy_image(spec, 0), params, spec.config, PruneSchedule((spec.config.depth + 1,), 0.5))


def test_class_token_survives_aggressive_pruning():
    spec = make_toy(3, depth=3)
    params = toy_params(spec)
    probs, trace = pruned_forward(toy_image(spec, 0), params, spec.config, PruneSchedule((1, 2, 3), 0.01))
    assert trace.trajectory[-1] == 2 or spec.config.num_patches == 0
    assert abs(probs.sum() - 1) < 1e-12
