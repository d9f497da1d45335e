from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cgolab.coda import (
    EAGER_LIMIT,
    AugmentedBatchSampler,
    LabeledDataset,
    augment_compact,
    augment_full,
    sample_batch,
)
from cgolab.data import DynDataset, GoalDataset, load, save
from cgolab.mdp import build_augmented


def tiny(n_dyn=3, n_goal=2, seed=0, S=6, A=3, C=3):
    rng = np.random.default_rng(seed)
    dyn = DynDataset(rng.integers(S, size=n_dyn), rng.integers(A, size=n_dyn), rng.integers(S, size=n_dyn), S, A)
    goal = GoalDataset(rng.integers(C, size=n_goal), rng.integers(S, size=n_goal), S, C)
    return dyn, goal


def full_rows(dyn_bar, goal_bar):
    return Counter(LabeledDataset.concat([dyn_bar, goal_bar]).records())


def test_single_record_example():
    dyn = DynDataset([1], [1], [2], 4, 2)
    goal = GoalDataset([0], [3], 4, 1)
    dyn_bar, goal_bar = augment_full(dyn, goal)
    (t,) = dyn_bar.records()
    assert (t.x, t.a, t.r, t.x_next, t.terminal) == ((1, 0), 1, 0.0, (2, 0), False)
    (g,) = goal_bar.records()
    assert (g.x, g.a, g.r, g.x_next, g.terminal) == ((3, 0), 2, 1.0, (4, 0), True)


def test_cross_product_sizes():
    dyn_bar, goal_bar = augment_full(*tiny(3, 2))
    assert len(dyn_bar) == 6 and len(goal_bar) == 2


@settings(max_examples=40, deadline=None)
@given(n_dyn=st.integers(1, 30), n_goal=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_size_identities(n_dyn, n_goal, seed):
    dyn, goal = tiny(n_dyn, n_goal, seed)
    dyn_bar, goal_bar = augment_full(dyn, goal)
    assert len(dyn_bar) == n_dyn * n_goal
    assert len(goal_bar) == n_goal
    compact = augment_compact(dyn, goal)
    assert compact.total_weight == n_dyn * n_goal + n_goal


@settings(max_examples=25, deadline=None)
@given(n_dyn=st.integers(1, 20), n_goal=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_compact_is_the_same_multiset(n_dyn, n_goal, seed):
    dyn, goal = tiny(n_dyn, n_goal, seed)
    expected = full_rows(*augment_full(dyn, goal))
    compact = augment_compact(dyn, goal)
    got = Counter()
    for rec, w in zip(compact.records(), compact.weight):
        got[rec] += int(w)
    assert got == expected


def test_context_multiplicity_kept():
    dyn = DynDataset([0], [0], [1], 3, 1)
    goal = GoalDataset([2, 2, 0], [1, 1, 2], 3, 3)
    dyn_bar, _ = augment_full(dyn, goal)
    assert sorted(dyn_bar.c.tolist()) == [0, 2, 2]


def test_tuple_invariants(medium_data):
    dyn, goal = medium_data
    data = augment_compact(dyn, goal)
    plus = data.a == data.plus_action
    assert np.all(data.r[plus] == 1.0) and np.all(data.terminal[plus])
    assert np.all(data.s_next[plus] == data.n_states)
    assert np.all(data.r[~plus] == 0.0) and not data.terminal[~plus].any()


def test_goal_tuples_are_true_goals(medium_env, medium_data):
    _, goal_bar = augment_full(medium_data[0].subset(100), medium_data[1])
    assert medium_env.mdp.goal_member[goal_bar.c, goal_bar.s].all()


def test_tuples_consistent_with_augmented_kernel(medium_env, medium_data):
    aug = build_augmented(medium_env.mdp)
    data = augment_compact(medium_data[0].subset(500), medium_data[1])
    for t in data.records()[:2000]:
        assert aug.kernel(t.s, t.c, t.a)[t.s_next] > 0
        assert aug.reward(t.s, t.c, t.a) == t.r


def test_empty_sources_rejected():
    dyn, goal = tiny()
    with pytest.raises(ValueError, match="goal"):
        augment_full(dyn, GoalDataset([], [], 6, 3))
    with pytest.raises(ValueError, match="dynamics"):
        augment_full(DynDataset([], [], [], 6, 3), goal)


def test_eager_limit(monkeypatch):
    import cgolab.coda as coda

    monkeypatch.setattr(coda, "EAGER_LIMIT", 5)
    with pytest.raises(ValueError, match="sampler"):
        coda.augment_full(*tiny(3, 2))
    assert EAGER_LIMIT == 10_000_000


def test_balanced_goal_fraction():
    dyn, goal = tiny(50, 10)
    counts = []
    for seed in range(20):
        batch = AugmentedBatchSampler(dyn, goal, 0.5, np.random.default_rng(seed)).sample(1024)
        counts.append(int(batch.r.sum()))
    sigma = np.sqrt(1024 * 0.25)
    assert all(abs(n - 512) <= 3 * sigma for n in counts)


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1])
def test_degenerate_ratio_rejected(ratio):
    with pytest.raises(ValueError, match="goal_ratio"):
        AugmentedBatchSampler(*tiny(), goal_ratio=ratio)


def test_joint_frequencies_match_product():
    dyn = DynDataset([0, 1, 2, 3], [0, 1, 2, 0], [1, 2, 3, 4], 6, 3)
    goal = GoalDataset([0, 0, 1], [2, 3, 4], 6, 3)
    sampler = AugmentedBatchSampler(dyn, goal, 0.1, np.random.default_rng(0))
    batch = sampler.sample(1_000_000)
    plus = batch.a == batch.plus_action
    di, ci = batch.meta["dyn_index"], goal.c[batch.meta["context_index"]]
    observed = np.zeros((4, 2))
    np.add.at(observed, (di, ci), 1.0)
    ctx_marginal = np.array([2 / 3, 1 / 3])
    expected = np.outer(np.full(4, 0.25), ctx_marginal) * (~plus).sum()
    assert np.abs(observed / expected - 1).max() < 0.01
    assert stats.chisquare(observed.ravel(), expected.ravel()).pvalue > 0.01
    # goal slots are uniform over the goal rows
    g_obs = np.bincount(batch.s[plus], minlength=6)[2:5]
    assert stats.chisquare(g_obs, np.full(3, plus.sum() / 3)).pvalue > 0.01


def test_sample_batch_returns_transitions():
    dyn, goal = tiny(10, 4)
    recs = sample_batch(AugmentedBatchSampler(dyn, goal, 0.5, np.random.default_rng(0)), 64)
    assert len(recs) == 64
    assert all((t.r == 1.0) == (t.a == 3) for t in recs)
    with pytest.raises(ValueError):
        sample_batch(AugmentedBatchSampler(dyn, goal, 0.5), 0)


def test_spawned_samplers_are_independent_and_reproducible():
    dyn, goal = tiny(30, 6)
    a, b = AugmentedBatchSampler(dyn, goal, 0.5, np.random.default_rng(7)).spawn(2)
    a2, _ = AugmentedBatchSampler(dyn, goal, 0.5, np.random.default_rng(7)).spawn(2)
    x, y, x2 = a.sample(200), b.sample(200), a2.sample(200)
    assert not np.array_equal(x.s, y.s)
    np.testing.assert_array_equal(x.s, x2.s)


def test_distribution_weights():
    dyn, goal = tiny(10, 4)
    dist = AugmentedBatchSampler(dyn, goal, 0.3).distribution()
    plus = dist.a == dist.plus_action
    assert dist.weight[plus].sum() == pytest.approx(0.3)
    assert dist.weight[~plus].sum() == pytest.approx(0.7)


def test_labeled_round_trip(tmp_path):
    data = augment_compact(*tiny(8, 3))
    save(data, tmp_path / "l.jsonl")
    back = load(tmp_path / "l.jsonl")
    assert back.records() == data.records()
    np.testing.assert_array_equal(back.weight, data.weight)
