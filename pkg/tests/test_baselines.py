import numpy as np
import pytest

from cgolab import baselines as B
from cgolab.config import ExperimentConfig
from cgolab.data import DynDataset, GoalDataset
from cgolab.pipeline import build_env, run_seed
from cgolab.solvers import fit_iql_tabular


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="module")
def models(medium_env, medium_data):
    dyn, goal = medium_data
    return {
        "rp": B.fit_rp(medium_env, goal, rng()),
        "uds": B.fit_uds_rp(medium_env, goal, dyn, rng()),
        "pds": B.fit_pds(medium_env, goal, rng()),
    }


def test_rp_predicts_one_on_observed_pairs(models, medium_data):
    _, goal = medium_data
    assert models["rp"].members[0, goal.c, goal.s].min() > 0.99


def test_default_hyperparameters(models):
    assert (B.RP_PERCENTILE, B.PDS_PERCENTILE, B.PDS_ENSEMBLE, B.PDS_KAPPA) == (5.0, 15.0, 10, 15.0)
    assert B.SMOOTHING == 0.01 and B.HER_RELABELS == 4
    assert models["pds"].k == 10 and models["rp"].k == 1


def test_rp_labels_goal_pairs_positive(models, medium_env, medium_data):
    dyn, goal = medium_data
    # the 5th-percentile threshold leaves at most 5% of D_goal pairs below it
    assert models["rp"].labels()[goal.c, goal.s].mean() >= 0.95
    data = B.label_with_reward(models["rp"], dyn.subset(2000), goal.c)
    hit = data.r == 1.0
    assert np.all(data.terminal == hit)
    observed = np.zeros_like(medium_env.mdp.goal_member)
    observed[goal.c, goal.s] = True
    labeled_pos = observed[data.c, data.s_next] & hit
    assert labeled_pos.sum() >= 0.95 * observed[data.c, data.s_next].sum()


def test_uds_pushes_down_frequent_goal_states(models, medium_env, medium_data):
    dyn, _ = medium_data
    freq = np.bincount(dyn.s, minlength=medium_env.mdp.n_states)
    G = medium_env.mdp.goal_member
    cells = [(c, s) for s in np.argsort(-freq)[:10] for c in np.flatnonzero(G[:, s])]
    c, s = np.array(cells).T
    assert np.all(models["uds"].members[0, c, s] < models["rp"].members[0, c, s])


def test_uds_negatives_balanced(medium_env, medium_data, monkeypatch):
    dyn, goal = medium_data
    sizes = []
    real = B._evidence

    def spy(env, c, s, bw):
        sizes.append(len(c))
        return real(env, c, s, bw)

    monkeypatch.setattr(B, "_evidence", spy)
    B.fit_uds_rp(medium_env, goal, dyn, rng())
    assert sizes == [len(goal), len(goal)]


def test_uds_needs_negatives(medium_env, medium_data):
    _, goal = medium_data
    with pytest.raises(ValueError, match="negatives"):
        B.fit_uds_rp(medium_env, goal, DynDataset([], [], [], 40, 5), rng())


def test_empty_goal_rejected(medium_env):
    with pytest.raises(ValueError, match="empty"):
        B.fit_rp(medium_env, GoalDataset([], [], 40, 4), rng())


def test_pds_needs_an_ensemble(medium_env, medium_data):
    with pytest.raises(ValueError):
        B.fit_pds(medium_env, medium_data[1], rng(), k_ensemble=1)


def test_pessimistic_below_mean(models):
    for m in models.values():
        assert np.all(m.pessimistic <= m.mean)


def test_pds_below_rp_far_from_goal_data(models, medium_env, medium_data):
    _, goal = medium_data
    far = B._evidence(medium_env, goal.c, goal.s, B.BANDWIDTH) < 1e-3
    assert far.any()
    assert np.all(models["pds"].pessimistic[far] <= models["rp"].members[0][far])


def test_pds_false_positives_not_above_rp(models, medium_env):
    G = medium_env.mdp.goal_member
    assert models["pds"].false_positive_rate(G) <= models["rp"].false_positive_rate(G)


def test_threshold_above_max_gives_no_positives(models, medium_data):
    dyn, goal = medium_data
    m = models["rp"]
    high = B.RewardModel(m.members, threshold=1.5)
    data = B.label_with_reward(high, dyn.subset(500), goal.c)
    assert not data.r.any() and not data.terminal.any()


def test_oracle_model_matches_truth(medium_env, medium_data):
    dyn, goal = medium_data
    truth = medium_env.mdp.goal_member
    perfect = B.RewardModel(truth[None].astype(float), threshold=1.0)
    a = B.label_with_reward(perfect, dyn.subset(800), goal.c)
    b = B.oracle_reward_label(medium_env, dyn.subset(800), goal.c)
    np.testing.assert_array_equal(a.r, b.r)
    np.testing.assert_array_equal(a.r.astype(bool), truth[a.c, a.s_next])


def test_oracle_label_sparsity(medium_env, medium_data):
    dyn, goal = medium_data
    data = B.oracle_reward_label(medium_env, dyn, goal.c)
    G = medium_env.mdp.goal_member
    ctx_w = np.bincount(goal.c, minlength=G.shape[0]) / len(goal)
    visit = np.bincount(dyn.s_next, minlength=G.shape[1]) / len(dyn)
    expected = float(ctx_w @ G.astype(float) @ visit)
    assert data.meta["positive_fraction"] == pytest.approx(expected, rel=1e-9)
    # four equal-ish rooms: roughly a quarter of the floor
    assert abs(data.meta["positive_fraction"] - G.sum(axis=1).mean() / G.shape[1]) < 0.1


def test_oracle_label_needs_contexts(medium_env, medium_data):
    with pytest.raises(ValueError, match="contexts"):
        B.oracle_reward_label(medium_env, medium_data[0], [])


# ---------------------------------------------------------------------------
# goal prediction
# ---------------------------------------------------------------------------


def test_her_needs_episodes():
    dyn = DynDataset([0, 1], [0, 0], [1, 0], 2, 1)
    with pytest.raises(ValueError, match="episode"):
        B.her_relabel(dyn, rng())


def test_her_goals_are_future_states():
    dyn = DynDataset([0, 1, 2, 5], [0, 0, 0, 0], [1, 2, 3, 6], 7, 1, episode=[0, 0, 0, 1], step=[0, 1, 2, 0])
    data = B.her_relabel(dyn, rng(), relabels=50)
    assert set(data.c[data.s == 0]) <= {1, 2, 3}
    assert set(data.c[data.s == 2]) == {3}
    assert set(data.c[data.s == 5]) == {6}
    np.testing.assert_array_equal(data.r == 1.0, data.c == data.s_next)


def gc_solver(data):
    return fit_iql_tabular(data, 0.99)


def test_single_observed_goal_is_near_point_mass(medium_data):
    dyn, _ = medium_data
    goal = GoalDataset([0, 0, 0], [4, 4, 4], 40, 1)
    pred = B.fit_goal_prediction(goal, dyn, gc_solver, rng())
    np.testing.assert_allclose(pred.goal_probs.sum(axis=1), 1.0)
    # Laplace smoothing spreads 0.01 per cell over 40 cells
    assert pred.goal_probs[0, 4] == pytest.approx(3.01 / 3.40)
    assert pred.goal_probs[0].argmax() == 4


def test_infeasible_goal_flagged(medium_env, medium_data):
    dyn, goal = medium_data
    pred = B.fit_goal_prediction(goal, dyn, gc_solver, rng())
    G = medium_env.mdp.goal_member
    outside = int(np.flatnonzero(~G[0])[0])
    assert pred.infeasible(medium_env, [0, 0], [outside, int(np.flatnonzero(G[0])[0])]).tolist() == [True, False]


def test_same_episode_seed_same_goal(medium_data):
    dyn, goal = medium_data
    agent = B.GoalPredictionAgent(B.fit_goal_prediction(goal, dyn, gc_solver, rng()))
    a1 = B.act_goal_prediction(agent, 1, 0, episode_seed=7)
    g1 = agent.goals.copy()
    a2 = B.act_goal_prediction(agent, 1, 0, episode_seed=7)
    assert a1 == a2 and np.array_equal(g1, agent.goals)


def test_stays_at_predicted_goal(medium_data):
    dyn, goal = medium_data
    agent = B.GoalPredictionAgent(B.fit_goal_prediction(goal, dyn, gc_solver, rng()))
    agent.begin(np.array([2]), rng(3))
    g = int(agent.goals[0])
    probs = agent.action_probs(np.array([g]), np.array([2]))
    assert probs[0, B.STAY] == 1.0


def test_goal_prediction_four_rooms_end_to_end():
    cfg = ExperimentConfig()
    cfg.method.name = "goal_pred"
    cfg.method.solver = "iql"
    run = run_seed(cfg, 0)
    assert run.success_rate >= 80.0


def test_goal_prediction_below_coda_single_goal():
    cfg = ExperimentConfig()
    cfg.env.relation = "single_goal"
    env = build_env(cfg)
    rates = {}
    for name in ("coda", "goal_pred"):
        cfg.method.name = name
        rates[name] = np.mean([run_seed(cfg, s, env).success_rate for s in range(3)])
    assert rates["goal_pred"] < rates["coda"]


def test_goal_prediction_rejects_pspi():
    cfg = ExperimentConfig()
    cfg.method.name = "goal_pred"
    cfg.method.solver = "pspi"
    with pytest.raises(ValueError, match="value-based"):
        run_seed(cfg, 0)
