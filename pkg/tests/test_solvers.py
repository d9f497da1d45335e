import numpy as np
import pytest

from cgolab.coda import AugmentedBatchSampler, augment_compact, augment_full
from cgolab.config import ExperimentConfig
from cgolab.data import DynDataset, exhaustive_dyn, exhaustive_goal
from cgolab.mdp import ContextualMdp, PolicyTable, build_augmented, extend_policy
from cgolab.oracle import expected_return, policy_eval_exact, random_cgo, random_policy, solve_optimal
from cgolab.pipeline import build_env, coda_dataset, run_seed
from cgolab.solvers import (
    EmpiricalModel,
    PspiState,
    SolverDivergence,
    _Game,
    as_labeled,
    extract_policy,
    fit_fqi,
    fit_iql_tabular,
    fit_pevi,
    pspi_losses,
    solve_pspi,
    value_at_start,
)

from conftest import RIGHT, make_chain


def chain_data(mdp=None):
    mdp = mdp or make_chain()
    return mdp, augment_compact(exhaustive_dyn(mdp, 1), exhaustive_goal(mdp))


def test_empirical_model_rows_normalize(medium_data):
    model = EmpiricalModel.from_labeled(augment_compact(*medium_data))
    sums = np.asarray(model.kernel.sum(axis=1)).ravel()
    visited = model.counts.ravel() > 0
    np.testing.assert_allclose(sums[visited], 1.0)
    assert np.all(sums[~visited] == 0.0)


def test_fqi_matches_oracle_on_chain():
    mdp, data = chain_data()
    q, pi = fit_fqi(data, mdp.discount, iters=200)
    q_star, _ = solve_optimal(build_augmented(mdp))
    assert np.abs(q.values - q_star.values).max() <= 1e-6
    assert pi.probs[0, 0, RIGHT] == 1.0


def test_fqi_without_goal_tuples_is_zero():
    mdp, data = chain_data()
    dyn_only, _ = data.split_by_kind()
    q, pi = fit_fqi(dyn_only, mdp.discount)
    assert np.all(q.values == 0.0)
    np.testing.assert_allclose(pi.probs, 0.5)


def test_fqi_plus_value_off_goal_never_exceeds_goal():
    mdp = random_cgo(np.random.default_rng(0), 6, 3, 2, resolution=4, goal_prob=0.3)
    data = augment_compact(exhaustive_dyn(mdp, 4), exhaustive_goal(mdp))
    q, _ = fit_fqi(data, mdp.discount)
    plus = q.values[:, :6, 3]
    goal = mdp.goal_member
    assert plus[~goal].max(initial=0.0) <= plus[goal].min()


def test_fqi_rejects_zero_iterations():
    with pytest.raises(ValueError):
        fit_fqi(chain_data()[1], 0.9, iters=0)


def test_pevi_without_penalty_equals_fqi():
    mdp = random_cgo(np.random.default_rng(1), 7, 3, 2, resolution=5)
    data = augment_compact(exhaustive_dyn(mdp, 5), exhaustive_goal(mdp))
    q1, _ = fit_fqi(data, mdp.discount, iters=2000)
    q2, _ = fit_pevi(data, penalty=0.0, discount=mdp.discount)
    assert np.abs(q1.values - q2.values).max() <= 1e-6


def test_pevi_unvisited_plus_is_zero(medium_data):
    dyn, goal = medium_data
    data = augment_compact(dyn, goal)
    q, pi = fit_pevi(data)
    covered = np.zeros((goal.n_contexts, goal.n_states), dtype=bool)
    covered[goal.c, goal.s] = True
    assert np.all(q.values[:, :-1, -1][~covered] == 0.0)
    assert pi.action_space_size == dyn.n_actions


def test_pevi_rejects_negative_penalty():
    with pytest.raises(ValueError):
        fit_pevi(chain_data()[1], penalty=-1.0)


def test_pevi_estimate_is_pessimistic(medium_env, medium_data):
    data = coda_dataset(*medium_data)
    q, pi = fit_pevi(data)
    est = value_at_start(q, pi, medium_env.mdp.init_dist)
    assert est <= expected_return(medium_env.mdp, pi) + 0.05


def test_iql_validates_hyperparameters():
    data = chain_data()[1]
    for kw in ({"expectile": 1.0}, {"expectile": 0.3}, {"inv_temp": 0.0}):
        with pytest.raises(ValueError):
            fit_iql_tabular(data, 0.9, **kw)


def test_iql_half_expectile_matches_fqi_policy():
    mdp, data = chain_data()
    _, pi_fqi = fit_fqi(data, mdp.discount)
    _, pi_iql = fit_iql_tabular(data, mdp.discount, expectile=0.5)
    np.testing.assert_array_equal(pi_iql.probs[0, :2].argmax(axis=1), pi_fqi.probs[0, :2].argmax(axis=1))


def test_iql_ignores_unobserved_actions():
    mdp = make_chain()
    dyn = DynDataset([0, 1, 2], [RIGHT, RIGHT, RIGHT], [1, 2, 2], 3, 2)
    data = augment_compact(dyn, exhaustive_goal(mdp))
    _, pi = fit_iql_tabular(data, mdp.discount)
    assert np.all(pi.probs[0, :3, 0] == 0.0)


def test_extract_policy_ties_and_flat_rows():
    q = np.zeros((1, 4, 4))
    q[0, 0] = [0.3, 0.3, 0.3, 0.9]  # flat over real actions; a+ column ignored
    q[0, 1] = [0.1, 0.4, 0.0, 0.0]
    q[0, 2] = [0.2, 0.7, 0.7, 0.0]  # partial tie goes to the lowest index
    pi = extract_policy(q, 3)
    np.testing.assert_allclose(pi.probs[0, 0], [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_array_equal(pi.probs[0, 1], [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(pi.probs[0, 2], [0.0, 1.0, 0.0])


def test_as_labeled_accepts_sources(medium_data):
    dyn, goal = medium_data
    sampler = AugmentedBatchSampler(dyn.subset(50), goal)
    assert as_labeled(sampler).total_weight == 50 * len(goal) + len(goal)
    parts = augment_full(dyn.subset(5), goal)
    assert len(as_labeled(list(parts))) == 5 * len(goal) + len(goal)
    with pytest.raises(TypeError):
        as_labeled("nope")


# ---------------------------------------------------------------------------
# PSPI
# ---------------------------------------------------------------------------


def test_pspi_goal_loss_trivial_cases():
    mdp, data = chain_data()
    dyn, goal = data.split_by_kind()
    state = PspiState.zeros(1, 3, 2)
    state.g[:] = 1.0
    assert pspi_losses(state, dyn, goal, 0.9)[1] == 0.0
    state.g[:] = 0.0
    assert pspi_losses(state, dyn, goal, 0.9)[1] == 1.0


def test_pspi_losses_vanish_at_true_values():
    mdp, data = chain_data()
    dyn, goal = data.split_by_kind()
    pi = PolicyTable.uniform(mdp)
    q_bar = policy_eval_exact(build_augmented(mdp), extend_policy(pi, mdp)).values
    state = PspiState(q_bar[:, :, :2], mdp.goal_rewards(), np.zeros((1, 4, 2)))
    l_dyn, l_goal = pspi_losses(state, dyn, goal, mdp.discount)
    assert l_dyn <= 1e-20 and l_goal == 0.0


def test_pspi_losses_need_both_kinds():
    _, data = chain_data()
    dyn, goal = data.split_by_kind()
    with pytest.raises(ValueError):
        pspi_losses(PspiState.zeros(1, 3, 2), dyn, dyn.take(np.zeros(len(dyn), bool)), 0.9)


def test_pspi_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    mdp = random_cgo(rng, 4, 2, 2, resolution=4, goal_prob=0.3)
    data = augment_compact(exhaustive_dyn(mdp, 4), exhaustive_goal(mdp))
    dyn, goal = data.split_by_kind()
    game = _Game(dyn, goal, mdp.discount)
    state = PspiState(rng.uniform(0.1, 0.9, (2, 5, 2)), rng.uniform(0.1, 0.9, (2, 5)), rng.normal(size=(2, 5, 2)), lam_dyn=3.0)
    d0 = np.zeros((2, 5))
    d0[:, :4] = mdp.init_dist.T
    probs = state.policy_probs

    def objective(f, g):
        s = PspiState(f, g, state.logits, lam_dyn=state.lam_dyn)
        excess, _, _ = game.excess(s, probs)
        return float(np.sum(d0 * np.einsum("csa,csa->cs", f, probs))) + s.lam_dyn * excess

    grad_f, grad_g, _ = game.gradients(state, probs, d0)
    eps = 1e-6
    for idx in np.ndindex(state.f.shape):
        fp, fm = state.f.copy(), state.f.copy()
        fp[idx] += eps
        fm[idx] -= eps
        num = (objective(fp, state.g) - objective(fm, state.g)) / (2 * eps)
        assert grad_f[idx] == pytest.approx(num, abs=1e-6)
    for idx in np.ndindex(state.g.shape):
        if idx[1] == 4:
            continue  # s+ is pinned
        gp, gm = state.g.copy(), state.g.copy()
        gp[idx] += eps
        gm[idx] -= eps
        num = (objective(state.f, gp) - objective(state.f, gm)) / (2 * eps)
        assert grad_g[idx] == pytest.approx(num, abs=1e-6)


def test_pspi_chain_regret_and_pessimism():
    mdp, data = chain_data()
    res = solve_pspi(data, mdp.init_dist, mdp.discount)
    J = expected_return(mdp, res.policy)
    assert 0.81 - J <= 0.05
    assert res.value_estimate <= J + 0.05
    assert res.history[-1]["l_goal"] <= 1e-6 + 1e-12
    assert res.policy.action_space_size == 2


def test_pspi_huge_tolerance_is_pure_pessimism():
    rng = np.random.default_rng(3)
    mdp = random_cgo(rng, 5, 3, 2, resolution=4, goal_prob=0.3)
    data = augment_compact(exhaustive_dyn(mdp, 4), exhaustive_goal(mdp))
    res = solve_pspi(data, mdp.init_dist, mdp.discount, rounds=50, eps_dyn=1e6)
    assert res.value_estimate <= 1e-9
    returns = [expected_return(mdp, random_policy(rng, mdp)) for _ in range(20)]
    assert res.value_estimate <= min(returns)


def regret_of(mdp, pi):
    return expected_return(mdp, solve_optimal(mdp)[1]) - expected_return(mdp, pi)


def test_pspi_one_step_goal():
    P = np.zeros((2, 1, 2))
    P[:, 0, 1] = 1.0
    mdp = ContextualMdp(P, [[False, True]], 0.9, [[1.0], [0.0]])
    _, data = chain_data(mdp)
    res = solve_pspi(data, mdp.init_dist, mdp.discount, rounds=20)
    assert regret_of(mdp, res.policy) == 0.0


def test_pspi_divergence_guard():
    mdp, data = chain_data()
    with pytest.raises(SolverDivergence) as err:
        solve_pspi(data, mdp.init_dist, mdp.discount, multiplier_lr=1e9)
    assert "lagrangian" in err.value.diagnostics


def test_pspi_rejects_bad_arguments():
    mdp, data = chain_data()
    with pytest.raises(ValueError):
        solve_pspi(data, mdp.init_dist, mdp.discount, eps_dyn=-1.0)
    dyn, _ = data.split_by_kind()
    with pytest.raises(ValueError):
        solve_pspi(dyn, mdp.init_dist, mdp.discount)


def test_pspi_four_rooms_pessimism(medium_env, medium_data):
    res = solve_pspi(coda_dataset(*medium_data), medium_env.mdp.init_dist, medium_env.mdp.discount)
    assert res.value_estimate <= expected_return(medium_env.mdp, res.policy) + 0.05


def test_iql_regret_shrinks_with_more_dynamics():
    cfg = ExperimentConfig()
    cfg.env.relation = "random_cells"
    cfg.method.solver = "iql"
    env = build_env(cfg)
    medians = []
    for n in (1000, 16000):
        cfg.data.n_dyn = n
        medians.append(np.median([run_seed(cfg, s, env).regret for s in range(5)]))
    assert medians[1] < medians[0]
