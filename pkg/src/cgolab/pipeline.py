"""End-to-end experiment runs: build env, generate data, train a method, evaluate."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .coda import AugmentedBatchSampler, LabeledDataset
from .config import ExperimentConfig, MethodConfig
from .data import BEHAVIORS, DynDataset, GoalDataset, collect_dyn, sample_goal_pairs
from .envs import CgoEnv, ContextRelation, load_map, make_env, sample_test_contexts
from .evaluation import ExperimentReport, PolicyAgent, estimate_concentrability, evaluate_policy
from .mdp import PolicyTable
from .oracle import expected_return, solve_optimal
from .solvers import fit_fqi, fit_iql_tabular, fit_pevi, solve_pspi, value_at_start

log = logging.getLogger(__name__)

# independent RNG streams per seed
STREAM_DYN, STREAM_GOAL, STREAM_TRAIN, STREAM_EVAL = 0, 1, 2, 3


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def build_env(cfg: ExperimentConfig) -> CgoEnv:
    kind = cfg.env.relation
    if kind == "four_rooms":
        rel = ContextRelation.four_rooms()
    elif kind == "random_cells":
        rel = ContextRelation.random_cells(cfg.env.radius)
    elif kind == "single_goal":
        rel = ContextRelation.single_goal()
    else:
        raise ValueError(f"unknown relation {kind!r}")
    return make_env(load_map(cfg.env.map, slip=cfg.env.slip), rel, cfg.env.discount)


def horizon_for(cfg: ExperimentConfig, env: CgoEnv) -> int:
    return cfg.eval.horizon or env.default_horizon


def generate_data(cfg: ExperimentConfig, env: CgoEnv, seed: int) -> tuple:
    if cfg.data.behavior not in BEHAVIORS:
        raise ValueError(f"unknown behavior {cfg.data.behavior!r}; valid: {', '.join(BEHAVIORS)}")
    dyn = collect_dyn(env.mdp, BEHAVIORS[cfg.data.behavior], cfg.data.n_dyn, rng_for(seed, STREAM_DYN), env.default_horizon)
    goal = sample_goal_pairs(env, cfg.data.n_goal, cfg.data.perturb, rng_for(seed, STREAM_GOAL))
    dyn.meta["seed"] = goal.meta["seed"] = int(seed)
    return dyn, goal


def coda_dataset(dyn: DynDataset, goal: GoalDataset, goal_ratio: float = 0.5, budget: float | None = None) -> LabeledDataset:
    """Expected tuple counts of ``budget`` draws from the augmented sampler.

    The default budget 2 * |D_dyn| * |D_goal| makes the zero-reward part equal
    the full cross product at the balanced ratio 0.5.
    """
    sampler = AugmentedBatchSampler(dyn, goal, goal_ratio)
    data = sampler.distribution()
    data.weight = data.weight * (budget if budget is not None else 2.0 * len(dyn) * len(goal))
    return data


def make_solver(m: MethodConfig, discount: float, init_dist: np.ndarray):
    """A callable LabeledDataset -> (QTable or None, PolicyTable, value estimate at d0)."""

    def run(data: LabeledDataset):
        if m.solver == "pevi":
            q, pi = fit_pevi(data, penalty=m.penalty, discount=discount, iters=m.iters)
        elif m.solver == "fqi":
            q, pi = fit_fqi(data, discount, iters=m.iters)
        elif m.solver == "iql":
            q, pi = fit_iql_tabular(data, discount, m.expectile, m.inv_temp, steps=m.iters)
        elif m.solver == "pspi":
            res = solve_pspi(data, init_dist, discount, rounds=m.pspi_rounds, eps_dyn=m.pspi_eps_dyn)
            return None, res.policy, res.value_estimate
        else:
            raise ValueError(f"unknown solver {m.solver!r}")
        estimate = value_at_start(q, pi, init_dist) if init_dist.shape[1] == q.values.shape[0] else float("nan")
        return q, pi, estimate

    return run


@dataclass
class TrainedMethod:
    name: str
    agent: object
    policy: PolicyTable | None = None
    q: object = None
    value_estimate: float = float("nan")
    reward_model: object = None
    info: dict = field(default_factory=dict)


def train_method(cfg: ExperimentConfig, env: CgoEnv, dyn: DynDataset, goal: GoalDataset, seed: int) -> TrainedMethod:
    m = cfg.method
    solver = make_solver(m, env.mdp.discount, env.mdp.init_dist)
    rng = rng_for(seed, STREAM_TRAIN)
    reward_model = None
    if m.name == "coda":
        data = coda_dataset(dyn, goal, m.goal_ratio)
    elif m.name == "oracle_reward":
        data = baselines.oracle_reward_label(env, dyn, goal.c)
    elif m.name in ("rp", "uds_rp", "pds"):
        if m.name == "rp":
            reward_model = baselines.fit_rp(env, goal, rng, m.smoothing, m.rp_percentile, m.bandwidth)
        elif m.name == "uds_rp":
            reward_model = baselines.fit_uds_rp(env, goal, dyn, rng, m.smoothing, m.rp_percentile, m.bandwidth)
        else:
            reward_model = baselines.fit_pds(env, goal, rng, m.ensemble, m.kappa, m.pds_percentile, m.smoothing, m.bandwidth)
        data = baselines.label_with_reward(reward_model, dyn, goal.c)
    elif m.name == "goal_pred":
        gc_solver = make_solver(m, env.mdp.discount, np.zeros((env.mdp.n_states, env.mdp.n_states)))
        if m.solver == "pspi":
            raise ValueError("goal_pred needs a value-based solver (pevi, fqi or iql)")
        predictor = baselines.fit_goal_prediction(goal, dyn, lambda d: gc_solver(d)[:2], rng, m.smoothing, m.her_relabels)
        agent = baselines.GoalPredictionAgent(predictor, env)
        return TrainedMethod(m.name, agent, info={"relabels": m.her_relabels})
    else:
        raise ValueError(f"unknown method {m.name!r}")
    q, policy, estimate = solver(data)
    return TrainedMethod(m.name, PolicyAgent(policy), policy, q, estimate, reward_model,
                         {"labeled_rows": len(data), "positive_weight": float(np.sum(data.weight * data.r))})


def draw_test_contexts(cfg: ExperimentConfig, env: CgoEnv, seed: int) -> list:
    return sample_test_contexts(env, cfg.eval.test_contexts, cfg.eval.episodes, rng_for(seed, STREAM_EVAL))


def evaluate_method(cfg: ExperimentConfig, env: CgoEnv, trained: TrainedMethod, seed: int):
    rng = rng_for(seed, STREAM_EVAL)
    contexts = sample_test_contexts(env, cfg.eval.test_contexts, cfg.eval.episodes, rng)
    return evaluate_policy(env.mdp, trained.agent, contexts, cfg.eval.episodes, horizon_for(cfg, env), rng)


@dataclass
class SeedRun:
    seed: int
    trained: TrainedMethod
    success_rate: float
    regret: float
    mean_steps: float
    warnings: list = field(default_factory=list)


def regret(env: CgoEnv, policy: PolicyTable) -> float:
    """Exact J* - J(pi) in the original MDP."""
    _, pi_star = solve_optimal(env.mdp)
    return expected_return(env.mdp, pi_star) - expected_return(env.mdp, policy)


def run_seed(cfg: ExperimentConfig, seed: int, env: CgoEnv | None = None, data=None) -> SeedRun:
    env = env if env is not None else build_env(cfg)
    dyn, goal = data if data is not None else generate_data(cfg, env, seed)
    trained = train_method(cfg, env, dyn, goal, seed)
    result = evaluate_method(cfg, env, trained, seed)
    warnings = []
    reg = float("nan")
    if trained.policy is not None:
        reg = regret(env, trained.policy)
        if cfg.method.name == "coda":
            _, pi_star = solve_optimal(env.mdp)
            conc = estimate_concentrability(env.mdp, pi_star, dyn, goal)
            if not conc.goal_covered:
                warnings.append("optimal policy reaches goal states absent from the goal data")
    if isinstance(trained.agent, baselines.GoalPredictionAgent) and trained.agent.infeasible_count:
        warnings.append(f"{trained.agent.infeasible_count} predicted goals lie outside their context's goal set")
    for w in warnings:
        log.warning("seed %d %s: %s", seed, cfg.method.name, w)
    return SeedRun(seed, trained, result.success_rate, reg, result.mean_steps, warnings)


def run_experiment(cfg: ExperimentConfig, report: ExperimentReport | None = None, env_label: str | None = None) -> ExperimentReport:
    report = report if report is not None else ExperimentReport()
    env = build_env(cfg)
    label = env_label or f"{cfg.env.map}/{cfg.env.relation}"
    for seed in cfg.eval.seeds:
        run = run_seed(cfg, seed, env)
        report.rows.append(
            {
                "env": label,
                "method": cfg.method.name,
                "seed": int(seed),
                "success_rate": run.success_rate,
                "episodes": cfg.eval.episodes,
                "mean_steps": run.mean_steps,
            }
        )
    return report


__all__ = [
    "SeedRun",
    "TrainedMethod",
    "build_env",
    "draw_test_contexts",
    "coda_dataset",
    "evaluate_method",
    "generate_data",
    "horizon_for",
    "make_solver",
    "regret",
    "rng_for",
    "run_experiment",
    "run_seed",
    "train_method",
]
