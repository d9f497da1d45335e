"""Tabular offline RL solvers over labeled augmented-MDP tuples.

All solvers read a :class:`~cgolab.coda.LabeledDataset` (or anything
:func:`as_labeled` accepts) and return tables over augmented actions plus a
policy over the ORIGINAL actions; a+ never receives probability.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .coda import AugmentedBatchSampler, LabeledDataset, augment_compact
from .mdp import PolicyTable
from .oracle import QTable

log = logging.getLogger(__name__)

CONVERGE_TOL = 1e-12
EXPECTILE_TOL = 1e-8
DIVERGENCE_LIMIT = 1e3
GOAL_LOSS_TOL = 1e-6


class SolverDivergence(RuntimeError):
    """Raised when a game-based solver's losses blow up."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


def as_labeled(source) -> LabeledDataset:
    """Coerce a dataset, a list of dataset parts, or a sampler into one dataset."""
    if isinstance(source, LabeledDataset):
        return source
    if isinstance(source, AugmentedBatchSampler):
        return augment_compact(source.dyn, source.goal)
    if isinstance(source, (tuple, list)) and source and all(isinstance(p, LabeledDataset) for p in source):
        return LabeledDataset.concat(list(source))
    raise TypeError(f"cannot build labeled tuples from {type(source).__name__}")


# ---------------------------------------------------------------------------
# empirical model
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EmpiricalModel:
    """Weighted counts, mean rewards and a sparse kernel over (c, s, a) -> (c, s').

    Row weights are treated as multiplicities. Terminal tuples lead to s+.
    """

    counts: np.ndarray
    reward: np.ndarray
    kernel: sparse.csr_matrix
    n_states: int
    n_actions: int
    n_contexts: int

    @classmethod
    def from_labeled(cls, data: LabeledDataset) -> "EmpiricalModel":
        if len(data) == 0:
            raise ValueError("labeled data is empty")
        S, A, C = data.n_states, data.n_actions, data.n_contexts
        width = A + 1
        if data.a.max() > A or data.s.max() >= S or data.c.max() >= C:
            raise ValueError("labeled tuple index out of range")
        rows = (data.c * (S + 1) + data.s) * width + data.a
        nxt = np.where(data.terminal, S, data.s_next)
        cols = data.c * (S + 1) + nxt
        n_rows = C * (S + 1) * width
        counts = np.bincount(rows, weights=data.weight, minlength=n_rows)
        rsum = np.bincount(rows, weights=data.weight * data.r, minlength=n_rows)
        inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
        K = sparse.csr_matrix((data.weight, (rows, cols)), shape=(n_rows, C * (S + 1)))
        K.sum_duplicates()
        K = sparse.diags(inv) @ K
        shape = (C, S + 1, width)
        return cls(counts.reshape(shape), (rsum * inv).reshape(shape), K.tocsr(), S, A, C)

    @property
    def visited(self) -> np.ndarray:
        return self.counts > 0

    def expected_next(self, V: np.ndarray) -> np.ndarray:
        """E_{P-hat}[V(x')] per (c, s, a); zero on unvisited rows."""
        return (self.kernel @ V.ravel()).reshape(self.counts.shape)

    def backup(self, V: np.ndarray, discount: float) -> np.ndarray:
        return np.where(self.visited, self.reward + discount * self.expected_next(V), 0.0)


def _state_max(Q: np.ndarray, n_states: int) -> np.ndarray:
    V = Q.max(axis=2)
    V[:, n_states] = 0.0
    return V


def extract_policy(q_values: np.ndarray, n_actions: int, tol: float = 1e-9) -> PolicyTable:
    """Greedy over original actions, ties to the lowest index.

    Rows where every real action has the same value carry no preference and
    come out uniform.
    """
    real = q_values[:, :-1, :n_actions]
    best = real.max(axis=2, keepdims=True)
    flat = (best - real.min(axis=2, keepdims=True)) <= tol
    idx = np.argmax(real >= best - tol, axis=2)
    rows = np.zeros_like(real)
    np.put_along_axis(rows, idx[..., None], 1.0, axis=2)
    rows = np.where(flat, 1.0 / n_actions, rows)
    return PolicyTable.from_state_rows(rows, augmented=False)


def value_at_start(q: QTable, policy: PolicyTable, init_dist: np.ndarray) -> float:
    """The solver's own estimate Q(d0, pi) with pi over original actions."""
    A = policy.action_space_size
    S = init_dist.shape[0]
    v = np.einsum("csa,csa->cs", q.values[:, :S, :A], policy.probs[:, :S])
    return float(np.sum(init_dist.T * v))


def _check_discount(discount: float) -> None:
    if not 0.0 <= discount < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {discount}")


# ---------------------------------------------------------------------------
# fitted Q iteration and count-pessimistic value iteration
# ---------------------------------------------------------------------------


def fit_fqi(source, discount: float, iters: int = 500) -> tuple:
    """Averaged Bellman-optimality targets on the empirical model."""
    if iters < 1:
        raise ValueError("fit_fqi needs at least one iteration")
    _check_discount(discount)
    model = EmpiricalModel.from_labeled(as_labeled(source))
    Q = np.zeros(model.counts.shape)
    for _ in range(iters):
        Q_new = model.backup(_state_max(Q, model.n_states), discount)
        done = np.abs(Q_new - Q).max() <= CONVERGE_TOL
        Q = Q_new
        if done:
            break
    return QTable(Q, augmented=True), extract_policy(Q, model.n_actions)


def fit_pevi(source, penalty: float = 1.0, discount: float = 0.99, iters: int = 5000) -> tuple:
    """Value iteration with a count penalty b / sqrt(N), clipped to [0, 1].

    Unvisited (x, a) pairs are valued 0, so a+ off the goal data is never
    preferred.
    """
    if penalty < 0:
        raise ValueError(f"penalty must be non-negative, got {penalty}")
    if iters < 1:
        raise ValueError("fit_pevi needs at least one iteration")
    _check_discount(discount)
    model = EmpiricalModel.from_labeled(as_labeled(source))
    bonus = penalty / np.sqrt(np.maximum(model.counts, 1.0))
    Q = np.zeros(model.counts.shape)
    for _ in range(iters):
        target = model.backup(_state_max(Q, model.n_states), discount) - bonus
        Q_new = np.where(model.visited, np.clip(target, 0.0, 1.0), 0.0)
        done = np.abs(Q_new - Q).max() <= CONVERGE_TOL
        Q = Q_new
        if done:
            break
    return QTable(Q, augmented=True), extract_policy(Q, model.n_actions)


# ---------------------------------------------------------------------------
# tabular expectile backup
# ---------------------------------------------------------------------------


def _expectile(Q: np.ndarray, mu: np.ndarray, tau: float, V0: np.ndarray) -> np.ndarray:
    """Weighted tau-expectile of Q along the last axis by reweighted averaging."""
    V = V0.copy()
    has = mu.sum(axis=-1) > 0
    for _ in range(200):
        w = mu * np.where(Q >= V[..., None], tau, 1.0 - tau)
        tot = w.sum(axis=-1)
        V_new = np.where(has, np.divide((w * Q).sum(axis=-1), tot, out=np.zeros_like(tot), where=tot > 0), 0.0)
        if np.abs(V_new - V).max() <= EXPECTILE_TOL:
            return V_new
        V = V_new
    return V


def fit_iql_tabular(
    source,
    discount: float = 0.99,
    expectile: float = 0.9,
    inv_temp: float = 10.0,
    steps: int = 5000,
) -> tuple:
    """Expectile value fit, SARSA-style Q targets and advantage-weighted policy.

    The advantage is scaled by 1 / (1 - discount) before the exponent so the
    temperature matches a -1/0 per-step reward scale. Policy mass only goes to
    actions observed at x; rows without observed real actions are uniform.
    """
    if not 0.5 <= expectile < 1.0:
        raise ValueError(f"expectile must lie in [0.5, 1), got {expectile}")
    if inv_temp <= 0:
        raise ValueError(f"inv_temp must be positive, got {inv_temp}")
    if steps < 1:
        raise ValueError("fit_iql_tabular needs at least one step")
    _check_discount(discount)
    model = EmpiricalModel.from_labeled(as_labeled(source))
    S, A = model.n_states, model.n_actions
    mu = model.counts
    Q = np.zeros(mu.shape)
    V = np.zeros(mu.shape[:2])
    for _ in range(steps):
        V_new = _expectile(Q, mu, expectile, V)
        V_new[:, S] = 0.0
        Q_new = model.backup(V_new, discount)
        done = max(np.abs(Q_new - Q).max(), np.abs(V_new - V).max()) <= EXPECTILE_TOL
        Q, V = Q_new, V_new
        if done:
            break

    real_mu = mu[:, :S, :A]
    seen = real_mu > 0
    adv = (Q[:, :S, :A] - V[:, :S, None]) * inv_temp / (1.0 - discount)
    adv = np.where(seen, adv, -np.inf)
    row_max = adv.max(axis=2, keepdims=True)
    any_seen = seen.any(axis=2, keepdims=True)
    logits = np.where(seen, adv - np.where(any_seen, row_max, 0.0), -np.inf)
    weights = np.where(seen, real_mu * np.exp(logits), 0.0)
    total = weights.sum(axis=2, keepdims=True)
    rows = np.where(any_seen, weights / np.where(total > 0, total, 1.0), 1.0 / A)
    return QTable(Q, augmented=True), PolicyTable.from_state_rows(rows, augmented=False)


# ---------------------------------------------------------------------------
# Lagrangian tabular PSPI
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PspiState:
    """Adversary tables f (real actions) and g (a+ head), policy logits, dynamics multiplier."""

    f: np.ndarray
    g: np.ndarray
    logits: np.ndarray
    lam_dyn: float = 1.0

    def __post_init__(self):
        self.f = np.clip(np.asarray(self.f, dtype=np.float64), 0.0, 1.0)
        self.g = np.clip(np.asarray(self.g, dtype=np.float64), 0.0, 1.0)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.lam_dyn < 0:
            raise ValueError("the Lagrange multiplier must be non-negative")

    @classmethod
    def zeros(cls, n_contexts: int, n_states: int, n_actions: int, **kw) -> "PspiState":
        return cls(
            np.zeros((n_contexts, n_states + 1, n_actions)),
            np.zeros((n_contexts, n_states + 1)),
            np.zeros((n_contexts, n_states + 1, n_actions)),
            **kw,
        )

    @property
    def policy_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=2, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=2, keepdims=True)

    def f_bar(self) -> np.ndarray:
        """f over real actions with g in the a+ column."""
        return np.concatenate([self.f, self.g[..., None]], axis=2)

    def next_values(self, probs: np.ndarray | None = None) -> np.ndarray:
        """max(g(x), f(x, pi)) with s+ pinned to 0."""
        probs = self.policy_probs if probs is None else probs
        h = np.maximum(self.g, np.einsum("csa,csa->cs", self.f, probs))
        h[:, -1] = 0.0
        return h


def pspi_losses(state: PspiState, dyn: LabeledDataset, goal: LabeledDataset, discount: float) -> tuple:
    """(l_dyn, l_goal) as weighted means over the two tuple kinds."""
    if len(dyn) == 0 or len(goal) == 0:
        raise ValueError("both dynamics and goal tuples are required")
    h = state.next_values()
    y = discount * h[dyn.c, dyn.s_next]
    res = state.f[dyn.c, dyn.s, dyn.a] - y
    l_dyn = float(np.average(res**2, weights=dyn.weight))
    l_goal = float(np.average((state.g[goal.c, goal.s] - 1.0) ** 2, weights=goal.weight))
    return l_dyn, l_goal


@dataclass
class PspiResult:
    policy: PolicyTable
    value_estimate: float
    state: PspiState
    history: list = field(default_factory=list)


class _Game:
    """Quantities shared by every round: the dynamics model and goal weights."""

    def __init__(self, dyn: LabeledDataset, goal: LabeledDataset, discount: float):
        S, A, C = dyn.n_states, dyn.n_actions, dyn.n_contexts
        self.S, self.A, self.C = S, A, C
        self.discount = discount
        model = EmpiricalModel.from_labeled(dyn)
        self.mass = model.counts[:, :, :A] / model.counts.sum()
        self.visited = self.mass > 0
        rows = np.arange(C * (S + 1) * (A + 1)).reshape(C, S + 1, A + 1)[:, :, :A].ravel()
        self.P = model.kernel[rows]
        gw = np.bincount(goal.c * (S + 1) + goal.s, weights=goal.weight, minlength=C * (S + 1))
        self.goal_mass = (gw / gw.sum()).reshape(C, S + 1)
        # inflow of data mass into each next state, the curvature scale for g
        self.inflow = (self.P.T @ self.mass.ravel()).reshape(C, S + 1)

    def bellman_target(self, h: np.ndarray) -> np.ndarray:
        return self.discount * (self.P @ h.ravel()).reshape(self.C, self.S + 1, self.A)

    def excess(self, state: PspiState, probs: np.ndarray) -> tuple:
        """Excess dynamics loss against the exact per-(x, a) inner minimizer."""
        h = state.next_values(probs)
        delta = np.where(self.visited, state.f - self.bellman_target(h), 0.0)
        return float(np.sum(self.mass * delta**2)), delta, h

    def goal_loss(self, state: PspiState) -> float:
        return float(np.sum(self.goal_mass * (state.g - 1.0) ** 2))

    def project_goal(self, g: np.ndarray, eps_goal: float) -> np.ndarray:
        """Exact projection of g onto {l_goal <= eps_goal} along the goal support."""
        dev = g - 1.0
        loss = float(np.sum(self.goal_mass * dev**2))
        if loss <= eps_goal:
            return g
        return np.where(self.goal_mass > 0, 1.0 + dev * np.sqrt(eps_goal / loss), g)

    def gradients(self, state: PspiState, probs: np.ndarray, d0: np.ndarray) -> tuple:
        """d/d(f, g) of f(d0, pi) + lam_dyn * excess."""
        excess, delta, h = self.excess(state, probs)
        md = self.mass * delta
        grad_f = d0[..., None] * probs + state.lam_dyn * 2.0 * md
        # through the targets: d excess / d h = -2 gamma P^T (m delta)
        dh = -2.0 * self.discount * (self.P.T @ md.ravel()).reshape(self.C, self.S + 1)
        dh[:, -1] = 0.0
        fpi = np.einsum("csa,csa->cs", state.f, probs)
        use_g = state.g >= fpi
        grad_f += state.lam_dyn * (dh * ~use_g)[..., None] * probs
        grad_g = state.lam_dyn * dh * use_g
        return grad_f, grad_g, excess


def solve_pspi(
    source,
    init_dist: np.ndarray,
    discount: float,
    rounds: int = 400,
    inner_steps: int = 10,
    adversary_lr: float = 0.2,
    policy_lr: float = 5.0,
    multiplier_lr: float = 2000.0,
    eps_dyn: float = 1e-4,
    eps_goal: float = GOAL_LOSS_TOL,
    init_multiplier: float = 10.0,
) -> PspiResult:
    """Primal-dual tabular instantiation of the pessimistic two-player game.

    Per round the adversary takes ``inner_steps`` preconditioned projected
    gradient steps on (f, g), with g projected back onto the goal-loss ball
    after each step. The dynamics multiplier ascends its constraint violation
    and the policy takes a mirror-ascent step on f. The returned
    policy is the average over rounds; ``value_estimate`` is f at d0 under it.
    """
    if eps_dyn < 0 or eps_goal < 0:
        raise ValueError("constraint tolerances must be non-negative")
    if rounds < 1 or inner_steps < 1:
        raise ValueError("rounds and inner_steps must be positive")
    _check_discount(discount)
    data = as_labeled(source)
    dyn, goal = data.split_by_kind()
    if len(dyn) == 0 or len(goal) == 0:
        raise ValueError("solve_pspi needs both dynamics and goal tuples")
    game = _Game(dyn, goal, discount)
    S, C = game.S, game.C
    d0 = np.zeros((C, S + 1))
    d0[:, :S] = np.asarray(init_dist, dtype=np.float64).T
    state = PspiState.zeros(C, S, game.A, lam_dyn=init_multiplier)
    avg = np.zeros_like(state.logits)
    history = []
    for t in range(rounds):
        probs = state.policy_probs
        for _ in range(inner_steps):
            grad_f, grad_g, _ = game.gradients(state, probs, d0)
            # diagonal preconditioning by the curvature of the penalty terms
            pre_f = 2.0 * state.lam_dyn * game.mass + d0[..., None] + 1e-3
            pre_g = 2.0 * state.lam_dyn * discount**2 * game.inflow + 1e-3
            state.f = np.clip(state.f - adversary_lr * grad_f / pre_f, 0.0, 1.0)
            g = np.clip(state.g - adversary_lr * grad_g / pre_g, 0.0, 1.0)
            state.g = game.project_goal(g, eps_goal)
        excess, _, _ = game.excess(state, probs)
        l_goal = game.goal_loss(state)
        objective = float(np.sum(d0 * np.einsum("csa,csa->cs", state.f, probs)))
        lagrangian = objective + state.lam_dyn * (excess - eps_dyn)
        # the tolerance offset is a constant shift, so only the penalized magnitude is guarded
        scale = objective + state.lam_dyn * excess
        if not np.isfinite(lagrangian) or abs(scale) > DIVERGENCE_LIMIT:
            raise SolverDivergence(
                "PSPI losses diverged",
                {"round": t, "lagrangian": lagrangian, "excess": excess, "l_goal": l_goal,
                 "lam_dyn": state.lam_dyn},
            )
        state.lam_dyn = max(0.0, state.lam_dyn + multiplier_lr * (excess - eps_dyn))
        state.logits = state.logits + policy_lr * state.f
        avg += probs
        history.append({"round": t, "objective": objective, "excess": excess, "l_goal": l_goal})
    probs = avg / rounds
    policy = PolicyTable(probs, augmented=False)
    estimate = float(np.sum(d0 * np.einsum("csa,csa->cs", state.f, probs)))
    log.debug("pspi done: estimate %.4f excess %.3g l_goal %.3g", estimate, history[-1]["excess"], history[-1]["l_goal"])
    return PspiResult(policy, estimate, state, history)


__all__ = [
    "EmpiricalModel",
    "PspiResult",
    "PspiState",
    "SolverDivergence",
    "as_labeled",
    "extract_policy",
    "fit_fqi",
    "fit_iql_tabular",
    "fit_pevi",
    "pspi_losses",
    "solve_pspi",
    "value_at_start",
]
