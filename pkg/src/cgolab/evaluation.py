"""Rollout evaluation, seed aggregation, coverage diagnostics and report files."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coda import LabeledDataset
from .data import DynDataset, GoalDataset
from .mdp import ContextualMdp, PolicyTable

REPORT_FORMATS = ("csv", "md", "svg")
CSV_FIELDS = ("env", "method", "seed", "success_rate", "episodes", "mean_steps")


class PolicyAgent:
    """Adapter giving a PolicyTable the vectorized agent interface."""

    def __init__(self, policy: PolicyTable):
        if policy.augmented:
            raise ValueError("evaluation runs in the original MDP; pass an original-action policy")
        self.policy = policy

    def begin(self, contexts: np.ndarray, rng: np.random.Generator) -> None:
        pass

    def action_probs(self, states: np.ndarray, contexts: np.ndarray) -> np.ndarray:
        return self.policy.probs[contexts, states]


@dataclass
class EvalResult:
    success_rate: float
    episodes: int
    mean_steps: float
    contexts: list = field(default_factory=list)


def _as_agent(policy):
    return PolicyAgent(policy) if isinstance(policy, PolicyTable) else policy


def _draw(cum: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(cum))[:, None]
    return np.minimum((u >= cum).sum(axis=1), cum.shape[1] - 1)


def evaluate_policy(
    mdp: ContextualMdp,
    policy,
    contexts,
    episodes: int = 100,
    horizon: int = 100,
    rng: np.random.Generator | None = None,
) -> EvalResult:
    """Success rate (0-100) of entering the goal set within ``horizon`` steps.

    Episode i uses test context ``contexts[i % len]`` after dropping contexts
    whose goal set contains every start state (e.g. the start room in
    four_rooms); the start is drawn from d0's state marginal restricted to
    states outside the goal set.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    contexts = [int(c) for c in contexts]
    if not contexts:
        raise ValueError("no test contexts given")
    rng = rng if rng is not None else np.random.default_rng()
    agent = _as_agent(policy)
    goal = mdp.goal_member
    marginal = mdp.init_dist.sum(axis=1)
    valid = [c for c in contexts if (marginal * ~goal[c]).sum() > 0]
    if not valid:
        raise ValueError("every test context has its goal set covering all start states")

    ctx = np.array([valid[i % len(valid)] for i in range(episodes)])
    start_w = marginal[None, :] * ~goal[ctx]
    s = _draw(np.cumsum(start_w / start_w.sum(axis=1, keepdims=True), axis=1), rng)
    agent.begin(ctx, rng)
    cum_P = np.cumsum(mdp.transition, axis=2)
    done = np.zeros(episodes, dtype=bool)
    steps = np.full(episodes, horizon)
    for t in range(horizon):
        probs = agent.action_probs(s, ctx)
        a = _draw(np.cumsum(probs, axis=1), rng)
        s_next = _draw(cum_P[s, a], rng)
        s = np.where(done, s, s_next)
        hit = ~done & goal[ctx, s]
        steps[hit] = t + 1
        done |= hit
        if done.all():
            break
    mean_steps = float(steps[done].mean()) if done.any() else float("nan")
    return EvalResult(100.0 * float(done.mean()), episodes, mean_steps, sorted(set(valid)))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Per (env, method, seed) rows with mean and standard error across seeds."""

    rows: list = field(default_factory=list)

    def add(self, env: str, method: str, seed: int, result: EvalResult) -> None:
        self.rows.append(
            {
                "env": env,
                "method": method,
                "seed": int(seed),
                "success_rate": float(result.success_rate),
                "episodes": int(result.episodes),
                "mean_steps": float(result.mean_steps),
            }
        )

    def envs(self) -> list:
        return list(dict.fromkeys(r["env"] for r in self.rows))

    def methods(self) -> list:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def values(self, env: str, method: str) -> np.ndarray:
        return np.array([r["success_rate"] for r in self.rows if r["env"] == env and r["method"] == method])

    def aggregate(self) -> dict:
        """{(env, method): (mean, standard error with n-1 denominator, n)}."""
        out = {}
        for env in self.envs():
            for method in self.methods():
                v = self.values(env, method)
                if len(v) == 0:
                    continue
                se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
                out[(env, method)] = (float(v.mean()), se, len(v))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({**r, "success_rate": f"{r['success_rate']:.4f}", "mean_steps": f"{r['mean_steps']:.4f}"})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ExperimentReport":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append(
                {
                    "env": r["env"],
                    "method": r["method"],
                    "seed": int(r["seed"]),
                    "success_rate": float(r["success_rate"]),
                    "episodes": int(r["episodes"]),
                    "mean_steps": float(r["mean_steps"]),
                }
            )
        return cls(rows)

    def to_markdown(self) -> str:
        agg = self.aggregate()
        methods = self.methods()
        lines = ["| env | " + " | ".join(methods) + " |", "|---|" + "---|" * len(methods)]
        for env in self.envs():
            means = {m: agg[(env, m)][0] for m in methods if (env, m) in agg}
            best = max(means.values()) if means else None
            cells = []
            for m in methods:
                if (env, m) not in agg:
                    cells.append("-")
                    continue
                mean, se, _ = agg[(env, m)]
                text = f"{mean:.1f} ± {se:.1f}"
                cells.append(f"**{text}**" if mean == best else text)
            lines.append(f"| {env} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_svg(self) -> str:
        agg = self.aggregate()
        envs, methods = self.envs(), self.methods()
        bar, gap, height, top, left = 14, 18, 200, 20, 40
        group = max(len(methods), 1) * bar + gap
        width = left + max(len(envs), 1) * group + 120
        palette = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3")
        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + top + 40}">',
            f'<line x1="{left}" y1="{top + height}" x2="{width - 110}" y2="{top + height}" stroke="black"/>',
        ]
        for gi, env in enumerate(envs):
            x0 = left + gi * group
            for mi, m in enumerate(methods):
                if (env, m) not in agg:
                    continue
                mean = agg[(env, m)][0]
                h = height * mean / 100.0
                out.append(
                    f'<rect x="{x0 + mi * bar}" y="{top + height - h:.2f}" width="{bar - 2}" height="{h:.2f}" '
                    f'fill="{palette[mi % len(palette)]}"><title>{env} {m} {mean:.1f}</title></rect>'
                )
            out.append(f'<text x="{x0}" y="{top + height + 14}" font-size="9">{env}</text>')
        for mi, m in enumerate(methods):
            y = top + 12 * mi
            out.append(f'<rect x="{width - 100}" y="{y}" width="8" height="8" fill="{palette[mi % len(palette)]}"/>')
            out.append(f'<text x="{width - 88}" y="{y + 8}" font-size="9">{m}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def emit_report(report: ExperimentReport, out_dir, formats=REPORT_FORMATS, stem: str = "report") -> list:
    """Write the requested formats into ``out_dir``; returns the written paths."""
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}; valid: {list(REPORT_FORMATS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    render = {"csv": report.to_csv, "md": report.to_markdown, "svg": report.to_svg}
    paths = []
    for fmt in formats:
        path = out / f"{stem}.{fmt}"
        path.write_text(render[fmt](), encoding="utf-8")
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# coverage diagnostics
# ---------------------------------------------------------------------------


@dataclass
class Concentrability:
    c_dyn: float
    c_goal: float

    @property
    def dyn_covered(self) -> bool:
        return math.isfinite(self.c_dyn)

    @property
    def goal_covered(self) -> bool:
        return math.isfinite(self.c_goal)


def occupancies(mdp: ContextualMdp, pi: PolicyTable):
    """(rho_out (C, S, A), rho_in (C, S)) by exact linear solves.

    rho_out is the (1 - gamma)-normalized discounted occupancy of non-goal
    state-actions before the goal is hit; rho_in(x) = E[gamma^T 1(x_T = x)]
    at the goal hitting time T.
    """
    S, gamma = mdp.n_states, mdp.discount
    goal = mdp.goal_member
    probs = pi.probs[:, :S, :]
    M = np.einsum("csa,sat->cst", probs, mdp.transition) * (~goal)[:, :, None]
    rho_out = np.zeros((mdp.n_contexts, S, mdp.n_actions))
    rho_in = np.zeros((mdp.n_contexts, S))
    eye = np.eye(S)
    for c in range(mdp.n_contexts):
        nu = np.linalg.solve(eye - gamma * M[c].T, mdp.init_dist[:, c])
        nu = np.where(goal[c], 0.0, nu)
        rho_out[c] = (1.0 - gamma) * nu[:, None] * probs[c]
        rho_in[c] = np.where(goal[c], gamma * (M[c].T @ nu), 0.0)
        # start mass already inside the goal set is hit at T = 0
        rho_in[c] += np.where(goal[c], mdp.init_dist[:, c], 0.0)
    return rho_out, rho_in


def _ratio(rho: np.ndarray, mu: np.ndarray, tol: float = 1e-12) -> float:
    support = rho > tol
    if not support.any():
        return 0.0
    if np.any(mu[support] <= 0):
        return math.inf
    return float((rho[support] / mu[support]).max())


def estimate_concentrability(mdp: ContextualMdp, pi: PolicyTable, dyn: DynDataset, goal: GoalDataset) -> Concentrability:
    """Sup density ratios of the policy's occupancies against the data distributions.

    Infinite when the policy reaches support the data never covers.
    """
    S, A, C = mdp.n_states, mdp.n_actions, mdp.n_contexts
    rho_out, rho_in = occupancies(mdp, pi)
    mu_sa = np.zeros((S, A))
    np.add.at(mu_sa, (dyn.s, dyn.a), 1.0)
    mu_sa /= max(len(dyn), 1)
    mu_c = np.bincount(goal.c, minlength=C) / max(len(goal), 1)
    mu_dyn = mu_c[:, None, None] * mu_sa[None]
    mu_goal = np.zeros((C, S))
    np.add.at(mu_goal, (goal.c, goal.s), 1.0)
    mu_goal /= max(len(goal), 1)
    return Concentrability(_ratio(rho_out, mu_dyn), _ratio(rho_in, mu_goal))


def coverage_warning(conc: Concentrability) -> str | None:
    if conc.goal_covered and conc.dyn_covered:
        return None
    parts = [name for name, ok in (("dynamics", conc.dyn_covered), ("goal", conc.goal_covered)) if not ok]
    return "policy occupancy leaves " + " and ".join(parts) + " data support"


def empirical_positive_fraction(data: LabeledDataset) -> float:
    return float(np.average(data.r, weights=data.weight))


__all__ = [
    "Concentrability",
    "EvalResult",
    "ExperimentReport",
    "PolicyAgent",
    "REPORT_FORMATS",
    "coverage_warning",
    "emit_report",
    "empirical_positive_fraction",
    "estimate_concentrability",
    "evaluate_policy",
    "occupancies",
]
