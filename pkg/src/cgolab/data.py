"""The two offline datasets: unlabeled dynamics and context-goal pairs."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .envs import MOVES, CgoEnv
from .mdp import ContextualMdp

log = logging.getLogger(__name__)

DATA_FORMAT_VERSION = 1
GOAL_SAMPLE_CAP = 20_000


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorSpec:
    """Mixture of behavior modes used to roll out dynamics episodes.

    ``uniform`` acts uniformly at random; ``waypoint`` heads epsilon-greedily
    along shortest paths to random waypoints; ``goal_region`` first heads for
    the goal set of a random context and then continues with waypoints.
    ``horizon`` of None means 4 * (map height + width), or 4 * n_states when
    no map is available.
    """

    uniform: float = 0.5
    waypoint: float = 0.5
    goal_region: float = 0.0
    epsilon: float = 0.2
    horizon: int | None = None
    random_start: bool = False

    def __post_init__(self):
        w = np.array([self.uniform, self.waypoint, self.goal_region])
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("behavior mixture weights must be non-negative and not all zero")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @property
    def weights(self) -> np.ndarray:
        w = np.array([self.uniform, self.waypoint, self.goal_region], dtype=np.float64)
        return w / w.sum()

    def describe(self) -> dict:
        return {
            "uniform": self.uniform,
            "waypoint": self.waypoint,
            "goal_region": self.goal_region,
            "epsilon": self.epsilon,
            "horizon": self.horizon,
            "random_start": self.random_start,
        }


BEHAVIORS = {
    "play": BehaviorSpec(uniform=0.5, waypoint=0.5),
    "diverse": BehaviorSpec(uniform=0.5, waypoint=0.5, random_start=True),
    "uniform": BehaviorSpec(uniform=1.0, waypoint=0.0),
    "goal_directed": BehaviorSpec(uniform=0.2, waypoint=0.4, goal_region=0.4),
}


@dataclass(eq=False)
class DynDataset:
    """Unlabeled transitions (s, a, s').

    ``episode``/``step`` keep trajectory provenance for hindsight relabeling;
    record order itself is shuffled and carries no episode information.
    """

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    n_states: int
    n_actions: int
    episode: np.ndarray | None = None
    step: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.s_next = np.asarray(self.s_next, dtype=np.int64)
        if not (len(self.s) == len(self.a) == len(self.s_next)):
            raise ValueError("dyn columns must have equal length")
        if self.episode is not None:
            self.episode = np.asarray(self.episode, dtype=np.int64)
            self.step = np.asarray(self.step, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def has_episodes(self) -> bool:
        return self.episode is not None

    def records(self) -> list:
        return list(zip(self.s.tolist(), self.a.tolist(), self.s_next.tolist()))

    def subset(self, n: int) -> "DynDataset":
        ep = None if self.episode is None else self.episode[:n]
        st = None if self.step is None else self.step[:n]
        meta = dict(self.meta, size=n)
        return DynDataset(self.s[:n], self.a[:n], self.s_next[:n], self.n_states, self.n_actions, ep, st, meta)


@dataclass(eq=False)
class GoalDataset:
    """Positive-only context-goal pairs (c, s) with s in the goal set of c."""

    c: np.ndarray
    s: np.ndarray
    n_states: int
    n_contexts: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        if len(self.c) != len(self.s):
            raise ValueError("goal columns must have equal length")

    def __len__(self) -> int:
        return len(self.c)

    def records(self) -> list:
        return list(zip(self.c.tolist(), self.s.tolist()))

    def subset(self, n: int) -> "GoalDataset":
        return GoalDataset(self.c[:n], self.s[:n], self.n_states, self.n_contexts, dict(self.meta, size=n))


def exhaustive_dyn(mdp: ContextualMdp, resolution: int) -> DynDataset:
    """Every (s, a, s') with multiplicity resolution * P(s' | s, a).

    The empirical kernel of the result equals P exactly, so the kernel must be
    a multiple of 1 / resolution.
    """
    counts = mdp.transition * resolution
    rounded = np.rint(counts)
    if np.abs(counts - rounded).max() > 1e-6:
        raise ValueError(f"transition kernel is not a multiple of 1/{resolution}")
    s, a, s2 = np.nonzero(rounded)
    reps = rounded[s, a, s2].astype(np.int64)
    return DynDataset(
        np.repeat(s, reps), np.repeat(a, reps), np.repeat(s2, reps), mdp.n_states, mdp.n_actions,
        meta={"source": "exhaustive", "resolution": resolution},
    )


def exhaustive_goal(mdp: ContextualMdp) -> GoalDataset:
    """One pair per goal-set member of every context."""
    c, s = np.nonzero(mdp.goal_member)
    return GoalDataset(c, s, mdp.n_states, mdp.n_contexts, meta={"source": "exhaustive"})


# ---------------------------------------------------------------------------
# collection
# ---------------------------------------------------------------------------


def shortest_path_steps(mdp: ContextualMdp) -> np.ndarray:
    """All-pairs step distances over each action's most likely successor."""
    S = mdp.n_states
    succ = mdp.transition.argmax(axis=2)  # (S, A)
    dist = np.full((S, S), np.inf)
    for target in range(S):
        # reverse BFS from target
        dist[target, target] = 0.0
        frontier = [target]
        depth = 0
        while frontier:
            depth += 1
            hits = np.isin(succ, frontier).any(axis=1) & np.isinf(dist[:, target])
            frontier = np.flatnonzero(hits).tolist()
            dist[frontier, target] = depth
    return dist


class _Stepper:
    def __init__(self, mdp: ContextualMdp):
        self.cum = np.cumsum(mdp.transition, axis=2)
        self.cum[:, :, -1] = 1.0

    def __call__(self, s: int, a: int, rng: np.random.Generator) -> int:
        return int(np.searchsorted(self.cum[s, a], rng.random(), side="right"))


def collect_dyn(
    mdp: ContextualMdp,
    behavior: BehaviorSpec,
    n: int,
    rng: np.random.Generator,
    horizon: int | None = None,
) -> DynDataset:
    """Roll out behavior episodes until exactly ``n`` transitions are recorded."""
    if n < 1:
        raise ValueError("n must be at least 1")
    S, A = mdp.n_states, mdp.n_actions
    H = behavior.horizon or horizon or 4 * S
    dist = shortest_path_steps(mdp)
    succ = mdp.transition.argmax(axis=2)
    step = _Stepper(mdp)
    starts = np.flatnonzero(mdp.init_dist.sum(axis=1) > 0)
    weights = behavior.weights

    def pick_waypoint(s):
        for _ in range(100):
            w = int(rng.integers(S))
            if w == s:
                continue
            if np.isfinite(dist[s, w]) and dist[s, w] <= H:
                return w
            log.warning("waypoint %d unreachable from %d within horizon %d; resampling", w, s, H)
        return None

    def greedy(s, target):
        return int(np.argmin(dist[succ[s], target]))

    cols = {"s": [], "a": [], "s_next": [], "episode": [], "step": []}
    ep = 0
    while len(cols["s"]) < n:
        s = int(rng.integers(S)) if behavior.random_start else int(rng.choice(starts))
        mode = int(rng.choice(3, p=weights))
        target = None
        if mode == 1:
            target = pick_waypoint(s)
        elif mode == 2:
            c = int(rng.integers(mdp.n_contexts))
            goals = np.flatnonzero(mdp.goal_member[c])
            target = int(goals[np.argmin(dist[s, goals])])
            if not np.isfinite(dist[s, target]):
                log.warning("goal region of context %d unreachable from %d; resampling episode", c, s)
                continue
        for t in range(H):
            if len(cols["s"]) >= n:
                break
            if mode == 0 or target is None or rng.random() < behavior.epsilon:
                a = int(rng.integers(A))
            else:
                a = greedy(s, target)
            s2 = step(s, a, rng)
            for key, val in zip(cols, (s, a, s2, ep, t)):
                cols[key].append(val)
            s = s2
            if mode != 0 and s == target:
                target = pick_waypoint(s)
        ep += 1

    order = rng.permutation(n)
    arrays = {k: np.asarray(v, dtype=np.int64)[order] for k, v in cols.items()}
    meta = {"behavior": behavior.describe(), "horizon": H, "size": n, "episodes": ep}
    return DynDataset(
        arrays["s"], arrays["a"], arrays["s_next"], S, A, arrays["episode"], arrays["step"], meta
    )


def sample_goal_pairs(env: CgoEnv, n: int, perturb: bool, rng: np.random.Generator) -> GoalDataset:
    """Draw contexts from the training distribution and a uniform goal for each.

    With ``perturb`` every goal example is jittered by one grid cell in a
    random direction; jitters that would leave the goal set (or hit a wall)
    keep the original cell.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if n > GOAL_SAMPLE_CAP:
        raise ValueError(f"at most {GOAL_SAMPLE_CAP} goal examples are sampled")
    goal = env.mdp.goal_member
    empty = np.flatnonzero(~goal.any(axis=1))
    if empty.size:
        raise ValueError(f"contexts {empty.tolist()} have empty goal sets")
    cells = env.maze.floor_cells
    index = env.maze.state_index()
    contexts = rng.choice(env.n_contexts, size=n, p=env.context_weights)
    states = np.empty(n, dtype=np.int64)
    for i, c in enumerate(contexts):
        s = int(rng.choice(np.flatnonzero(goal[c])))
        if perturb:
            dr, dc = MOVES[int(rng.integers(4))]
            r, col = cells[s]
            moved = index.get((r + dr, col + dc))
            if moved is not None and goal[c, moved]:
                s = moved
        states[i] = s
    meta = {"relation": env.relation.kind, "perturb": perturb, "size": n}
    return GoalDataset(contexts, states, env.mdp.n_states, env.n_contexts, meta)


# ---------------------------------------------------------------------------
# JSON-Lines persistence
# ---------------------------------------------------------------------------


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save(dataset, path) -> None:
    """Write a header line followed by one JSON record per line."""
    if isinstance(dataset, DynDataset):
        header = {
            "kind": "dyn",
            "version": DATA_FORMAT_VERSION,
            "n_states": dataset.n_states,
            "n_actions": dataset.n_actions,
            "episodes": dataset.has_episodes,
            "meta": dataset.meta,
        }
        cols = [dataset.s, dataset.a, dataset.s_next]
        if dataset.has_episodes:
            cols += [dataset.episode, dataset.step]
        rows = np.stack(cols, axis=1).tolist()
    elif isinstance(dataset, GoalDataset):
        header = {
            "kind": "goal",
            "version": DATA_FORMAT_VERSION,
            "n_states": dataset.n_states,
            "n_contexts": dataset.n_contexts,
            "meta": dataset.meta,
        }
        rows = np.stack([dataset.c, dataset.s], axis=1).tolist()
    else:
        from .coda import LabeledDataset

        if not isinstance(dataset, LabeledDataset):
            raise TypeError(f"cannot save {type(dataset).__name__}")
        header = {
            "kind": "labeled",
            "version": DATA_FORMAT_VERSION,
            "n_states": dataset.n_states,
            "n_actions": dataset.n_actions,
            "n_contexts": dataset.n_contexts,
            "meta": dataset.meta,
        }
        rows = [
            [int(s), int(c), int(a), float(r), int(s2), bool(t), float(w)]
            for s, c, a, r, s2, t, w in zip(
                dataset.s, dataset.c, dataset.a, dataset.r, dataset.s_next, dataset.terminal, dataset.weight
            )
        ]
    with open(path, "w") as fh:
        fh.write(_dump_line(header) + "\n")
        fh.writelines(_dump_line(row) + "\n" for row in rows)


def load(path):
    """Inverse of :func:`save`; malformed lines are reported with their line number."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"{path}:1: malformed header ({err.msg})") from None
    if header.get("version") != DATA_FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {header.get('version')!r}")
    kind = header.get("kind")
    width = {"dyn": 5 if header.get("episodes") else 3, "goal": 2, "labeled": 7}.get(kind)
    if width is None:
        raise DatasetFormatError(f"{path}: unknown dataset kind {kind!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as err:
            raise DatasetFormatError(f"{path}:{lineno}: malformed record ({err.msg})") from None
        if not isinstance(row, list) or len(row) != width:
            raise DatasetFormatError(f"{path}:{lineno}: expected a list of {width} fields")
        rows.append(row)
    meta = header.get("meta", {})
    if kind == "dyn":
        arr = np.array(rows, dtype=np.int64).reshape(-1, width)
        ep = arr[:, 3] if width == 5 else None
        st = arr[:, 4] if width == 5 else None
        return DynDataset(arr[:, 0], arr[:, 1], arr[:, 2], header["n_states"], header["n_actions"], ep, st, meta)
    if kind == "goal":
        arr = np.array(rows, dtype=np.int64).reshape(-1, 2)
        return GoalDataset(arr[:, 0], arr[:, 1], header["n_states"], header["n_contexts"], meta)
    from .coda import LabeledDataset

    arr = np.array(rows, dtype=np.float64).reshape(-1, 7)
    return LabeledDataset(
        s=arr[:, 0].astype(np.int64),
        c=arr[:, 1].astype(np.int64),
        a=arr[:, 2].astype(np.int64),
        r=arr[:, 3],
        s_next=arr[:, 4].astype(np.int64),
        terminal=arr[:, 5].astype(bool),
        weight=arr[:, 6],
        n_states=header["n_states"],
        n_actions=header["n_actions"],
        n_contexts=header["n_contexts"],
        meta=meta,
    )


__all__ = [
    "BEHAVIORS",
    "BehaviorSpec",
    "DatasetFormatError",
    "DynDataset",
    "exhaustive_dyn",
    "exhaustive_goal",
    "GoalDataset",
    "collect_dyn",
    "load",
    "sample_goal_pairs",
    "save",
    "shortest_path_steps",
]
