"""Gridworld CGO environments over ASCII maze maps.

Three context-goal regimes are supported:

* ``single_goal``: one context whose goal set is a small region far from the
  start, so a context-agnostic policy suffices.
* ``four_rooms``: the map is split into four quadrant rooms; context k asks
  the agent to enter room k.
* ``random_cells``: every floor cell is a context, and its goal set is the
  floor within a Euclidean radius of that cell.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .mdp import ContextualMdp

ACTIONS = ("up", "down", "left", "right", "stay")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))
STAY = 4
MAX_SLIP = 0.4

BUNDLED_MAPS = {
    "umaze": "umaze.txt",
    "medium": "medium.txt",
    "large": "large.txt",
}
RELATION_KINDS = ("single_goal", "four_rooms", "random_cells")


class MapError(ValueError):
    pass


class RelationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MazeMap:
    walls: np.ndarray  # (H, W) bool
    start_cells: tuple
    slip: float = 0.0
    name: str = ""

    def __post_init__(self):
        walls = np.array(self.walls, dtype=bool)
        walls.setflags(write=False)
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "start_cells", tuple(tuple(int(v) for v in c) for c in self.start_cells))
        if not 0.0 <= self.slip <= MAX_SLIP:
            raise MapError(f"slip must lie in [0, {MAX_SLIP}], got {self.slip}")
        if not self.start_cells:
            raise MapError("map has no start cell")
        floor = self.floor_cells
        if not floor:
            raise MapError("map has no floor cells")
        for cell in self.start_cells:
            if self.walls[cell]:
                raise MapError(f"start cell {cell} is a wall")
        seen = _flood(self.walls, floor[0])
        if len(seen) != len(floor):
            raise MapError("floor cells are not 4-connected")

    @property
    def shape(self) -> tuple:
        return self.walls.shape

    @property
    def floor_cells(self) -> list:
        """Floor cells in row-major order; state i is ``floor_cells[i]``."""
        return [tuple(int(v) for v in rc) for rc in np.argwhere(~self.walls)]

    @property
    def n_states(self) -> int:
        return int((~self.walls).sum())

    def state_index(self) -> dict:
        return {cell: i for i, cell in enumerate(self.floor_cells)}

    def with_slip(self, slip: float) -> "MazeMap":
        return MazeMap(self.walls, self.start_cells, slip, self.name)


def _flood(walls: np.ndarray, origin: tuple) -> set:
    H, W = walls.shape
    seen = {origin}
    queue = deque([origin])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES[:4]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < H and 0 <= nc < W and not walls[nr, nc] and (nr, nc) not in seen:
                seen.add((nr, nc))
                queue.append((nr, nc))
    return seen


def parse_map(text: str, slip: float = 0.0, name: str = "") -> MazeMap:
    """Parse ``#`` (wall), ``.`` (floor) and ``S`` (start) characters.

    Cells outside the grid are treated as walls.
    """
    rows = [line for line in text.strip("\n").splitlines()]
    if not rows:
        raise MapError("empty map")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise MapError(f"ragged map: row {i} has length {len(row)}, expected {width}")
        bad = set(row) - set("#.S")
        if bad:
            raise MapError(f"unexpected characters {sorted(bad)} in row {i}")
    walls = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    starts = [(r, c) for r, row in enumerate(rows) for c, ch in enumerate(row) if ch == "S"]
    return MazeMap(walls, starts, slip, name)


def load_map(name_or_path: str, slip: float = 0.0) -> MazeMap:
    """Load a bundled map by name (umaze/medium/large) or a .txt file path."""
    if name_or_path in BUNDLED_MAPS:
        text = resources.files("cgolab.maps").joinpath(BUNDLED_MAPS[name_or_path]).read_text()
        return parse_map(text, slip, name_or_path)
    with open(name_or_path) as fh:
        return parse_map(fh.read(), slip, name_or_path)


@dataclass(frozen=True)
class ContextRelation:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in RELATION_KINDS:
            raise RelationError(f"unknown relation kind {self.kind!r}; expected one of {RELATION_KINDS}")
        if self.kind == "random_cells" and not self.params.get("radius", 2.0) > 0:
            raise RelationError("random_cells radius must be positive")

    @classmethod
    def single_goal(cls, radius: float = 1.0, center=None) -> "ContextRelation":
        params = {"radius": radius}
        if center is not None:
            params["center"] = tuple(center)
        return cls("single_goal", params)

    @classmethod
    def four_rooms(cls) -> "ContextRelation":
        return cls("four_rooms", {})

    @classmethod
    def random_cells(cls, radius: float = 2.0) -> "ContextRelation":
        return cls("random_cells", {"radius": radius})


def room_of(cell: tuple, shape: tuple) -> int | None:
    """Quadrant room id (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).

    Cells on the middle row or column are doorways and belong to no room.
    """
    mid_r, mid_c = shape[0] // 2, shape[1] // 2
    r, c = cell
    if r == mid_r or c == mid_c:
        return None
    return (0 if r < mid_r else 2) + (0 if c < mid_c else 1)


def quadrant_of(cell: tuple, shape: tuple) -> int:
    """Like :func:`room_of` but assigns the midlines to the lower/right quadrant."""
    mid_r, mid_c = shape[0] // 2, shape[1] // 2
    return (0 if cell[0] < mid_r else 2) + (0 if cell[1] < mid_c else 1)


@dataclass(frozen=True, eq=False)
class CgoEnv:
    """A maze, a context relation and the ContextualMdp they induce."""

    maze: MazeMap
    relation: ContextRelation
    mdp: ContextualMdp
    context_cells: tuple  # coordinate anchor of each context
    context_weights: np.ndarray  # training context distribution

    @property
    def n_contexts(self) -> int:
        return self.mdp.n_contexts

    @property
    def state_cells(self) -> list:
        return self.maze.floor_cells

    @property
    def start_states(self) -> list:
        index = self.maze.state_index()
        return [index[c] for c in self.maze.start_cells]

    @property
    def default_horizon(self) -> int:
        H, W = self.maze.shape
        return 4 * (H + W)

    def context_label(self, c: int) -> str:
        if self.relation.kind == "four_rooms":
            return f"room{c}"
        return str(self.context_cells[c])


def _kernel(maze: MazeMap) -> np.ndarray:
    cells = maze.floor_cells
    index = maze.state_index()
    S = len(cells)
    H, W = maze.shape
    P = np.zeros((S, len(MOVES), S))

    def target(cell, move):
        nr, nc = cell[0] + move[0], cell[1] + move[1]
        if 0 <= nr < H and 0 <= nc < W and not maze.walls[nr, nc]:
            return index[(nr, nc)]
        return index[cell]

    for s, cell in enumerate(cells):
        for a, move in enumerate(MOVES):
            if a == STAY:
                P[s, a, s] = 1.0
                continue
            P[s, a, target(cell, move)] += 1.0 - maze.slip
            lateral = [(move[1], move[0]), (-move[1], -move[0])]
            for lat in lateral:
                P[s, a, target(cell, lat)] += maze.slip / 2.0
    return P


def _goal_table(maze: MazeMap, relation: ContextRelation):
    cells = maze.floor_cells
    coords = np.array(cells, dtype=np.float64)
    if relation.kind == "four_rooms":
        rooms = np.array([-1 if room_of(c, maze.shape) is None else room_of(c, maze.shape) for c in cells])
        goal = np.stack([rooms == k for k in range(4)])
        if not goal.any(axis=1).all():
            raise RelationError("four_rooms relation needs floor cells in every quadrant")
        anchors = []
        for k in range(4):
            centroid = coords[goal[k]].mean(axis=0)
            anchors.append(tuple(float(v) for v in centroid))
        weights = np.full(4, 0.25)
        return goal, tuple(anchors), weights
    if relation.kind == "random_cells":
        radius = float(relation.params.get("radius", 2.0))
        dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
        goal = dist <= radius + 1e-12
        weights = np.full(len(cells), 1.0 / len(cells))
        return goal, tuple(cells), weights
    # single_goal
    radius = float(relation.params.get("radius", 1.0))
    center = relation.params.get("center")
    if center is None:
        # floor cell farthest (in steps) from the first start cell
        depth = _bfs_depths(maze, maze.start_cells[0])
        center = max(cells, key=lambda c: (depth[c], c))
    center = tuple(center)
    if center not in set(cells):
        raise RelationError(f"single_goal center {center} is not a floor cell")
    dist = np.linalg.norm(coords - np.array(center, dtype=np.float64), axis=1)
    goal = (dist <= radius + 1e-12)[None, :]
    return goal, (center,), np.ones(1)


def _bfs_depths(maze: MazeMap, origin: tuple) -> dict:
    H, W = maze.shape
    depth = {origin: 0}
    queue = deque([origin])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES[:4]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < H and 0 <= nc < W and not maze.walls[nr, nc] and (nr, nc) not in depth:
                depth[(nr, nc)] = depth[(r, c)] + 1
                queue.append((nr, nc))
    return depth


def build_cgo(maze: MazeMap, relation: ContextRelation, discount: float = 0.99) -> ContextualMdp:
    return make_env(maze, relation, discount).mdp


def make_env(maze: MazeMap, relation: ContextRelation, discount: float = 0.99) -> CgoEnv:
    """Build the 5-action slip gridworld and its goal table for ``relation``.

    The initial distribution is uniform over start cells crossed with the
    training context distribution, dropping (start, context) pairs that are
    already inside the goal set.
    """
    goal, anchors, weights = _goal_table(maze, relation)
    P = _kernel(maze)
    index = maze.state_index()
    S, C = P.shape[0], goal.shape[0]
    d0 = np.zeros((S, C))
    for cell in maze.start_cells:
        s = index[cell]
        d0[s] += weights * ~goal[:, s]
    if d0.sum() == 0.0:
        raise RelationError("every start cell already lies in every goal set")
    mdp = ContextualMdp(P, goal, discount, d0 / d0.sum(), name=f"{maze.name}/{relation.kind}")
    return CgoEnv(maze, relation, mdp, anchors, weights)


def sample_test_contexts(env: CgoEnv, mode: str, n: int, rng: np.random.Generator) -> list:
    """Draw ``n`` evaluation contexts.

    ``in_distribution`` follows the training context distribution (finite
    supports are cycled through shuffled permutations so small draws are
    balanced). ``shifted`` (random_cells only) draws uniformly from the floor
    cells of the map quadrant farthest from every start cell.
    """
    if n < 1:
        raise ValueError("n must be positive")
    kind = env.relation.kind
    if mode == "in_distribution":
        if kind == "random_cells":
            return [int(c) for c in rng.choice(env.n_contexts, size=n, p=env.context_weights)]
        support = np.flatnonzero(env.context_weights > 0)
        out: list = []
        while len(out) < n:
            out.extend(int(c) for c in rng.permutation(support))
        return out[:n]
    if mode == "shifted":
        if kind != "random_cells":
            raise RelationError(f"shifted test contexts are only defined for random_cells, not {kind}")
        cells = env.context_cells
        shape = env.maze.shape
        starts = np.array(env.maze.start_cells, dtype=np.float64)
        best, best_score = None, -1.0
        for q in range(4):
            members = [i for i, cell in enumerate(cells) if quadrant_of(cell, shape) == q]
            if not members:
                continue
            centroid = np.array([cells[i] for i in members], dtype=np.float64).mean(axis=0)
            score = float(np.linalg.norm(starts - centroid, axis=1).min())
            if score > best_score:
                best, best_score = members, score
        return [int(c) for c in rng.choice(best, size=n)]
    raise ValueError(f"unknown test-context mode {mode!r}")
