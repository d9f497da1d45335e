"""Finite contextual goal-oriented MDPs and the action-augmented construction.

States are integers ``0..n_states-1``; the absorbing state s+ is the sentinel
index ``n_states`` and the fictitious action a+ is the sentinel index
``n_actions``. Neither is ever stored in the base transition table.

Value and policy tables are laid out as ``(contexts, n_states + 1, actions)``
so that the s+ row is explicit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np

NORM_TOL = 1e-9
MDP_FORMAT = "cgolab.mdp"
MDP_FORMAT_VERSION = 1


class MdpError(ValueError):
    """Raised when an MDP or policy table violates its invariants."""


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ContextualMdp:
    """Finite CGO problem with a context-independent transition kernel.

    transition: ``(S, A, S)`` table of P(s'|s,a).
    goal_member: ``(C, S)`` boolean table, true iff s is in the goal set of c.
    init_dist: ``(S, C)`` joint initial distribution d0(s, c); must put no
        mass on goal pairs.
    """

    transition: np.ndarray
    goal_member: np.ndarray
    discount: float
    init_dist: np.ndarray
    name: str = ""

    def __post_init__(self):
        P = _frozen(self.transition, np.float64)
        G = _frozen(self.goal_member, bool)
        d0 = _frozen(self.init_dist, np.float64)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "goal_member", G)
        object.__setattr__(self, "init_dist", d0)
        object.__setattr__(self, "discount", float(self.discount))

        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise MdpError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S == 0 or A == 0:
            raise MdpError("need at least one state and one action")
        if np.any(P < -NORM_TOL):
            raise MdpError("transition has negative entries")
        row_err = np.abs(P.sum(axis=2) - 1.0).max()
        if row_err > NORM_TOL:
            raise MdpError(f"transition rows must sum to 1 (max error {row_err:.3g})")
        if G.ndim != 2 or G.shape[1] != S:
            raise MdpError(f"goal_member must have shape (C, {S}), got {G.shape}")
        C = G.shape[0]
        if C == 0:
            raise MdpError("need at least one context")
        if d0.shape != (S, C):
            raise MdpError(f"init_dist must have shape ({S}, {C}), got {d0.shape}")
        if np.any(d0 < -NORM_TOL) or abs(d0.sum() - 1.0) > NORM_TOL:
            raise MdpError("init_dist must be a probability table")
        if np.any(d0[G.T] > 0.0):
            raise MdpError("init_dist puts mass on (s, c) pairs inside the goal set")
        if not 0.0 <= self.discount < 1.0:
            raise MdpError(f"discount must lie in [0, 1), got {self.discount}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_contexts(self) -> int:
        return self.goal_member.shape[0]

    @property
    def absorbing_state(self) -> int:
        return self.n_states

    def reward(self, s: int, c: int) -> float:
        """R(x) = 1 iff s is in the goal set of c; zero at s+."""
        if s == self.n_states:
            return 0.0
        return float(self.goal_member[c, s])

    def goal_rewards(self) -> np.ndarray:
        """``(C, S+1)`` table of R(s, c) with the s+ column set to zero."""
        out = np.zeros((self.n_contexts, self.n_states + 1))
        out[:, : self.n_states] = self.goal_member
        return out

    def kernel(self, s: int, c: int, a: int) -> np.ndarray:
        """Next-state distribution of the absorbing-state formulation.

        Goal states and s+ move to s+ under every action.
        """
        _check_index(s, self.n_states + 1, "state")
        _check_index(c, self.n_contexts, "context")
        _check_index(a, self.n_actions, "action")
        out = np.zeros(self.n_states + 1)
        if s == self.n_states or self.goal_member[c, s]:
            out[self.n_states] = 1.0
        else:
            out[: self.n_states] = self.transition[s, a]
        return out

    def to_json(self) -> str:
        doc = {
            "format": MDP_FORMAT,
            "version": MDP_FORMAT_VERSION,
            "name": self.name,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "n_contexts": self.n_contexts,
            "discount": self.discount,
            "transition": self.transition.ravel().tolist(),
            "goal_member": ["".join("1" if g else "0" for g in row) for row in self.goal_member],
            "init_dist": self.init_dist.ravel().tolist(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ContextualMdp":
        doc = json.loads(text)
        if doc.get("format") != MDP_FORMAT:
            raise MdpError(f"not an MDP document: format={doc.get('format')!r}")
        if doc.get("version") != MDP_FORMAT_VERSION:
            raise MdpError(f"unsupported MDP format version {doc.get('version')!r}")
        S, A, C = doc["n_states"], doc["n_actions"], doc["n_contexts"]
        goal = np.array([[ch == "1" for ch in row] for row in doc["goal_member"]], dtype=bool)
        return cls(
            transition=np.asarray(doc["transition"], dtype=np.float64).reshape(S, A, S),
            goal_member=goal.reshape(C, S),
            discount=doc["discount"],
            init_dist=np.asarray(doc["init_dist"], dtype=np.float64).reshape(S, C),
            name=doc.get("name", ""),
        )


@dataclass(frozen=True, eq=False)
class AugmentedMdp:
    """The base MDP with the fictitious action a+ and absorbing state s+.

    Reward is 1 only for a+ taken inside the goal set; a+ always leads to s+.
    Real actions follow the base kernel everywhere in the state space,
    including inside goal sets.
    """

    base: ContextualMdp

    @property
    def n_states(self) -> int:
        return self.base.n_states

    @property
    def n_actions(self) -> int:
        """Size of the augmented action space (real actions plus a+)."""
        return self.base.n_actions + 1

    @property
    def n_contexts(self) -> int:
        return self.base.n_contexts

    @property
    def discount(self) -> float:
        return self.base.discount

    @property
    def plus_action(self) -> int:
        return self.base.n_actions

    @property
    def absorbing_state(self) -> int:
        return self.base.n_states

    def reward(self, s: int, c: int, a: int) -> float:
        _check_index(s, self.n_states + 1, "state")
        _check_index(c, self.n_contexts, "context")
        _check_index(a, self.n_actions, "action")
        if a != self.plus_action or s == self.absorbing_state:
            return 0.0
        return float(self.base.goal_member[c, s])

    def kernel(self, s: int, c: int, a: int) -> np.ndarray:
        _check_index(s, self.n_states + 1, "state")
        _check_index(c, self.n_contexts, "context")
        _check_index(a, self.n_actions, "action")
        out = np.zeros(self.n_states + 1)
        if s == self.absorbing_state or a == self.plus_action:
            out[self.absorbing_state] = 1.0
        else:
            out[: self.n_states] = self.base.transition[s, a]
        return out


Model = Union[ContextualMdp, AugmentedMdp]


def build_augmented(mdp: ContextualMdp) -> AugmentedMdp:
    if not isinstance(mdp, ContextualMdp):
        raise TypeError(f"expected ContextualMdp, got {type(mdp).__name__}")
    # ContextualMdp validates on construction; re-check in case arrays were swapped in
    err = np.abs(mdp.transition.sum(axis=2) - 1.0).max()
    if err > NORM_TOL:
        raise MdpError(f"transition rows must sum to 1 (max error {err:.3g})")
    return AugmentedMdp(mdp)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Stochastic policy pi(a | s, c) stored as ``(C, S+1, n_actions)``.

    ``augmented`` policies have one extra column for a+.
    """

    probs: np.ndarray
    augmented: bool = False

    def __post_init__(self):
        p = _frozen(self.probs, np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 3:
            raise MdpError(f"policy table must be 3-D, got shape {p.shape}")
        if np.any(p < -NORM_TOL):
            raise MdpError("policy has negative probabilities")
        err = np.abs(p.sum(axis=2) - 1.0).max()
        if err > NORM_TOL:
            raise MdpError(f"policy rows must sum to 1 (max error {err:.3g})")

    @property
    def n_contexts(self) -> int:
        return self.probs.shape[0]

    @property
    def n_states(self) -> int:
        return self.probs.shape[1] - 1

    @property
    def action_space_size(self) -> int:
        return self.probs.shape[2]

    def check_compatible(self, model: Model) -> None:
        augmented = isinstance(model, AugmentedMdp)
        if augmented != self.augmented:
            kind = "augmented" if augmented else "original"
            raise MdpError(f"policy action space does not match the {kind} MDP")
        expected = (model.n_contexts, model.n_states + 1, model.n_actions)
        if self.probs.shape != expected:
            raise MdpError(f"policy shape {self.probs.shape} != expected {expected}")

    @classmethod
    def uniform(cls, model: Model) -> "PolicyTable":
        augmented = isinstance(model, AugmentedMdp)
        shape = (model.n_contexts, model.n_states + 1, model.n_actions)
        probs = np.full(shape, 1.0 / model.n_actions)
        if augmented:
            probs[:, model.n_states, :] = 0.0
            probs[:, model.n_states, model.plus_action] = 1.0
        return cls(probs, augmented)

    @classmethod
    def from_state_rows(cls, rows: np.ndarray, augmented: bool = False) -> "PolicyTable":
        """Build a policy from ``(C, S, A)`` rows, filling in the s+ row."""
        rows = np.asarray(rows, dtype=np.float64)
        C, S, A = rows.shape
        probs = np.empty((C, S + 1, A))
        probs[:, :S] = rows
        if augmented:
            probs[:, S] = 0.0
            probs[:, S, A - 1] = 1.0
        else:
            probs[:, S] = 1.0 / A
        return cls(probs, augmented)

    def to_dict(self) -> dict:
        return {
            "augmented": self.augmented,
            "shape": list(self.probs.shape),
            "probs": self.probs.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyTable":
        probs = np.asarray(doc["probs"], dtype=np.float64).reshape(doc["shape"])
        return cls(probs, bool(doc["augmented"]))


def extend_policy(pi: PolicyTable, mdp: ContextualMdp) -> PolicyTable:
    """Extension to the augmented MDP: take a+ inside the goal set, else follow pi."""
    pi.check_compatible(mdp)
    C, S, A = mdp.n_contexts, mdp.n_states, mdp.n_actions
    probs = np.zeros((C, S + 1, A + 1))
    probs[:, :, :A] = pi.probs
    goal = np.zeros((C, S + 1), dtype=bool)
    goal[:, :S] = mdp.goal_member
    goal[:, S] = True  # s+ convention: point mass on a+
    probs[goal] = 0.0
    probs[goal, A] = 1.0
    return PolicyTable(probs, augmented=True)


def restrict_policy(xi: PolicyTable, mdp: ContextualMdp) -> PolicyTable:
    """Restriction to the original MDP: mass on a+ is spread uniformly over real actions."""
    if not xi.augmented:
        raise MdpError("restrict_policy expects an augmented-space policy")
    A = mdp.n_actions
    expected = (mdp.n_contexts, mdp.n_states + 1, A + 1)
    if xi.probs.shape != expected:
        raise MdpError(f"policy shape {xi.probs.shape} != expected {expected}")
    probs = xi.probs[:, :, :A] + xi.probs[:, :, A:] / A
    return PolicyTable(probs, augmented=False)


def sample_step(model: Model, s: int, c: int, a: int, rng: np.random.Generator):
    """Simulate one transition; returns ``(s_next, reward, terminal)``.

    In the original MDP an episode terminates on entering the goal set and the
    entering step carries reward 1. In the augmented MDP only a+ inside the
    goal set is rewarded and termination means entering s+.
    """
    if isinstance(model, AugmentedMdp):
        probs = model.kernel(s, c, a)
        s_next = int(rng.choice(len(probs), p=probs))
        return s_next, model.reward(s, c, a), s_next == model.absorbing_state

    probs = model.kernel(s, c, a)
    s_next = int(rng.choice(len(probs), p=probs))
    if s_next == model.absorbing_state:
        return s_next, 0.0, True
    entered = bool(model.goal_member[c, s_next])
    return s_next, float(entered), entered


def _check_index(i: int, n: int, what: str) -> None:
    if not 0 <= i < n:
        raise IndexError(f"{what} index {i} out of range [0, {n})")
