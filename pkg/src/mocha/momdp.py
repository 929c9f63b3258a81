"""Tabular multi-objective MDPs: container, validation, JSON I/O and sampling.

Sampling is Markovian with no resets. A :class:`MarkovStream` owns the current
state and the random generator, so consecutive batches (critic, then actor,
then the next critic phase) continue one chain.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np

from .errors import InputError, NonErgodicError
from .policy import as_prob_matrix

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

_PROB_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TabularMOMDP:
    """Finite MOMDP with deterministic vector rewards.

    ``transition[s, a, s']`` and ``rewards[s, a, i]``.
    """

    transition: np.ndarray
    rewards: np.ndarray
    discounts: np.ndarray
    r_max: float
    start_dist: np.ndarray
    name: str = ""
    _cum: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))
        object.__setattr__(self, "discounts", np.atleast_1d(np.asarray(self.discounts, dtype=float)))
        object.__setattr__(self, "start_dist", np.asarray(self.start_dist, dtype=float))
        object.__setattr__(self, "r_max", float(self.r_max))
        if self.transition.ndim != 3 or self.rewards.ndim != 3:
            raise InputError("transition and rewards must be 3-d arrays")
        S, A, S2 = self.transition.shape
        if S2 != S or self.rewards.shape[:2] != (S, A):
            raise InputError(
                f"shape mismatch: transition {self.transition.shape}, rewards {self.rewards.shape}"
            )
        if self.start_dist.shape != (S,):
            raise InputError(f"start_dist must have length {S}")
        if self.discounts.shape != (self.rewards.shape[2],):
            raise InputError(f"discounts must have length {self.rewards.shape[2]}")
        for arr in (self.transition, self.rewards, self.discounts, self.start_dist):
            arr.setflags(write=False)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def num_objectives(self) -> int:
        return self.rewards.shape[2]

    @property
    def cumulative_transition(self) -> np.ndarray:
        """Row-normalized cumulative sums of ``P[s, a, :]``, last entry exactly 1."""
        if self._cum is None:
            cum = np.cumsum(self.transition, axis=2)
            cum = cum / cum[:, :, -1:]
            cum[:, :, -1] = 1.0
            object.__setattr__(self, "_cum", cum)
        return self._cum

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_objectives": self.num_objectives,
            "r_max": self.r_max,
            "transition": self.transition.tolist(),
            "rewards": self.rewards.tolist(),
            "discounts": self.discounts.tolist(),
            "start_dist": self.start_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, name: str = "") -> "TabularMOMDP":
        required = ("r_max", "transition", "rewards", "discounts", "start_dist")
        missing = [k for k in required if k not in data]
        if missing:
            raise InputError(f"MOMDP document missing fields: {missing}")
        m = cls(
            transition=data["transition"],
            rewards=data["rewards"],
            discounts=data["discounts"],
            r_max=data["r_max"],
            start_dist=data["start_dist"],
            name=name,
        )
        for key, actual in (
            ("num_states", m.num_states),
            ("num_actions", m.num_actions),
            ("num_objectives", m.num_objectives),
        ):
            if key in data and int(data[key]) != actual:
                raise InputError(f"{key}={data[key]} disagrees with array shape ({actual})")
        return m

    @classmethod
    def load(cls, path) -> "TabularMOMDP":
        path = Path(path)
        with path.open("r", encoding="utf-8") as f:
            data = json.load(f)
        return cls.from_dict(data, name=path.stem)

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)


def validate(momdp: TabularMOMDP) -> List[str]:
    """Return a list of violated invariants; empty when the MOMDP is well formed."""
    problems = []
    P, r = momdp.transition, momdp.rewards
    if not np.all(np.isfinite(P)):
        problems.append("transition contains non-finite entries")
    if not np.all(np.isfinite(r)):
        problems.append("rewards contain non-finite entries")
    bad = np.argwhere((P < 0) | (P > 1))
    for s, a, s2 in bad[:10]:
        problems.append(f"transition[{s}][{a}][{s2}]={float(P[s, a, s2])!r} outside [0, 1]")
    sums = P.sum(axis=2)
    for s, a in np.argwhere(np.abs(sums - 1.0) > _PROB_TOL)[:10]:
        problems.append(f"transition row [{s}][{a}] sums to {float(sums[s, a])!r}, expected 1")
    if not momdp.r_max > 0:
        problems.append(f"r_max={momdp.r_max!r} must be positive")
    for s, a, i in np.argwhere((r < 0) | (r > momdp.r_max))[:10]:
        problems.append(
            f"rewards[{s}][{a}][{i}]={float(r[s, a, i])!r} outside reward bound [0, r_max={momdp.r_max!r}]"
        )
    for i, g in enumerate(momdp.discounts):
        if not 0.0 < g < 1.0:
            problems.append(f"discounts[{i}]={float(g)!r} outside (0, 1)")
    d0 = momdp.start_dist
    if np.any(d0 < 0) or abs(d0.sum() - 1.0) > _PROB_TOL:
        problems.append(f"start_dist is not a probability vector (sum={float(d0.sum())!r})")
    return problems


def _check_ids(momdp: TabularMOMDP, s: int, a: Optional[int] = None) -> None:
    if not 0 <= s < momdp.num_states:
        raise InputError(f"state {s} out of range [0, {momdp.num_states})")
    if a is not None and not 0 <= a < momdp.num_actions:
        raise InputError(f"action {a} out of range [0, {momdp.num_actions})")


def step(momdp: TabularMOMDP, s: int, a: int, rng: np.random.Generator):
    """Draw ``s' ~ P[s, a, :]`` and return ``(s', r[s, a, :])``."""
    _check_ids(momdp, s, a)
    u = rng.random()
    s_next = int(np.searchsorted(momdp.cumulative_transition[s, a], u, side="right"))
    return s_next, momdp.rewards[s, a].copy()


class SampleStep(NamedTuple):
    state: int
    action: int
    reward_vec: np.ndarray
    next_state: int


class Transitions(NamedTuple):
    """A batch of consecutive transitions, stored column-wise."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # (n, M)
    next_states: np.ndarray

    def __len__(self):
        return len(self.states)

    def steps(self) -> List[SampleStep]:
        return [
            SampleStep(int(s), int(a), r.copy(), int(s2))
            for s, a, r, s2 in zip(self.states, self.actions, self.rewards, self.next_states)
        ]


def _walk_py(cum, s0, u, out_s, out_o):
    S = cum.shape[0]
    n_out = cum.shape[1]
    s = s0
    for k in range(u.shape[0]):
        row = cum[s]
        x = u[k]
        lo, hi = 0, n_out - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if row[mid] > x:
                hi = mid
            else:
                lo = mid + 1
        out_s[k] = s
        out_o[k] = lo
        s = lo % S
    return s


_walk = njit(cache=True, nogil=True)(_walk_py) if njit is not None else _walk_py


def joint_cumulative(momdp: TabularMOMDP, pi: np.ndarray) -> np.ndarray:
    """Per-state cumulative table over joint outcomes ``o = a * S + s'``."""
    S, A = momdp.num_states, momdp.num_actions
    joint = (pi[:, :, None] * momdp.transition).reshape(S, A * S)
    cum = np.cumsum(joint, axis=1)
    cum = cum / cum[:, -1:]
    cum[:, -1] = 1.0
    return np.ascontiguousarray(cum)


class MarkovStream:
    """A single non-resetting trajectory through a MOMDP.

    Every transition drawn is counted in :attr:`count`; callers never reset the
    state between batches.
    """

    def __init__(self, momdp: TabularMOMDP, rng: np.random.Generator, state: Optional[int] = None):
        self.momdp = momdp
        self.rng = rng
        if state is None:
            state = int(rng.choice(momdp.num_states, p=momdp.start_dist))
        _check_ids(momdp, state)
        self.state = int(state)
        self.count = 0

    def draw(self, policy, n: int) -> Transitions:
        if n < 0:
            raise InputError(f"batch length must be non-negative, got {n}")
        momdp = self.momdp
        pi = as_prob_matrix(policy, momdp.num_states, momdp.num_actions)
        cum = joint_cumulative(momdp, pi)
        u = self.rng.random(n)
        states = np.empty(n, dtype=np.int64)
        outcomes = np.empty(n, dtype=np.int64)
        self.state = int(_walk(cum, self.state, u, states, outcomes))
        S = momdp.num_states
        actions = outcomes // S
        next_states = outcomes % S
        self.count += n
        return Transitions(states, actions, momdp.rewards[states, actions], next_states)


def sample_trajectory(momdp: TabularMOMDP, policy, s0: int, length: int, rng) -> List[SampleStep]:
    """Sample ``length`` consecutive steps starting at ``s0``."""
    if length < 1:
        raise InputError(f"length must be >= 1, got {length}")
    stream = MarkovStream(momdp, rng, state=s0)
    return stream.draw(policy, length).steps()


def induced_chain(momdp: TabularMOMDP, policy) -> np.ndarray:
    """State transition matrix ``P_theta(s'|s) = sum_a pi(a|s) P(s'|s,a)``."""
    pi = as_prob_matrix(policy, momdp.num_states, momdp.num_actions)
    return np.einsum("sa,sat->st", pi, momdp.transition)


@dataclass
class ErgodicityReport:
    ergodic: bool
    irreducible: bool
    aperiodic: bool
    period: int
    unreachable: Optional[tuple] = None

    def __bool__(self):
        return self.ergodic


def _reach(adj: np.ndarray, src: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[src] = True
    frontier = [src]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u] & ~seen):
                seen[v] = True
                nxt.append(int(v))
        frontier = nxt
    return seen


def check_ergodic(momdp: TabularMOMDP, policy) -> ErgodicityReport:
    """Irreducibility by reachability, aperiodicity by the BFS-level gcd test."""
    # support of pi_theta, not its magnitude: softmax probabilities may underflow
    pi = as_prob_matrix(policy, momdp.num_states, momdp.num_actions)
    adj = np.einsum("sa,sat->st", pi > 0, momdp.transition > 0) > 0
    S = adj.shape[0]
    fwd = _reach(adj, 0)
    bwd = _reach(adj.T, 0)
    unreachable = None
    if not fwd.all():
        unreachable = (0, int(np.flatnonzero(~fwd)[0]))
    elif not bwd.all():
        unreachable = (int(np.flatnonzero(~bwd)[0]), 0)
    irreducible = unreachable is None
    if not irreducible:
        return ErgodicityReport(False, False, False, 0, unreachable)

    level = np.full(S, -1, dtype=np.int64)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(int(v))
        frontier = nxt
    period = 0
    for u, v in np.argwhere(adj):
        period = math.gcd(period, int(level[u] + 1 - level[v]))
    period = abs(period)
    return ErgodicityReport(period == 1, True, period == 1, period, None)


def require_ergodic(momdp: TabularMOMDP, policy) -> None:
    report = check_ergodic(momdp, policy)
    if not report.ergodic:
        if not report.irreducible:
            raise NonErgodicError(
                f"induced chain is reducible: state {report.unreachable[1]} "
                f"unreachable from state {report.unreachable[0]}"
            )
        raise NonErgodicError(f"induced chain is periodic with period {report.period}")
