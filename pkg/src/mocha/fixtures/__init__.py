"""Desk-scale MOMDP fixtures.

Each constructor is deterministic. The same instances ship as JSON next to this
module so that CLI configs can reference them by path.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..momdp import TabularMOMDP

FIXTURE_DIR = Path(__file__).resolve().parent


def _walk_kernel(num_states: int, success: float, noise_uniform: bool) -> np.ndarray:
    """Actions ``left``, ``right`` and ``stay`` on a line of states."""
    S = num_states
    P = np.zeros((S, 3, S))
    for s in range(S):
        targets = (max(s - 1, 0), min(s + 1, S - 1), s)
        for a, t in enumerate(targets):
            if noise_uniform:
                P[s, a] = (1.0 - success) / S
            else:
                P[s, a, s] = 1.0 - success
            P[s, a, t] += success
    return P


def conflict5() -> TabularMOMDP:
    """5 states, 3 actions, 2 objectives pulling toward opposite ends.

    Objective 1 pays at the right end, objective 2 at the left end, and the
    middle state pays a compromise to both. Moving pays 60% of staying, so the
    uniform policy is not Pareto stationary.
    """
    P = _walk_kernel(5, success=0.8, noise_uniform=True)
    r1 = np.array([0.0, 0.1, 0.55, 0.6, 1.0])
    base = np.stack([r1, r1[::-1]], axis=1)
    R = np.stack([0.6 * base, 0.6 * base, base], axis=1)
    return TabularMOMDP(P, R, discounts=[0.9, 0.85], r_max=1.0, start_dist=np.full(5, 0.2), name="conflict5")


def conflict3() -> TabularMOMDP:
    """3 states, 2 actions (left/right), 2 conflicting objectives; 8 deterministic policies."""
    S = 3
    P = np.zeros((S, 2, S))
    for s in range(S):
        for a, t in enumerate((max(s - 1, 0), min(s + 1, S - 1))):
            P[s, a, s] += 0.1
            P[s, a, t] += 0.9
    r1 = np.array([[0.0, 0.1], [0.5, 0.4], [1.0, 0.9]])
    r2 = np.array([[0.9, 1.0], [0.45, 0.5], [0.0, 0.1]])
    R = np.stack([r1, r2], axis=2)
    return TabularMOMDP(P, R, discounts=[0.8, 0.8], r_max=1.0, start_dist=np.full(S, 1.0 / S), name="conflict3")


def antipodal3() -> TabularMOMDP:
    """``r2 = r_max - r1``: the two gradients are exact negatives, so every policy is Pareto stationary."""
    base = conflict3()
    r1 = base.rewards[:, :, 0]
    R = np.stack([r1, base.r_max - r1], axis=2)
    return TabularMOMDP(base.transition, R, discounts=[0.8, 0.8], r_max=base.r_max,
                        start_dist=base.start_dist, name="antipodal3")


def chain2(a: float = 0.3, b: float = 0.2) -> TabularMOMDP:
    """Two states, one action, flip probabilities ``a`` (0 -> 1) and ``b`` (1 -> 0)."""
    P = np.array([[[1 - a, a]], [[b, 1 - b]]])
    R = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    return TabularMOMDP(P, R, discounts=[0.9, 0.9], r_max=1.0, start_dist=[0.5, 0.5], name="chain2")


def random_momdp(num_states: int, num_actions: int, num_objectives: int, rng: np.random.Generator,
                 gamma_range=(0.5, 0.95)) -> TabularMOMDP:
    """Dense Dirichlet kernel (hence ergodic under any positive policy) and uniform rewards."""
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    R = rng.random((num_states, num_actions, num_objectives))
    gammas = rng.uniform(*gamma_range, size=num_objectives)
    return TabularMOMDP(P, R, discounts=gammas, r_max=1.0,
                        start_dist=np.full(num_states, 1.0 / num_states), name="random")


SHIPPED = {
    "conflict5": conflict5,
    "conflict3": conflict3,
    "antipodal3": antipodal3,
    "chain2": chain2,
}


def fixture_path(name: str) -> Path:
    return FIXTURE_DIR / f"{name}.json"


def load(name: str) -> TabularMOMDP:
    if name not in SHIPPED:
        raise KeyError(f"unknown fixture {name!r}; available: {sorted(SHIPPED)}")
    return SHIPPED[name]()


def write_all(directory=FIXTURE_DIR) -> None:
    for name, make in SHIPPED.items():
        make().save(Path(directory) / f"{name}.json")
