"""Weight sweeps over the simplex, frontier export and off-policy NCIS scoring."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import oracle
from .actor import DEFAULT_CLAMP_EPS, ActorConfig, WeightVector, run_mocha
from .critic import CriticConfig
from .errors import DataError, InputError, MochaError
from .momdp import MarkovStream, TabularMOMDP
from .policy import FeatureMap, SoftmaxPolicy, as_prob_matrix

log = logging.getLogger(__name__)

GRID_LIMIT = 10**5
MC_STEPS = 10**5
DEFAULT_GAP_TOL = 1e-3
_MC_DISCOUNT_FLOOR = 1e-6


@dataclass(frozen=True)
class ExplorationSet:
    weights: tuple
    resolution: Optional[int] = None  # None for an explicit list

    def __len__(self):
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    @classmethod
    def from_list(cls, values: Sequence, clamp_eps: float = DEFAULT_CLAMP_EPS) -> "ExplorationSet":
        """Clamp every vector and drop duplicates, keeping first occurrences."""
        out, seen = [], set()
        for v in values:
            w = WeightVector.from_values(v, clamp_eps)
            key = tuple(w.p.tolist())
            if key not in seen:
                seen.add(key)
                out.append(w)
        if not out:
            raise InputError("exploration set is empty")
        if len({len(w) for w in out}) != 1:
            raise InputError("weight vectors have different lengths")
        return cls(tuple(out))


def grid_size(M: int, resolution: int) -> int:
    return math.comb(resolution + M - 1, M - 1)


def generate_weight_grid(M: int, resolution: int, clamp_eps: float = DEFAULT_CLAMP_EPS) -> ExplorationSet:
    """All points ``k / resolution`` with ``k`` a composition of ``resolution`` into ``M`` parts.

    Ordered lexicographically by descending first coordinate, so the first point
    is the one-hot vector for objective 1.
    """
    if int(M) != M or M < 1:
        raise InputError(f"number of objectives must be a positive integer, got {M}")
    if int(resolution) != resolution or resolution < 1:
        raise InputError(f"grid resolution must be a positive integer, got {resolution}")
    n = grid_size(M, resolution)
    if n > GRID_LIMIT:
        raise InputError(f"weight grid would have {n} points (limit {GRID_LIMIT})")
    points = []
    # stars and bars: choose M - 1 bar positions among resolution + M - 1 slots
    for bars in itertools.combinations(range(resolution + M - 1), M - 1):
        edges = (-1,) + bars + (resolution + M - 1,)
        points.append([edges[k + 1] - edges[k] - 1 for k in range(M)])
    points.sort(reverse=True)
    grid = ExplorationSet.from_list(np.array(points, dtype=float) / resolution, clamp_eps)
    return ExplorationSet(grid.weights, resolution)


@dataclass
class FrontierPoint:
    p: WeightVector
    J_final: Optional[np.ndarray]
    stationarity_gap: Optional[float]
    seed: int
    converged: bool
    J_method: str = "exact"  # or "monte_carlo"
    J_samples: int = 0
    T_hat: Optional[int] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "p": self.p.p.tolist(),
            "clamp_eps": self.p.clamp_eps,
            "J_final": None if self.J_final is None else np.asarray(self.J_final).tolist(),
            "stationarity_gap": self.stationarity_gap,
            "seed": self.seed,
            "converged": self.converged,
            "J_method": self.J_method,
            "J_samples": self.J_samples,
            "T_hat": self.T_hat,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FrontierPoint":
        # stored p is already clamped, so re-clamping is the identity up to rounding
        p = np.asarray(data["p"], dtype=float)
        w = WeightVector(p, data["clamp_eps"], False)
        p.setflags(write=False)
        J = data["J_final"]
        return cls(
            p=w,
            J_final=None if J is None else np.asarray(J, dtype=float),
            stationarity_gap=data["stationarity_gap"],
            seed=int(data["seed"]),
            converged=bool(data["converged"]),
            J_method=data.get("J_method", "exact"),
            J_samples=int(data.get("J_samples", 0)),
            T_hat=data.get("T_hat"),
            error=data.get("error"),
        )

    def same_as(self, other: "FrontierPoint") -> bool:
        return self.to_dict() == other.to_dict()


@dataclass
class ExploreConfig:
    critic: CriticConfig
    actor: ActorConfig
    features: Optional[FeatureMap] = None
    theta_init: Optional[np.ndarray] = None
    gap_tol: float = DEFAULT_GAP_TOL  # a point is converged when its gap is at most this
    mc_steps: int = MC_STEPS


def monte_carlo_objectives(momdp: TabularMOMDP, policy, setting: str, rng: np.random.Generator,
                           steps: int = MC_STEPS) -> np.ndarray:
    """Simulated objective vector using about ``steps`` transitions.

    Discounted: parallel episodes from the start distribution, truncated once
    every discount power drops below 1e-6. Average: one long chain.
    """
    oracle._check_setting(setting)
    S = momdp.num_states
    pi = as_prob_matrix(policy, S, momdp.num_actions)
    if setting == "average":
        stream = MarkovStream(momdp, rng)
        return stream.draw(pi, int(steps)).rewards.mean(axis=0)
    gammas = momdp.discounts
    H = int(math.ceil(math.log(_MC_DISCOUNT_FLOOR) / math.log(max(float(gammas.max()), 1e-12))))
    H = max(1, min(H, int(steps)))
    K = max(1, int(steps) // H)
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = momdp.cumulative_transition
    s = rng.choice(S, size=K, p=momdp.start_dist)
    total = np.zeros((K, momdp.num_objectives))
    disc = np.ones(momdp.num_objectives)
    for _ in range(H):
        a = np.minimum((cum_pi[s] <= rng.random(K)[:, None]).sum(axis=1), momdp.num_actions - 1)
        total += disc * momdp.rewards[s, a]
        disc = disc * gammas
        s = np.minimum((cum_P[s, a] <= rng.random(K)[:, None]).sum(axis=1), S - 1)
    return total.mean(axis=0)


def _run_point(momdp: TabularMOMDP, config: ExploreConfig, p: WeightVector, seed: int) -> FrontierPoint:
    rng = np.random.default_rng(seed)
    S, A = momdp.num_states, momdp.num_actions
    policy = SoftmaxPolicy.tabular(S, A, config.theta_init)
    try:
        res = run_mocha(momdp, policy, config.critic, config.actor, p, rng, features=config.features)
    except MochaError as err:
        log.warning("run failed for p=%s seed=%d: %s", p.p.tolist(), seed, err)
        return FrontierPoint(p, None, None, seed, False, J_method="none", error=f"{type(err).__name__}: {err}")
    J, method, samples = res.J_final, "exact", 0
    if J is None:
        mc_rng = np.random.default_rng([seed, 1])
        J = monte_carlo_objectives(momdp, policy.with_theta(res.final_theta), config.critic.mode, mc_rng,
                                   config.mc_steps)
        method, samples = "monte_carlo", int(config.mc_steps)
    gap = res.stationarity_gap
    converged = gap is not None and gap <= config.gap_tol
    return FrontierPoint(p, np.asarray(J), gap, int(seed), bool(converged), method, samples, res.T_hat)


def explore(momdp: TabularMOMDP, config: ExploreConfig, weights: ExplorationSet, seeds: Sequence[int],
            parallelism: int = 1) -> List[FrontierPoint]:
    """One run per ``(p, seed)``; output sorted by ``p`` then seed whatever the pool size.

    Every run seeds its own generator from its seed, so scheduling cannot leak
    into results. A failed run is recorded as a point with ``error`` set.
    """
    if int(parallelism) != parallelism or parallelism < 1:
        raise InputError(f"parallelism must be a positive integer, got {parallelism}")
    if not seeds:
        raise InputError("at least one seed is required")
    for w in weights:
        if len(w) != momdp.num_objectives:
            raise InputError(f"weight vector of length {len(w)} for {momdp.num_objectives} objectives")
    jobs = sorted(((w, int(s)) for w in weights for s in seeds), key=lambda j: (tuple(j[0].p.tolist()), j[1]))
    if parallelism == 1:
        return [_run_point(momdp, config, w, s) for w, s in jobs]
    with ProcessPoolExecutor(max_workers=int(parallelism)) as pool:
        futures = [pool.submit(_run_point, momdp, config, w, s) for w, s in jobs]
        return [f.result() for f in futures]


def _fmt(x) -> str:
    return "%.17g" % x


def frontier_csv(points: Sequence[FrontierPoint], M: Optional[int] = None) -> str:
    if M is None:
        if not points:
            raise InputError("number of objectives needed for an empty frontier")
        M = len(points[0].p)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"p_{i + 1}" for i in range(M)] + [f"J_{i + 1}" for i in range(M)]
                    + ["gap", "seed", "converged"])
    for pt in points:
        J = [""] * M if pt.J_final is None else [_fmt(v) for v in pt.J_final]
        gap = "" if pt.stationarity_gap is None else _fmt(pt.stationarity_gap)
        writer.writerow([_fmt(v) for v in pt.p.p] + J + [gap, pt.seed, "true" if pt.converged else "false"])
    return buf.getvalue()


def frontier_json(points: Sequence[FrontierPoint]) -> str:
    return json.dumps([pt.to_dict() for pt in points], indent=1, sort_keys=True) + "\n"


def export_frontier(points: Sequence[FrontierPoint], path, format: str = "csv", M: Optional[int] = None) -> Path:
    if format == "csv":
        text = frontier_csv(points, M)
    elif format == "json":
        text = frontier_json(points)
    else:
        raise InputError(f"unknown frontier format {format!r}")
    path = Path(path)
    path.write_text(text)
    return path


def load_frontier_json(path) -> List[FrontierPoint]:
    return [FrontierPoint.from_dict(d) for d in json.loads(Path(path).read_text())]


def epsilon_dominated(J, front: np.ndarray, eps: float) -> bool:
    """True when some front point beats ``J`` by more than ``eps`` in every objective."""
    J = np.asarray(J, dtype=float)
    return bool(np.any(np.all(np.asarray(front) > J + eps, axis=1)))


@dataclass
class LoggedDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # (n, M)
    behavior: SoftmaxPolicy
    behavior_probs: np.ndarray = field(init=False, repr=False)  # pi_beta(a_k | s_k)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        n = self.states.shape[0]
        if self.actions.shape != (n,) or self.rewards.ndim != 2 or self.rewards.shape[0] != n:
            raise InputError("dataset columns have inconsistent lengths")
        if n == 0:
            raise InputError("empty dataset")
        S, A = self.behavior.num_states, self.behavior.num_actions
        if self.states.min() < 0 or self.states.max() >= S or self.actions.min() < 0 or self.actions.max() >= A:
            raise InputError(f"logged state or action outside a {S}x{A} policy table")
        self.behavior_probs = self.behavior.probs()[self.states, self.actions]
        zero = np.flatnonzero(self.behavior_probs <= 0)
        if zero.size:
            k = int(zero[0])
            raise DataError(f"behavior probability is zero at step {k} (s={self.states[k]}, a={self.actions[k]})")

    def __len__(self):
        return self.states.shape[0]

    def to_dict(self) -> dict:
        return {
            "num_states": self.behavior.num_states,
            "num_actions": self.behavior.num_actions,
            "behavior_policy_theta": self.behavior.theta.tolist(),
            "steps": [[int(s), int(a), r.tolist()] for s, a, r in zip(self.states, self.actions, self.rewards)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LoggedDataset":
        theta = np.asarray(data["behavior_policy_theta"], dtype=float)
        steps = data["steps"]
        if not steps:
            raise InputError("empty dataset")
        states = np.array([int(st[0]) for st in steps])
        actions = np.array([int(st[1]) for st in steps])
        rewards = np.array([st[2] for st in steps], dtype=float)
        A = int(data.get("num_actions", actions.max() + 1))
        S = data.get("num_states")
        if S is None:
            if theta.size % A:
                raise InputError(f"cannot infer a tabular shape from {theta.size} parameters and {A} actions")
            S = theta.size // A
        return cls(states, actions, rewards, SoftmaxPolicy.tabular(int(S), A, theta))

    @classmethod
    def load(cls, path) -> "LoggedDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def synthetic_dataset(momdp: TabularMOMDP, behavior: SoftmaxPolicy, n: int, rng: np.random.Generator) -> LoggedDataset:
    """Log ``n`` consecutive steps of ``momdp`` under ``behavior``."""
    batch = MarkovStream(momdp, rng).draw(behavior, int(n))
    return LoggedDataset(batch.states, batch.actions, batch.rewards, behavior)


def ncis_evaluate(dataset: LoggedDataset, policy, cap_C: float) -> np.ndarray:
    """``sum CIS r / sum CIS`` per objective, ``CIS = min(C, pi / pi_beta)``."""
    if not cap_C > 0:
        raise InputError(f"cap C must be > 0, got {cap_C}")
    S, A = dataset.behavior.num_states, dataset.behavior.num_actions
    pi = as_prob_matrix(policy, S, A)[dataset.states, dataset.actions]
    cis = np.minimum(cap_C, pi / dataset.behavior_probs)
    total = cis.sum()
    if not total > 0:
        raise DataError("target policy gives zero probability to every logged action")
    return (cis[:, None] * dataset.rewards).sum(axis=0) / total
