"""The weighted-Chebyshev MGDA actor and the full actor-critic loop.

One outer iteration ``t``:

1. critic: ``N`` batches of ``D`` transitions update every objective's weights;
2. actor: ``B`` transitions give per-objective gradient columns
   ``g^i = -(1/B) sum_l delta^i_l psi_l``;
3. ``lambda_hat`` solves ``min ||K_p lambda||^2 - u lambda . (p * (J_ub - J_hat))``
   over the simplex;
4. momentum ``lambda_t = (1 - eta_t) lambda_{t-1} + eta_t lambda_hat``;
5. ``theta <- theta - alpha G (p * lambda_t)``.

All sampling shares one Markov stream; the chain is never reset.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import oracle
from .critic import CriticConfig, CriticState, batch_td_errors, run_critic
from .errors import ConfigError, DivergenceError, InputError
from .momdp import MarkovStream, TabularMOMDP, require_ergodic
from .policy import FeatureMap, SoftmaxPolicy
from .qp import DEFAULT_MAX_ITERS, DEFAULT_TOL, QPResult, WCQuadratic, build_Kp, solve_simplex_qp

log = logging.getLogger(__name__)

DEFAULT_CLAMP_EPS = 1e-4
ETA_SCHEDULES = ("inverse_square", "fixed")
# largest admissible momentum; only reachable when p_min = 1 (a single objective)
_ETA_CAP = 1.0 - 1e-12
EXACT_LIMIT = 2000  # oracle quantities are computed up to this many states


@dataclass(frozen=True)
class WeightVector:
    """Exploration weights on the simplex with every entry at least ``clamp_eps``."""

    p: np.ndarray
    clamp_eps: float = DEFAULT_CLAMP_EPS
    clamped: bool = False

    @classmethod
    def from_values(cls, values, clamp_eps: float = DEFAULT_CLAMP_EPS) -> "WeightVector":
        """Normalize to unit sum, then lift entries below ``clamp_eps`` to it.

        Lifted mass is taken proportionally from the remaining entries, repeating
        until no entry falls below the floor.
        """
        raw = np.asarray(values, dtype=float).ravel()
        if raw.size == 0 or not np.all(np.isfinite(raw)) or np.any(raw < 0) or raw.sum() <= 0:
            raise InputError(f"weights must be finite, non-negative and not all zero: {raw.tolist()}")
        M = raw.size
        if not 0 < clamp_eps * M <= 1:
            raise InputError(f"clamp_eps={clamp_eps} infeasible for {M} objectives")
        p = raw / raw.sum()
        floor = np.zeros(M, dtype=bool)
        while True:
            low = (p < clamp_eps) & ~floor
            if not low.any():
                break
            floor |= low
            free = ~floor
            p = np.where(floor, clamp_eps, p)
            if free.any():
                p[free] *= (1.0 - clamp_eps * floor.sum()) / p[free].sum()
        clamped = bool(floor.any())
        if clamped:
            log.info("weight vector %s clamped to %s", raw.tolist(), p.tolist())
        p.setflags(write=False)
        return cls(p, clamp_eps, clamped)

    @classmethod
    def uniform(cls, M: int, clamp_eps: float = DEFAULT_CLAMP_EPS) -> "WeightVector":
        return cls.from_values(np.ones(M), clamp_eps)

    @property
    def p_min(self) -> float:
        return float(self.p.min())

    def __len__(self):
        return self.p.shape[0]


@dataclass(frozen=True)
class ActorConfig:
    alpha: float
    B: int = 64
    T: int = 100
    u: float = 1.0
    J_ub: Optional[tuple] = None
    eta_schedule: str = "inverse_square"
    eta: float = 0.0  # constant momentum for the "fixed" schedule
    exact_gradients: bool = False
    gradient_mode: Optional[str] = None  # oracle measure for ablation and gaps
    qp_tol: float = DEFAULT_TOL
    qp_max_iters: int = DEFAULT_MAX_ITERS
    record_theta: bool = False
    record_trace: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"actor step size alpha must be > 0, got {self.alpha}")
        if int(self.B) != self.B or self.B < 1:
            raise ConfigError(f"actor batch size B must be a positive integer, got {self.B}")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"actor iterations T must be a positive integer, got {self.T}")
        if not self.u >= 0:
            raise ConfigError(f"trade-off u must be >= 0, got {self.u}")
        if self.eta_schedule not in ETA_SCHEDULES:
            raise ConfigError(f"eta_schedule must be one of {ETA_SCHEDULES}")
        if self.eta_schedule == "fixed" and not 0 <= self.eta < 1:
            raise ConfigError(f"fixed momentum eta must lie in [0, 1), got {self.eta}")
        if self.J_ub is not None and any(not v >= 0 for v in self.J_ub):
            raise ConfigError("J_ub entries must be >= 0")
        if self.gradient_mode not in (None,) + oracle.GRADIENT_MODES:
            raise ConfigError(f"unknown gradient_mode {self.gradient_mode!r}")

    def eta_t(self, t: int, p_min: float) -> float:
        if self.eta_schedule == "fixed":
            return float(self.eta)
        return min(p_min**2 / t**2, _ETA_CAP)


def default_J_ub(momdp: TabularMOMDP, mode: str) -> np.ndarray:
    """``r_max / (1 - gamma_i)`` (discounted) or ``r_max`` (average)."""
    if mode == "average":
        return np.full(momdp.num_objectives, momdp.r_max)
    return momdp.r_max / (1.0 - momdp.discounts)


def gap_mode(config: ActorConfig, setting: str) -> str:
    """Gradient measure for the ablation and for stationarity gaps.

    The default is the true derivative of the reported objective: discounted
    occupancy in the discounted setting, the stationary measure otherwise.
    """
    if config.gradient_mode is not None:
        return config.gradient_mode
    return "discounted_occupancy" if setting == "discounted" else "stationary"


@dataclass
class GradientEstimate:
    G: np.ndarray  # (d, M), column i estimates -grad J^i
    J_hat: np.ndarray  # (M,)


def estimate_gradients(
    momdp: TabularMOMDP,
    policy: SoftmaxPolicy,
    critic_state: CriticState,
    B: int,
    stream: MarkovStream,
    mode: str = "discounted",
    features: Optional[FeatureMap] = None,
) -> GradientEstimate:
    """Sample ``B`` transitions and form ``G`` from TD errors and scores.

    ``J_hat`` is the critic value averaged over the batch states in the
    discounted setting, and the running average-reward estimate otherwise.
    """
    if features is None:
        features = FeatureMap.tabular(momdp.num_states)
    W = np.asarray(critic_state.weights, dtype=float)
    if not np.all(np.isfinite(W)):
        raise InputError("critic weights must be finite")
    mu = critic_state.avg_reward_est
    if mode == "average" and mu is None:
        raise InputError("average setting needs an average-reward estimate in the critic state")
    probs = policy.probs()
    batch = stream.draw(probs, B)
    psi = policy.scores(batch.states, batch.actions, probs)
    delta = batch_td_errors(W, mu, batch, features.phi, momdp.discounts, mode)
    G = -(psi.T @ delta) / B
    if mode == "discounted":
        J_hat = (features.phi[batch.states] @ W.T).mean(axis=0)
    else:
        J_hat = np.array(mu, dtype=float)
    return GradientEstimate(G, J_hat)


def solve_lambda_hat(
    G, J_hat, p: WeightVector, u: float, J_ub, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS
) -> QPResult:
    Kp = build_Kp(G, p.p)
    q = WCQuadratic.from_regret(Kp, p.p, J_ub, J_hat, u)
    res = solve_simplex_qp(q, tol=tol, max_iters=max_iters)
    if not res.converged:
        log.warning("lambda subproblem stopped after %d iterations without reaching tol", res.iterations)
    return res


def momentum_update(lambda_prev, lambda_hat, eta_t: float) -> np.ndarray:
    if not 0.0 <= eta_t < 1.0:
        raise InputError(f"momentum coefficient must lie in [0, 1), got {eta_t}")
    return (1.0 - eta_t) * np.asarray(lambda_prev, dtype=float) + eta_t * np.asarray(lambda_hat, dtype=float)


def policy_step(theta, G, p, lam, alpha: float) -> np.ndarray:
    """``theta - alpha G (p * lambda)``; ``G`` holds negative gradients, so this ascends."""
    p = p.p if isinstance(p, WeightVector) else np.asarray(p, dtype=float)
    new = np.asarray(theta, dtype=float) - alpha * (np.asarray(G, dtype=float) @ (p * np.asarray(lam, dtype=float)))
    if not np.all(np.isfinite(new)):
        raise DivergenceError("policy parameters became non-finite")
    return new


@dataclass
class RunResult:
    final_theta: np.ndarray
    T_hat: int
    lambda_hist: np.ndarray  # (T, M)
    J_final: Optional[np.ndarray]
    stationarity_gap: Optional[float]
    last_theta: np.ndarray
    J_last: Optional[np.ndarray]
    gap_last: Optional[float]
    samples: int
    theta_hist: Optional[np.ndarray] = None  # (T, d): theta_t used in iteration t
    trace: Optional[List[dict]] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, list):
                return [{k: conv(x) for k, x in item.items()} for item in v]
            return v

        return {k: conv(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "RunResult":
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
        return cls(
            final_theta=arr(data["final_theta"]),
            T_hat=int(data["T_hat"]),
            lambda_hist=arr(data["lambda_hist"]),
            J_final=arr(data["J_final"]),
            stationarity_gap=data["stationarity_gap"],
            last_theta=arr(data["last_theta"]),
            J_last=arr(data["J_last"]),
            gap_last=data["gap_last"],
            samples=int(data["samples"]),
            theta_hist=arr(data.get("theta_hist")),
            trace=data.get("trace"),
        )


def run_mocha(
    momdp: TabularMOMDP,
    policy_init: SoftmaxPolicy,
    critic_config: CriticConfig,
    actor_config: ActorConfig,
    p: WeightVector,
    rng: np.random.Generator,
    features: Optional[FeatureMap] = None,
    critic_init: Optional[CriticState] = None,
) -> RunResult:
    """Algorithm loop for a single weight vector; deterministic given ``rng``'s seed.

    With ``actor_config.exact_gradients`` the critic and sampling are skipped
    and ``G`` comes from the oracle, which isolates the optimization behaviour.
    """
    M = momdp.num_objectives
    if len(p) != M:
        raise ConfigError(f"weight vector has {len(p)} entries for {M} objectives")
    mode = critic_config.mode
    if features is None:
        features = FeatureMap.tabular(momdp.num_states)
    require_ergodic(momdp, policy_init)
    J_ub = np.asarray(actor_config.J_ub if actor_config.J_ub is not None else default_J_ub(momdp, mode), dtype=float)
    if J_ub.shape != (M,):
        raise ConfigError(f"J_ub must have {M} entries")
    gmode = gap_mode(actor_config, mode)
    exact = actor_config.exact_gradients
    stream = None if exact else MarkovStream(momdp, rng)
    critic = critic_init or CriticState.zeros(M, features.dim, mode)
    policy = policy_init
    lam = np.full(M, 1.0 / M)
    T = int(actor_config.T)
    lambda_hist = np.empty((T, M))
    theta_hist = np.empty((T, policy.dim))
    trace = [] if actor_config.record_trace else None

    for t in range(1, T + 1):
        theta_hist[t - 1] = policy.theta
        try:
            if exact:
                G = -oracle.gradient_matrix(momdp, policy, gmode, mode)
                J_hat = oracle.objective_vector(momdp, policy, mode)
            else:
                critic = run_critic(momdp, policy, critic_config, critic, features=features,
                                    stream=stream, check_ergodicity=False)
                est = estimate_gradients(momdp, policy, critic, actor_config.B, stream, mode, features)
                G, J_hat = est.G, est.J_hat
            qp = solve_lambda_hat(G, J_hat, p, actor_config.u, J_ub,
                                  actor_config.qp_tol, actor_config.qp_max_iters)
            lam = momentum_update(lam, qp.lam, actor_config.eta_t(t, p.p_min))
            theta = policy_step(policy.theta, G, p, lam, actor_config.alpha)
        except DivergenceError as err:
            raise DivergenceError(f"iteration {t}: {err}", objective=err.objective, iteration=t) from err
        lambda_hist[t - 1] = lam
        if trace is not None:
            trace.append({"G": G, "J_hat": J_hat, "lambda_hat": qp.lam, "qp_objective": qp.objective,
                          "qp_converged": qp.converged, "lambda": lam.copy()})
        policy = policy.with_theta(theta)

    T_hat = int(rng.integers(1, T + 1))
    final_theta = theta_hist[T_hat - 1].copy()
    J_final = gap = J_last = gap_last = None
    if momdp.num_states <= EXACT_LIMIT:
        out_policy = policy_init.with_theta(final_theta)
        J_final = oracle.objective_vector(momdp, out_policy, mode)
        gap = oracle.pareto_stationarity_gap(momdp, out_policy, gmode, mode)
        J_last = oracle.objective_vector(momdp, policy, mode)
        gap_last = oracle.pareto_stationarity_gap(momdp, policy, gmode, mode)
    return RunResult(
        final_theta=final_theta,
        T_hat=T_hat,
        lambda_hist=lambda_hist,
        J_final=J_final,
        stationarity_gap=gap,
        last_theta=policy.theta.copy(),
        J_last=J_last,
        gap_last=gap_last,
        samples=0 if stream is None else stream.count,
        theta_hist=theta_hist if actor_config.record_theta else None,
        trace=trace,
    )
