"""Mini-batch multi-objective TD(0) with linear value features.

All objectives consume the same transition batch; per-objective weights are the
rows of one ``(M, d)`` matrix so a batch update is a single matrix product.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DivergenceError, InputError
from .momdp import MarkovStream, TabularMOMDP, Transitions, require_ergodic
from .policy import FeatureMap, check_feature_assumptions

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6
MODES = ("discounted", "average")


@dataclass(frozen=True)
class CriticConfig:
    beta: float = 0.1
    N: int = 100
    D: int = 32
    mode: str = "discounted"
    beta_mu: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"critic mode must be one of {MODES}, got {self.mode!r}")
        if not self.beta >= 0:
            raise ConfigError(f"critic step size must be >= 0, got {self.beta}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"critic iterations N must be a positive integer, got {self.N}")
        if int(self.D) != self.D or self.D < 1:
            raise ConfigError(f"critic batch size D must be a positive integer, got {self.D}")
        if not 0 < self.beta_mu <= 1:
            raise ConfigError(f"beta_mu must lie in (0, 1], got {self.beta_mu}")

    def step_size_warning(self, lambda_A: float, C_A: float) -> Optional[str]:
        """Message when ``beta`` exceeds ``min(lambda_A / (8 C_A^2), 4 / lambda_A)``."""
        limit = min(lambda_A / (8.0 * C_A**2), 4.0 / lambda_A)
        if self.beta > limit:
            return f"critic step size {self.beta} exceeds the analysed limit {limit:.4g}"
        return None


@dataclass(frozen=True)
class CriticState:
    weights: np.ndarray  # (M, d)
    avg_reward_est: Optional[np.ndarray] = None  # (M,), average mode only
    last_state: int = 0

    @classmethod
    def zeros(cls, num_objectives: int, dim: int, mode: str = "discounted", last_state: int = 0):
        mu = np.zeros(num_objectives) if mode == "average" else None
        return cls(np.zeros((num_objectives, dim)), mu, last_state)


def td_error_discounted(w, phi_s, phi_s_next, r: float, gamma: float) -> float:
    """``r + gamma phi(s')^T w - phi(s)^T w``."""
    w, phi_s, phi_s_next = (np.asarray(x, dtype=float) for x in (w, phi_s, phi_s_next))
    if not w.shape == phi_s.shape == phi_s_next.shape:
        raise InputError(f"dimension mismatch: w {w.shape}, phi(s) {phi_s.shape}, phi(s') {phi_s_next.shape}")
    return float(r + gamma * (phi_s_next @ w) - phi_s @ w)


def td_error_average(w, phi_s, phi_s_next, r: float, mu: float) -> float:
    """``r - mu + phi(s')^T w - phi(s)^T w``."""
    w, phi_s, phi_s_next = (np.asarray(x, dtype=float) for x in (w, phi_s, phi_s_next))
    if not w.shape == phi_s.shape == phi_s_next.shape:
        raise InputError(f"dimension mismatch: w {w.shape}, phi(s) {phi_s.shape}, phi(s') {phi_s_next.shape}")
    return float(r - mu + phi_s_next @ w - phi_s @ w)


def update_avg_reward_estimate(mu: float, batch_rewards, beta_mu: float, r_max: float = np.inf) -> float:
    """Exponential moving average of batch-mean rewards, clamped to ``[0, r_max]``."""
    batch_rewards = np.asarray(batch_rewards, dtype=float)
    if batch_rewards.size == 0:
        raise InputError("empty reward batch")
    if not 0 < beta_mu <= 1:
        raise InputError(f"beta_mu must lie in (0, 1], got {beta_mu}")
    mu = (1.0 - beta_mu) * mu + beta_mu * batch_rewards.mean()
    return float(min(max(mu, 0.0), r_max))


def batch_td_errors(W, mu, batch: Transitions, phi: np.ndarray, gammas, mode: str) -> np.ndarray:
    """TD errors for every sample and objective, shape ``(n, M)``."""
    v_s = phi[batch.states] @ W.T
    v_next = phi[batch.next_states] @ W.T
    if mode == "discounted":
        return batch.rewards + gammas[None, :] * v_next - v_s
    return batch.rewards - mu[None, :] + v_next - v_s


def critic_batch_update(W, mu, batch: Transitions, phi, gammas, beta: float, mode: str):
    """One update ``w^i += (beta / D) sum_tau delta^i_tau phi(s_tau)`` for all ``i``."""
    delta = batch_td_errors(W, mu, batch, phi, gammas, mode)
    return W + (beta / len(batch)) * (delta.T @ phi[batch.states])


def run_critic(
    momdp: TabularMOMDP,
    policy,
    config: CriticConfig,
    init: CriticState,
    rng: Optional[np.random.Generator] = None,
    features: Optional[FeatureMap] = None,
    stream: Optional[MarkovStream] = None,
    check_ergodicity: bool = True,
) -> CriticState:
    """Run ``N`` batch TD iterations on one continuing Markov stream.

    Pass ``stream`` to continue an existing trajectory (and share its sample
    counter); otherwise a new stream starts from ``init.last_state``.
    """
    if features is None:
        features = FeatureMap.tabular(momdp.num_states)
    phi = features.phi
    if phi.shape[0] != momdp.num_states:
        raise ConfigError("feature map and MOMDP disagree on the number of states")
    if config.mode == "average":
        report = check_feature_assumptions(features, "average")
        if not report.excludes_ones:
            raise ConfigError(
                "average-reward TD needs features whose span excludes the ones vector "
                f"(least-squares residual {report.ones_residual:.2e})"
            )
    if check_ergodicity:
        require_ergodic(momdp, policy)
    M = momdp.num_objectives
    W = np.array(init.weights, dtype=float)
    if W.shape != (M, features.dim):
        raise InputError(f"critic weights shape {W.shape} != ({M}, {features.dim})")
    mu = None
    if config.mode == "average":
        mu = np.zeros(M) if init.avg_reward_est is None else np.array(init.avg_reward_est, dtype=float)
    if stream is None:
        if rng is None:
            raise InputError("run_critic needs an rng or a stream")
        stream = MarkovStream(momdp, rng, state=init.last_state)
    gammas = momdp.discounts
    N, D = int(config.N), int(config.D)
    samples = stream.draw(policy, N * D)
    for k in range(N):
        lo = k * D
        batch = Transitions(*(col[lo : lo + D] for col in samples))
        W = critic_batch_update(W, mu, batch, phi, gammas, config.beta, config.mode)
        if config.mode == "average":
            mean_r = batch.rewards.mean(axis=0)
            mu = np.clip((1.0 - config.beta_mu) * mu + config.beta_mu * mean_r, 0.0, momdp.r_max)
        norms = np.linalg.norm(W, axis=1)
        bad = np.flatnonzero(~(norms <= DIVERGENCE_NORM))
        if bad.size:
            i = int(bad[0])
            raise DivergenceError(
                f"critic diverged for objective {i} at iteration {k + 1} (|w| = {norms[i]:.3e})",
                objective=i,
                iteration=k + 1,
            )
    return CriticState(W, mu, stream.state)

