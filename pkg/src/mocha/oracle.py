"""Exact desk-scale computations used as ground truth.

Everything here is a dense linear-algebra evaluation over the full state space;
nothing samples. Two value settings are supported:

* ``"discounted"``: ``Q(s,a) = E[sum_t gamma^t r_t | s_0=s, a_0=a]`` (sum from
  t = 0) and the objective ``J = start_dist . V``;
* ``"average"``: ``J = sum_s d(s) rbar(s)`` with differential values solving the
  Poisson equation normalized by ``d . V = 0``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AssumptionViolation, InputError, InstanceTooLargeError, NonErgodicError
from .momdp import TabularMOMDP, check_ergodic, induced_chain
from .policy import FeatureMap, SoftmaxPolicy, as_prob_matrix
from .qp import min_norm_lambda

SETTINGS = ("discounted", "average")
GRADIENT_MODES = ("stationary", "discounted_occupancy")
DENSE_LIMIT = 200
FRONT_LIMIT = 10**6
LAMBDA_A_MIN = 1e-10
# Abel limit used for average rewards of possibly reducible deterministic policies
_ABEL_GAMMA = 1.0 - 1e-8


def _check_setting(setting: str) -> None:
    if setting not in SETTINGS:
        raise InputError(f"unknown setting {setting!r}; expected one of {SETTINGS}")


def _check_objective(momdp: TabularMOMDP, i: int) -> None:
    if not 0 <= i < momdp.num_objectives:
        raise InputError(f"objective {i} out of range [0, {momdp.num_objectives})")


def _probs(momdp, policy) -> np.ndarray:
    return as_prob_matrix(policy, momdp.num_states, momdp.num_actions)


def mean_rewards(momdp: TabularMOMDP, policy) -> np.ndarray:
    """``rbar[i, s] = sum_a pi(a|s) r(s, a, i)``, shape ``(M, S)``."""
    return np.einsum("sa,sai->is", _probs(momdp, policy), momdp.rewards)


# -- stationary distribution ----------------------------------------------------


def _stationary_from_chain(P: np.ndarray) -> np.ndarray:
    S = P.shape[0]
    if S <= DENSE_LIMIT:
        A = P.T - np.eye(S)
        A[-1, :] = 1.0
        rhs = np.zeros(S)
        rhs[-1] = 1.0
        d = np.linalg.solve(A, rhs)
        # one refinement step against the eigen-residual
        d = d + np.linalg.solve(A, rhs - A @ d)
    else:
        d = np.full(S, 1.0 / S)
        for _ in range(100_000):
            nxt = d @ P
            if np.abs(nxt - d).sum() <= 1e-14:
                d = nxt
                break
            d = nxt
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def stationary_distribution(momdp: TabularMOMDP, policy) -> np.ndarray:
    """Unique stationary state distribution of the induced chain."""
    report = check_ergodic(momdp, policy)
    if not report.ergodic:
        raise NonErgodicError(
            "stationary distribution requires an ergodic chain "
            f"(irreducible={report.irreducible}, period={report.period})"
        )
    return _stationary_from_chain(induced_chain(momdp, policy))


# -- value functions ------------------------------------------------------------


@dataclass
class DiscountedValues:
    V: np.ndarray
    Q: np.ndarray
    Adv: np.ndarray


@dataclass
class AverageValues:
    J: float
    V: np.ndarray
    Q: np.ndarray
    Adv: np.ndarray


def exact_values_discounted(momdp: TabularMOMDP, policy, i: int) -> DiscountedValues:
    _check_objective(momdp, i)
    pi = _probs(momdp, policy)
    gamma = float(momdp.discounts[i])
    if not 0.0 <= gamma < 1.0:
        raise InputError(f"discount {gamma} must lie in [0, 1)")
    P = induced_chain(momdp, pi)
    rbar = np.einsum("sa,sa->s", pi, momdp.rewards[:, :, i])
    S = momdp.num_states
    system = np.eye(S) - gamma * P
    if np.linalg.cond(system) > 1e14:  # pragma: no cover - cannot happen for gamma < 1
        raise InputError("singular discounted Bellman system")
    V = np.linalg.solve(system, rbar)
    Q = momdp.rewards[:, :, i] + gamma * momdp.transition @ V
    return DiscountedValues(V, Q, Q - V[:, None])


def exact_values_average(momdp: TabularMOMDP, policy, i: int) -> AverageValues:
    _check_objective(momdp, i)
    pi = _probs(momdp, policy)
    d = stationary_distribution(momdp, pi)
    P = induced_chain(momdp, pi)
    rbar = np.einsum("sa,sa->s", pi, momdp.rewards[:, :, i])
    J = float(d @ rbar)
    S = momdp.num_states
    Z = np.eye(S) - P + np.outer(np.ones(S), d)
    V = np.linalg.solve(Z, rbar - J)
    V = V - (d @ V)  # enforce the normalization against rounding
    Q = momdp.rewards[:, :, i] - J + momdp.transition @ V
    return AverageValues(J, V, Q, Q - V[:, None])


def discounted_occupancy(momdp: TabularMOMDP, policy, gamma: float) -> np.ndarray:
    """Normalized discounted state occupancy ``(1-gamma) sum_t gamma^t P(s_t = .)`` from ``start_dist``."""
    P = induced_chain(momdp, policy)
    S = momdp.num_states
    occ = np.linalg.solve((np.eye(S) - gamma * P).T, momdp.start_dist)
    return (1.0 - gamma) * occ


def objective_vector(momdp: TabularMOMDP, policy, setting: str = "discounted") -> np.ndarray:
    """Exact ``J`` for every objective."""
    _check_setting(setting)
    M = momdp.num_objectives
    if setting == "discounted":
        return np.array(
            [momdp.start_dist @ exact_values_discounted(momdp, policy, i).V for i in range(M)]
        )
    return np.array([exact_values_average(momdp, policy, i).J for i in range(M)])


@dataclass
class ExactEvaluation:
    V: np.ndarray  # (M, S)
    Q: np.ndarray  # (M, S, A)
    Adv: np.ndarray  # (M, S, A)
    J: np.ndarray  # (M,)
    d_theta: np.ndarray  # (S,)
    nu_theta: np.ndarray  # (S, A)
    occupancy_gamma: Optional[np.ndarray] = None  # (M, S), discounted only

    def to_dict(self) -> dict:
        out = {k: (None if v is None else np.asarray(v).tolist()) for k, v in self.__dict__.items()}
        return out


def exact_evaluation(momdp: TabularMOMDP, policy, setting: str = "discounted") -> ExactEvaluation:
    _check_setting(setting)
    pi = _probs(momdp, policy)
    d = stationary_distribution(momdp, pi)
    M = momdp.num_objectives
    if setting == "discounted":
        vals = [exact_values_discounted(momdp, pi, i) for i in range(M)]
        J = np.array([momdp.start_dist @ v.V for v in vals])
        occ = np.array([discounted_occupancy(momdp, pi, g) for g in momdp.discounts])
    else:
        vals = [exact_values_average(momdp, pi, i) for i in range(M)]
        J = np.array([v.J for v in vals])
        occ = None
    return ExactEvaluation(
        V=np.array([v.V for v in vals]),
        Q=np.array([v.Q for v in vals]),
        Adv=np.array([v.Adv for v in vals]),
        J=J,
        d_theta=d,
        nu_theta=d[:, None] * pi,
        occupancy_gamma=occ,
    )


# -- policy gradients -----------------------------------------------------------


def exact_policy_gradient(
    momdp: TabularMOMDP,
    policy: SoftmaxPolicy,
    i: int,
    mode: str = "discounted_occupancy",
    setting: str = "discounted",
) -> np.ndarray:
    """Exact policy gradient of objective ``i``.

    ``mode="stationary"`` returns ``E_{s~d_theta, a~pi}[psi(s,a) Adv(s,a)]``, the
    quantity the sampled actor estimates. ``mode="discounted_occupancy"``
    (discounted setting only) returns the true derivative of
    ``start_dist . V``, i.e. ``E_{s~d_gamma}[psi Adv] / (1 - gamma)``.
    """
    _check_setting(setting)
    if mode not in GRADIENT_MODES:
        raise InputError(f"unknown gradient mode {mode!r}")
    if not isinstance(policy, SoftmaxPolicy):
        raise InputError("exact gradients need a parameterized SoftmaxPolicy")
    pi = policy.probs()
    psi = policy.score_table(pi)
    if setting == "average":
        if mode != "stationary":
            raise InputError("average setting only supports the stationary measure")
        adv = exact_values_average(momdp, pi, i).Adv
        weight = stationary_distribution(momdp, pi)
    else:
        adv = exact_values_discounted(momdp, pi, i).Adv
        if mode == "stationary":
            weight = stationary_distribution(momdp, pi)
        else:
            gamma = float(momdp.discounts[i])
            weight = discounted_occupancy(momdp, pi, gamma) / (1.0 - gamma)
    return np.einsum("s,sa,sa,sad->d", weight, pi, adv, psi)


def gradient_matrix(
    momdp: TabularMOMDP, policy: SoftmaxPolicy, mode: str = "stationary", setting: str = "discounted"
) -> np.ndarray:
    """``[grad J^1, ..., grad J^M]`` of shape ``(d, M)``."""
    return np.column_stack(
        [exact_policy_gradient(momdp, policy, i, mode, setting) for i in range(momdp.num_objectives)]
    )


def pareto_stationarity_gap(
    momdp: TabularMOMDP, policy: SoftmaxPolicy, mode: Optional[str] = None, setting: str = "discounted"
) -> float:
    """``min_{lambda in simplex} ||grad J(theta) lambda||^2``.

    By default ``grad J`` is the true derivative of the reported objective:
    discounted-occupancy weighting in the discounted setting.
    """
    if mode is None:
        mode = "discounted_occupancy" if setting == "discounted" else "stationary"
    G = gradient_matrix(momdp, policy, mode, setting)
    return min_norm_lambda(G).objective


def estimate_smoothness(
    momdp: TabularMOMDP,
    policy: SoftmaxPolicy,
    rng: np.random.Generator,
    probes: int = 8,
    radius: float = 1e-2,
    mode: str = "stationary",
    setting: str = "discounted",
) -> float:
    """Empirical gradient-Lipschitz constant around ``policy.theta``."""
    G0 = gradient_matrix(momdp, policy, mode, setting)
    best = 0.0
    for _ in range(probes):
        step = rng.standard_normal(policy.dim)
        step *= radius / np.linalg.norm(step)
        G1 = gradient_matrix(momdp, policy.with_theta(policy.theta + step), mode, setting)
        best = max(best, float(np.linalg.norm(G1 - G0, axis=0).max() / radius))
    return best


# -- TD fixed points and analysis constants -------------------------------------


def td_matrices(momdp: TabularMOMDP, policy, features: FeatureMap, i: int, setting: str):
    """``(A_theta, b)`` for objective ``i``.

    Discounted: ``A = E[(gamma phi(s') - phi(s)) phi(s)^T]``, ``b = E[r phi(s)]``.
    Average: ``A = E[(phi(s') - phi(s)) phi(s)^T]``, ``b = E[(r - J) phi(s)]``.
    """
    _check_setting(setting)
    _check_objective(momdp, i)
    if features.num_states != momdp.num_states:
        raise InputError("feature map and MOMDP disagree on the number of states")
    pi = _probs(momdp, policy)
    d = stationary_distribution(momdp, pi)
    P = induced_chain(momdp, pi)
    Phi = features.phi
    rbar = np.einsum("sa,sa->s", pi, momdp.rewards[:, :, i])
    gamma = float(momdp.discounts[i]) if setting == "discounted" else 1.0
    A = Phi.T @ (d[:, None] * (gamma * P @ Phi - Phi))
    if setting == "average":
        rbar = rbar - d @ rbar
    b = Phi.T @ (d * rbar)
    return A, b


def _margin(A: np.ndarray) -> float:
    return -float(np.linalg.eigvalsh(A + A.T).max())


def td_fixed_point(momdp: TabularMOMDP, policy, features: FeatureMap, i: int, setting: str = "discounted"):
    """``w* = -A^{-1} b``."""
    A, b = td_matrices(momdp, policy, features, i, setting)
    margin = _margin(A)
    if margin <= LAMBDA_A_MIN:
        raise AssumptionViolation(
            f"lambda_max(A + A^T) = {-margin:.3e} is not negative; TD fixed point is not well posed"
        )
    return -np.linalg.solve(A, b)


@dataclass
class AnalysisConstants:
    setting: str
    A_theta: np.ndarray  # (M, d, d)
    b: np.ndarray  # (M, d): b^i (average) or b'^i (discounted)
    w_star: np.ndarray  # (M, d)
    lambda_A: float
    C_A: float
    beta_max: float
    R_w_bound: float
    w_star_norms: np.ndarray
    R_w_ok: bool
    zeta_approx: float
    kappa: Optional[float] = None
    rho: Optional[float] = None
    L_hat: Optional[float] = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return out


def matrix_A_and_constants(
    momdp: TabularMOMDP,
    policy,
    features: FeatureMap,
    setting: str = "discounted",
    mixing_horizon: int = 200,
    smoothness_rng: Optional[np.random.Generator] = None,
) -> AnalysisConstants:
    """Spectral margin, fixed-point bounds and approximation error at ``policy``."""
    _check_setting(setting)
    pi = _probs(momdp, policy)
    M = momdp.num_objectives
    mats = [td_matrices(momdp, pi, features, i, setting) for i in range(M)]
    A_all = np.array([m[0] for m in mats])
    b_all = np.array([m[1] for m in mats])
    margins = [_margin(A) for A in A_all]
    lam_A = min(margins)
    if lam_A <= LAMBDA_A_MIN:
        raise AssumptionViolation(
            f"lambda_max(A + A^T) = {-lam_A:.3e} violates the negative-definiteness margin"
        )
    w_star = np.array([-np.linalg.solve(A, b) for A, b in zip(A_all, b_all)])
    R_w = (4.0 if setting == "average" else 2.0) * momdp.r_max / lam_A
    norms = np.linalg.norm(w_star, axis=1)
    C_A = float(max(np.linalg.norm(A, "fro") for A in A_all))
    d = stationary_distribution(momdp, pi)
    if setting == "discounted":
        V = np.array([exact_values_discounted(momdp, pi, i).V for i in range(M)])
    else:
        V = np.array([exact_values_average(momdp, pi, i).V for i in range(M)])
    resid = V - w_star @ features.phi.T
    zeta = float(max(d @ (r * r) for r in resid))
    fit = estimate_mixing(momdp, pi, mixing_horizon)
    L_hat = None
    if smoothness_rng is not None and isinstance(policy, SoftmaxPolicy):
        L_hat = estimate_smoothness(momdp, policy, smoothness_rng, setting=setting)
    return AnalysisConstants(
        setting=setting,
        A_theta=A_all,
        b=b_all,
        w_star=w_star,
        lambda_A=lam_A,
        C_A=C_A,
        beta_max=min(lam_A / (8.0 * C_A**2), 4.0 / lam_A),
        R_w_bound=R_w,
        w_star_norms=norms,
        R_w_ok=bool(np.all(norms <= R_w)),
        zeta_approx=zeta,
        kappa=fit.kappa,
        rho=fit.rho,
        L_hat=L_hat,
    )


# -- mixing ---------------------------------------------------------------------


@dataclass
class MixingFit:
    kappa: float
    rho: float
    tv: np.ndarray  # m_t for t = 0..horizon
    max_residual: float
    fitted_range: tuple = field(default=(0, 0))


_TV_FLOOR = 1e-12


def estimate_mixing(momdp: TabularMOMDP, policy, horizon: int = 200) -> MixingFit:
    """Exact worst-case TV distances ``m_t`` and an envelope ``m_t <= kappa rho^t``.

    ``rho`` comes from a log-linear fit over ``t >= 1``; ``kappa`` is then the
    smallest constant covering every ``m_t`` above the rounding floor.
    """
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    pi = _probs(momdp, policy)
    d = stationary_distribution(momdp, pi)
    P = induced_chain(momdp, pi)
    S = P.shape[0]
    Pt = np.eye(S)
    tv = np.empty(horizon + 1)
    for t in range(horizon + 1):
        tv[t] = 0.5 * np.abs(Pt - d[None, :]).sum(axis=1).max()
        Pt = Pt @ P
    ts = np.flatnonzero(tv > _TV_FLOOR)
    ts = ts[ts >= 1]
    eps = float(np.finfo(float).eps)
    if ts.size == 0:
        return MixingFit(kappa=max(tv[0], eps), rho=eps, tv=tv, max_residual=0.0, fitted_range=(0, 0))
    if ts.size == 1:
        ts = np.array([0, ts[0]])
    logm = np.log(tv[ts])
    slope, intercept = np.polyfit(ts.astype(float), logm, 1)
    resid = logm - (slope * ts + intercept)
    rho = float(np.clip(np.exp(slope), eps, 1.0 - eps))
    # smallest kappa making kappa rho^t an envelope of every point above the floor, t = 0 included
    env = np.concatenate([[0], ts])
    kappa = float(np.max(np.log(tv[env]) - env * np.log(rho)))
    kappa = float(np.exp(kappa))
    return MixingFit(kappa, rho, tv, float(np.abs(resid).max()), (int(ts[0]), int(ts[-1])))


# -- Pareto front by enumeration --------------------------------------------------


@dataclass
class ParetoFront:
    values: np.ndarray  # (n, M) objective vectors on the front
    policies: np.ndarray  # (n, S) deterministic action choices
    weak: bool

    def __len__(self):
        return self.values.shape[0]

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "policies": self.policies.tolist(), "weak": self.weak}


def _deterministic_values(momdp: TabularMOMDP, choices: np.ndarray, setting: str) -> np.ndarray:
    S = momdp.num_states
    idx = np.arange(S)
    P = momdp.transition[idx[None, :], choices]  # (n, S, S)
    R = momdp.rewards[idx[None, :], choices]  # (n, S, M)
    if setting == "discounted":
        out = np.empty((choices.shape[0], momdp.num_objectives))
        for i, g in enumerate(momdp.discounts):
            V = np.linalg.solve(np.eye(S)[None] - g * P, R[:, :, i, None])[..., 0]
            out[:, i] = V @ momdp.start_dist
        return out
    g = _ABEL_GAMMA
    V = np.linalg.solve(np.eye(S)[None] - g * P, R)
    return (1.0 - g) * np.einsum("s,nsi->ni", momdp.start_dist, V)


def _non_dominated(values: np.ndarray, weak: bool, atol: float = 1e-12) -> np.ndarray:
    keep = np.ones(values.shape[0], dtype=bool)
    for k in range(values.shape[0]):
        v = values[k]
        if weak:
            dominated = np.any(np.all(values > v + atol, axis=1))
        else:
            ge = np.all(values >= v - atol, axis=1)
            gt = np.any(values > v + atol, axis=1)
            dominated = np.any(ge & gt)
        keep[k] = not dominated
    return keep


def brute_force_pareto_front(momdp: TabularMOMDP, setting: str = "discounted", weak: bool = False) -> ParetoFront:
    """Enumerate every deterministic policy and keep the non-dominated objective vectors."""
    _check_setting(setting)
    S, A = momdp.num_states, momdp.num_actions
    count = A**S
    if count > FRONT_LIMIT:
        raise InstanceTooLargeError(f"{A}^{S} = {count} deterministic policies exceeds {FRONT_LIMIT}")
    choices = np.array(list(itertools.product(range(A), repeat=S)), dtype=np.int64)
    values = np.vstack(
        [_deterministic_values(momdp, choices[k : k + 4096], setting) for k in range(0, count, 4096)]
    )
    keep = _non_dominated(values, weak)
    vals, pols = values[keep], choices[keep]
    _, first = np.unique(np.round(vals, 10), axis=0, return_index=True)
    first = np.sort(first)
    return ParetoFront(vals[first], pols[first], weak)


def deterministic_objectives(momdp: TabularMOMDP, choices, setting: str = "discounted") -> np.ndarray:
    """Objective vectors for explicit deterministic policies, shape ``(n, M)``."""
    choices = np.atleast_2d(np.asarray(choices, dtype=np.int64))
    return _deterministic_values(momdp, choices, setting)
