"""Quadratic programs over the probability simplex.

Both the weighted-Chebyshev direction problem

    min_lambda ||K_p lambda||^2 - lambda . c      s.t. lambda in simplex

and the plain min-norm problem ``min ||G lambda||^2`` are solved by projected
gradient with a fixed ``1/L`` step, which gives a monotone objective sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import InputError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 10_000


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = 1}`` (sort and threshold)."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise InputError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise InputError("vector has non-finite entries")
    u = -np.sort(-v, kind="stable")
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / k > 0)
    tau = css[rho - 1] / rho
    x = np.maximum(v - tau, 0.0)
    # remove rounding drift so the sum is 1 to machine precision
    return x / x.sum()


def sym_matrix_sqrt(S, tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root through an eigendecomposition."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InputError(f"expected a square matrix, got shape {S.shape}")
    scale = 1.0 + np.abs(S).max()
    if np.abs(S - S.T).max() > tol * scale:
        raise InputError("matrix is not symmetric")
    w, V = np.linalg.eigh((S + S.T) / 2)
    if w.min() < -tol * scale:
        raise InputError(f"matrix is indefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    R = (V * np.sqrt(w)) @ V.T
    return (R + R.T) / 2


def build_Kp(G, p) -> np.ndarray:
    """``diag(sqrt p) sqrt(G^T G) diag(sqrt p)``."""
    G = np.asarray(G, dtype=float)
    p = np.asarray(p, dtype=float).ravel()
    if G.ndim != 2 or G.shape[1] != p.shape[0]:
        raise InputError(f"G of shape {G.shape} does not match p of length {p.shape[0]}")
    if np.any(p < 0):
        raise InputError("weights must be non-negative")
    sp = np.sqrt(p)
    K = sym_matrix_sqrt(G.T @ G)
    Kp = sp[:, None] * K * sp[None, :]
    return (Kp + Kp.T) / 2


@dataclass
class WCQuadratic:
    """``f(lambda) = ||K_p lambda||^2 - lambda . c``."""

    K_p: np.ndarray
    c: np.ndarray
    u: float = 0.0

    def __post_init__(self):
        self.K_p = np.asarray(self.K_p, dtype=float)
        self.c = np.asarray(self.c, dtype=float).ravel()
        M = self.c.shape[0]
        if self.K_p.shape != (M, M):
            raise InputError(f"K_p shape {self.K_p.shape} does not match c of length {M}")
        if np.abs(self.K_p - self.K_p.T).max(initial=0.0) > 1e-9:
            raise InputError("K_p must be symmetric")
        if M and np.linalg.eigvalsh(self.K_p).min() < -1e-9:
            raise InputError("K_p must be positive semidefinite")

    @classmethod
    def from_regret(cls, K_p, p, J_ub, J_hat, u: float) -> "WCQuadratic":
        """Linear term ``c = u * (p * (J_ub - J_hat))``."""
        if u < 0:
            raise InputError(f"trade-off u must be >= 0, got {u}")
        c = u * (np.asarray(p, dtype=float) * (np.asarray(J_ub, dtype=float) - np.asarray(J_hat, dtype=float)))
        return cls(K_p, c, u)

    @property
    def size(self) -> int:
        return self.c.shape[0]

    def hessian_half(self) -> np.ndarray:
        return self.K_p @ self.K_p

    def objective(self, lam) -> float:
        lam = np.asarray(lam, dtype=float)
        Kl = self.K_p @ lam
        return float(Kl @ Kl - lam @ self.c)


@dataclass
class QPResult:
    lam: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: Optional[List[float]] = field(default=None, repr=False)


def solve_simplex_qp(
    q: WCQuadratic,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    lam0=None,
    record: bool = False,
) -> QPResult:
    """Projected gradient with step ``1/L``, ``L = 2 lambda_max(K_p^2) + 1e-12``."""
    M = q.size
    if M == 0:
        raise InputError("empty QP")
    if M == 1:
        lam = np.ones(1)
        return QPResult(lam, q.objective(lam), 0, True, [q.objective(lam)] if record else None)
    H = q.hessian_half()
    uniform = np.full(M, 1.0 / M)
    if not np.any(H) and not np.any(q.c):
        return QPResult(uniform, 0.0, 0, True, [0.0] if record else None)
    L = 2.0 * float(np.linalg.eigvalsh(H).max()) + 1e-12
    lam = uniform if lam0 is None else project_simplex(lam0)
    history = [q.objective(lam)] if record else None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        grad = 2.0 * (H @ lam) - q.c
        new = project_simplex(lam - grad / L)
        delta = np.linalg.norm(new - lam)
        lam = new
        if record:
            history.append(q.objective(lam))
        if delta <= tol:
            converged = True
            break
    return QPResult(lam, q.objective(lam), it, converged, history)


def min_norm_lambda(G, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS) -> QPResult:
    """``min ||G lambda||^2`` over the simplex; the objective is reported as ``||G lambda||^2``."""
    G = np.asarray(G, dtype=float)
    if G.ndim != 2:
        raise InputError(f"G must be 2-d, got shape {G.shape}")
    if not np.all(np.isfinite(G)):
        raise InputError("G has non-finite entries")
    M = G.shape[1]
    K = sym_matrix_sqrt(G.T @ G)
    res = solve_simplex_qp(WCQuadratic(K, np.zeros(M)), tol=tol, max_iters=max_iters)
    g = G @ res.lam
    res.objective = float(g @ g)
    return res

