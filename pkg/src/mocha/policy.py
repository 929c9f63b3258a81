"""Softmax policies over state-action features, and linear value features."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError

RANK_TOL = 1e-8
ONES_TOL = 1e-8


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """``pi(a|s) = exp(theta . x(s,a)) / sum_b exp(theta . x(s,b))``.

    ``features`` has shape ``(S, A, d)``; the tabular constructor uses one-hot
    vectors over ``(s, a)`` pairs so that ``theta`` is the logit table.
    """

    theta: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 3 or feats.shape[2] != theta.shape[0]:
            raise InputError(
                f"features shape {feats.shape} incompatible with theta of length {theta.shape[0]}"
            )
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "features", feats)

    @classmethod
    def tabular(cls, num_states: int, num_actions: int, theta=None) -> "SoftmaxPolicy":
        d = num_states * num_actions
        feats = np.eye(d).reshape(num_states, num_actions, d)
        if theta is None:
            theta = np.zeros(d)
        return cls(theta, feats)

    @classmethod
    def dense(cls, features, theta=None) -> "SoftmaxPolicy":
        features = np.asarray(features, dtype=float)
        if theta is None:
            theta = np.zeros(features.shape[2])
        return cls(theta, features)

    @property
    def num_states(self) -> int:
        return self.features.shape[0]

    @property
    def num_actions(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    @property
    def score_bound(self) -> float:
        """``C = 2 max ||x(s,a)||``, a uniform bound on the score norm."""
        return 2.0 * float(np.linalg.norm(self.features, axis=2).max())

    def with_theta(self, theta) -> "SoftmaxPolicy":
        return SoftmaxPolicy(theta, self.features)

    def _check_theta(self):
        if not np.all(np.isfinite(self.theta)):
            raise InputError("policy parameters contain non-finite entries")

    def logits(self) -> np.ndarray:
        self._check_theta()
        return self.features @ self.theta

    def probs(self) -> np.ndarray:
        """Full ``(S, A)`` action-probability table."""
        return _softmax_rows(self.logits())

    def action_probs(self, s: int) -> np.ndarray:
        if not 0 <= s < self.num_states:
            raise InputError(f"state {s} out of range")
        self._check_theta()
        return _softmax_rows(self.features[s] @ self.theta)

    def score(self, s: int, a: int) -> np.ndarray:
        """``grad_theta log pi(a|s) = x(s,a) - sum_b pi(b|s) x(s,b)``."""
        if not 0 <= a < self.num_actions:
            raise InputError(f"action {a} out of range")
        p = self.action_probs(s)
        return self.features[s, a] - p @ self.features[s]

    def scores(self, states, actions, probs: Optional[np.ndarray] = None) -> np.ndarray:
        """Vectorized scores for a batch, shape ``(n, d)``."""
        if probs is None:
            probs = self.probs()
        mean_feat = np.einsum("sa,sad->sd", probs, self.features)
        return self.features[states, actions] - mean_feat[states]

    def score_table(self, probs: Optional[np.ndarray] = None) -> np.ndarray:
        """Scores for every pair, shape ``(S, A, d)``."""
        if probs is None:
            probs = self.probs()
        mean_feat = np.einsum("sa,sad->sd", probs, self.features)
        return self.features - mean_feat[:, None, :]


def as_prob_matrix(policy, num_states: int, num_actions: int) -> np.ndarray:
    """Accept a policy object or an explicit ``(S, A)`` table."""
    pi = policy.probs() if hasattr(policy, "probs") else np.asarray(policy, dtype=float)
    if pi.shape != (num_states, num_actions):
        raise InputError(f"policy table shape {pi.shape} != ({num_states}, {num_actions})")
    return pi


def deterministic_table(choice, num_actions: int) -> np.ndarray:
    """One-hot ``(S, A)`` table for a deterministic policy ``s -> choice[s]``."""
    choice = np.asarray(choice, dtype=np.int64)
    pi = np.zeros((choice.shape[0], num_actions))
    pi[np.arange(choice.shape[0]), choice] = 1.0
    return pi


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Value features ``Phi`` of shape ``(S, d)``; row ``s`` is ``phi(s)``."""

    phi: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 2:
            raise InputError(f"phi must be 2-d, got shape {phi.shape}")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def num_states(self) -> int:
        return self.phi.shape[0]

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    @classmethod
    def tabular(cls, num_states: int) -> "FeatureMap":
        return cls(np.eye(num_states))

    @classmethod
    def orthogonal_to_ones(cls, num_states: int) -> "FeatureMap":
        """``S - 1`` orthonormal columns spanning the complement of the ones vector.

        Suitable for average-reward TD, where the span must exclude constants.
        """
        basis = np.column_stack([np.ones(num_states), np.eye(num_states)[:, : num_states - 1]])
        q, _ = np.linalg.qr(basis)
        return cls(q[:, 1:num_states])

    @classmethod
    def random_orthonormal(cls, num_states: int, dim: int, rng: np.random.Generator) -> "FeatureMap":
        q, _ = np.linalg.qr(rng.standard_normal((num_states, dim)))
        return cls(q[:, :dim])

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureMap":
        if "phi" not in data:
            raise InputError("feature document needs a 'phi' field")
        return cls(data["phi"])

    @classmethod
    def load(cls, path) -> "FeatureMap":
        with Path(path).open("r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {"phi": self.phi.tolist()}


@dataclass
class FeatureReport:
    normalized: bool
    max_row_norm: float
    full_rank: bool
    singular_ratio: float
    excludes_ones: Optional[bool]
    ones_residual: Optional[float]

    @property
    def ok(self) -> bool:
        return self.normalized and self.full_rank and self.excludes_ones is not False


def check_feature_assumptions(features: FeatureMap, mode: str = "discounted") -> FeatureReport:
    """Normalization, column rank, and (average mode) ones-exclusion checks."""
    if mode not in ("discounted", "average"):
        raise InputError(f"unknown mode {mode!r}")
    phi = features.phi
    row_norm = float(np.linalg.norm(phi, axis=1).max())
    sv = np.linalg.svd(phi, compute_uv=False)
    ratio = float(sv.min() / sv.max()) if sv.max() > 0 else 0.0
    full_rank = phi.shape[1] <= phi.shape[0] and ratio > RANK_TOL
    excludes = residual = None
    if mode == "average":
        ones = np.ones(phi.shape[0])
        u, *_ = np.linalg.lstsq(phi, ones, rcond=None)
        residual = float(np.linalg.norm(phi @ u - ones))
        excludes = residual > ONES_TOL
    return FeatureReport(row_norm <= 1.0 + 1e-12, row_norm, full_rank, ratio, excludes, residual)
