"""Entropy-regularized optimal transport (log-domain Sinkhorn) and the
truncated power-law prior over per-crop person counts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import BadSpec, DimensionMismatch, InvalidConfig, NonConvergence


@dataclass
class DiscreteDistribution:
    weights: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.support = np.asarray(self.support, dtype=np.float64)
        if self.weights.shape != self.support.shape or self.weights.ndim != 1:
            raise DimensionMismatch(f"weights {self.weights.shape} vs support {self.support.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise BadSpec("weights must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, support) -> "DiscreteDistribution":
        support = np.asarray(support, dtype=np.float64)
        return cls(np.full(len(support), 1.0 / len(support)), support)


def squared_cost(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (x[:, None] - y[None, :]) ** 2


@dataclass
class SinkhornConfig:
    eps: float = 0.01
    max_iter: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidConfig(f"eps must be > 0, got {self.eps}")
        if self.max_iter < 1 or not self.tol > 0:
            raise InvalidConfig("max_iter must be >= 1 and tol > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SinkhornConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown sinkhorn keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SinkhornResult:
    plan: np.ndarray
    distance: float  # <P, C>, entropy term excluded
    converged: bool
    n_iter: int
    marginal_error: float


def sinkhorn(a, b, cost, eps: float = 0.01, max_iter: int = 500, tol: float = 1e-6,
             strict: bool = False) -> SinkhornResult:
    """Log-domain Sinkhorn scaling between weight vectors ``a`` and ``b``.

    Iterates ``u <- a / (K v)``, ``v <- b / (K^T u)`` with ``K = exp(-C/eps)``
    until the row-marginal violation drops to ``tol``. Column marginals are
    exact after each ``v`` update. Without ``strict`` a non-converged run
    returns its best iterate with ``converged=False``.
    """
    a = np.asarray(getattr(a, "weights", a), dtype=np.float64)
    b = np.asarray(getattr(b, "weights", b), dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (a.size, b.size):
        raise DimensionMismatch(f"cost {cost.shape} does not match marginals {a.size} x {b.size}")
    if not eps > 0:
        raise InvalidConfig(f"eps must be > 0, got {eps}")
    if np.any(a <= 0) or np.any(b <= 0):
        raise BadSpec("marginals must be strictly positive; drop zero-weight atoms first")

    log_k = -cost / eps
    log_a, log_b = np.log(a), np.log(b)
    log_u = np.zeros_like(a)
    log_v = np.zeros_like(b)
    best = (np.inf, log_u, log_v)
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        log_u = log_a - logsumexp(log_k + log_v[None, :], axis=1)
        log_v = log_b - logsumexp(log_k + log_u[:, None], axis=0)
        rows = np.exp(logsumexp(log_k + log_u[:, None] + log_v[None, :], axis=1))
        err = float(np.max(np.abs(rows - a)))
        if err < best[0]:
            best = (err, log_u, log_v)
        if err <= tol:
            break
    err, log_u, log_v = best
    plan = np.exp(log_u[:, None] + log_k + log_v[None, :])
    converged = err <= tol
    if strict and not converged:
        raise NonConvergence(f"sinkhorn stopped at marginal error {err:.3e} after {it} iterations")
    return SinkhornResult(plan, float(np.sum(plan * cost)), converged, it, err)


@dataclass
class PriorSpec:
    """Truncated power law ``p(c) ~ c**-alpha`` on ``[cmin, cmax]``."""

    alpha: float = 2.0
    cmin: float = 1.0
    cmax: float = 100.0

    def __post_init__(self):
        if not self.alpha > 1:
            raise BadSpec(f"alpha must be > 1, got {self.alpha}")
        if not 0 < self.cmin < self.cmax:
            raise BadSpec(f"need 0 < cmin < cmax, got [{self.cmin}, {self.cmax}]")

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown prior keys: {sorted(unknown)}")
        return cls(**d)

    def cdf(self, c):
        c = np.clip(np.asarray(c, dtype=np.float64), self.cmin, self.cmax)
        e = 1.0 - self.alpha
        lo, hi = self.cmin ** e, self.cmax ** e
        return (c ** e - lo) / (hi - lo)

    def ppf(self, u):
        u = np.asarray(u, dtype=np.float64)
        e = 1.0 - self.alpha
        lo, hi = self.cmin ** e, self.cmax ** e
        return np.clip((lo + u * (hi - lo)) ** (1.0 / e), self.cmin, self.cmax)

    def mean(self) -> float:
        a, lo, hi = self.alpha, self.cmin, self.cmax
        norm = (lo ** (1 - a) - hi ** (1 - a)) / (a - 1)
        if math.isclose(a, 2.0):
            first = math.log(hi / lo)
        else:
            first = (hi ** (2 - a) - lo ** (2 - a)) / (2 - a)
        return first / norm


def sample_prior(spec: PriorSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` sorted inverse-CDF draws; each carries weight ``1/n``."""
    if n < 1:
        raise BadSpec(f"n must be >= 1, got {n}")
    return np.sort(spec.ppf(rng.random(n)))
