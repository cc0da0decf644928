"""Multivariate-t importance sampling around the posterior mode, and SIR."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_t

from .estimation import ModeResult, Objective, from_unconstrained, log_jacobian
from .likelihood import MarginalLikelihood
from .model import PriorConfig, Theta


@dataclass
class WeightedDraw:
    phi: np.ndarray
    theta: Theta
    log_weight: float


@dataclass
class ProposalSet:
    """Importance draws plus bookkeeping on dropped ones."""

    draws: list
    n_proposed: int
    n_dropped: int
    df: float

    def log_weights(self) -> np.ndarray:
        return np.array([d.log_weight for d in self.draws])

    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights()
        return np.exp(lw - logsumexp(lw))

    @property
    def ess(self) -> float:
        return effective_sample_size(self.log_weights())

    def __len__(self):
        return len(self.draws)

    def __iter__(self):
        return iter(self.draws)


def effective_sample_size(log_weights) -> float:
    """``(sum w)^2 / sum w^2``, computed in log space."""
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0:
        return 0.0
    return float(math.exp(2 * logsumexp(lw) - logsumexp(2 * lw)))


def t_importance(loc, information, K: int, log_target: Callable, df: float = 5,
                 seed=None) -> tuple:
    """Draw ``K`` points from ``t_df(loc, information^-1)`` and weight them.

    Returns ``(points, log_weights)``; non-finite target values yield
    ``-inf`` weights for the caller to drop.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    loc = np.asarray(loc, dtype=float)
    info = np.atleast_2d(np.asarray(information, dtype=float))
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("information matrix is not positive-definite") from exc
    inv_chol = np.linalg.inv(chol)
    shape = inv_chol.T @ inv_chol
    dist = multivariate_t(loc=loc, shape=shape, df=df)
    rng = np.random.default_rng(seed)
    pts = dist.rvs(size=K, random_state=rng).reshape(K, loc.size)
    log_q = np.atleast_1d(dist.logpdf(pts))
    log_p = np.array([log_target(p) for p in pts], dtype=float)
    lw = np.where(np.isfinite(log_p), log_p - log_q, -np.inf)
    return pts, lw


def posterior_target(lik: MarginalLikelihood, mode: ModeResult,
                     prior: PriorConfig | None = None, fixed: dict | None = None) -> Callable:
    """Log posterior density in phi space (free coordinates), Jacobian included."""
    fixed = mode.fixed if fixed is None else fixed
    obj = Objective(lik, use_prior=True, prior=prior, fixed=fixed, template=mode.theta_hat)
    if not np.array_equal(obj.free, mode.free):
        raise ValueError("fixed parameters do not match the mode's free set")
    k, h = lik.spec.n_recall, lik.spec.n_heaping

    def target(x):
        val = obj(x)
        if not math.isfinite(val):
            return -math.inf
        return val + log_jacobian(obj.full_phi(x), k, h, tuple(obj.fixed))

    return target


def draw_proposals(mode: ModeResult, K: int, log_target: Callable, df: float = 5,
                   seed=None) -> ProposalSet:
    """Importance draws around ``mode.phi_hat`` with scale ``mode.information^-1``.

    ``log_target`` maps the free phi coordinates to the log posterior in
    phi space (see :func:`posterior_target`). Draws whose target is
    non-finite or whose phi does not map to a valid Theta are dropped and
    counted.
    """
    free = mode.free
    base = mode.phi_hat.copy()
    k, h = mode.theta_hat.beta2.size, mode.theta_hat.beta3.size
    pts, lw = t_importance(base[free], mode.information, K, log_target, df, seed)
    draws = []
    for p, w in zip(pts, lw):
        if not np.isfinite(w):
            continue
        phi = base.copy()
        phi[free] = p
        try:
            theta = from_unconstrained(phi, k, h)
        except (ValueError, OverflowError):
            continue
        draws.append(WeightedDraw(phi=phi, theta=theta, log_weight=float(w)))
    return ProposalSet(draws=draws, n_proposed=K, n_dropped=K - len(draws), df=df)


def sir_resample(draws: Sequence[WeightedDraw] | ProposalSet, size: int = 1000,
                 seed=None) -> list:
    """Multinomial resampling with replacement, probabilities proportional to weights."""
    draws = list(draws)
    if size > len(draws):
        raise ValueError(f"size {size} exceeds the {len(draws)} available draws")
    lw = np.array([d.log_weight for d in draws], dtype=float)
    ok = np.isfinite(lw)
    if not ok.any():
        raise ValueError("all importance weights are zero or non-finite")
    p = np.zeros(lw.size)
    p[ok] = np.exp(lw[ok] - lw[ok].max())
    p /= p.sum()
    idx = np.random.default_rng(seed).choice(lw.size, size=size, replace=True, p=p)
    return [draws[i].theta for i in idx]


def weighted_quantile(values, weights, q) -> np.ndarray:
    """Quantiles of the weighted empirical distribution (inverse CDF, midpoint rule)."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values)
    v, w = values[order], weights[order]
    cdf = (np.cumsum(w) - 0.5 * w) / w.sum()
    return np.interp(q, cdf, v)


@dataclass
class ParameterSummary:
    mode: float
    mean: float
    sd: float
    lower: float
    upper: float


@dataclass
class PosteriorSummary:
    names: list
    params: dict            # name -> ParameterSummary
    ess: float
    n_proposals: int
    n_resampled: int
    level: float = 0.95

    def to_dict(self) -> dict:
        return {
            "parameters": {n: vars(self.params[n]) for n in self.names},
            "ess": self.ess, "n_proposals": self.n_proposals,
            "n_resampled": self.n_resampled, "level": self.level,
        }


def posterior_moments(draws: Sequence[WeightedDraw] | ProposalSet, mode: Theta | None = None,
                      names: list | None = None, level: float = 0.95,
                      n_resampled: int = 0) -> PosteriorSummary:
    """Weighted means, SDs and percentile intervals of every Theta entry.

    The reported mode is ``mode`` (the optimizer's joint mode) when given,
    else the highest-weight draw.
    """
    draws = list(draws)
    if not draws:
        raise ValueError("no draws")
    vals = np.array([d.theta.vector() for d in draws])
    lw = np.array([d.log_weight for d in draws], dtype=float)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    mean = w @ vals
    sd = np.sqrt(np.clip(w @ (vals - mean) ** 2, 0.0, None))
    alpha = (1 - level) / 2
    if mode is None:
        mode = draws[int(np.argmax(lw))].theta
    mode_vec = mode.vector()
    names = names or Theta.names()
    if len(names) != vals.shape[1]:
        names = [f"theta{i}" for i in range(vals.shape[1])]
    params = {}
    for j, n in enumerate(names):
        lo, hi = weighted_quantile(vals[:, j], w, [alpha, 1 - alpha])
        params[n] = ParameterSummary(float(mode_vec[j]), float(mean[j]), float(sd[j]),
                                     float(lo), float(hi))
    return PosteriorSummary(names=list(names), params=params,
                            ess=effective_sample_size(lw), n_proposals=len(draws),
                            n_resampled=n_resampled, level=level)
