"""Acceptance-rejection imputation of the latent recall and rounding class.

Two modes for the subject effects:

``"prior"``
    ``b, u`` drawn once per subject from their normal priors, then each
    day's ``(w, g)`` redrawn until it reproduces the reported count. This
    is the stated three-step procedure; its ``(b, u)`` law is the prior,
    not the posterior.
``"joint"``
    ``(b, u)`` redrawn from the prior until accepted with probability
    ``f(y | b, u) / max f(y | b, u)``, then the same per-day step. The
    result is an exact draw from ``f(w, g, b, u | y, theta)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import expit, logsumexp

from . import kernels
from .model import ModelSpec, SubjectRecord, Theta, coarsen
from .packed import PackedData, pack
from .seeding import child_seeds, int_seeds

log = logging.getLogger(__name__)

IMPUTATION_MODES = ("prior", "joint")
DEFAULT_MAX_REJECTS = 1_000_000


@dataclass
class LatentImputation:
    subject_id: str
    w: np.ndarray
    g: np.ndarray
    b: float
    u: float
    theta_index: int
    rejections: np.ndarray

    def check(self, y) -> None:
        for wt, gt, yt in zip(self.w, self.g, y):
            if coarsen(int(wt), int(gt)) != int(yt):
                raise AssertionError(f"subject {self.subject_id}: ({wt}, {gt}) does not give {yt}")


@dataclass
class TrueCountImputation(LatentImputation):
    x: np.ndarray = None


@dataclass
class ImputationFailure:
    subject_id: str
    theta_index: int
    day_index: int
    rejections: int
    b: float
    u: float
    reason: str = "rejection cap reached"


@dataclass
class ImputationRun:
    imputations: list
    failures: list
    mode: str

    def w_matrix(self) -> np.ndarray:
        return np.concatenate([imp.w for imp in self.imputations]) if self.imputations \
            else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# subject-level likelihood for the joint mode

def _subject_loglik_grid(data: PackedData, i: int, theta: Theta, mu, eta, b, u) -> np.ndarray:
    """``log f(y_i | b, u)`` for arrays of candidate effects (numpy, vectorized)."""
    sl = slice(data.starts[i], data.starts[i + 1])
    lo, n, mask, lfact = data.win_lo[sl], data.win_n[sl], data.win_mask[sl], data.win_lfact[sl]
    b = np.atleast_1d(b)[:, None, None]
    u = np.atleast_1d(u)[:, None, None]
    w = lo[:, None] + np.arange(mask.shape[1])[None, :]          # (T, W)
    loglam = mu[sl][None, :, None] + b                            # (K, T, 1)
    lp = w[None] * loglam - np.exp(loglam) - lfact[None]          # (K, T, W)
    lin = theta.gamma0 * w[None] + eta[sl][None, :, None] + u
    a = [gk + lin for gk in theta.gammas]
    with np.errstate(divide="ignore"):
        probs = np.stack([expit(-a[0]), expit(a[0]) - expit(a[1]), expit(a[1]) - expit(a[2]),
                          expit(a[2])], axis=-1)
        lq = np.log(np.clip(probs, 0.0, None))
    valid = (np.arange(mask.shape[1])[None, :] < n[:, None])[..., None] & (mask > 0)
    terms = np.where(valid[None], lp[..., None] + lq, -np.inf)
    return logsumexp(terms.reshape(terms.shape[0], terms.shape[1], -1), axis=-1).sum(axis=1)


def _max_loglik(data, i, theta, mu, eta, start) -> float:
    sb, su = theta.sigma_b, theta.sigma_u

    def neg(z):
        return -float(_subject_loglik_grid(data, i, theta, mu, eta, sb * z[0], su * z[1])[0])

    best = math.inf
    for z0 in (start, (0.0, 0.0), (start[0], -4.0), (start[0], 4.0)):
        res = optimize.minimize(neg, np.asarray(z0, dtype=float), method="L-BFGS-B",
                                bounds=[(-10, 10), (-10, 10)])
        best = min(best, res.fun)
    return -best


def _joint_effects(data, i, theta, mu, eta, start, rng, max_draws, batch=512):
    """Exact posterior draw of ``(b, u)`` by rejection from the prior."""
    bound = _max_loglik(data, i, theta, mu, eta, start)
    drawn = 0
    while drawn < max_draws:
        zb, zu = rng.standard_normal((2, batch))
        ll = _subject_loglik_grid(data, i, theta, mu, eta, theta.sigma_b * zb, theta.sigma_u * zu)
        if ll.max() > bound + 1e-9:
            log.warning("subject %s: likelihood bound raised by %.2e", data.subject_ids[i],
                        ll.max() - bound)
            bound = float(ll.max())
        acc = np.nonzero(np.log(rng.random(batch)) < ll - bound)[0]
        if acc.size:
            k = acc[0]
            return theta.sigma_b * zb[k], theta.sigma_u * zu[k], drawn + k
        drawn += batch
    return math.nan, math.nan, drawn


# ---------------------------------------------------------------------------
# public operations

def _run(theta: Theta, data: PackedData, seeds: np.ndarray, max_rejects: int,
         b_given: np.ndarray, u_given: np.ndarray, x_cdf: np.ndarray):
    mu, eta = data.offsets(theta)
    base = np.ascontiguousarray(data.recall_base(theta))
    return kernels.impute(base, theta.beta1, np.log(data.x), eta, data.y, data.starts,
                          theta.gamma1, theta.gamma2, theta.gamma3, theta.gamma0,
                          theta.sigma_b, theta.sigma_u, seeds, int(max_rejects),
                          np.ascontiguousarray(b_given, dtype=float),
                          np.ascontiguousarray(u_given, dtype=float), x_cdf)


def _collect(data, out, k, with_x, imputations, failures):
    w, g, x, b, u, rej, status = out
    for i, sid in enumerate(data.subject_ids):
        sl = slice(data.starts[i], data.starts[i + 1])
        if status[i]:
            bad = int(np.argmax(w[sl] < 0))
            failures.append(ImputationFailure(sid, k, int(data.day_index[sl][bad]),
                                              int(rej[sl][bad]), float(b[i]), float(u[i])))
            continue
        kw = dict(subject_id=sid, w=w[sl].copy(), g=g[sl].copy(), b=float(b[i]), u=float(u[i]),
                  theta_index=k, rejections=rej[sl].copy())
        imp = TrueCountImputation(**kw, x=x[sl].copy()) if with_x else LatentImputation(**kw)
        imp.check(data.y[sl])
        imputations.append(imp)


def _effects(mode, theta, data, seed_seq, max_rejects, fixed_b, fixed_u):
    ns = data.n_subjects
    b_given = np.full(ns, np.nan) if fixed_b is None else np.broadcast_to(fixed_b, ns).astype(float)
    u_given = np.full(ns, np.nan) if fixed_u is None else np.broadcast_to(fixed_u, ns).astype(float)
    if mode == "prior":
        return b_given, u_given, []
    rng = np.random.default_rng(seed_seq)
    mu, eta = data.offsets(theta)
    modes = kernels.subject_modes(mu, eta, data.win_lo, data.win_n, data.win_mask,
                                  data.win_lfact, data.starts, theta.gamma1, theta.gamma2,
                                  theta.gamma3, theta.gamma0, theta.sigma_b, theta.sigma_u)
    failed = []
    for i in range(ns):
        if not (np.isnan(b_given[i]) and np.isnan(u_given[i])):
            continue
        start = (modes[i, 0], modes[i, 1]) if modes[i, 5] else (0.0, 0.0)
        bi, ui, n = _joint_effects(data, i, theta, mu, eta, start, rng, max_rejects)
        if math.isnan(bi):
            failed.append((i, n))
        b_given[i], u_given[i] = bi, ui
    return b_given, u_given, failed


def impute_latents(theta_draws: Sequence[Theta], dataset: Sequence[SubjectRecord],
                   spec: ModelSpec | None = None, max_rejects: int = DEFAULT_MAX_REJECTS,
                   seed=0, mode: str = "prior", b=None, u=None) -> ImputationRun:
    """One imputation of ``(w, g, b, u)`` per subject for every theta draw.

    ``b``/``u`` pin the subject effects (scalar or per subject) instead of
    drawing them. A day that needs more than ``max_rejects`` redraws marks
    its subject as failed for that draw; failures are reported, not raised.
    Results are ordered by ``(theta_index, subject order)``.
    """
    if mode not in IMPUTATION_MODES:
        raise ValueError(f"mode must be one of {IMPUTATION_MODES}")
    theta_draws = list(theta_draws)
    if not theta_draws:
        raise ValueError("need at least one theta draw")
    spec = spec or ModelSpec()
    data = pack(dataset, spec)
    seqs = child_seeds(seed, f"impute-{mode}", len(theta_draws))
    imputations, failures = [], []
    for k, (theta, seq) in enumerate(zip(theta_draws, seqs)):
        day_seq, eff_seq = seq.spawn(2)
        b_given, u_given, failed = _effects(mode, theta, data, eff_seq, max_rejects, b, u)
        for i, n in failed:
            failures.append(ImputationFailure(data.subject_ids[i], k, -1, n, math.nan, math.nan,
                                              "subject-effect rejection cap reached"))
        if failed:
            # placeholders; these subjects are dropped below
            idx = [i for i, _ in failed]
            b_given[idx] = u_given[idx] = 0.0
        out = _run(theta, data, int_seeds(day_seq, data.n_subjects), max_rejects,
                   b_given, u_given, np.zeros(0))
        bad = {i for i, _ in failed}
        before = len(imputations)
        _collect(data, out, k, False, imputations, failures)
        if bad:
            ids = {data.subject_ids[i] for i in bad}
            imputations[before:] = [imp for imp in imputations[before:] if imp.subject_id not in ids]
    if failures:
        log.warning("%d subject imputations hit a rejection cap", len(failures))
    return ImputationRun(imputations, failures, mode)


# ---------------------------------------------------------------------------
# true counts

X_FAMILIES = ("point", "poisson", "negbin", "empirical")


@dataclass(frozen=True)
class TrueCountModel:
    """Distribution of the unobserved true count on ``1, 2, ...``.

    Poisson and negative-binomial families are truncated to exclude 0.
    """

    family: str
    value: int = 0
    mean: float = 0.0
    dispersion: float = 0.0
    sample: tuple = ()
    tail: float = 1e-12
    max_count: int = 100_000

    def __post_init__(self):
        if self.family not in X_FAMILIES:
            raise ValueError(f"family must be one of {X_FAMILIES}")
        if self.family == "point" and self.value < 1:
            raise ValueError("point mass must sit at a count >= 1")
        if self.family in ("poisson", "negbin") and not self.mean > 0:
            raise ValueError("mean must be positive")
        if self.family == "negbin" and not self.dispersion > 0:
            raise ValueError("dispersion must be positive")
        if self.family == "empirical":
            s = np.asarray(self.sample)
            if s.size == 0 or (s < 1).any():
                raise ValueError("empirical sample must be nonempty with counts >= 1")

    def pmf(self) -> np.ndarray:
        """Probabilities of ``1..len``."""
        if self.family == "point":
            p = np.zeros(self.value)
            p[-1] = 1.0
            return p
        if self.family == "empirical":
            s = np.asarray(self.sample, dtype=np.int64)
            return np.bincount(s, minlength=s.max() + 1)[1:] / s.size
        dist = stats.poisson(self.mean) if self.family == "poisson" else \
            stats.nbinom(self.dispersion, self.dispersion / (self.dispersion + self.mean))
        top = int(min(self.max_count, max(1, dist.isf(self.tail)) + 1))
        p = dist.pmf(np.arange(1, top + 1))
        return p / p.sum()

    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.pmf())
        c[-1] = 1.0
        return c

    def to_dict(self) -> dict:
        d = {"family": self.family}
        if self.family == "point":
            d["value"] = self.value
        elif self.family == "empirical":
            d["n_sample"] = len(self.sample)
        else:
            d["mean"] = self.mean
            if self.family == "negbin":
                d["dispersion"] = self.dispersion
        return d


def predict_true_counts(theta: Theta, subjects: Sequence[SubjectRecord], x_model: TrueCountModel,
                        spec: ModelSpec | None = None, n_imputations: int = 1,
                        max_rejects: int = DEFAULT_MAX_REJECTS, seed=0, b=None,
                        u=None) -> ImputationRun:
    """Impute true counts with the latents when the true count is unobserved.

    Each attempt draws ``x`` from ``x_model`` and then ``(w, g)`` given it,
    so accepted ``x`` follow their conditional law given ``y``, ``b`` and
    ``u``. The subjects' recorded EMA counts are ignored. ``b``/``u`` pin
    the subject effects as in :func:`impute_latents`.
    """
    if n_imputations < 1:
        raise ValueError("n_imputations must be >= 1")
    spec = spec or ModelSpec()
    data = pack(subjects, spec)
    cdf = np.ascontiguousarray(x_model.cdf())
    seqs = child_seeds(seed, "predict", n_imputations)
    imputations, failures = [], []
    b_given, u_given, _ = _effects("prior", theta, data, None, max_rejects, b, u)
    for k, seq in enumerate(seqs):
        out = _run(theta, data, int_seeds(seq, data.n_subjects), max_rejects, b_given, u_given, cdf)
        _collect(data, out, k, True, imputations, failures)
    return ImputationRun(imputations, failures, "prior")


# ---------------------------------------------------------------------------
# checks

def heap_fractions(counts, base: int) -> float:
    counts = np.asarray(counts, dtype=np.int64).ravel()
    if counts.size == 0:
        raise ValueError("no counts")
    if base not in (5, 10, 20):
        raise ValueError("base must be 5, 10 or 20")
    return float(np.mean(counts % base == 0))


def ppc_heap_fractions(values, base: int = 5, day_index=None) -> dict:
    """Share of counts divisible by ``base``, overall and per day index.

    ``values`` is either an array of counts (with optional matching
    ``day_index``) or an :class:`ImputationRun` / list of imputations, in
    which case the imputed ``w`` are used and grouped by day position.
    """
    imps = values.imputations if isinstance(values, ImputationRun) else values
    if len(imps) and isinstance(imps[0], LatentImputation):
        counts = np.concatenate([imp.w for imp in imps])
        day_index = np.concatenate([np.arange(1, imp.w.size + 1) for imp in imps])
    else:
        counts = np.asarray(values, dtype=np.int64).ravel()
    overall = heap_fractions(counts, base)
    per_day = {}
    if day_index is not None:
        day_index = np.asarray(day_index).ravel()
        for d in np.unique(day_index):
            per_day[int(d)] = heap_fractions(counts[day_index == d], base)
    return {"overall": overall, "per_day": per_day}


def restricted_day_pmf(theta: Theta, y: int, x: float, b: float = 0.0, u: float = 0.0,
                       z_recall=(), z_heaping=()) -> dict:
    """Exact law of ``(w, g)`` for one day given ``y``, ``b`` and ``u``.

    Enumerates the inverse-coarsening set; the oracle for the rejection step.
    """
    from .model import heaping_pmf, inverse_coarsen, poisson_logpmf, recall_log_mean

    pairs = sorted(inverse_coarsen(int(y)))
    lm = recall_log_mean(theta, x, z_recall, b)
    w = np.array([p[0] for p in pairs])
    g = np.array([int(p[1]) for p in pairs])
    probs = np.exp(poisson_logpmf(w, lm)) * heaping_pmf(theta, w, z_heaping, u)[np.arange(w.size), g - 1]
    probs /= probs.sum()
    return {(int(wi), int(gi)): float(p) for wi, gi, p in zip(w, g, probs)}


__all__ = [
    "IMPUTATION_MODES", "ImputationFailure", "ImputationRun", "LatentImputation",
    "TrueCountImputation", "TrueCountModel", "heap_fractions", "impute_latents",
    "ppc_heap_fractions", "predict_true_counts", "restricted_day_pmf",
]
