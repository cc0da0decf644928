"""Domain types and exact probability primitives.

The reported count ``y`` arises from a latent remembered count ``w`` and a
latent rounding granularity ``g`` through the coarsening map ``h(w, g)``.
``w`` is Poisson given the true (EMA) count and a subject recall effect ``b``;
``g`` follows a proportional-odds model given ``w`` and a subject heaping
effect ``u``.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, gammaln, logsumexp


class HeapingClass(enum.IntEnum):
    """Reporting granularity, ordered from finest to coarsest."""

    EXACT = 1
    NEAREST5 = 2
    NEAREST10 = 3
    NEAREST20 = 4

    @property
    def base(self) -> int:
        return ROUNDING_BASES[self]


ROUNDING_BASES = {
    HeapingClass.EXACT: 1,
    HeapingClass.NEAREST5: 5,
    HeapingClass.NEAREST10: 10,
    HeapingClass.NEAREST20: 20,
}

# widest inverse-coarsening window: y-10 .. y+9 under NEAREST20
WINDOW_WIDTH = 20


class InvalidThetaError(ValueError):
    pass


@dataclass(frozen=True)
class ObservationDay:
    day_index: int
    ema_count: int
    tlfb_count: int
    is_visit_day: bool = False

    def __post_init__(self):
        if self.day_index < 1:
            raise ValueError(f"day_index must be >= 1, got {self.day_index}")
        if self.ema_count < 1:
            raise ValueError(
                f"ema_count must be >= 1 (log of the true count enters the recall "
                f"model), got {self.ema_count} on day {self.day_index}"
            )
        if self.tlfb_count < 0:
            raise ValueError(f"tlfb_count must be >= 0, got {self.tlfb_count}")


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    days: tuple
    z_recall: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_heaping: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        days = tuple(self.days)
        if not days:
            raise ValueError(f"subject {self.subject_id!r} has no days")
        idx = [d.day_index for d in days]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"subject {self.subject_id!r}: day_index not strictly increasing")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "z_recall", np.asarray(self.z_recall, dtype=float).reshape(-1))
        object.__setattr__(self, "z_heaping", np.asarray(self.z_heaping, dtype=float).reshape(-1))

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def ema(self) -> np.ndarray:
        return np.array([d.ema_count for d in self.days], dtype=np.int64)

    @property
    def tlfb(self) -> np.ndarray:
        return np.array([d.tlfb_count for d in self.days], dtype=np.int64)

    @property
    def visit(self) -> np.ndarray:
        return np.array([d.is_visit_day for d in self.days], dtype=bool)


@dataclass(frozen=True)
class PriorConfig:
    beta1_prior_mean: float = 1.0
    beta1_prior_sd: float = 10.0
    coef_prior_sd: float = 10.0
    variance_ig_shape: float = 3.0
    variance_ig_scale: float = 2.0

    def __post_init__(self):
        for name in ("beta1_prior_sd", "coef_prior_sd", "variance_ig_shape", "variance_ig_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# Random-effect integration rules, see heaprecall.likelihood.
QUADRATURE_METHODS = ("profile", "adaptive", "plain")


@dataclass(frozen=True)
class ModelSpec:
    """Which covariates enter each model part.

    ``visit_effect`` appends the day-level visit indicator as the last
    heaping covariate, so ``beta3`` has ``len(heaping_covariates) + 1``
    entries when it is set.
    """

    recall_covariates: tuple = ()
    heaping_covariates: tuple = ()
    visit_effect: bool = False
    quadrature_nodes: int = 20
    quadrature: str = "profile"
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        object.__setattr__(self, "recall_covariates", tuple(self.recall_covariates))
        object.__setattr__(self, "heaping_covariates", tuple(self.heaping_covariates))
        for names in (self.recall_covariates, self.heaping_covariates):
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate covariate names: {names}")
        if "visit_day" in self.heaping_covariates:
            raise ValueError("use visit_effect=True instead of naming visit_day as a covariate")
        if self.quadrature_nodes < 5:
            raise ValueError("quadrature_nodes must be >= 5")
        if self.quadrature not in QUADRATURE_METHODS:
            raise ValueError(f"quadrature must be one of {QUADRATURE_METHODS}")

    @property
    def n_recall(self) -> int:
        return len(self.recall_covariates)

    @property
    def n_heaping(self) -> int:
        return len(self.heaping_covariates) + int(self.visit_effect)

    @property
    def heaping_names(self) -> tuple:
        return self.heaping_covariates + (("visit_day",) if self.visit_effect else ())

    def heaping_design(self, subject: SubjectRecord) -> np.ndarray:
        """Per-day heaping covariate rows, shape ``(n_days, n_heaping)``."""
        z = np.broadcast_to(subject.z_heaping, (subject.n_days, subject.z_heaping.size))
        if self.visit_effect:
            z = np.column_stack([z, subject.visit.astype(float)])
        return np.asarray(z, dtype=float).reshape(subject.n_days, self.n_heaping)

    def check_subject(self, subject: SubjectRecord) -> None:
        if subject.z_recall.size != self.n_recall:
            raise ValueError(
                f"subject {subject.subject_id!r}: {subject.z_recall.size} recall covariates, "
                f"model expects {self.n_recall}"
            )
        if subject.z_heaping.size != len(self.heaping_covariates):
            raise ValueError(
                f"subject {subject.subject_id!r}: {subject.z_heaping.size} heaping covariates, "
                f"model expects {len(self.heaping_covariates)}"
            )


def _as_vector(v) -> np.ndarray:
    arr = np.array(v, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Theta:
    """Full parameter vector, natural scale.

    Vector order (see :meth:`vector`) follows the usual table layout: recall
    part, then heaping part.
    """

    beta0: float
    beta1: float
    sigma_b: float
    gamma1: float
    gamma2: float
    gamma3: float
    gamma0: float
    sigma_u: float
    beta2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta3: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "beta2", _as_vector(self.beta2))
        object.__setattr__(self, "beta3", _as_vector(self.beta3))
        for name in ("beta0", "beta1", "sigma_b", "gamma1", "gamma2", "gamma3", "gamma0", "sigma_u"):
            object.__setattr__(self, name, float(getattr(self, name)))
        problem = self.violation()
        if problem:
            raise InvalidThetaError(problem)

    @classmethod
    def unchecked(cls, **kwargs) -> "Theta":
        """Build without validating; only for probing invalid regions."""
        obj = object.__new__(cls)
        defaults = {"beta2": np.zeros(0), "beta3": np.zeros(0)}
        defaults.update(kwargs)
        for k, v in defaults.items():
            object.__setattr__(obj, k, _as_vector(v) if k in ("beta2", "beta3") else float(v))
        return obj

    def violation(self) -> str:
        vals = [self.beta0, self.beta1, self.sigma_b, self.gamma1, self.gamma2,
                self.gamma3, self.gamma0, self.sigma_u, *self.beta2, *self.beta3]
        if not all(math.isfinite(v) for v in vals):
            return "non-finite parameter"
        if not (self.gamma1 > self.gamma2 > self.gamma3):
            return f"intercepts must satisfy gamma1 > gamma2 > gamma3, got " \
                   f"({self.gamma1}, {self.gamma2}, {self.gamma3})"
        if not (self.sigma_b > 0 and self.sigma_u > 0):
            return "random-effect SDs must be positive"
        return ""

    @property
    def is_valid(self) -> bool:
        return not self.violation()

    @property
    def sigma_b2(self) -> float:
        return self.sigma_b ** 2

    @property
    def sigma_u2(self) -> float:
        return self.sigma_u ** 2

    @property
    def gammas(self) -> tuple:
        return (self.gamma1, self.gamma2, self.gamma3)

    def replace(self, **changes) -> "Theta":
        return dataclasses.replace(self, **changes)

    def vector(self) -> np.ndarray:
        return np.concatenate([
            [self.beta0, self.beta1], self.beta2, [self.sigma_b],
            [self.gamma1, self.gamma2, self.gamma3, self.gamma0], self.beta3, [self.sigma_u],
        ])

    @classmethod
    def from_vector(cls, vec, n_recall: int = 0, n_heaping: int = 0, check: bool = True) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        if vec.size != 8 + n_recall + n_heaping:
            raise ValueError(f"expected {8 + n_recall + n_heaping} values, got {vec.size}")
        i = 2 + n_recall
        kw = dict(
            beta0=vec[0], beta1=vec[1], beta2=vec[2:i], sigma_b=vec[i],
            gamma1=vec[i + 1], gamma2=vec[i + 2], gamma3=vec[i + 3], gamma0=vec[i + 4],
            beta3=vec[i + 5:i + 5 + n_heaping], sigma_u=vec[-1],
        )
        return cls(**kw) if check else cls.unchecked(**kw)

    @staticmethod
    def names(spec: "ModelSpec | None" = None) -> list:
        rc = spec.recall_covariates if spec else ()
        hc = spec.heaping_names if spec else ()
        return (["beta0", "beta1"] + [f"beta2[{c}]" for c in rc] + ["sigma_b"]
                + ["gamma1", "gamma2", "gamma3", "gamma0"] + [f"beta3[{c}]" for c in hc]
                + ["sigma_u"])

    def to_dict(self) -> dict:
        return {
            "beta0": self.beta0, "beta1": self.beta1, "beta2": self.beta2.tolist(),
            "sigma_b": self.sigma_b, "gamma1": self.gamma1, "gamma2": self.gamma2,
            "gamma3": self.gamma3, "gamma0": self.gamma0, "beta3": self.beta3.tolist(),
            "sigma_u": self.sigma_u,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Theta":
        d = dict(d)
        # variances are accepted in place of SDs
        for s in ("b", "u"):
            if f"sigma_{s}2" in d and f"sigma_{s}" not in d:
                d[f"sigma_{s}"] = math.sqrt(d.pop(f"sigma_{s}2"))
            d.pop(f"sigma_{s}2", None)
        return cls(**d)


# ---------------------------------------------------------------------------
# coarsening

def coarsen(w: int, g) -> int:
    """Report produced by remembered count ``w`` under granularity ``g``.

    Half-way values round up, e.g. ``coarsen(15, NEAREST10) == 20``.
    """
    if w < 0:
        raise ValueError("w must be nonnegative")
    base = ROUNDING_BASES[HeapingClass(g)]
    return (int(w) + base // 2) // base * base


def wg_window(y: int) -> tuple:
    """Contiguous range of remembered counts consistent with ``y``.

    Returns ``(lo, mask)`` where ``mask[k, g - 1]`` says whether
    ``(lo + k, g)`` coarsens to ``y``.
    """
    if y < 0:
        raise ValueError("y must be nonnegative")
    lo = max(0, y - 10) if y % 20 == 0 else max(0, y - 5) if y % 10 == 0 else \
        max(0, y - 2) if y % 5 == 0 else y
    hi = y + 9 if y % 20 == 0 else y + 4 if y % 10 == 0 else y + 2 if y % 5 == 0 else y
    mask = np.zeros((hi - lo + 1, 4), dtype=bool)
    for k in range(hi - lo + 1):
        for g in HeapingClass:
            mask[k, g - 1] = coarsen(lo + k, g) == y
    return lo, mask


def inverse_coarsen(y: int) -> frozenset:
    """All ``(w, g)`` pairs with ``coarsen(w, g) == y``."""
    lo, mask = wg_window(y)
    return frozenset(
        (lo + k, HeapingClass(g + 1)) for k, g in zip(*np.nonzero(mask))
    )


# ---------------------------------------------------------------------------
# recall and heaping models

def recall_log_mean(theta: Theta, x, z_recall=(), b=0.0):
    """Log of the Poisson mean of the remembered count."""
    z = np.asarray(z_recall, dtype=float)
    if z.shape[-1:] != theta.beta2.shape and not (z.size == 0 and theta.beta2.size == 0):
        raise ValueError(f"z_recall has {z.shape[-1] if z.ndim else z.size} entries, "
                         f"beta2 has {theta.beta2.size}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 1):
        raise ValueError("true count x must be >= 1")
    zb = z @ theta.beta2 if theta.beta2.size else 0.0
    out = theta.beta0 + theta.beta1 * np.log(x) + zb + b
    return float(out) if np.ndim(out) == 0 else out


def _band(a_hi, a_lo):
    # q(a_hi) - q(a_lo) without cancellation when both are near 0 or 1
    return expit(a_hi) * expit(-a_lo) * -np.expm1(a_lo - a_hi)


def heaping_pmf(theta: Theta, w, z_heaping=(), u=0.0) -> np.ndarray:
    """Class probabilities ``(P(G=1), .., P(G=4))``; trailing axis of size 4."""
    z = np.asarray(z_heaping, dtype=float)
    if z.shape[-1:] != theta.beta3.shape and not (z.size == 0 and theta.beta3.size == 0):
        raise ValueError(f"z_heaping does not match beta3 ({theta.beta3.size} entries)")
    zb = z @ theta.beta3 if theta.beta3.size else 0.0
    lin = np.asarray(w, dtype=float) * theta.gamma0 + zb + u
    a1, a2, a3 = theta.gamma1 + lin, theta.gamma2 + lin, theta.gamma3 + lin
    return np.stack([expit(-a1), _band(a1, a2), _band(a2, a3), expit(a3)], axis=-1)


def poisson_logpmf(w, log_mean):
    w = np.asarray(w, dtype=float)
    return w * log_mean - np.exp(log_mean) - gammaln(w + 1.0)


def log_obs_prob_given_effects(theta: Theta, day: ObservationDay, z_recall=(), z_heaping=(),
                               b: float = 0.0, u: float = 0.0) -> float:
    """``log f(y | b, u)``: log-sum over the inverse-coarsening set.

    ``z_heaping`` is the full heaping design row for this day (including
    the visit indicator when the model has one).
    """
    lam = recall_log_mean(theta, day.ema_count, z_recall, b)
    pairs = sorted(inverse_coarsen(day.tlfb_count))
    w = np.array([p[0] for p in pairs])
    g = np.array([int(p[1]) for p in pairs])
    probs = heaping_pmf(theta, w, z_heaping, u)[np.arange(len(pairs)), g - 1]
    with np.errstate(divide="ignore"):
        return float(logsumexp(poisson_logpmf(w, lam) + np.log(probs)))


def obs_prob_given_effects(theta: Theta, day: ObservationDay, z_recall=(), z_heaping=(),
                           b: float = 0.0, u: float = 0.0) -> float:
    return math.exp(log_obs_prob_given_effects(theta, day, z_recall, z_heaping, b, u))


def check_dataset(subjects: Sequence[SubjectRecord], spec: ModelSpec) -> None:
    if len(subjects) == 0:
        raise ValueError("dataset is empty")
    seen = set()
    for s in subjects:
        if s.subject_id in seen:
            raise ValueError(f"duplicate subject_id {s.subject_id!r}")
        seen.add(s.subject_id)
        spec.check_subject(s)
