"""Synthetic data from the full model, and the replicate-study harness."""

from __future__ import annotations

import csv
import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .model import ModelSpec, ObservationDay, SubjectRecord, Theta
from .seeding import child_seeds

# ---------------------------------------------------------------------------
# true-count generators


@dataclass(frozen=True)
class NegativeBinomialEMA:
    """Daily true counts ~ NB(mean, dispersion), zeros redrawn."""

    mean: float = 22.0
    dispersion: float = 5.0

    def draw(self, rng: np.random.Generator, n_subjects: int, n_days: int) -> np.ndarray:
        p = self.dispersion / (self.dispersion + self.mean)
        x = rng.negative_binomial(self.dispersion, p, size=(n_subjects, n_days))
        while (x == 0).any():
            zero = x == 0
            x[zero] = rng.negative_binomial(self.dispersion, p, size=int(zero.sum()))
        return x.astype(np.int64)

    def to_dict(self):
        return {"kind": "negative_binomial", "mean": self.mean, "dispersion": self.dispersion}


@dataclass(frozen=True)
class FixedEMA:
    """The same count matrix (or one row repeated) for every dataset."""

    values: tuple

    def draw(self, rng, n_subjects, n_days):
        x = np.asarray(self.values, dtype=np.int64)
        x = np.broadcast_to(x, (n_subjects, n_days)).copy()
        if (x < 1).any():
            raise ValueError("EMA counts must be >= 1")
        return x

    def to_dict(self):
        return {"kind": "fixed", "values": np.asarray(self.values).tolist()}


@dataclass(frozen=True)
class EmpiricalEMA:
    """Whole per-subject count vectors resampled from an observed pool."""

    pool: tuple  # tuple of per-subject tuples

    @classmethod
    def from_subjects(cls, subjects: Sequence[SubjectRecord]) -> "EmpiricalEMA":
        return cls(tuple(tuple(int(v) for v in s.ema) for s in subjects))

    @classmethod
    def from_file(cls, path) -> "EmpiricalEMA":
        from .io import load_dataset

        return cls.from_subjects(load_dataset(path))

    def draw(self, rng, n_subjects, n_days):
        picks = rng.integers(len(self.pool), size=n_subjects)
        out = np.empty((n_subjects, n_days), dtype=np.int64)
        for i, k in enumerate(picks):
            vec = np.asarray(self.pool[k], dtype=np.int64)
            if vec.size >= n_days:
                out[i] = vec[:n_days]
            else:
                out[i] = rng.choice(vec, size=n_days)
        if (out < 1).any():
            raise ValueError("EMA counts must be >= 1")
        return out

    def to_dict(self):
        return {"kind": "empirical", "n_vectors": len(self.pool)}


@dataclass(frozen=True)
class SimulationDesign:
    n_subjects: int = 100
    days_per_subject: int = 12
    ema: object = field(default_factory=NegativeBinomialEMA)
    visit_days: tuple = ()
    # subject-level covariates drawn as independent normals: name -> (mean, sd)
    covariates: tuple = ()
    spec: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self):
        if self.n_subjects < 1 or self.days_per_subject < 1:
            raise ValueError("need at least one subject and one day")
        object.__setattr__(self, "visit_days", tuple(int(d) for d in self.visit_days))
        object.__setattr__(self, "covariates", tuple((str(n), float(m), float(s))
                                                     for n, m, s in self.covariates))
        known = {c[0] for c in self.covariates}
        missing = (set(self.spec.recall_covariates) | set(self.spec.heaping_covariates)) - known
        if missing:
            raise ValueError(f"design has no generator for covariates {sorted(missing)}")

    def to_dict(self):
        return {
            "n_subjects": self.n_subjects, "days_per_subject": self.days_per_subject,
            "ema": self.ema.to_dict(), "visit_days": list(self.visit_days),
            "covariates": [list(c) for c in self.covariates],
            "recall_covariates": list(self.spec.recall_covariates),
            "heaping_covariates": list(self.spec.heaping_covariates),
            "visit_effect": self.spec.visit_effect,
        }


# ---------------------------------------------------------------------------
# scenarios

def scenario_case1() -> tuple:
    """Substantial mis-remembering; parameters estimated from the smoking data."""
    theta = Theta(beta0=2.358, beta1=0.2628, sigma_b=math.sqrt(0.09),
                  gamma1=-1.485, gamma2=-5.280, gamma3=-10.141, gamma0=0.1098,
                  sigma_u=math.sqrt(7.1))
    return theta, SimulationDesign()


def scenario_case2() -> tuple:
    """Remembered count centred on the true count."""
    theta = Theta(beta0=0.0, beta1=1.0, sigma_b=math.sqrt(0.05),
                  gamma1=-1.07, gamma2=-4.37, gamma3=-6.52, gamma0=0.088,
                  sigma_u=math.sqrt(5.9))
    return theta, SimulationDesign()


SCENARIOS = {"case1": scenario_case1, "case2": scenario_case2}


# ---------------------------------------------------------------------------
# generation

@dataclass
class SimulatedData:
    subjects: list
    b: np.ndarray          # (n_subjects,)
    u: np.ndarray
    w: np.ndarray          # (n_subjects, n_days)
    g: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def latent_rows(self):
        for i, s in enumerate(self.subjects):
            for t, day in enumerate(s.days):
                yield {"subject_id": s.subject_id, "day": day.day_index,
                       "w": int(self.w[i, t]), "g": int(self.g[i, t]),
                       "b": float(self.b[i]), "u": float(self.u[i])}

    def write_latent(self, path) -> None:
        rows = list(self.latent_rows())
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)


def coarsen_array(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    base = np.choose(np.asarray(g) - 1, [1, 5, 10, 20])
    return (w + base // 2) // base * base


def draw_heaping_class(theta: Theta, w, offset, rng: np.random.Generator) -> np.ndarray:
    """Rounding classes for remembered counts ``w`` given the linear offset ``z beta3 + u``."""
    lin = theta.gamma0 * np.asarray(w) + offset
    r = rng.random(np.shape(lin))
    return 1 + sum((r < expit(gk + lin)).astype(np.int64) for gk in theta.gammas)


def generate_dataset(theta: Theta, design: SimulationDesign, seed=None) -> SimulatedData:
    """Draw ``b, u`` per subject, then ``x, w, g`` per day and ``y = h(w, g)``."""
    rng = np.random.default_rng(seed)
    spec = design.spec
    n, m = design.n_subjects, design.days_per_subject
    if theta.beta2.size != spec.n_recall or theta.beta3.size != spec.n_heaping:
        raise ValueError("theta does not match the design's covariate spec")
    cov = {name: rng.normal(mean, sd, size=n) for name, mean, sd in design.covariates}
    zr = np.column_stack([cov[c] for c in spec.recall_covariates]) if spec.n_recall \
        else np.zeros((n, 0))
    zh = np.column_stack([cov[c] for c in spec.heaping_covariates]) \
        if spec.heaping_covariates else np.zeros((n, 0))
    x = design.ema.draw(rng, n, m)
    if (x < 1).any():
        raise ValueError("EMA generator produced a count below 1")
    b = theta.sigma_b * rng.standard_normal(n)
    u = theta.sigma_u * rng.standard_normal(n)
    day_idx = np.arange(1, m + 1)
    visit = np.isin(day_idx, design.visit_days)
    log_mu = theta.beta0 + theta.beta1 * np.log(x) + (zr @ theta.beta2)[:, None] + b[:, None]
    w = rng.poisson(np.exp(log_mu))
    eta = np.zeros((n, m))
    if spec.heaping_covariates:
        eta += (zh @ theta.beta3[: zh.shape[1]])[:, None]
    if spec.visit_effect:
        eta += theta.beta3[-1] * visit[None, :]
    g = draw_heaping_class(theta, w, eta + u[:, None], rng)
    y = coarsen_array(w, g)
    width = len(str(n))
    subjects = [
        SubjectRecord(
            subject_id=f"s{i + 1:0{width}d}",
            days=tuple(ObservationDay(int(day_idx[t]), int(x[i, t]), int(y[i, t]), bool(visit[t]))
                       for t in range(m)),
            z_recall=zr[i], z_heaping=zh[i],
        )
        for i in range(n)
    ]
    return SimulatedData(subjects, b, u, w, g, x, y)


# ---------------------------------------------------------------------------
# replicate study

CI_METHODS = ("hessian", "bootstrap")


@dataclass
class ReplicateOutcome:
    index: int
    estimate: np.ndarray | None
    lower: np.ndarray | None
    upper: np.ndarray | None
    converged: bool
    error: str = ""


@dataclass
class ParameterRow:
    name: str
    true: float
    mean: float
    sd: float
    bias: float
    rmse: float
    coverage: float     # percent
    sem: float          # standard error of the mean estimate


@dataclass
class ScenarioReport:
    rows: list
    n_replicates: int
    n_failed: int
    ci_method: str
    level: float
    seed: int
    design: dict
    theta: dict
    estimates: np.ndarray = field(repr=False, default=None)

    def row(self, name: str) -> ParameterRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "n_replicates": self.n_replicates, "n_failed": self.n_failed,
            "ci_method": self.ci_method, "level": self.level, "seed": self.seed,
            "design": self.design, "theta": self.theta,
            "parameters": [vars(r) for r in self.rows],
            "estimates": None if self.estimates is None else self.estimates.tolist(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def table(self) -> str:
        head = f"{'parameter':<12}{'true':>10}{'mean':>10}{'SD':>9}{'bias':>9}{'rMSE':>9}{'cover%':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.name:<12}{r.true:>10.4f}{r.mean:>10.4f}{r.sd:>9.4f}"
                         f"{r.bias:>9.4f}{r.rmse:>9.4f}{r.coverage:>8.1f}")
        lines.append(f"replicates: {self.n_replicates - self.n_failed} used, "
                     f"{self.n_failed} failed; intervals: {self.ci_method}")
        return "\n".join(lines)


def summarize_replicates(names, truth, estimates, lower, upper) -> list:
    """Table rows from per-replicate estimates and interval bounds (R x p arrays)."""
    est = np.asarray(estimates, dtype=float)
    R = est.shape[0]
    mean = est.mean(axis=0)
    sd = est.std(axis=0, ddof=1) if R > 1 else np.zeros(est.shape[1])
    bias = mean - truth
    rmse = np.sqrt(np.mean((est - truth) ** 2, axis=0))
    cover = 100.0 * np.mean((np.asarray(lower) <= truth) & (truth <= np.asarray(upper)), axis=0)
    sem = sd / math.sqrt(R)
    return [ParameterRow(n, float(t), float(m), float(s), float(b), float(r), float(c), float(e))
            for n, t, m, s, b, r, c, e in zip(names, truth, mean, sd, bias, rmse, cover, sem)]


def _replicate(args) -> ReplicateOutcome:
    from .estimation import find_posterior_mode, parametric_bootstrap_ci

    index, theta, design, seq, ci_method, level, B, fit_kwargs = args
    sim_seq, boot_seq = seq.spawn(2)
    data = generate_dataset(theta, design, np.random.default_rng(sim_seq))
    try:
        res = find_posterior_mode(data.subjects, design.spec, init=theta,
                                  information=ci_method == "hessian", **fit_kwargs)
        if not res.converged:
            return ReplicateOutcome(index, None, None, None, False, res.message)
        if ci_method == "hessian":
            ci = res.wald_intervals(level)
        else:
            boot = parametric_bootstrap_ci(res.theta_hat, design, B=B, level=level,
                                           seed=int(boot_seq.generate_state(1)[0]),
                                           fit_kwargs=fit_kwargs)
            ci = boot.intervals
    except (FloatingPointError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return ReplicateOutcome(index, None, None, None, False, str(exc))
    return ReplicateOutcome(index, res.theta_hat.vector(), ci[:, 0], ci[:, 1], True)


def run_simulation_study(theta: Theta, design: SimulationDesign, n_replicates: int,
                         ci_method: str = "hessian", seed: int = 0, level: float = 0.95,
                         bootstrap_B: int = 100, n_jobs: int = 1,
                         fit_kwargs: dict | None = None, progress=None) -> ScenarioReport:
    """Simulate, refit and score ``n_replicates`` datasets.

    Fits maximize the likelihood (no prior) starting from the true value.
    Replicates that fail or do not converge are counted; more than 20%
    failed is an error. Results do not depend on ``n_jobs``.
    """
    if n_replicates < 2:
        raise ValueError("n_replicates must be >= 2")
    if ci_method not in CI_METHODS:
        raise ValueError(f"ci_method must be one of {CI_METHODS}")
    fit_kwargs = {"use_prior": False, **(fit_kwargs or {})}
    seqs = child_seeds(seed, "simstudy", n_replicates)
    jobs = [(i, theta, design, s, ci_method, level, bootstrap_B, fit_kwargs)
            for i, s in enumerate(seqs)]
    outcomes = []
    if n_jobs > 1:
        # numba thread pools do not survive fork
        with ProcessPoolExecutor(n_jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            for out in pool.map(_replicate, jobs):
                outcomes.append(out)
                if progress:
                    progress(out)
    else:
        for job in jobs:
            out = _replicate(job)
            outcomes.append(out)
            if progress:
                progress(out)
    outcomes.sort(key=lambda o: o.index)
    ok = [o for o in outcomes if o.converged]
    n_failed = n_replicates - len(ok)
    if n_failed > 0.2 * n_replicates:
        raise RuntimeError(f"{n_failed} of {n_replicates} replicates failed")
    est = np.array([o.estimate for o in ok])
    rows = summarize_replicates(Theta.names(design.spec), theta.vector(), est,
                                np.array([o.lower for o in ok]), np.array([o.upper for o in ok]))
    return ScenarioReport(rows=rows, n_replicates=n_replicates, n_failed=n_failed,
                          ci_method=ci_method, level=level, seed=int(seed),
                          design=design.to_dict(), theta=theta.to_dict(), estimates=est)
