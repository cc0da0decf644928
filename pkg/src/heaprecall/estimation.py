"""Posterior mode / MLE by BFGS on an unconstrained parameterization.

``phi`` keeps the layout of :meth:`Theta.vector` but replaces
``sigma_b, gamma2, gamma3, sigma_u`` with ``ln sigma_b``, ``ln(gamma1 - gamma2)``,
``ln(gamma2 - gamma3)`` and ``ln sigma_u``, so every finite ``phi`` is a valid
parameter.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .likelihood import MarginalLikelihood, QuadratureRule, log_prior
from .model import ModelSpec, PriorConfig, SubjectRecord, Theta

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# reparameterization

def _layout(n_recall: int, n_heaping: int) -> dict:
    i = 2 + n_recall
    return {"sigma_b": i, "gamma1": i + 1, "gamma2": i + 2, "gamma3": i + 3,
            "gamma0": i + 4, "sigma_u": i + 5 + n_heaping}


def phi_names(spec: ModelSpec | None = None) -> list:
    names = Theta.names(spec)
    rename = {"sigma_b": "log_sigma_b", "gamma2": "log_gap12", "gamma3": "log_gap23",
              "sigma_u": "log_sigma_u"}
    return [rename.get(n, n) for n in names]


def to_unconstrained(theta: Theta) -> np.ndarray:
    vec = theta.vector()
    pos = _layout(theta.beta2.size, theta.beta3.size)
    phi = vec.copy()
    phi[pos["sigma_b"]] = math.log(theta.sigma_b)
    phi[pos["gamma2"]] = math.log(theta.gamma1 - theta.gamma2)
    phi[pos["gamma3"]] = math.log(theta.gamma2 - theta.gamma3)
    phi[pos["sigma_u"]] = math.log(theta.sigma_u)
    return phi


def _natural_vector(phi: np.ndarray, n_recall: int, n_heaping: int) -> np.ndarray:
    pos = _layout(n_recall, n_heaping)
    vec = np.array(phi, dtype=float)
    vec[pos["sigma_b"]] = math.exp(phi[pos["sigma_b"]])
    vec[pos["gamma2"]] = phi[pos["gamma1"]] - math.exp(phi[pos["gamma2"]])
    vec[pos["gamma3"]] = vec[pos["gamma2"]] - math.exp(phi[pos["gamma3"]])
    vec[pos["sigma_u"]] = math.exp(phi[pos["sigma_u"]])
    return vec


def from_unconstrained(phi, n_recall: int = 0, n_heaping: int = 0) -> Theta:
    """Inverse of :func:`to_unconstrained`; any finite ``phi`` gives a valid Theta.

    In floating point the ordering survives as long as each gap is not
    below machine precision of the intercepts; gaps that vanish or overflow
    raise the Theta validation error or :class:`OverflowError`.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.size != 8 + n_recall + n_heaping:
        raise ValueError(f"expected {8 + n_recall + n_heaping} values, got {phi.size}")
    return Theta.from_vector(_natural_vector(phi, n_recall, n_heaping), n_recall, n_heaping)


def theta_jacobian(phi, n_recall: int = 0, n_heaping: int = 0) -> np.ndarray:
    """``d theta.vector() / d phi``."""
    phi = np.asarray(phi, dtype=float)
    pos = _layout(n_recall, n_heaping)
    jac = np.eye(phi.size)
    sb, g1, g2, g3, su = (pos[k] for k in ("sigma_b", "gamma1", "gamma2", "gamma3", "sigma_u"))
    jac[sb, sb] = math.exp(phi[sb])
    jac[su, su] = math.exp(phi[su])
    e2, e3 = math.exp(phi[g2]), math.exp(phi[g3])
    jac[g2, g1], jac[g2, g2] = 1.0, -e2
    jac[g3, g1], jac[g3, g2], jac[g3, g3] = 1.0, -e2, -e3
    return jac


def log_jacobian(phi, n_recall: int = 0, n_heaping: int = 0, fixed=()) -> float:
    """Log-determinant of the map from ``phi`` to the prior's coordinates.

    The prior is a density in ``sigma_b^2, sigma_u^2`` and the intercepts,
    so this is ``delta2 + delta3 + 2 tau_b + 2 tau_u + 2 ln 2``. SDs named in
    ``fixed`` contribute nothing.
    """
    phi = np.asarray(phi, dtype=float)
    pos = _layout(n_recall, n_heaping)
    out = phi[pos["gamma2"]] + phi[pos["gamma3"]]
    for name in ("sigma_b", "sigma_u"):
        if name not in fixed:
            out += 2.0 * phi[pos[name]] + math.log(2.0)
    return float(out)


# ---------------------------------------------------------------------------
# objective

class Objective:
    """Log posterior (or log likelihood) as a function of the free ``phi`` entries.

    ``fixed`` holds natural-scale values (keys as in :meth:`Theta.to_dict`,
    scalar entries only) that stay put during optimization, e.g.
    ``{"sigma_b": 1e-4, "sigma_u": 1e-4}`` for the no-random-effect model.
    """

    def __init__(self, lik: MarginalLikelihood, use_prior: bool = True,
                 prior: PriorConfig | None = None, fixed: dict | None = None,
                 template: Theta | None = None):
        self.lik = lik
        self.spec = lik.spec
        self.use_prior = use_prior
        self.prior = prior or lik.spec.prior
        self.n_recall = lik.spec.n_recall
        self.n_heaping = lik.spec.n_heaping
        self.n_evals = 0
        size = 8 + self.n_recall + self.n_heaping
        self.fixed = dict(fixed or {})
        pos = _layout(self.n_recall, self.n_heaping)
        scalar = {"beta0": 0, "beta1": 1, **pos}
        unknown = set(self.fixed) - set(scalar)
        if unknown:
            raise ValueError(f"cannot fix {sorted(unknown)}; only scalar parameters")
        self.free = np.ones(size, dtype=bool)
        self._fixed_phi = np.zeros(size)
        if self.fixed:
            base = template or Theta(beta0=0, beta1=1, sigma_b=1, gamma1=0, gamma2=-1,
                                     gamma3=-2, gamma0=0, sigma_u=1,
                                     beta2=np.zeros(self.n_recall),
                                     beta3=np.zeros(self.n_heaping))
            phi = to_unconstrained(base.replace(**self.fixed))
            for k in self.fixed:
                self.free[scalar[k]] = False
                self._fixed_phi[scalar[k]] = phi[scalar[k]]
        if self.fixed.keys() & {"gamma1", "gamma2", "gamma3"}:
            raise ValueError("intercepts cannot be fixed individually")

    @property
    def n_free(self) -> int:
        return int(self.free.sum())

    def full_phi(self, x) -> np.ndarray:
        phi = self._fixed_phi.copy()
        phi[self.free] = x
        return phi

    def theta(self, x) -> Theta:
        return from_unconstrained(self.full_phi(x), self.n_recall, self.n_heaping)

    def __call__(self, x) -> float:
        """Objective value; ``-inf`` wherever the parameter or likelihood is unusable."""
        self.n_evals += 1
        try:
            theta = self.theta(x)
        except (ValueError, OverflowError):
            return -math.inf
        ll = self.lik.subject_logliks(theta, raise_on_nan=False)
        if not np.all(np.isfinite(ll)):
            return -math.inf
        val = math.fsum(ll)
        if self.use_prior:
            val += log_prior(theta, self.prior, skip=tuple(self.fixed))
        return val if math.isfinite(val) else -math.inf


# ---------------------------------------------------------------------------
# finite differences

def fd_gradient(f: Callable, x, rel_step: float = 1e-4, f0: float | None = None):
    """Central differences with ``h_j = rel_step * max(1, |x_j|)``.

    Returns ``(grad, diag2)`` where ``diag2`` holds the matching second
    differences, free by-products used to scale the first BFGS step.
    """
    x = np.asarray(x, dtype=float)
    f0 = f(x) if f0 is None else f0
    g = np.empty(x.size)
    d2 = np.empty(x.size)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        e = np.zeros(x.size)
        e[j] = h
        fp, fm = f(x + e), f(x - e)
        g[j] = (fp - fm) / (2 * h)
        d2[j] = (fp - 2 * f0 + fm) / (h * h)
    return g, d2


def fd_hessian(f: Callable, x, rel_step: float = 1e-3, f0: float | None = None) -> np.ndarray:
    """Central-difference Hessian, symmetrized."""
    x = np.asarray(x, dtype=float)
    n = x.size
    f0 = f(x) if f0 is None else f0
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / (h[i] * h[i])
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * h[i] * h[j])
    return 0.5 * (H + H.T)


def repair_information(info: np.ndarray) -> tuple:
    """Ridge ``1e-6 (1 + max diag)`` escalated x10 until Cholesky succeeds.

    Returns ``(matrix, ridge)``; ``ridge`` is 0 when no repair was needed.
    """
    info = 0.5 * (info + info.T)
    if not np.all(np.isfinite(info)):
        raise FloatingPointError("information matrix is not finite")
    ridge = 0.0
    step = 1e-6 * (1.0 + max(0.0, float(np.max(np.diag(info)))))
    for _ in range(40):
        try:
            np.linalg.cholesky(info + ridge * np.eye(len(info)))
            return info + ridge * np.eye(len(info)), ridge
        except np.linalg.LinAlgError:
            ridge = step if ridge == 0.0 else ridge * 10.0
    raise FloatingPointError("information matrix could not be repaired")


# ---------------------------------------------------------------------------
# BFGS

@dataclass
class BFGSResult:
    x: np.ndarray
    fun: float            # value of the maximized objective
    grad: np.ndarray
    converged: bool
    n_iter: int
    message: str


def bfgs_maximize(f: Callable, x0, rel_step: float = 1e-4, max_iter: int = 500,
                  ftol: float = 1e-9, gtol: float = 1e-4, max_step: float = 2.0) -> BFGSResult:
    """Maximize ``f`` by BFGS on its negative with central-difference gradients.

    Converged when the relative objective change drops below ``ftol`` and
    the gradient 2-norm below ``gtol``. Steps are capped at ``max_step`` in
    the infinity norm; the line search is Armijo backtracking.
    """
    x = np.asarray(x0, dtype=float).copy()
    fx = f(x)
    if not math.isfinite(fx):
        raise FloatingPointError("objective is not finite at the starting point")
    g, d2 = fd_gradient(f, x, rel_step, fx)
    n = x.size

    def diag_inverse(curv):
        curv = np.where(np.isfinite(curv) & (curv < 0), -curv, 0.0)
        floor = max(1e-8, 1e-6 * curv.max()) if curv.size else 1.0
        return np.diag(1.0 / np.maximum(curv, floor if curv.max() > 0 else 1.0))

    Hinv = diag_inverse(d2)
    message = "maximum iterations reached"
    converged = False
    it = 0
    restarted = False
    for it in range(1, max_iter + 1):
        p = Hinv @ g                      # ascent direction
        if not p @ g > 0:
            Hinv = diag_inverse(d2)
            p = Hinv @ g
        big = np.max(np.abs(p))
        if big > max_step:
            p *= max_step / big
        slope = float(p @ g)
        step = 1.0
        accepted = False
        for _ in range(50):
            xn = x + step * p
            fn = f(xn)
            if math.isfinite(fn) and fn >= fx + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if restarted:
                message = "line search failed"
                break
            # retry once from the curvature-scaled gradient direction
            restarted = True
            _, d2 = fd_gradient(f, x, rel_step, fx)
            Hinv = diag_inverse(d2)
            continue
        restarted = False
        gn, d2 = fd_gradient(f, xn, rel_step, fn)
        s = xn - x
        y = g - gn                        # gradient change of the minimized -f
        sy = float(s @ y)
        change = abs(fn - fx) / max(1.0, abs(fx))
        x, fx, g = xn, fn, gn
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if it == 1:
                Hinv = np.eye(n) * sy / float(y @ y) if not np.any(np.diag(Hinv) != 1.0) else Hinv
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        gnorm = float(np.linalg.norm(g))
        if change < ftol and gnorm < gtol:
            converged = True
            message = "converged"
            break
    return BFGSResult(x=x, fun=fx, grad=g, converged=converged, n_iter=it, message=message)


# ---------------------------------------------------------------------------
# mode finding

@dataclass
class ModeResult:
    theta_hat: Theta
    phi_hat: np.ndarray
    information: np.ndarray        # negative Hessian in phi space, free coordinates
    converged: bool
    n_evals: int
    final_gradient_norm: float
    objective: float               # log posterior, or log likelihood when use_prior is off
    loglik: float
    use_prior: bool
    free: np.ndarray               # mask of optimized phi entries
    ridge: float = 0.0
    n_iter: int = 0
    message: str = ""
    names: list = field(default_factory=list)
    fixed: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return int(self.free.sum())

    def phi_covariance(self) -> np.ndarray:
        """Inverse information on the full phi vector; fixed entries get zeros."""
        n = self.phi_hat.size
        cov = np.zeros((n, n))
        idx = np.nonzero(self.free)[0]
        cov[np.ix_(idx, idx)] = np.linalg.inv(self.information)
        return cov

    def theta_covariance(self) -> np.ndarray:
        """Delta-method covariance of :meth:`Theta.vector`."""
        jac = theta_jacobian(self.phi_hat, self.theta_hat.beta2.size, self.theta_hat.beta3.size)
        return jac @ self.phi_covariance() @ jac.T

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.theta_covariance()), 0.0, None))

    def wald_intervals(self, level: float = 0.95) -> np.ndarray:
        """``theta +- z se`` per entry of :meth:`Theta.vector`, shape (p, 2)."""
        from scipy.stats import norm

        z = norm.ppf(0.5 + level / 2)
        est = self.theta_hat.vector()
        se = self.standard_errors()
        return np.column_stack([est - z * se, est + z * se])

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.to_dict(),
            "phi_hat": self.phi_hat.tolist(),
            "phi_names": self.names,
            "free": self.free.tolist(),
            "information": self.information.tolist(),
            "ridge": self.ridge,
            "converged": self.converged,
            "message": self.message,
            "n_iter": self.n_iter,
            "n_evals": self.n_evals,
            "final_gradient_norm": self.final_gradient_norm,
            "objective": self.objective,
            "loglik": self.loglik,
            "use_prior": self.use_prior,
            "fixed": self.fixed,
        }


def default_init(dataset: Sequence[SubjectRecord], spec: ModelSpec) -> Theta:
    """Heuristic start that puts the Poisson mean on the data scale."""
    tlfb = np.concatenate([s.tlfb for s in dataset]).astype(float)
    ema = np.concatenate([s.ema for s in dataset]).astype(float)
    beta0 = math.log(max(tlfb.mean(), 0.5)) - 0.5 * math.log(ema.mean())
    return Theta(beta0=beta0, beta1=0.5, sigma_b=0.3, gamma1=-1.0, gamma2=-4.0, gamma3=-7.0,
                 gamma0=0.1, sigma_u=2.0, beta2=np.zeros(spec.n_recall),
                 beta3=np.zeros(spec.n_heaping))


def observed_information(objective: Objective, x_hat, rel_step: float = 1e-3,
                         f0: float | None = None) -> tuple:
    """Negative FD Hessian at ``x_hat`` (free coordinates), repaired if needed.

    Returns ``(information, ridge)``.
    """
    H = fd_hessian(objective, x_hat, rel_step, f0)
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("Hessian evaluation produced non-finite values")
    return repair_information(-H)


def find_posterior_mode(dataset: Sequence[SubjectRecord], spec: ModelSpec,
                        init: Theta | None = None, *, use_prior: bool = True,
                        fixed: dict | None = None, quad: QuadratureRule | None = None,
                        lik: MarginalLikelihood | None = None, max_iter: int = 500,
                        ftol: float = 1e-9, gtol: float = 1e-4,
                        information: bool = True) -> ModeResult:
    """Maximize the log posterior (``use_prior=False``: the log likelihood) over phi.

    No Jacobian term enters the objective, so the returned ``theta_hat`` is
    the mode in the natural parameterization. Non-convergence is flagged
    on the result, not raised.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    lik = lik or MarginalLikelihood(dataset, spec, quad)
    init = init or default_init(dataset, spec)
    obj = Objective(lik, use_prior=use_prior, fixed=fixed, template=init)
    start = to_unconstrained(init.replace(**obj.fixed)) if obj.fixed else to_unconstrained(init)
    x0 = start[obj.free]
    if not math.isfinite(obj(x0)):
        raise FloatingPointError("objective is not finite at the initial value")
    res = bfgs_maximize(obj, x0, max_iter=max_iter, ftol=ftol, gtol=gtol)
    theta_hat = obj.theta(res.x)
    info = np.zeros((obj.n_free, obj.n_free))
    ridge = 0.0
    if information:
        info, ridge = observed_information(obj, res.x, f0=res.fun)
    ll = lik(theta_hat)
    log.info("mode: %s after %d iterations, %d evaluations, |g|=%.2e",
             res.message, res.n_iter, obj.n_evals, np.linalg.norm(res.grad))
    return ModeResult(
        theta_hat=theta_hat, phi_hat=obj.full_phi(res.x), information=info,
        converged=res.converged, n_evals=obj.n_evals,
        final_gradient_norm=float(np.linalg.norm(res.grad)), objective=res.fun, loglik=ll,
        use_prior=use_prior, free=obj.free.copy(), ridge=ridge, n_iter=res.n_iter,
        message=res.message, names=phi_names(spec), fixed=dict(obj.fixed),
    )


def random_inits(base: Theta, n: int, rng: np.random.Generator, scale: float = 0.3) -> list:
    """Starts scattered around ``base`` in phi space."""
    phi = to_unconstrained(base)
    k, h = base.beta2.size, base.beta3.size
    return [from_unconstrained(phi + scale * rng.standard_normal(phi.size), k, h)
            for _ in range(n)]


def multistart_agreement(results: Sequence[ModeResult], tol: float = 1e-3) -> tuple:
    """Largest group of fits whose ``theta_hat`` agree within ``tol`` in every coordinate.

    Returns ``(size_of_group, index_of_best)``; a group smaller than the
    number of fits hints at multimodality.
    """
    vecs = [r.theta_hat.vector() for r in results]
    best = int(np.argmax([r.objective for r in results]))
    group = sum(np.max(np.abs(v - vecs[best])) < tol for v in vecs)
    return int(group), best


# ---------------------------------------------------------------------------
# parametric bootstrap

@dataclass
class BootstrapResult:
    names: list
    estimates: np.ndarray          # (n_ok, p) natural-scale refits
    intervals: np.ndarray          # (p, 2)
    level: float
    n_requested: int
    n_failed: int

    def interval(self, name: str) -> tuple:
        i = self.names.index(name)
        return float(self.intervals[i, 0]), float(self.intervals[i, 1])


def percentile_intervals(samples: np.ndarray, level: float = 0.95) -> np.ndarray:
    alpha = (1.0 - level) / 2
    return np.column_stack([np.quantile(samples, alpha, axis=0),
                            np.quantile(samples, 1 - alpha, axis=0)])


def _bootstrap_one(args):
    theta_hat, design, seed_seq, fit_kwargs, simulate = args
    from .simulation import generate_dataset

    data = (simulate or generate_dataset)(theta_hat, design, np.random.default_rng(seed_seq))
    subjects = getattr(data, "subjects", data)
    try:
        res = find_posterior_mode(subjects, design.spec, init=theta_hat, information=False,
                                  **fit_kwargs)
    except (FloatingPointError, ValueError) as exc:
        log.warning("bootstrap refit failed: %s", exc)
        return None
    return res.theta_hat.vector() if res.converged else None


def parametric_bootstrap_ci(theta_hat: Theta, design, B: int = 100, level: float = 0.95,
                            seed=0, n_jobs: int = 1, fit_kwargs: dict | None = None,
                            simulate: Callable | None = None) -> BootstrapResult:
    """Percentile intervals from ``B`` datasets simulated at ``theta_hat`` and refit.

    Refits start at ``theta_hat``. Non-converged refits are dropped and
    counted; more than 20% dropped is an error. ``simulate(theta, design, rng)``
    replaces :func:`heaprecall.simulation.generate_dataset` when given.
    """
    from .seeding import child_seeds

    if B < 50:
        raise ValueError("B must be at least 50")
    fit_kwargs = {"use_prior": False, **(fit_kwargs or {})}
    seeds = child_seeds(seed, "bootstrap", B)
    jobs = [(theta_hat, design, s, fit_kwargs, simulate) for s in seeds]
    if n_jobs > 1:
        # numba thread pools do not survive fork
        with ProcessPoolExecutor(n_jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            out = list(pool.map(_bootstrap_one, jobs))
    else:
        out = [_bootstrap_one(j) for j in jobs]
    ok = [v for v in out if v is not None]
    n_failed = B - len(ok)
    if n_failed > 0.2 * B:
        raise RuntimeError(f"{n_failed} of {B} bootstrap refits failed")
    est = np.array(ok)
    return BootstrapResult(names=Theta.names(design.spec), estimates=est,
                           intervals=percentile_intervals(est, level), level=level,
                           n_requested=B, n_failed=n_failed)
