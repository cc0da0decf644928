"""Independent reference computations, written without the package's kernels."""

import math

import numpy as np
from numba import njit
from scipy.special import expit, gammaln

BASES = (1, 5, 10, 20)


def coarsen_ref(w, g):
    # round half up to the class base, spelled out by cases
    base = BASES[g - 1]
    q, r = divmod(w, base)
    return (q + (1 if 2 * r >= base else 0)) * base


def wg_set_ref(y, w_max=None):
    w_max = y + 20 if w_max is None else w_max
    return {(w, g) for w in range(0, w_max + 1) for g in (1, 2, 3, 4) if coarsen_ref(w, g) == y}


def class_probs_ref(gammas, gamma0, w, offset):
    lin = gamma0 * w + offset
    q = [expit(gk + lin) for gk in gammas]
    return [1 - q[0], q[0] - q[1], q[1] - q[2], q[2]]


def day_prob_ref(theta, x, y, b, u, z_recall=(), z_heaping=()):
    """f(y | b, u) by summing over an explicit inverse-coarsening set."""
    zr = float(np.dot(z_recall, theta.beta2)) if len(z_recall) else 0.0
    zh = float(np.dot(z_heaping, theta.beta3)) if len(z_heaping) else 0.0
    lam = math.exp(theta.beta0 + theta.beta1 * math.log(x) + zr + b)
    total = 0.0
    for w, g in wg_set_ref(y):
        pois = math.exp(w * math.log(lam) - lam - gammaln(w + 1)) if w else math.exp(-lam)
        total += pois * class_probs_ref(theta.gammas, theta.gamma0, w, zh + u)[g - 1]
    return total


@njit(cache=True)
def _mc_subject(x, y, offs_h, beta0, beta1, g1, g2, g3, g0, zb, zu, sig_b, sig_u):
    n = zb.size
    vals = np.empty(n)
    for k in range(n):
        b = sig_b * zb[k]
        u = sig_u * zu[k]
        logp = 0.0
        for t in range(y.size):
            lam = math.exp(beta0 + beta1 * math.log(x[t]) + b)
            s = 0.0
            for w in range(max(0, y[t] - 10), y[t] + 10):
                for g in range(1, 5):
                    base = 1 if g == 1 else 5 if g == 2 else 10 if g == 3 else 20
                    if (w + base // 2) // base * base != y[t]:
                        continue
                    lin = g0 * w + offs_h[t] + u
                    q1 = 1.0 / (1.0 + math.exp(-(g1 + lin)))
                    q2 = 1.0 / (1.0 + math.exp(-(g2 + lin)))
                    q3 = 1.0 / (1.0 + math.exp(-(g3 + lin)))
                    pg = 1.0 - q1 if g == 1 else q1 - q2 if g == 2 else q2 - q3 if g == 3 else q3
                    s += math.exp(w * math.log(lam) - lam - math.lgamma(w + 1.0)) * pg
            logp += math.log(s) if s > 0 else -np.inf
        vals[k] = logp
    return vals


def mc_subject_loglik(theta, subject, n_draws, rng, z_heaping_rows=None):
    """Plain Monte Carlo over prior draws of (b, u).

    Returns ``(log of MC mean, standard error of that log)``.
    """
    x = subject.ema.astype(np.float64)
    y = subject.tlfb.astype(np.int64)
    offs = np.zeros(y.size) if z_heaping_rows is None else z_heaping_rows @ theta.beta3
    zb = rng.standard_normal(n_draws)
    zu = rng.standard_normal(n_draws)
    logs = _mc_subject(x, y, offs, theta.beta0, theta.beta1, theta.gamma1, theta.gamma2,
                       theta.gamma3, theta.gamma0, zb, zu, theta.sigma_b, theta.sigma_u)
    top = logs.max()
    f = np.exp(logs - top)
    mean = f.mean()
    se = f.std(ddof=1) / math.sqrt(n_draws)
    return top + math.log(mean), se / mean


def grid_subject_loglik(theta, subject, n=1601, half_width=9.0):
    """Deterministic oracle: midpoint sum over a dense standardized (b, u) grid."""
    from scipy.special import gammaln, logsumexp

    z = np.linspace(-half_width, half_width, n)
    lw = -0.5 * z ** 2 - 0.5 * math.log(2 * math.pi) + math.log(z[1] - z[0])
    b = theta.sigma_b * z
    u = theta.sigma_u * z
    total = lw[:, None] + lw[None, :]
    for d in subject.days:
        lam = np.exp(theta.beta0 + theta.beta1 * math.log(d.ema_count) + b)
        p = np.zeros((n, n))
        for w, g in wg_set_ref(d.tlfb_count):
            pw = np.exp(w * np.log(lam) - lam - gammaln(w + 1))
            pg = np.array(class_probs_ref(theta.gammas, theta.gamma0, w, u))[g - 1]
            p += pw[:, None] * pg[None, :]
        total += np.log(p)
    return float(logsumexp(total))


def poisson_glm_fixed_effects(subjects, theta_start):
    """Fixed-effects likelihood of coarsened counts, maximized with scipy.

    The subject effects are absent; used as the oracle for near-zero
    random-effect variances.
    """
    from scipy.optimize import minimize

    xs = np.concatenate([s.ema for s in subjects]).astype(float)
    ys = np.concatenate([s.tlfb for s in subjects])
    sets = {int(y): sorted(wg_set_ref(int(y))) for y in np.unique(ys)}

    def nll(p):
        b0, b1, g1, d2, d3, g0 = p
        gam = (g1, g1 - math.exp(d2), g1 - math.exp(d2) - math.exp(d3))
        total = 0.0
        for x, y in zip(xs, ys):
            lam = math.exp(b0 + b1 * math.log(x))
            s = 0.0
            for w, g in sets[int(y)]:
                s += math.exp(w * math.log(lam) - lam - gammaln(w + 1)) * \
                    class_probs_ref(gam, g0, w, 0.0)[g - 1]
            total -= math.log(s)
        return total

    t = theta_start
    p0 = [t.beta0, t.beta1, t.gamma1, math.log(t.gamma1 - t.gamma2),
          math.log(t.gamma2 - t.gamma3), t.gamma0]
    res = minimize(nll, p0, method="Nelder-Mead",
                   options={"xatol": 1e-7, "fatol": 1e-10, "maxiter": 20000, "maxfev": 40000})
    b0, b1, g1, d2, d3, g0 = res.x
    return {"beta0": b0, "beta1": b1, "gamma1": g1, "gamma2": g1 - math.exp(d2),
            "gamma3": g1 - math.exp(d2) - math.exp(d3), "gamma0": g0, "nll": res.fun}


def spike_ratio(w, lo=10, hi=60):
    """Mean ratio of the count at each multiple of 5 to the mean of its two neighbours."""
    hist = np.bincount(np.asarray(w), minlength=hi + 2).astype(float)
    return float(np.mean([hist[k] / max(0.5 * (hist[k - 1] + hist[k + 1]), 1.0)
                          for k in range(lo, hi + 1, 5)]))
