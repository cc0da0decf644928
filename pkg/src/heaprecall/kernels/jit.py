"""Numba kernels.

All inputs are the flat per-day arrays of :class:`heaprecall.packed.PackedData`
plus scalar parameters. Random effects are handled in standardized
coordinates ``s = b / sigma_b`` and ``v = u / sigma_u``.
"""

import math

import numpy as np

from .._accel import njit

try:
    from numba import prange
except ImportError:  # pragma: no cover
    prange = range

_LOG2PI = math.log(2.0 * math.pi)
# profile rule: trapezoid spacing in Laplace standard deviations, log drop at
# which the walk stops, and the walk length cap per side
_PROFILE_STEP = 0.5
_PROFILE_DROP = 30.0
_PROFILE_MAX_HALF = 4000
_PROFILE_CHUNK = 8


@njit
def _expit(x):
    if x >= 0.0:
        z = math.exp(-x)
        return 1.0 / (1.0 + z)
    z = math.exp(x)
    return z / (1.0 + z)


@njit
def _band(a_hi, a_lo):
    return _expit(a_hi) * _expit(-a_lo) * -math.expm1(a_lo - a_hi)


@njit
def _expit_pair(x):
    """``(expit(x), expit(-x))`` from one exponential."""
    z = math.exp(-abs(x))
    p = 1.0 / (1.0 + z)
    if x >= 0.0:
        return p, z * p
    return z * p, p


@njit
def _heap_terms(a1, a2, a3, mask, c12, c23, derivs):
    """Sum of allowed class probabilities and its first two u-derivatives.

    ``c12 = 1 - exp(a2 - a1)`` and ``c23 = 1 - exp(a3 - a2)`` do not depend on
    ``w`` or ``u``, so a band probability is ``expit(a_hi) expit(-a_lo) c``.
    """
    m0 = mask[0] != 0
    m1 = mask[1] != 0
    m2 = mask[2] != 0
    m3 = mask[3] != 0
    q1 = r1 = q2 = r2 = q3 = r3 = 0.0
    if derivs or m0 or m1:
        q1, r1 = _expit_pair(a1)
    if derivs or m1 or m2:
        q2, r2 = _expit_pair(a2)
    if derivs or m2 or m3:
        q3, r3 = _expit_pair(a3)
    h = 0.0
    if m0:
        h += r1
    if m1:
        h += q1 * r2 * c12
    if m2:
        h += q2 * r3 * c23
    if m3:
        h += q3
    if not derivs:
        return h, 0.0, 0.0
    d1 = q1 * r1
    d2 = q2 * r2
    d3 = q3 * r3
    e1 = d1 * (r1 - q1)
    e2 = d2 * (r2 - q2)
    e3 = d3 * (r3 - q3)
    h1 = 0.0
    h2 = 0.0
    if m0:
        h1 -= d1
        h2 -= e1
    if m1:
        h1 += d1 - d2
        h2 += e1 - e2
    if m2:
        h1 += d2 - d3
        h2 += e2 - e3
    if m3:
        h1 += d3
        h2 += e3
    return h, h1, h2


@njit
def _pois_window(loglam, lam, lo, nt, lfact, out):
    """Window Poisson weights scaled to max 1 in ``out[:nt]``; returns the log scale."""
    lp0 = lo * loglam - lam - lfact[0]
    v = 1.0
    vmax = 1.0
    out[0] = 1.0
    for k in range(1, nt):
        v *= lam / (lo + k)
        out[k] = v
        if v > vmax:
            vmax = v
    if not (math.isfinite(vmax) and vmax > 0.0):
        lpmax = -np.inf
        for k in range(nt):
            lp = (lo + k) * loglam - lam - lfact[k]
            out[k] = lp
            if lp > lpmax:
                lpmax = lp
        for k in range(nt):
            out[k] = math.exp(out[k] - lpmax)
        return lpmax
    inv = 1.0 / vmax
    for k in range(nt):
        out[k] *= inv
    return lp0 + math.log(vmax)


@njit
def _day_derivs(mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, b, u):
    """log f(y|b,u) and its derivatives (b, u, bb, bu, uu) for one day."""
    loglam = mu + b
    lam = math.exp(loglam)
    tw = np.empty(20)
    lpmax = _pois_window(loglam, lam, lo, n, lfact, tw)
    c12 = -math.expm1(g2 - g1)
    c23 = -math.expm1(g3 - g2)
    s0 = 0.0
    sb = 0.0
    sbb = 0.0
    su = 0.0
    suu = 0.0
    sbu = 0.0
    for k in range(n):
        w = lo + k
        t = tw[k]
        lin = g0 * w + eta + u
        h, h1, h2 = _heap_terms(g1 + lin, g2 + lin, g3 + lin, mask[k], c12, c23, True)
        d = w - lam
        s0 += t * h
        sb += t * d * h
        sbb += t * (d * d - lam) * h
        su += t * h1
        suu += t * h2
        sbu += t * d * h1
    if not (s0 > 0.0) or not math.isfinite(s0):
        return -np.inf, 0.0, 0.0, 0.0, 0.0, 0.0
    lb = sb / s0
    lu = su / s0
    return (lpmax + math.log(s0), lb, lu, sbb / s0 - lb * lb,
            sbu / s0 - lb * lu, suu / s0 - lu * lu)


@njit
def _subject_h(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, sig_b, sig_u, s, v):
    h = -0.5 * (s * s + v * v)
    gs = -s
    gv = -v
    hss = -1.0
    hsv = 0.0
    hvv = -1.0
    for t in range(i0, i1):
        lf, lb, lu, lbb, lbu, luu = _day_derivs(
            mu[t], eta[t], lo[t], n[t], mask[t], lfact[t], g1, g2, g3, g0, sig_b * s, sig_u * v)
        if not math.isfinite(lf):
            return -np.inf, 0.0, 0.0, 0.0, 0.0, 0.0
        h += lf
        gs += sig_b * lb
        gv += sig_u * lu
        hss += sig_b * sig_b * lbb
        hsv += sig_b * sig_u * lbu
        hvv += sig_u * sig_u * luu
    return h, gs, gv, hss, hsv, hvv


@njit
def _subject_mode(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, sig_b, sig_u):
    """Maximize the standardized log integrand by damped Newton.

    Returns ``(s, v, cov_ss, cov_sv, cov_vv, ok)`` where ``cov`` inverts the
    negative Hessian at the mode.
    """
    s = 0.0
    v = 0.0
    h, gs, gv, hss, hsv, hvv = _subject_h(i0, i1, mu, eta, lo, n, mask, lfact,
                                          g1, g2, g3, g0, sig_b, sig_u, s, v)
    if not math.isfinite(h):
        return 0.0, 0.0, 1.0, 0.0, 1.0, False
    ns, nv, nh, ngs, ngv, nhss, nhsv, nhvv = s, v, h, gs, gv, hss, hsv, hvv
    for _ in range(100):
        if abs(gs) < 1e-10 and abs(gv) < 1e-10:
            break
        a11 = -hss
        a12 = -hsv
        a22 = -hvv
        ridge = 0.0
        det = 1.0
        for _r in range(60):
            det = (a11 + ridge) * (a22 + ridge) - a12 * a12
            if a11 + ridge > 0.0 and det > 0.0:
                break
            ridge = 1.0 if ridge == 0.0 else ridge * 4.0
        ds = ((a22 + ridge) * gs - a12 * gv) / det
        dv = ((a11 + ridge) * gv - a12 * gs) / det
        big = max(abs(ds), abs(dv))
        if big > 2.0:
            ds *= 2.0 / big
            dv *= 2.0 / big
        step = 1.0
        moved = False
        for _k in range(50):
            ns = s + step * ds
            nv = v + step * dv
            nh, ngs, ngv, nhss, nhsv, nhvv = _subject_h(
                i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, sig_b, sig_u, ns, nv)
            if math.isfinite(nh) and nh >= h - 1e-12 * (1.0 + abs(h)):
                moved = True
                break
            step *= 0.5
        if not moved:
            break
        dh = nh - h
        s, v, h, gs, gv, hss, hsv, hvv = ns, nv, nh, ngs, ngv, nhss, nhsv, nhvv
        if step * big < 1e-13 and dh <= 1e-14 * (1.0 + abs(h)):
            break
    a11 = -hss
    a12 = -hsv
    a22 = -hvv
    det = a11 * a22 - a12 * a12
    if a11 > 0.0 and det > 0.0:
        return s, v, a22 / det, -a12 / det, a11 / det, True
    return s, v, 1.0, 0.0, 1.0, False


@njit(parallel=True)
def subject_modes(mu, eta, lo, n, mask, lfact, starts, g1, g2, g3, g0, sig_b, sig_u):
    ns = starts.size - 1
    out = np.empty((ns, 6))
    for i in prange(ns):
        s, v, css, csv, cvv, ok = _subject_mode(starts[i], starts[i + 1], mu, eta, lo, n, mask,
                                                lfact, g1, g2, g3, g0, sig_b, sig_u)
        out[i, 0] = s
        out[i, 1] = v
        out[i, 2] = css
        out[i, 3] = csv
        out[i, 4] = cvv
        out[i, 5] = 1.0 if ok else 0.0
    return out


@njit
def _log_tensor(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, bn, un):
    """``sum_t log f(y_t | b_j, u_k)`` on the tensor grid ``bn x un``.

    The Poisson factor depends only on ``b`` and the heaping factor only on
    ``u``, so each day costs one table per axis plus a product over the
    window.
    """
    m1 = bn.size
    m2 = un.size
    out = np.zeros((m1, m2))
    tt = np.empty((m1, 20))
    lmax = np.empty(m1)
    hh = np.empty((m2, 20))
    c12 = -math.expm1(g2 - g1)
    c23 = -math.expm1(g3 - g2)
    for t in range(i0, i1):
        nt = n[t]
        lot = lo[t]
        for j in range(m1):
            loglam = mu[t] + bn[j]
            lmax[j] = _pois_window(loglam, math.exp(loglam), lot, nt, lfact[t], tt[j])
        for kk in range(m2):
            for k in range(nt):
                lin = g0 * (lot + k) + eta[t] + un[kk]
                h, _d1, _d2 = _heap_terms(g1 + lin, g2 + lin, g3 + lin, mask[t, k],
                                          c12, c23, False)
                hh[kk, k] = h
        for j in range(m1):
            for kk in range(m2):
                f = 0.0
                for k in range(nt):
                    f += tt[j, k] * hh[kk, k]
                out[j, kk] += (math.log(f) if f > 0.0 else -np.inf) + lmax[j]
    return out


@njit
def _logsumexp2(a):
    amax = -np.inf
    for j in range(a.shape[0]):
        for k in range(a.shape[1]):
            if a[j, k] > amax:
                amax = a[j, k]
    if not math.isfinite(amax):
        return np.nan
    tot = 0.0
    for j in range(a.shape[0]):
        for k in range(a.shape[1]):
            tot += math.exp(a[j, k] - amax)
    return amax + math.log(tot)


@njit
def _gh_loglik(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, sig_b, sig_u,
               z, logw, s_hat, v_hat, a_s, a_v):
    """Gauss-Hermite on ``(s_hat + a_s z, v_hat + a_v z)``; plain when centered at 0 with unit scale."""
    m = z.size
    bn = np.empty(m)
    un = np.empty(m)
    rowlog = np.empty(m)
    collog = np.empty(m)
    for j in range(m):
        sj = s_hat + a_s * z[j]
        vj = v_hat + a_v * z[j]
        bn[j] = sig_b * sj
        un[j] = sig_u * vj
        rowlog[j] = logw[j] + math.log(a_s) + 0.5 * (z[j] * z[j] - sj * sj)
        collog[j] = logw[j] + math.log(a_v) + 0.5 * (z[j] * z[j] - vj * vj)
    tot = _log_tensor(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, bn, un)
    for j in range(m):
        for k in range(m):
            tot[j, k] += rowlog[j] + collog[k]
    return _logsumexp2(tot)


@njit
def _profile_rule(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, sig_b, sig_u,
                  s_hat, v_hat, step, axis, m):
    """``m``-point Gauss rule for the measure ``exp(h)`` along one axis through the mode.

    The measure is discretized by the trapezoid rule with spacing ``step``,
    walking out from the mode until ``h`` has dropped by ``_PROFILE_DROP`` on
    both sides; its recurrence coefficients come from the Stieltjes
    procedure and the nodes and weights from the Jacobi matrix.
    Returns ``(nodes, log_weights, log_scale, ok)``; the weights are relative
    to ``exp(log_scale)``.
    """
    cap = _PROFILE_MAX_HALF
    vals = np.empty(2 * cap + 1)
    fixed = np.empty(1)
    moving = np.empty(_PROFILE_CHUNK)
    fixed[0] = sig_u * v_hat if axis == 0 else sig_b * s_hat
    centre = s_hat if axis == 0 else v_hat
    sig = sig_b if axis == 0 else sig_u
    other = v_hat if axis == 0 else s_hat
    h0 = -np.inf
    lo_k = 0
    hi_k = 0
    for side in (-1, 1):
        k = 0 if side < 0 else 1
        done = False
        while not done and k <= cap:
            cnt = min(_PROFILE_CHUNK, cap + 1 - k)
            for c in range(cnt):
                moving[c] = sig * (centre + side * (k + c) * step)
            if axis == 0:
                tab = _log_tensor(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0,
                                  moving[:cnt], fixed)
            else:
                tab = _log_tensor(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0,
                                  fixed, moving[:cnt])
            for c in range(cnt):
                x = centre + side * (k + c) * step
                lf = tab[c, 0] if axis == 0 else tab[0, c]
                hv = lf - 0.5 * (x * x + other * other) - _LOG2PI
                vals[cap + side * (k + c)] = hv
                if k + c == 0:
                    h0 = hv
                if k + c >= m and not (h0 - hv < _PROFILE_DROP):
                    done = True
                    k = k + c
                    break
            if not done:
                k += cnt
        k = min(k, cap)
        if side < 0:
            lo_k = k
        else:
            hi_k = k
    npts = lo_k + hi_k + 1
    t = np.empty(npts)
    lam = np.empty(npts)
    hmax = -np.inf
    for i in range(npts):
        if vals[cap - lo_k + i] > hmax:
            hmax = vals[cap - lo_k + i]
    nodes = np.empty(m)
    logw = np.empty(m)
    if not math.isfinite(hmax):
        return nodes, logw, hmax, False
    # positions centered on the mode, in units of 1 / _PROFILE_STEP steps
    scale = 0.0
    for i in range(npts):
        t[i] = (i - lo_k) * _PROFILE_STEP
        lam[i] = math.exp(vals[cap - lo_k + i] - hmax)
        scale += lam[i]
    p = np.empty(npts)
    p_prev = np.zeros(npts)
    q = np.empty(npts)
    for i in range(npts):
        p[i] = 1.0 / math.sqrt(scale)
    alpha = np.zeros(m)
    beta = np.zeros(m)
    b_prev = 0.0
    for k in range(m):
        a = 0.0
        for i in range(npts):
            a += lam[i] * t[i] * p[i] * p[i]
        alpha[k] = a
        nrm = 0.0
        for i in range(npts):
            q[i] = (t[i] - a) * p[i] - b_prev * p_prev[i]
            nrm += lam[i] * q[i] * q[i]
        bk = math.sqrt(nrm)
        beta[k] = bk
        if k < m - 1 and not bk > 0.0:
            return nodes, logw, hmax, False
        for i in range(npts):
            p_prev[i] = p[i]
            p[i] = q[i] / bk if bk > 0.0 else 0.0
        b_prev = bk
    jac = np.zeros((m, m))
    for k in range(m):
        jac[k, k] = alpha[k]
        if k + 1 < m:
            jac[k, k + 1] = beta[k]
            jac[k + 1, k] = beta[k]
    ev, vec = np.linalg.eigh(jac)
    unit = step / _PROFILE_STEP
    for k in range(m):
        nodes[k] = ev[k] * unit
        wk = vec[0, k] * vec[0, k] * scale * step
        logw[k] = math.log(wk) if wk > 0.0 else -np.inf
    return nodes, logw, hmax, True


@njit
def _profile_loglik(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, sig_b, sig_u,
                    m, s_hat, v_hat, a_s, a_v):
    """Tensor rule built from the two axis profiles through the mode.

    With ``P_s(s) = exp h(s, v_hat)`` and ``P_v(v) = exp(h(s_hat, v) - h(s_hat, v_hat))``
    the integrand is ``P_s P_v C`` where
    ``log C = h(s, v) - h(s, v_hat) - h(s_hat, v) + h(s_hat, v_hat)``
    vanishes when ``h`` is additive, so a Gauss rule for each profile leaves
    only the mild interaction ``C`` to the tensor grid.
    """
    step_s = _PROFILE_STEP * a_s
    step_v = _PROFILE_STEP * min(a_v, 1.0 / sig_u)
    sn, lws, hs, ok_s = _profile_rule(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0,
                                      sig_b, sig_u, s_hat, v_hat, step_s, 0, m)
    vn, lwv, hv, ok_v = _profile_rule(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0,
                                      sig_b, sig_u, s_hat, v_hat, step_v, 1, m)
    if not (ok_s and ok_v):
        return np.nan
    bn = np.empty(m + 1)
    un = np.empty(m + 1)
    for j in range(m):
        bn[j] = sig_b * (s_hat + sn[j])
        un[j] = sig_u * (v_hat + vn[j])
    bn[m] = sig_b * s_hat
    un[m] = sig_u * v_hat
    tab = _log_tensor(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, bn, un)
    centre = tab[m, m]
    if not math.isfinite(centre):
        return np.nan
    tot = np.empty((m, m))
    for j in range(m):
        for k in range(m):
            c = tab[j, k] - tab[j, m] - tab[m, k] + centre
            tot[j, k] = lws[j] + lwv[k] + c if math.isfinite(c) else -np.inf
    h_centre = centre - 0.5 * (s_hat * s_hat + v_hat * v_hat) - _LOG2PI
    return hs + hv - h_centre + _logsumexp2(tot)


@njit(parallel=True)
def subject_logliks(mu, eta, lo, n, mask, lfact, starts, g1, g2, g3, g0, sig_b, sig_u,
                    z, logw, method):
    """Per-subject marginal log-likelihood.

    ``method``: 0 plain Gauss-Hermite on the prior scale, 1 Gauss-Hermite
    centered and scaled at the mode, 2 profile Gauss rule (see
    :func:`_profile_loglik`). ``z``/``logw`` are the standard normal
    Gauss-Hermite nodes and log weights; the profile rule uses only their count.
    """
    ns = starts.size - 1
    out = np.empty(ns)
    for i in prange(ns):
        i0 = starts[i]
        i1 = starts[i + 1]
        if method == 0:
            out[i] = _gh_loglik(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0,
                                sig_b, sig_u, z, logw, 0.0, 0.0, 1.0, 1.0)
            continue
        s_hat, v_hat, css, csv, cvv, ok = _subject_mode(i0, i1, mu, eta, lo, n, mask, lfact,
                                                        g1, g2, g3, g0, sig_b, sig_u)
        a_s = math.sqrt(css) if ok else 1.0
        a_v = math.sqrt(cvv) if ok else 1.0
        val = np.nan
        if method == 2 and ok:
            val = _profile_loglik(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0,
                                  sig_b, sig_u, z.size, s_hat, v_hat, a_s, a_v)
        if not math.isfinite(val):
            val = _gh_loglik(i0, i1, mu, eta, lo, n, mask, lfact, g1, g2, g3, g0,
                             sig_b, sig_u, z, logw, s_hat, v_hat, a_s, a_v)
        out[i] = val
    return out


# ---------------------------------------------------------------------------
# rejection imputation

@njit
def _coarsen(w, g):
    base = 1
    if g == 2:
        base = 5
    elif g == 3:
        base = 10
    elif g == 4:
        base = 20
    return (w + base // 2) // base * base


@njit
def impute(base, beta1, lnx, eta, y, starts, g1, g2, g3, g0, sig_b, sig_u, seeds,
           max_rejects, b_given, u_given, x_cdf):
    """Per-day acceptance-rejection draws of ``(w, g)`` consistent with ``y``.

    ``b_given``/``u_given`` entries that are NaN are drawn from their normal
    priors once per subject. When ``x_cdf`` is nonempty the true count is
    unobserved: each attempt draws ``x`` from that table on ``1..len``.
    """
    nd = y.size
    ns = starts.size - 1
    w_out = np.full(nd, -1, dtype=np.int64)
    g_out = np.zeros(nd, dtype=np.int64)
    x_out = np.zeros(nd, dtype=np.int64)
    rej = np.zeros(nd, dtype=np.int64)
    b_out = np.empty(ns)
    u_out = np.empty(ns)
    status = np.zeros(ns, dtype=np.int64)
    draw_x = x_cdf.size > 0
    for i in range(ns):
        np.random.seed(seeds[i])
        zb = np.random.standard_normal()
        zu = np.random.standard_normal()
        b = sig_b * zb if math.isnan(b_given[i]) else b_given[i]
        u = sig_u * zu if math.isnan(u_given[i]) else u_given[i]
        b_out[i] = b
        u_out[i] = u
        for t in range(starts[i], starts[i + 1]):
            tries = 0
            while True:
                if draw_x:
                    r = np.random.random()
                    xi = np.searchsorted(x_cdf, r, side="right") + 1
                    if xi > x_cdf.size:
                        xi = x_cdf.size
                    lam = math.exp(base[t] + beta1 * math.log(xi) + b)
                else:
                    xi = 0
                    lam = math.exp(base[t] + beta1 * lnx[t] + b)
                w = np.random.poisson(lam)
                lin = g0 * w + eta[t] + u
                r = np.random.random()
                g = 1
                if r < _expit(g1 + lin):
                    g += 1
                if r < _expit(g2 + lin):
                    g += 1
                if r < _expit(g3 + lin):
                    g += 1
                if _coarsen(w, g) == y[t]:
                    w_out[t] = w
                    g_out[t] = g
                    x_out[t] = xi
                    rej[t] = tries
                    break
                tries += 1
                if tries > max_rejects:
                    rej[t] = tries
                    status[i] = 1
                    break
            if status[i]:
                break
    return w_out, g_out, x_out, b_out, u_out, rej, status
