"""Vectorized numpy versions of the kernels in :mod:`heaprecall.kernels.jit`.

Same signatures and return values; randomness in :func:`impute` comes from
``numpy.random.Generator`` streams, so draws differ from the numba path.
"""

import numpy as np
from scipy.special import expit, logsumexp

W = 20
_K = np.arange(W)
_LOG2PI = np.log(2 * np.pi)


def _band(a_hi, a_lo):
    return expit(a_hi) * expit(-a_lo) * -np.expm1(a_lo - a_hi)


def _heap(a1, a2, a3, mask, derivs):
    m = mask.astype(bool)
    h = (np.where(m[..., 0], expit(-a1), 0.0) + np.where(m[..., 1], _band(a1, a2), 0.0)
         + np.where(m[..., 2], _band(a2, a3), 0.0) + np.where(m[..., 3], expit(a3), 0.0))
    if not derivs:
        return h, None, None
    q = [expit(a) for a in (a1, a2, a3)]
    d = [qi * (1 - qi) for qi in q]
    e = [di * (1 - 2 * qi) for di, qi in zip(d, q)]
    m0, m1, m2, m3 = (m[..., i] for i in range(4))
    h1 = -d[0] * m0 + (d[0] - d[1]) * m1 + (d[1] - d[2]) * m2 + d[2] * m3
    h2 = -e[0] * m0 + (e[0] - e[1]) * m1 + (e[1] - e[2]) * m2 + e[2] * m3
    return h, h1, h2


def _valid(n):
    return _K[None, :] < n[:, None]


def _day_derivs(mu, eta, lo, n, mask, lfact, g1, g2, g3, g0, b, u):
    w = lo[:, None] + _K[None, :]
    valid = _valid(n)
    loglam = mu + b
    lam = np.exp(loglam)
    lp = np.where(valid, w * loglam[:, None] - lam[:, None] - lfact, -np.inf)
    lpmax = lp.max(axis=1)
    t = np.exp(lp - lpmax[:, None])
    lin = g0 * w + eta[:, None] + u[:, None]
    h, h1, h2 = _heap(g1 + lin, g2 + lin, g3 + lin, mask, True)
    d = w - lam[:, None]
    s0 = (t * h).sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lb = (t * d * h).sum(1) / s0
        lu = (t * h1).sum(1) / s0
        lbb = (t * (d * d - lam[:, None]) * h).sum(1) / s0 - lb * lb
        lbu = (t * d * h1).sum(1) / s0 - lb * lu
        luu = (t * h2).sum(1) / s0 - lu * lu
        lf = np.where(s0 > 0, lpmax + np.log(s0), -np.inf)
    return lf, lb, lu, lbb, lbu, luu


def _subject_h(data, starts, g, sig_b, sig_u, s, v):
    mu, eta, lo, n, mask, lfact = data
    sid = np.repeat(np.arange(starts.size - 1), np.diff(starts))
    lf, lb, lu, lbb, lbu, luu = _day_derivs(mu, eta, lo, n, mask, lfact, *g,
                                            sig_b * s[sid], sig_u * v[sid])
    red = lambda a: np.add.reduceat(a, starts[:-1])  # noqa: E731
    with np.errstate(invalid="ignore"):
        h = red(lf) - 0.5 * (s * s + v * v)
        gs = sig_b * red(lb) - s
        gv = sig_u * red(lu) - v
        hss = sig_b ** 2 * red(lbb) - 1
        hsv = sig_b * sig_u * red(lbu)
        hvv = sig_u ** 2 * red(luu) - 1
    bad = ~np.isfinite(h)
    h[bad] = -np.inf
    return h, gs, gv, hss, hsv, hvv


def subject_modes(mu, eta, lo, n, mask, lfact, starts, g1, g2, g3, g0, sig_b, sig_u):
    data = (mu, eta, lo, n, mask, lfact)
    g = (g1, g2, g3, g0)
    ns = starts.size - 1
    s = np.zeros(ns)
    v = np.zeros(ns)
    cur = list(_subject_h(data, starts, g, sig_b, sig_u, s, v))
    active = np.isfinite(cur[0])
    for _ in range(100):
        h, gs, gv, hss, hsv, hvv = cur
        active &= (np.abs(gs) >= 1e-10) | (np.abs(gv) >= 1e-10)
        if not active.any():
            break
        a11, a12, a22 = -hss, -hsv, -hvv
        ridge = np.zeros(ns)
        for _r in range(60):
            det = (a11 + ridge) * (a22 + ridge) - a12 ** 2
            need = ~((a11 + ridge > 0) & (det > 0))
            if not need.any():
                break
            ridge = np.where(need, np.where(ridge == 0, 1.0, ridge * 4), ridge)
        ds = ((a22 + ridge) * gs - a12 * gv) / det
        dv = ((a11 + ridge) * gv - a12 * gs) / det
        big = np.maximum(np.abs(ds), np.abs(dv))
        scale = np.where(big > 2, 2 / np.where(big > 0, big, 1), 1.0)
        ds, dv = ds * scale, dv * scale
        step = np.ones(ns)
        pending = active.copy()
        new = [a.copy() for a in cur]
        ns_, nv_ = s.copy(), v.copy()
        for _k in range(50):
            if not pending.any():
                break
            ts = np.where(pending, s + step * ds, s)
            tv = np.where(pending, v + step * dv, v)
            trial = _subject_h(data, starts, g, sig_b, sig_u, ts, tv)
            ok = pending & np.isfinite(trial[0]) & (trial[0] >= h - 1e-12 * (1 + np.abs(h)))
            for a, b in zip(new, trial):
                a[ok] = b[ok]
            ns_[ok], nv_[ok] = ts[ok], tv[ok]
            pending &= ~ok
            step = np.where(pending, step * 0.5, step)
        stuck = active & pending
        moved = active & ~pending
        tiny = moved & (step * big * scale < 1e-13) & (new[0] - h <= 1e-14 * (1 + np.abs(h)))
        s, v = np.where(moved, ns_, s), np.where(moved, nv_, v)
        cur = [np.where(moved, a, b) for a, b in zip(new, cur)]
        active &= ~stuck & ~tiny
    h, gs, gv, hss, hsv, hvv = cur
    a11, a12, a22 = -hss, -hsv, -hvv
    det = a11 * a22 - a12 ** 2
    ok = np.isfinite(h) & (a11 > 0) & (det > 0)
    safe = np.where(ok, det, 1.0)
    out = np.empty((ns, 6))
    out[:, 0], out[:, 1] = s, v
    out[:, 2] = np.where(ok, a22 / safe, 1.0)
    out[:, 3] = np.where(ok, -a12 / safe, 0.0)
    out[:, 4] = np.where(ok, a11 / safe, 1.0)
    out[:, 5] = ok
    return out


def _log_tensor(mu, eta, lo, n, mask, lfact, starts, g1, g2, g3, g0, bn, un):
    """``sum_t log f(y_t | b_j, u_k)`` per subject; ``bn`` is (ns, m1), ``un`` (ns, m2)."""
    sid = np.repeat(np.arange(starts.size - 1), np.diff(starts))
    w = lo[:, None] + _K[None, :]
    valid = _valid(n)
    loglam = mu[:, None] + bn[sid]                                   # (days, m1)
    lp = w[:, None, :] * loglam[:, :, None] - np.exp(loglam)[:, :, None] - lfact[:, None, :]
    lp = np.where(valid[:, None, :], lp, -np.inf)
    lpmax = lp.max(axis=2)
    tt = np.exp(lp - lpmax[:, :, None])                              # (days, m1, W)
    lin = g0 * w[:, None, :] + eta[:, None, None] + un[sid][:, :, None]
    hh, _, _ = _heap(g1 + lin, g2 + lin, g3 + lin, mask[:, None, :, :], False)
    f = np.matmul(tt, np.swapaxes(hh, 1, 2))                        # (days, m1, m2)
    with np.errstate(divide="ignore"):
        logf = np.log(f) + lpmax[:, :, None]
    return np.add.reduceat(logf, starts[:-1], axis=0)


def _gh(data, starts, g, sig_b, sig_u, z, logw, s_hat, v_hat, a_s, a_v):
    sn = s_hat[:, None] + a_s[:, None] * z[None, :]
    vn = v_hat[:, None] + a_v[:, None] * z[None, :]
    rowlog = logw[None, :] + np.log(a_s)[:, None] + 0.5 * (z[None, :] ** 2 - sn ** 2)
    collog = logw[None, :] + np.log(a_v)[:, None] + 0.5 * (z[None, :] ** 2 - vn ** 2)
    tot = _log_tensor(*data, starts, *g, sig_b * sn, sig_u * vn)
    tot = tot + rowlog[:, :, None] + collog[:, None, :]
    out = logsumexp(tot.reshape(tot.shape[0], -1), axis=1)
    out[~np.isfinite(out)] = np.nan
    return out


# same constants as the compiled kernel
PROFILE_STEP = 0.5
PROFILE_DROP = 30.0
PROFILE_MAX_HALF = 4000


def _profile_axis(data, starts, g, sig_b, sig_u, s_hat, v_hat, step, axis, m):
    """Gauss rule per subject for ``exp h`` along one axis; see the compiled kernel."""
    ns = s_hat.size
    centre, other = (s_hat, v_hat) if axis == 0 else (v_hat, s_hat)
    half = max(2 * m, 16)
    while True:
        ks = np.arange(-half, half + 1)
        pts = centre[:, None] + step[:, None] * ks[None, :]
        if axis == 0:
            tab = _log_tensor(*data, starts, *g, sig_b * pts, sig_u * v_hat[:, None])[:, :, 0]
        else:
            tab = _log_tensor(*data, starts, *g, sig_b * s_hat[:, None], sig_u * pts)[:, 0, :]
        h = tab - 0.5 * (pts ** 2 + other[:, None] ** 2) - _LOG2PI
        h0 = h[:, half]
        with np.errstate(invalid="ignore"):
            stop = ~(h0[:, None] - h < PROFILE_DROP) & (np.abs(ks) >= m)[None, :]
        left = stop[:, :half][:, ::-1].any(1)
        right = stop[:, half + 1:].any(1)
        if (left & right).all() or half >= PROFILE_MAX_HALF:
            break
        half = min(2 * half, PROFILE_MAX_HALF)
    nodes = np.empty((ns, m))
    logw = np.empty((ns, m))
    hmax = np.empty(ns)
    ok = np.ones(ns, dtype=bool)
    for i in range(ns):
        sl = stop[i, :half][::-1]
        sr = stop[i, half + 1:]
        lo_k = int(sl.argmax()) + 1 if sl.any() else half
        hi_k = int(sr.argmax()) + 1 if sr.any() else half
        vals = h[i, half - lo_k: half + hi_k + 1]
        hmax[i] = vals.max()
        if not np.isfinite(hmax[i]):
            ok[i] = False
            continue
        t = (np.arange(vals.size) - lo_k) * PROFILE_STEP
        lam = np.exp(vals - hmax[i])
        scale = lam.sum()
        p = np.full(t.size, 1.0 / np.sqrt(scale))
        p_prev = np.zeros(t.size)
        alpha = np.zeros(m)
        beta = np.zeros(m)
        b_prev = 0.0
        for k in range(m):
            alpha[k] = np.sum(lam * t * p * p)
            q = (t - alpha[k]) * p - b_prev * p_prev
            beta[k] = np.sqrt(np.sum(lam * q * q))
            if k < m - 1 and not beta[k] > 0:
                ok[i] = False
                break
            p_prev, p = p, (q / beta[k] if beta[k] > 0 else np.zeros_like(q))
            b_prev = beta[k]
        if not ok[i]:
            continue
        ev, vec = np.linalg.eigh(np.diag(alpha) + np.diag(beta[:-1], 1) + np.diag(beta[:-1], -1))
        nodes[i] = ev * (step[i] / PROFILE_STEP)
        with np.errstate(divide="ignore"):
            logw[i] = np.log(vec[0] ** 2 * scale * step[i])
    return nodes, logw, hmax, ok


def _profile(data, starts, g, sig_b, sig_u, m, s_hat, v_hat, a_s, a_v):
    step_s = PROFILE_STEP * a_s
    step_v = PROFILE_STEP * np.minimum(a_v, 1.0 / sig_u)
    sn, lws, hs, ok_s = _profile_axis(data, starts, g, sig_b, sig_u, s_hat, v_hat, step_s, 0, m)
    vn, lwv, hv, ok_v = _profile_axis(data, starts, g, sig_b, sig_u, s_hat, v_hat, step_v, 1, m)
    bn = sig_b * np.concatenate([s_hat[:, None] + sn, s_hat[:, None]], axis=1)
    un = sig_u * np.concatenate([v_hat[:, None] + vn, v_hat[:, None]], axis=1)
    tab = _log_tensor(*data, starts, *g, bn, un)
    centre = tab[:, m, m]
    with np.errstate(invalid="ignore"):
        c = tab[:, :m, :m] - tab[:, :m, m:] - tab[:, m:, :m] + centre[:, None, None]
    c = np.where(np.isfinite(c), c, -np.inf)
    tot = lws[:, :, None] + lwv[:, None, :] + c
    h_centre = centre - 0.5 * (s_hat ** 2 + v_hat ** 2) - _LOG2PI
    out = hs + hv - h_centre + logsumexp(tot.reshape(tot.shape[0], -1), axis=1)
    out[~(ok_s & ok_v & np.isfinite(centre) & np.isfinite(out))] = np.nan
    return out


def subject_logliks(mu, eta, lo, n, mask, lfact, starts, g1, g2, g3, g0, sig_b, sig_u,
                    z, logw, method):
    ns = starts.size - 1
    data = (mu, eta, lo, n, mask, lfact)
    g = (g1, g2, g3, g0)
    if method == 0:
        zero, one = np.zeros(ns), np.ones(ns)
        return _gh(data, starts, g, sig_b, sig_u, z, logw, zero, zero, one, one)
    modes = subject_modes(mu, eta, lo, n, mask, lfact, starts, g1, g2, g3, g0, sig_b, sig_u)
    ok = modes[:, 5] > 0
    s_hat, v_hat = modes[:, 0], modes[:, 1]
    a_s = np.where(ok, np.sqrt(modes[:, 2]), 1.0)
    a_v = np.where(ok, np.sqrt(modes[:, 4]), 1.0)
    out = np.full(ns, np.nan)
    if method == 2:
        out = _profile(data, starts, g, sig_b, sig_u, z.size, s_hat, v_hat, a_s, a_v)
        out[~ok] = np.nan
    redo = ~np.isfinite(out)
    if redo.any():
        out[redo] = _gh(data, starts, g, sig_b, sig_u, z, logw, s_hat, v_hat, a_s, a_v)[redo]
    return out


def impute(base, beta1, lnx, eta, y, starts, g1, g2, g3, g0, sig_b, sig_u, seeds,
           max_rejects, b_given, u_given, x_cdf):
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
        rng = np.random.default_rng(int(seeds[i]))
        zb, zu = rng.standard_normal(2)
        b = sig_b * zb if np.isnan(b_given[i]) else b_given[i]
        u = sig_u * zu if np.isnan(u_given[i]) else u_given[i]
        b_out[i], u_out[i] = b, u
        days = np.arange(starts[i], starts[i + 1])
        tries = np.zeros(days.size, dtype=np.int64)
        batch = 64
        while days.size:
            k = days.size
            if draw_x:
                xs = np.minimum(np.searchsorted(x_cdf, rng.random((k, batch)), side="right") + 1,
                                x_cdf.size)
                lam = np.exp(base[days][:, None] + beta1 * np.log(xs) + b)
            else:
                xs = np.zeros((k, batch), dtype=np.int64)
                lam = np.broadcast_to(np.exp(base[days] + beta1 * lnx[days] + b)[:, None],
                                      (k, batch))
            ws = rng.poisson(lam)
            lin = g0 * ws + eta[days][:, None] + u
            r = rng.random((k, batch))
            gs = 1 + (r < expit(g1 + lin)) + (r < expit(g2 + lin)) + (r < expit(g3 + lin))
            bases = np.choose(gs - 1, [1, 5, 10, 20])
            hit = (ws + bases // 2) // bases * bases == y[days][:, None]
            any_hit = hit.any(1)
            first = np.where(any_hit, hit.argmax(1), batch)
            got = any_hit & (tries + first <= max_rejects)
            over = ~got & (tries + first > max_rejects)
            rows = np.nonzero(got)[0]
            w_out[days[rows]] = ws[rows, first[rows]]
            g_out[days[rows]] = gs[rows, first[rows]]
            x_out[days[rows]] = xs[rows, first[rows]]
            rej[days[rows]] = tries[rows] + first[rows]
            if over.any():
                bad = np.nonzero(over)[0]
                rej[days[bad]] = max_rejects + 1
                status[i] = 1
                w_out[days] = np.where(got, w_out[days], -1)
                break
            keep = ~got
            tries = tries[keep] + batch
            days = days[keep]
            batch = min(batch * 4, 1 << 16)
    return w_out, g_out, x_out, b_out, u_out, rej, status
