"""Compiled inner loops.

Every adaptive run is sequential (the next sampler depends on the current
estimate), so the per-iteration work lives here. Families are dispatched by
an integer code; the portfolio family carries its model in a fixed tuple of
arrays (unused, empty arrays for the toy families).
"""

import math

import numpy as np
from numba import njit

NORMAL = 0
EXPONENTIAL = 1
PARETO = 2
TWISTED_QUADRATIC = 3

MODE_ADAPTIVE = 0
MODE_FIXED = 1
MODE_NONE = 2

_BLOCK = 256
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# --------------------------------------------------------------------------
# incremental weighted order statistics
#
# Values are kept in sorted blocks of at most _BLOCK entries; ``order`` lists
# block ids in value order and ``bsum`` caches per-block weight sums. Insert
# is O(log B + _BLOCK), the cumulative-weight query O(B + _BLOCK).


@njit(cache=True)
def sb_new(nmax):
    nbmax = nmax // (_BLOCK // 2) + 2
    vals = np.empty((nbmax, _BLOCK))
    wts = np.empty((nbmax, _BLOCK))
    cnt = np.zeros(nbmax, np.int64)
    bsum = np.zeros(nbmax)
    order = np.zeros(nbmax, np.int64)
    meta = np.zeros(3, np.int64)  # n_blocks, n_allocated, n_items
    meta[0] = 1
    meta[1] = 1
    return vals, wts, cnt, bsum, order, meta


@njit(cache=True)
def sb_insert(vals, wts, cnt, bsum, order, meta, v, w):
    nbk = meta[0]
    lo = 0
    hi = nbk - 1
    while lo < hi:
        mid = (lo + hi) // 2
        b = order[mid]
        if cnt[b] > 0 and vals[b, cnt[b] - 1] >= v:
            hi = mid
        else:
            lo = mid + 1
    j = lo
    b = order[j]
    k = cnt[b]
    while k > 0 and vals[b, k - 1] > v:
        vals[b, k] = vals[b, k - 1]
        wts[b, k] = wts[b, k - 1]
        k -= 1
    vals[b, k] = v
    wts[b, k] = w
    cnt[b] += 1
    bsum[b] += w
    meta[2] += 1
    if cnt[b] == _BLOCK:
        nb2 = meta[1]
        meta[1] += 1
        half = _BLOCK // 2
        s_hi = 0.0
        for t in range(half):
            vals[nb2, t] = vals[b, half + t]
            wts[nb2, t] = wts[b, half + t]
            s_hi += wts[nb2, t]
        s_lo = 0.0
        for t in range(half):
            s_lo += wts[b, t]
        cnt[nb2] = half
        cnt[b] = half
        bsum[nb2] = s_hi
        bsum[b] = s_lo
        for t in range(nbk, j + 1, -1):
            order[t] = order[t - 1]
        order[j + 1] = nb2
        meta[0] = nbk + 1


@njit(cache=True)
def sb_query(vals, wts, cnt, bsum, order, meta, target):
    """Smallest stored value whose cumulative weight (ascending) reaches ``target``.

    Returns ``(value, True)``, or ``(largest value, False)`` if the total
    weight stays below ``target``.
    """
    acc = 0.0
    nbk = meta[0]
    for j in range(nbk):
        b = order[j]
        if acc + bsum[b] >= target:
            for t in range(cnt[b]):
                acc += wts[b, t]
                if acc >= target:
                    return vals[b, t], True
            # block sum rounding disagreed with the running sum; keep scanning
        else:
            acc += bsum[b]
    last = order[nbk - 1]
    if cnt[last] == 0:
        return np.nan, False
    return vals[last, cnt[last] - 1], False


# --------------------------------------------------------------------------
# normal helpers


@njit(cache=True)
def norm_cdf(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@njit(cache=True)
def norm_pdf(x):
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


# --------------------------------------------------------------------------
# toy families


@njit(cache=True)
def exponential_select(lam, q):
    if q <= 0.0:
        return lam
    s = math.sqrt(1.0 + lam * lam * q * q)
    # algebraically (lam*q + 1 - s)/q, rearranged to avoid cancellation
    return (lam + lam * lam * q / (s + 1.0)) / (lam * q + s)


@njit(cache=True)
def pareto_select(lam, q):
    if q <= 1.0:
        return lam
    return exponential_select(lam, math.log(q))


@njit(cache=True)
def toy_transform(code, lam, u, alpha):
    if code == NORMAL:
        return u + alpha
    elif code == EXPONENTIAL:
        return u / alpha
    else:
        return u ** (-1.0 / alpha)


@njit(cache=True)
def toy_loglr(code, lam, x, alpha):
    if code == NORMAL:
        return -alpha * x + 0.5 * alpha * alpha
    elif code == EXPONENTIAL:
        return math.log(lam / alpha) + (alpha - lam) * x
    else:
        return math.log(lam / alpha) + (alpha - lam) * math.log(x)


@njit(cache=True)
def toy_select(code, lam, q):
    if code == NORMAL:
        return q
    elif code == EXPONENTIAL:
        return exponential_select(lam, q)
    else:
        return pareto_select(lam, q)


# --------------------------------------------------------------------------
# Black-Scholes


@njit(cache=True)
def bs_call_price(S, K, r, sig, T):
    sq = sig * math.sqrt(T)
    d1 = (math.log(S / K) + (r + 0.5 * sig * sig) * T) / sq
    d2 = d1 - sq
    return S * norm_cdf(d1) - K * math.exp(-r * T) * norm_cdf(d2)


@njit(cache=True)
def bs_price(S, K, r, sig, T, is_call):
    c = bs_call_price(S, K, r, sig, T)
    if is_call:
        return c
    return c - S + K * math.exp(-r * T)


@njit(cache=True)
def bs_greeks(S, K, r, sig, T, is_call):
    """Price, delta, gamma and calendar-time theta (per year)."""
    sqT = math.sqrt(T)
    sq = sig * sqT
    d1 = (math.log(S / K) + (r + 0.5 * sig * sig) * T) / sq
    d2 = d1 - sq
    disc = K * math.exp(-r * T)
    pdf1 = norm_pdf(d1)
    price = S * norm_cdf(d1) - disc * norm_cdf(d2)
    delta = norm_cdf(d1)
    gamma = pdf1 / (S * sq)
    theta = -S * pdf1 * sig / (2.0 * sqT) - r * disc * norm_cdf(d2)
    if not is_call:
        price = price - S + disc
        delta = delta - 1.0
        theta = theta + r * disc
    return price, delta, gamma, theta


@njit(cache=True)
def portfolio_value(S, vol, r, shift, aidx, kind, K, T, qty):
    v = 0.0
    for k in range(aidx.shape[0]):
        a = aidx[k]
        v += qty[k] * bs_price(S[a], K[k], r, vol[a], T[k] - shift, kind[k] == 0)
    return v


@njit(cache=True)
def portfolio_losses(dS, S0, vol, r, t, V0, aidx, kind, K, T, qty):
    """Exact repriced losses ``V0 - V(S0 + dS, t)`` for each row of ``dS``."""
    n, m = dS.shape
    out = np.empty(n)
    S = np.empty(m)
    for i in range(n):
        for j in range(m):
            s = S0[j] + dS[i, j]
            S[j] = s if s > 1e-12 * S0[j] else 1e-12 * S0[j]
        out[i] = V0 - portfolio_value(S, vol, r, t, aidx, kind, K, T, qty)
    return out


# --------------------------------------------------------------------------
# quadratic-form exponential twisting


@njit(cache=True)
def psi(b, lam, alpha):
    s = 0.0
    for i in range(b.shape[0]):
        u = 1.0 - 2.0 * alpha * lam[i]
        s += alpha * alpha * b[i] * b[i] / (2.0 * u) - 0.5 * math.log(u)
    return s


@njit(cache=True)
def psi_prime(b, lam, alpha):
    s = 0.0
    for i in range(b.shape[0]):
        u = 1.0 - 2.0 * alpha * lam[i]
        s += alpha * b[i] * b[i] * (1.0 - alpha * lam[i]) / (u * u) + lam[i] / u
    return s


@njit(cache=True)
def psi_second(b, lam, alpha):
    s = 0.0
    for i in range(b.shape[0]):
        u = 1.0 - 2.0 * alpha * lam[i]
        s += b[i] * b[i] / (u * u * u) + 2.0 * lam[i] * lam[i] / (u * u)
    return s


@njit(cache=True)
def twist_domain(lam, inset):
    lo = -np.inf
    hi = np.inf
    for i in range(lam.shape[0]):
        if lam[i] > 0.0:
            hi = min(hi, 0.5 / lam[i])
        elif lam[i] < 0.0:
            lo = max(lo, 0.5 / lam[i])
    if np.isfinite(hi):
        hi = hi - inset * abs(hi)
    if np.isfinite(lo):
        lo = lo + inset * abs(lo)
    return lo, hi


@njit(cache=True)
def twist_root(b, lam, target, lo, hi, rtol):
    """Solve ``psi'(alpha) = target`` on ``[lo, hi]``; returns ``(alpha, saturated)``."""
    tol = rtol * max(1.0, abs(target))
    # finite bracket, expanding towards an infinite side if needed
    a = lo
    if not np.isfinite(a):
        a = -1.0
        k = 0
        while psi_prime(b, lam, a) > target and k < 200:
            a *= 2.0
            k += 1
    c = hi
    if not np.isfinite(c):
        c = 1.0
        k = 0
        while psi_prime(b, lam, c) < target and k < 200:
            c *= 2.0
            k += 1
    fa = psi_prime(b, lam, a) - target
    fc = psi_prime(b, lam, c) - target
    if fa >= 0.0:
        return a, fa > tol
    if fc <= 0.0:
        return c, -fc > tol
    x = 0.0 if (a < 0.0 < c) else 0.5 * (a + c)
    for _ in range(400):
        f = psi_prime(b, lam, x) - target
        if abs(f) <= tol:
            return x, False
        if f < 0.0:
            a = x
        else:
            c = x
        d = psi_second(b, lam, x)
        xn = x - f / d
        if not (a < xn < c):
            xn = 0.5 * (a + c)
        if xn == x or c - a <= 4e-16 * max(1.0, abs(x)):
            return xn, False
        x = xn
    return x, False


@njit(cache=True)
def twisted_step(xi, alpha, b, lam, C, S0, vol, aidx, kind, K, T, qty, scal, out_dS):
    """One twisted draw from base normals ``xi``: returns ``(loss, log_lr, Q)``."""
    r = scal[0]
    t = scal[1]
    V0 = scal[2]
    m = b.shape[0]
    Q = 0.0
    z = np.empty(m)
    for i in range(m):
        Bi = 1.0 / (1.0 - 2.0 * alpha * lam[i])
        zi = alpha * Bi * b[i] + math.sqrt(Bi) * xi[i]
        z[i] = zi
        Q += b[i] * zi + lam[i] * zi * zi
    S = np.empty(m)
    for j in range(m):
        acc = 0.0
        for i in range(m):
            acc += C[j, i] * z[i]
        out_dS[j] = acc
        s = S0[j] + acc
        S[j] = s if s > 1e-12 * S0[j] else 1e-12 * S0[j]
    loss = V0 - portfolio_value(S, vol, r, t, aidx, kind, K, T, qty)
    lw = -alpha * Q + psi(b, lam, alpha)
    return loss, lw, Q


# --------------------------------------------------------------------------
# one draw / selector for any family code


@njit(cache=True)
def family_draw(code, lam_toy, pf, base, i, alpha, dS):
    if code == TWISTED_QUADRATIC:
        b, lam, C, S0, vol, aidx, kind, K, T, qty, scal = pf
        loss, lw, _ = twisted_step(base[i], alpha, b, lam, C, S0, vol, aidx, kind, K, T, qty, scal, dS)
        return loss, lw
    x = toy_transform(code, lam_toy, base[i, 0], alpha)
    return x, toy_loglr(code, lam_toy, x, alpha)


@njit(cache=True)
def family_select(code, lam_toy, pf, q):
    if code == TWISTED_QUADRATIC:
        b = pf[0]
        lam = pf[1]
        scal = pf[10]
        a, _ = twist_root(b, lam, q - scal[3], scal[4], scal[5], 1e-10)
        return a
    return toy_select(code, lam_toy, q)


@njit(cache=True)
def _clip(v, lo, hi):
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


# --------------------------------------------------------------------------
# quantile drivers
#
# Internal frame: g = sign * h, level = p (lower tail) or 1 - p (upper tail),
# so the upper-tail estimator is the lower-tail one applied to -h.


@njit(cache=True)
def saa_quantile(code, lam_toy, pf, base, sign, level, trunc_lo, trunc_hi, mode, alpha_const, alpha1):
    n = base.shape[0]
    iterates = np.empty(n)
    alphas = np.empty(n)
    hvals = np.empty(n)
    logws = np.empty(n)
    flags = np.zeros(n, np.uint8)
    underflow = 0
    vals, wts, cnt, bsum, order, meta = sb_new(n)
    dS = np.empty(max(1, pf[0].shape[0]))
    alpha = alpha1
    for i in range(n):
        h, lw = family_draw(code, lam_toy, pf, base, i, alpha, dS)
        if not (np.isfinite(h) and np.isfinite(lw)):
            return iterates, alphas, hvals, logws, flags, i, underflow
        w = math.exp(lw)
        if w == 0.0:
            underflow += 1
        hvals[i] = h
        logws[i] = lw
        alphas[i] = alpha
        sb_insert(vals, wts, cnt, bsum, order, meta, sign * h, w)
        v, ok = sb_query(vals, wts, cnt, bsum, order, meta, (i + 1) * level)
        if not ok:
            flags[i] = 1
        q = sign * v
        iterates[i] = q
        if i + 1 < n:
            if mode == MODE_ADAPTIVE:
                a = family_select(code, lam_toy, pf, q)
                alpha = _clip(a, trunc_lo[i + 1], trunc_hi[i + 1])
            elif mode == MODE_FIXED:
                alpha = _clip(alpha_const, trunc_lo[i + 1], trunc_hi[i + 1])
            else:
                alpha = alpha_const
    return iterates, alphas, hvals, logws, flags, -1, underflow


@njit(cache=True)
def sa_quantile(code, lam_toy, pf, base, sign, level, theta0, box_lo, box_hi, gammas, mode, alpha_const, alpha1,
                use_trunc, trunc_lo, trunc_hi):
    n = base.shape[0]
    iterates = np.empty(n)
    alphas = np.empty(n)
    hvals = np.empty(n)
    logws = np.empty(n)
    flags = np.zeros(n, np.uint8)
    underflow = 0
    dS = np.empty(max(1, pf[0].shape[0]))
    # projection box in the internal frame
    if sign > 0:
        ilo = box_lo
        ihi = box_hi
    else:
        ilo = -box_hi
        ihi = -box_lo
    t = sign * theta0
    alpha = alpha1
    for i in range(n):
        h, lw = family_draw(code, lam_toy, pf, base, i, alpha, dS)
        if not (np.isfinite(h) and np.isfinite(lw)):
            return iterates, alphas, hvals, logws, flags, i, underflow
        w = math.exp(lw)
        if w == 0.0:
            underflow += 1
        hvals[i] = h
        logws[i] = lw
        alphas[i] = alpha
        ind = 1.0 if sign * h <= t else 0.0
        t = t - gammas[i] * (ind * w - level)
        if not np.isfinite(t):
            return iterates, alphas, hvals, logws, flags, i, underflow
        t = _clip(t, ilo, ihi)
        q = sign * t
        iterates[i] = q
        if i + 1 < n:
            if mode == MODE_ADAPTIVE:
                alpha = family_select(code, lam_toy, pf, q)
            else:
                alpha = alpha_const
            if use_trunc and mode != MODE_NONE:
                alpha = _clip(alpha, trunc_lo[i + 1], trunc_hi[i + 1])
    return iterates, alphas, hvals, logws, flags, -1, underflow


def empty_pf():
    """Placeholder portfolio tuple for the toy families."""
    z = np.zeros(0)
    zi = np.zeros(0, np.int64)
    return (z, z, np.zeros((0, 0)), z, z, zi, zi, z, z, z, np.zeros(6))
