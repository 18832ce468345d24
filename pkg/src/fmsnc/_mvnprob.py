"""Batched rectangle probabilities for zero-mean multivariate normals.

All routines take bounds of shape ``(n, d)`` (``-inf``/``+inf`` allowed) and a
single ``(d, d)`` covariance shared by every row, and return ``n``
probabilities.  Dimensions 1-3 are deterministic (error function, Genz's
bivariate and trivariate algorithms), dimension 4 integrates the trivariate
algorithm over one conditioning coordinate, and higher dimensions use a
randomized lattice rule on the Genz separation-of-variables integrand.
"""

import warnings

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtr, ndtri

_TWOPI = 2.0 * np.pi
_GL = {n: leggauss(n) for n in (6, 12, 20)}
_PANEL_NODES, _PANEL_WEIGHTS = leggauss(20)

QMC_ABS_TOL = 1e-6
QMC_MAX_POINTS = 2 ** 20
QMC_SHIFTS = 12
QMC_SEED = 20190611


def interval_prob(lo, hi):
    """P(lo <= Z <= hi) for standard normal Z, accurate in both tails."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    upper = lo > 0
    out = np.where(upper, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    return np.maximum(out, 0.0)


def _bvnu(h, k, r):
    """P(X > h, Y > k) for a standard bivariate normal with correlation r.

    Vectorized port of Genz's BVNU (Drezner & Wesolowsky 1990 with Genz's
    refinements); absolute accuracy about 1e-15.
    """
    h, k, r = np.broadcast_arrays(np.asarray(h, float), np.asarray(k, float),
                                  np.asarray(r, float))
    out = np.zeros(h.shape)
    h_pinf = np.isposinf(h) | np.isposinf(k)
    h_ninf = np.isneginf(h)
    k_ninf = np.isneginf(k)
    both = h_ninf & k_ninf & ~h_pinf
    out[both] = 1.0
    only_h = h_ninf & ~k_ninf & ~h_pinf
    out[only_h] = ndtr(-k[only_h])
    only_k = k_ninf & ~h_ninf & ~h_pinf
    out[only_k] = ndtr(-h[only_k])
    finite = ~(h_pinf | h_ninf | k_ninf)
    if not finite.any():
        return out

    hf, kf, rf = h[finite], k[finite], r[finite]
    res = np.zeros(hf.shape)
    ar = np.abs(rf)

    mid = ar < 0.925
    if mid.any():
        hh, kk, rr = hf[mid], kf[mid], rf[mid]
        hk = hh * kk
        hs = (hh * hh + kk * kk) / 2
        asr = np.arcsin(rr) / 2
        acc = np.zeros(hh.shape)
        a_r = np.abs(rr)
        for lo, hi, n in ((0.0, 0.3, 6), (0.3, 0.75, 12), (0.75, 1.0, 20)):
            sel = (a_r >= lo) & (a_r < hi)
            if not sel.any():
                continue
            x, w = _GL[n]
            sn = np.sin(asr[sel, None] * (1 + x[None, :]))
            term = np.exp((sn * hk[sel, None] - hs[sel, None]) / (1 - sn * sn))
            acc[sel] = term @ w
        res[mid] = acc * asr / _TWOPI + ndtr(-hh) * ndtr(-kk)

    high = ~mid
    if high.any():
        hh, kk, rr = hf[high], kf[high].copy(), rf[high]
        neg = rr < 0
        kk[neg] = -kk[neg]
        hk = hh * kk
        bvn = np.zeros(hh.shape)
        lt1 = np.abs(rr) < 1
        if lt1.any():
            h1, k1, r1, hk1 = hh[lt1], kk[lt1], rr[lt1], hk[lt1]
            as_ = (1 - r1) * (1 + r1)
            a = np.sqrt(as_)
            bs = (h1 - k1) ** 2
            c = (4 - hk1) / 8
            d = (12 - hk1) / 16
            asr = -(bs / as_ + hk1) / 2
            b1 = np.where(asr > -100,
                          a * np.exp(np.maximum(asr, -100))
                          * (1 - c * (bs - as_) * (1 - d * bs / 5) / 3 + c * d * as_ * as_ / 5),
                          0.0)
            b = np.sqrt(bs)
            sp = np.sqrt(_TWOPI) * ndtr(-b / a)
            b1 = b1 - np.where(hk1 > -100,
                               np.exp(-np.minimum(hk1, 100) / 2) * sp * b
                               * (1 - c * bs * (1 - d * bs / 5) / 3),
                               0.0)
            a2 = a / 2
            x, w = _GL[20]
            xs = (a2[:, None] * (1 + x[None, :])) ** 2
            rs = np.sqrt(1 - xs)
            asr2 = -(bs[:, None] / xs + hk1[:, None]) / 2
            with np.errstate(over="ignore", under="ignore"):
                term = np.where(
                    asr2 > -100,
                    np.exp(np.maximum(asr2, -100))
                    * (np.exp(-hk1[:, None] * xs / (2 * (1 + rs) ** 2)) / rs
                       - (1 + c[:, None] * xs * (1 + d[:, None] * xs))),
                    0.0)
            b1 = b1 + a2 * (term @ w)
            bvn[lt1] = -b1 / _TWOPI
        pos = ~neg
        bvn[pos] = bvn[pos] + ndtr(-np.maximum(hh[pos], kk[pos]))
        if neg.any():
            hn, kn, bn = hh[neg], kk[neg], bvn[neg]
            lower = np.where(hn < 0, ndtr(kn) - ndtr(hn), ndtr(-hn) - ndtr(-kn))
            bvn[neg] = np.where(hn >= kn, -bn, lower - bn)
        res[high] = bvn

    out[finite] = np.clip(res, 0.0, 1.0)
    return out


def _reflect(lo, hi, cov):
    """Flip coordinates so one-sided and upper-half intervals sit in the lower tail."""
    flip = np.isposinf(hi) | ((lo > 0) & np.isfinite(hi))
    new_lo = np.where(flip, -hi, lo)
    new_hi = np.where(flip, -lo, hi)
    return new_lo, new_hi, flip


def _bvn_rect(lo, hi, r):
    """Standardized bivariate rectangle probability, rows of lo/hi shape (n, 2)."""
    r = np.broadcast_to(np.asarray(r, float), lo.shape[:1]).copy()
    lo, hi, flip = _reflect(lo, hi, None)
    r = np.where(flip[:, 0] ^ flip[:, 1], -r, r)

    def lower_orthant(x, y):
        # P(X < x, Y < y); zero when either bound is -inf
        val = _bvnu(-x, -y, r)
        return np.where(np.isneginf(x) | np.isneginf(y), 0.0, val)

    p = (lower_orthant(hi[:, 0], hi[:, 1]) - lower_orthant(lo[:, 0], hi[:, 1])
         - lower_orthant(hi[:, 0], lo[:, 1]) + lower_orthant(lo[:, 0], lo[:, 1]))
    return np.clip(p, 0.0, 1.0)


def _standardize(lo, hi, cov):
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    return lo / sd, hi / sd, corr


def _bvnl(x, y, r):
    """P(X < x, Y < y) for a standard bivariate normal with correlation r."""
    return _bvnu(-np.asarray(x, float), -np.asarray(y, float), r)


def _sincs(x):
    ee = (np.pi / 2 - np.abs(x)) ** 2
    near = ee < 5e-5
    sx = np.where(near, np.sign(x) * (1 - ee * (1 - ee / 12) / 2), np.sin(x))
    cs = np.where(near, ee * (1 - ee / 3), 1 - sx * sx)
    return sx, cs


def _pntgnd(ba, bb, bc, ra, rb, r, rr):
    dt = rr * (rr - (ra - rb) ** 2 - 2 * ra * rb * (1 - r))
    ok = dt > 0
    sdt = np.sqrt(np.where(ok, dt, 1.0))
    rr_safe = np.where(ok, rr, 1.0)
    bt = (bc * rr + ba * (r * rb - ra) + bb * (r * ra - rb)) / sdt
    ft = (ba - r * bb) ** 2 / rr_safe + bb * bb
    val = np.where(ok & (bt > -10) & (ft < 100), np.exp(-np.minimum(ft, 100) / 2), 0.0)
    return np.where(bt < 10, val * ndtr(bt), val)


# graded composite Gauss-Legendre on [0, 1], refined towards 1 where the
# integrand can sharpen for near-singular correlations
_TV_EDGES = np.concatenate([np.linspace(0, 0.5, 3), 1 - 0.5 * 0.5 ** np.arange(1, 9), [1.0]])
_TV_X = ((_TV_EDGES[:-1, None] + _TV_EDGES[1:, None]) / 2
         + np.diff(_TV_EDGES)[:, None] / 2 * _PANEL_NODES[None, :]).ravel()
_TV_W = (np.diff(_TV_EDGES)[:, None] / 2 * _PANEL_WEIGHTS[None, :]).ravel()


def _tvnl(h, corr):
    """Lower orthant P(X < h) for a standard trivariate normal, rows of h (n, 3).

    Genz's TVTL reduction: start from the case with X1 independent of
    (X2, X3) and integrate Plackett's identity along a path in (r12, r13).  ``+inf`` and
    ``-inf`` entries are clamped, which is exact to double precision.
    """
    h = np.clip(np.asarray(h, float), -40.0, 40.0)
    h1, h2, h3 = h[:, 0].copy(), h[:, 1].copy(), h[:, 2].copy()
    r12, r13, r23 = corr[1, 0], corr[2, 0], corr[2, 1]
    if abs(r12) > abs(r13):
        h2, h3 = h3, h2
        r12, r13 = r13, r12
    if abs(r13) > abs(r23):
        h1, h2 = h2, h1
        r23, r13 = r13, r23
    eps = 1e-14
    if abs(r12) + abs(r13) < eps:
        return ndtr(h1) * _bvnl(h2, h3, r23)
    if 1 - r23 < eps:
        return _bvnl(h1, np.minimum(h2, h3), r12)
    if r23 + 1 < eps:
        return np.where(h2 > -h3, _bvnl(h1, h2, r12) - _bvnl(h1, -h3, r12), 0.0)
    tvt = _bvnl(h2, h3, r23) * ndtr(h1)
    rua, rub = np.arcsin(r12), np.arcsin(r13)
    x = _TV_X[None, :]
    b1, b2, b3 = h1[:, None], h2[:, None], h3[:, None]
    acc = np.zeros((h.shape[0], x.shape[1]))
    s2, c2 = _sincs(rua * x)
    s3, c3 = _sincs(rub * x)
    if abs(rua) > 0:
        acc += rua * _pntgnd(b1, b2, b3, s3, r23, s2, c2)
    if abs(rub) > 0:
        acc += rub * _pntgnd(b1, b3, b2, s2, r23, s3, c3)
    tvt = tvt + (acc @ _TV_W) / _TWOPI
    return np.clip(tvt, 0.0, 1.0)


def _tvn_rect(lo, hi, corr):
    """Trivariate rectangle probability from eight lower-orthant corners."""
    lo, hi, flip = _reflect(lo, hi, None)
    sign = np.where(flip, -1.0, 1.0)
    # flips are row dependent, so group rows by flip pattern
    out = np.zeros(lo.shape[0])
    codes = flip @ np.array([1, 2, 4])
    for code in np.unique(codes):
        rows = codes == code
        sg = sign[rows][0]
        c = corr * np.outer(sg, sg)
        l, u = lo[rows], hi[rows]
        total = np.zeros(l.shape[0])
        for mask in range(8):
            pick = np.array([(mask >> j) & 1 for j in range(3)], bool)
            corner = np.where(pick, l, u)
            dead = np.isneginf(corner).any(axis=1)
            if dead.all():
                continue
            val = _tvnl(np.where(np.isneginf(corner), 0.0, corner), c)
            total += (-1) ** pick.sum() * np.where(dead, 0.0, val)
        out[rows] = total
    return np.clip(out, 0.0, 1.0)


_QVN_PANELS = 24
_QVN_RANGE = 9.0


def _qvn_rect(lo, hi, corr):
    """Four-dimensional rectangle probability on standardized bounds.

    Conditions on the coordinate whose removal leaves the best conditioned
    trivariate correlation and integrates the exact trivariate probability
    against its density with composite 20-point Gauss-Legendre.  Panel edges
    include the points where a conditional bound crosses zero, so steep
    conditional transitions sit on panel boundaries.
    """
    best = None
    for k in range(4):
        rest = [j for j in range(4) if j != k]
        c = corr[rest, k]
        s = corr[np.ix_(rest, rest)] - np.outer(c, c)
        sd = np.sqrt(np.maximum(np.diag(s), 1e-300))
        r = s / np.outer(sd, sd)
        score = np.linalg.eigvalsh(r)[0] * sd.min()
        if best is None or score > best[0]:
            best = (score, k, rest, c, sd, r)
    _, k, rest, c, sd, r = best
    n = lo.shape[0]
    a = np.clip(lo[:, k], -_QVN_RANGE, _QVN_RANGE)
    b = np.clip(hi[:, k], -_QVN_RANGE, _QVN_RANGE)
    # fixed panels plus the zero crossings of each conditional bound
    grid = a[:, None] + (b - a)[:, None] * np.linspace(0.0, 1.0, _QVN_PANELS + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = np.concatenate([lo[:, rest] / c, hi[:, rest] / c], axis=1)
    cross = np.where(np.isfinite(cross), cross, a[:, None])
    cross = np.clip(cross, a[:, None], b[:, None])
    edges = np.sort(np.concatenate([grid, cross], axis=1), axis=1)
    half = 0.5 * np.diff(edges, axis=1)
    mid = 0.5 * (edges[:, 1:] + edges[:, :-1])
    x = (mid[:, :, None] + half[:, :, None] * _PANEL_NODES).reshape(n, -1)
    w = (half[:, :, None] * _PANEL_WEIGHTS).reshape(n, -1)
    m = x.shape[1]
    xc = x.reshape(-1, 1) * c
    cl = (np.repeat(lo[:, rest], m, axis=0) - xc) / sd
    ch = (np.repeat(hi[:, rest], m, axis=0) - xc) / sd
    inner = _tvn_rect(cl, ch, r).reshape(n, m)
    dens = np.exp(-0.5 * x * x) / np.sqrt(_TWOPI)
    return np.clip(np.sum(w * dens * inner, axis=1), 0.0, 1.0)


_PRIMES = np.array([2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53,
                    59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113])


def _sov_order(lo, hi, cov):
    """Genz-Bretz prioritization: most restrictive conditional interval first."""
    d = cov.shape[0]
    order = list(range(d))
    c = np.array(cov, float)
    a, b = lo.copy(), hi.copy()
    chol = np.zeros((d, d))
    y = np.zeros(d)
    for i in range(d):
        best, best_p = i, np.inf
        for j in range(i, d):
            s = chol[j, :i] @ y[:i]
            den = np.sqrt(max(c[j, j] - chol[j, :i] @ chol[j, :i], 1e-300))
            p = interval_prob((a[j] - s) / den, (b[j] - s) / den)
            if p < best_p:
                best, best_p = j, p
        if best != i:
            for arr in (a, b):
                arr[[i, best]] = arr[[best, i]]
            c[[i, best], :] = c[[best, i], :]
            c[:, [i, best]] = c[:, [best, i]]
            chol[[i, best], :] = chol[[best, i], :]
            order[i], order[best] = order[best], order[i]
        diag = np.sqrt(max(c[i, i] - chol[i, :i] @ chol[i, :i], 1e-300))
        chol[i, i] = diag
        for j in range(i + 1, d):
            chol[j, i] = (c[j, i] - chol[j, :i] @ chol[i, :i]) / diag
        s = chol[i, :i] @ y[:i]
        lo_s, hi_s = (a[i] - s) / diag, (b[i] - s) / diag
        # conditional mean of the truncated coordinate, used for later ordering
        pr = max(interval_prob(lo_s, hi_s), 1e-300)
        phi_lo = np.exp(-0.5 * lo_s ** 2) if np.isfinite(lo_s) else 0.0
        phi_hi = np.exp(-0.5 * hi_s ** 2) if np.isfinite(hi_s) else 0.0
        y[i] = (phi_lo - phi_hi) / (np.sqrt(_TWOPI) * pr)
    return a, b, chol


def _sov_integrand(w, a, b, chol):
    npts = w.shape[0]
    d = chol.shape[0]
    y = np.zeros((npts, d))
    f = np.ones(npts)
    for i in range(d):
        s = y[:, :i] @ chol[i, :i] if i else 0.0
        lo = (a[i] - s) / chol[i, i]
        hi = (b[i] - s) / chol[i, i]
        di = ndtr(lo)
        ei = ndtr(hi)
        f = f * np.maximum(ei - di, 0.0)
        if i < d - 1:
            u = np.clip(di + w[:, i] * (ei - di), 1e-300, 1 - 1e-16)
            y[:, i] = ndtri(u)
    return f


def qmc_rect_prob(lo, hi, cov, abs_tol=QMC_ABS_TOL, max_points=QMC_MAX_POINTS,
                  seed=QMC_SEED):
    """Single-rectangle probability by randomized lattice QMC.

    Returns ``(estimate, standard_error)``.
    """
    a, b, chol = _sov_order(np.asarray(lo, float), np.asarray(hi, float), cov)
    d = chol.shape[0]
    rng = np.random.default_rng(seed)
    z = np.sqrt(_PRIMES[: max(d - 1, 1)])
    shifts = rng.random((QMC_SHIFTS, max(d - 1, 1)))
    n = 1024
    total = np.zeros(QMC_SHIFTS)
    count = 0
    k_start = 1
    while True:
        k = np.arange(k_start, k_start + n)[:, None]
        base = np.mod(k * z[None, :], 1.0)
        for s in range(QMC_SHIFTS):
            w = np.abs(2 * np.mod(base + shifts[s], 1.0) - 1)
            total[s] += _sov_integrand(w, a, b, chol).sum()
        count += n
        k_start += n
        est = total / count
        err = est.std(ddof=1) / np.sqrt(QMC_SHIFTS)
        if 3.0 * err <= abs_tol or count * QMC_SHIFTS >= max_points:
            break
        n = count  # double the lattice size
    if 3.0 * err > abs_tol:
        warnings.warn(f"QMC rectangle probability reached {count * QMC_SHIFTS} points "
                      f"with error estimate {3 * err:.2e} > {abs_tol:.0e}",
                      RuntimeWarning, stacklevel=3)
    return float(np.clip(est.mean(), 0.0, 1.0)), float(err)


def rect_prob(lo, hi, cov):
    """P(lo <= X <= hi) for X ~ N(0, cov); ``lo``, ``hi`` have shape (n, d)."""
    lo = np.atleast_2d(np.asarray(lo, float))
    hi = np.atleast_2d(np.asarray(hi, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    n, d = lo.shape
    if d == 0:
        return np.ones(n)
    # untruncated coordinates marginalize out exactly
    active = ~(np.isneginf(lo) & np.isposinf(hi)).all(axis=0)
    if not active.all():
        if not active.any():
            return np.ones(n)
        idx = np.nonzero(active)[0]
        return rect_prob(lo[:, idx], hi[:, idx], cov[np.ix_(idx, idx)])
    empty = (hi <= lo).any(axis=1)
    if d == 1:
        sd = np.sqrt(cov[0, 0])
        p = interval_prob(lo[:, 0] / sd, hi[:, 0] / sd)
    elif d == 2:
        sl, sh, corr = _standardize(lo, hi, cov)
        p = _bvn_rect(sl, sh, corr[0, 1])
    elif d == 3:
        sl, sh, corr = _standardize(lo, hi, cov)
        p = _tvn_rect(sl, sh, corr)
    elif d == 4:
        sl, sh, corr = _standardize(lo, hi, cov)
        p = _qvn_rect(sl, sh, corr)
    else:
        p = np.array([qmc_rect_prob(lo[i], hi[i], cov)[0] for i in range(n)])
    return np.where(empty, 0.0, p)
