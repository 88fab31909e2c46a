"""Hot numeric kernels with jitted and pure-numpy implementations.

Every public function here dispatches on :func:`countlab._accel.numba_enabled`
at call time. Both paths take and return plain numpy arrays and agree to
floating-point round-off; ``benchmarks/bench_kernels.py`` times them side by side.
"""

import math

import numpy as np
from scipy.special import logsumexp

from countlab._accel import njit, numba_enabled

__all__ = [
    "block_counts",
    "render_discs",
    "sinkhorn_grid",
    "sinkhorn_grid_symmetric",
    "local_maxima",
    "suppress_peaks",
]


# ---------------------------------------------------------------------------
# point -> block scatter
# ---------------------------------------------------------------------------


@njit
def _block_counts_jit(xs, ys, cats, hb, wb, m, p):
    out = np.zeros((hb, wb, m), dtype=np.int64)
    dropped = 0
    for t in range(xs.shape[0]):
        u = ys[t] // p
        v = xs[t] // p
        if u < hb and v < wb and u >= 0 and v >= 0:
            out[u, v, cats[t]] += 1
        else:
            dropped += 1
    return out, dropped


def _block_counts_np(xs, ys, cats, hb, wb, m, p):
    u = ys // p
    v = xs // p
    keep = (u >= 0) & (u < hb) & (v >= 0) & (v < wb)
    flat = (u[keep] * wb + v[keep]) * m + cats[keep]
    out = np.bincount(flat, minlength=hb * wb * m).astype(np.int64)
    return out.reshape(hb, wb, m), int((~keep).sum())


def block_counts(xs, ys, cats, hb, wb, m, p):
    """Scatter integer points into a ``(hb, wb, m)`` count grid of ``p``-pixel blocks.

    Returns the grid and the number of points that fell outside it.
    """
    xs = np.ascontiguousarray(xs, dtype=np.int64)
    ys = np.ascontiguousarray(ys, dtype=np.int64)
    cats = np.ascontiguousarray(cats, dtype=np.int64)
    if numba_enabled():
        out, dropped = _block_counts_jit(xs, ys, cats, int(hb), int(wb), int(m), int(p))
        return out, int(dropped)
    return _block_counts_np(xs, ys, cats, int(hb), int(wb), int(m), int(p))


# ---------------------------------------------------------------------------
# anti-aliased disc rasterisation
# ---------------------------------------------------------------------------


@njit
def _render_discs_jit(canvas, cx, cy, radius, colors, alpha):
    h, w = canvas.shape[0], canvas.shape[1]
    for t in range(cx.shape[0]):
        r = radius[t]
        reach = int(math.ceil(r + 1.0))
        y0 = max(cy[t] - reach, 0)
        y1 = min(cy[t] + reach + 1, h)
        x0 = max(cx[t] - reach, 0)
        x1 = min(cx[t] + reach + 1, w)
        for y in range(y0, y1):
            dy = y - cy[t]
            for x in range(x0, x1):
                dx = x - cx[t]
                cov = r + 0.5 - math.sqrt(dx * dx + dy * dy)
                if cov <= 0.0:
                    continue
                if cov > 1.0:
                    cov = 1.0
                a = cov * alpha[t]
                for c in range(3):
                    canvas[y, x, c] = canvas[y, x, c] * (1.0 - a) + colors[t, c] * a
    return canvas


def _render_discs_np(canvas, cx, cy, radius, colors, alpha):
    h, w = canvas.shape[:2]
    for t in range(cx.shape[0]):
        r = radius[t]
        reach = int(math.ceil(r + 1.0))
        y0, y1 = max(cy[t] - reach, 0), min(cy[t] + reach + 1, h)
        x0, x1 = max(cx[t] - reach, 0), min(cx[t] + reach + 1, w)
        dy = (np.arange(y0, y1) - cy[t])[:, None]
        dx = (np.arange(x0, x1) - cx[t])[None, :]
        cov = np.clip(r + 0.5 - np.sqrt(dx * dx + dy * dy), 0.0, 1.0)
        a = (cov * alpha[t])[..., None]
        win = canvas[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1] = win * (1.0 - a) + colors[t][None, None, :] * a
    return canvas


def render_discs(canvas, cx, cy, radius, colors, alpha):
    """Alpha-blend discs onto ``canvas`` (H, W, 3) in place, in the given order.

    Disc ``t`` is centred on pixel ``(cx[t], cy[t])``; coverage of a pixel is
    ``clip(r + 0.5 - d, 0, 1)`` with ``d`` the centre-to-centre distance.
    """
    canvas = np.ascontiguousarray(canvas, dtype=np.float64)
    args = (
        np.ascontiguousarray(cx, dtype=np.int64),
        np.ascontiguousarray(cy, dtype=np.int64),
        np.ascontiguousarray(radius, dtype=np.float64),
        np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(alpha, dtype=np.float64),
    )
    if numba_enabled():
        return _render_discs_jit(canvas, *args)
    return _render_discs_np(canvas, *args)


# ---------------------------------------------------------------------------
# log-domain Sinkhorn on a regular grid, squared Euclidean ground cost
# ---------------------------------------------------------------------------
#
# The Gibbs kernel of |y_i - y_j|^2 + |x_i - x_j|^2 factorises over the two
# axes, so each soft-min costs O(H W (H + W)) rather than O((H W)^2).


@njit
def _softmin_jit(h, eps, out, tmp):
    # out[yi, xi] = -eps * log sum_{yj, xj} exp(h[yj, xj] - ((yi-yj)^2 + (xi-xj)^2) / eps)
    hh, ww = h.shape
    for yj in range(hh):
        for xi in range(ww):
            mx = -np.inf
            for xj in range(ww):
                d = xi - xj
                val = h[yj, xj] - d * d / eps
                if val > mx:
                    mx = val
            if mx == -np.inf:
                tmp[yj, xi] = -np.inf
                continue
            s = 0.0
            for xj in range(ww):
                d = xi - xj
                s += math.exp(h[yj, xj] - d * d / eps - mx)
            tmp[yj, xi] = mx + math.log(s)
    for yi in range(hh):
        for xi in range(ww):
            mx = -np.inf
            for yj in range(hh):
                d = yi - yj
                val = tmp[yj, xi] - d * d / eps
                if val > mx:
                    mx = val
            s = 0.0
            for yj in range(hh):
                d = yi - yj
                s += math.exp(tmp[yj, xi] - d * d / eps - mx)
            out[yi, xi] = -eps * (mx + math.log(s))


@njit
def _sinkhorn_one_jit(a, b, eps, max_iters, tol, omega, check_every):
    hh, ww = a.shape
    la = np.empty_like(a)
    lb = np.empty_like(b)
    for i in range(hh):
        for j in range(ww):
            la[i, j] = math.log(a[i, j]) if a[i, j] > 0.0 else -np.inf
            lb[i, j] = math.log(b[i, j]) if b[i, j] > 0.0 else -np.inf
    f = np.zeros_like(a)
    g = np.zeros_like(a)
    fn = np.empty_like(a)
    gt = np.empty_like(a)
    work = np.empty_like(a)
    tmp = np.empty_like(a)
    e = max(float((hh - 1) ** 2 + (ww - 1) ** 2), eps)
    residual = np.inf
    it = 0
    while it < max_iters:
        it += 1
        if e > eps:
            e = max(eps, 0.5 * e)
            w = 1.0
        else:
            w = omega
        for i in range(hh):
            for j in range(ww):
                work[i, j] = lb[i, j] + g[i, j] / e
        _softmin_jit(work, e, fn, tmp)
        for i in range(hh):
            for j in range(ww):
                f[i, j] = (1.0 - w) * f[i, j] + w * fn[i, j]
                work[i, j] = la[i, j] + f[i, j] / e
        _softmin_jit(work, e, fn, tmp)
        for i in range(hh):
            for j in range(ww):
                g[i, j] = (1.0 - w) * g[i, j] + w * fn[i, j]
        if e == eps and (it % check_every == 0 or it == max_iters):
            # exact column marginal, then measure the row-marginal violation
            for i in range(hh):
                for j in range(ww):
                    work[i, j] = la[i, j] + f[i, j] / e
            _softmin_jit(work, e, gt, tmp)
            for i in range(hh):
                for j in range(ww):
                    work[i, j] = lb[i, j] + gt[i, j] / e
            _softmin_jit(work, e, fn, tmp)
            residual = 0.0
            for i in range(hh):
                for j in range(ww):
                    if a[i, j] > 0.0:
                        z = (f[i, j] - fn[i, j]) / e
                        if z > 50.0:
                            z = 50.0
                        residual += a[i, j] * abs(math.exp(z) - 1.0)
            if residual < tol:
                return f, gt, it, residual
    return f, g, it, residual


@njit
def _sinkhorn_grid_jit(a, b, eps, max_iters, tol, omega, check_every):
    nb = a.shape[0]
    f = np.empty_like(a)
    g = np.empty_like(a)
    iters = np.zeros(nb, dtype=np.int64)
    res = np.zeros(nb, dtype=np.float64)
    for t in range(nb):
        ft, gt, it, r = _sinkhorn_one_jit(a[t], b[t], eps, max_iters, tol, omega, check_every)
        f[t] = ft
        g[t] = gt
        iters[t] = it
        res[t] = r
    return f, g, iters, res


def _softmin_np(h, eps, dy, dx):
    # h: (B, H, W) -> (B, H, W)
    with np.errstate(invalid="ignore", over="ignore"):
        t1 = logsumexp(h[:, :, None, :] - dx[None, None, :, :] / eps, axis=-1)
        out = logsumexp(t1[:, None, :, :] - dy[None, :, :, None] / eps, axis=2)
    return -eps * out


def _sinkhorn_grid_np(a, b, eps, max_iters, tol, omega, check_every):
    nb, hh, ww = a.shape
    dy = (np.arange(hh)[:, None] - np.arange(hh)[None, :]).astype(np.float64) ** 2
    dx = (np.arange(ww)[:, None] - np.arange(ww)[None, :]).astype(np.float64) ** 2
    with np.errstate(divide="ignore"):
        la = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), -np.inf)
        lb = np.where(b > 0, np.log(np.where(b > 0, b, 1.0)), -np.inf)
    f = np.zeros_like(a)
    g = np.zeros_like(a)
    f_out = np.zeros_like(a)
    g_out = np.zeros_like(a)
    iters = np.zeros(nb, dtype=np.int64)
    res = np.full(nb, np.inf)
    active = np.ones(nb, dtype=bool)
    e = max(float((hh - 1) ** 2 + (ww - 1) ** 2), eps)
    it = 0
    while it < max_iters and active.any():
        it += 1
        if e > eps:
            e = max(eps, 0.5 * e)
            w = 1.0
        else:
            w = omega
        idx = np.flatnonzero(active)
        fa, ga = f[idx], g[idx]
        fa = (1.0 - w) * fa + w * _softmin_np(lb[idx] + ga / e, e, dy, dx)
        ga = (1.0 - w) * ga + w * _softmin_np(la[idx] + fa / e, e, dy, dx)
        f[idx], g[idx] = fa, ga
        iters[idx] = it
        if e == eps and (it % check_every == 0 or it == max_iters):
            gt = _softmin_np(la[idx] + fa / e, e, dy, dx)
            fh = _softmin_np(lb[idx] + gt / e, e, dy, dx)
            z = np.minimum((fa - fh) / e, 50.0)
            viol = np.where(a[idx] > 0, a[idx] * np.abs(np.exp(z) - 1.0), 0.0)
            r = viol.reshape(len(idx), -1).sum(axis=1)
            res[idx] = r
            done = r < tol
            f_out[idx[done]] = fa[done]
            g_out[idx[done]] = gt[done]
            active[idx[done]] = False
    left = np.flatnonzero(active)
    f_out[left] = f[left]
    g_out[left] = g[left]
    return f_out, g_out, iters, res


def _grid_cost(hh, ww):
    yy, xx = np.divmod(np.arange(hh * ww), ww)
    return (yy[:, None] - yy[None, :]) ** 2 + (xx[:, None] - xx[None, :]) ** 2.0


def _newton_direction(P, r, c, u, v, ridge=1e-13):
    """Solve ``[[diag r, P], [P^T, diag c]] (x, y) = (u, v)`` by eliminating the larger block.

    The ridge regularises the constant-shift null direction of the dual.
    """
    if len(r) > len(c):
        y, x = _newton_blocks(P.T, c, r, v, u, ridge)
    else:
        x, y = _newton_blocks(P, r, c, u, v, ridge)
    return np.concatenate([x, y])


def _newton_blocks(P, r, c, u, v, ridge):
    dc = c + ridge
    schur = np.diag(r + ridge) - (P / dc) @ P.T
    x = np.linalg.solve(schur, u - P @ (v / dc))
    return x, (v - P.T @ x) / dc


def _newton_polish(a, b, f, g, eps, tol, max_steps, radius=10.0):
    """Damped Newton ascent on the entropic dual restricted to the supports.

    Used when Sinkhorn stalls on near-degenerate problems: with ``eps`` far
    below the unit ground cost the transport graph can split into weakly
    coupled components, and Sinkhorn's linear rate collapses while Newton
    still converges in a handful of steps. Steps are capped at
    ``radius * eps`` in potential units and accepted by backtracking on the
    concave dual objective.
    """
    hh, ww = a.shape
    av, bv = a.ravel(), b.ravel()
    I = np.flatnonzero(av > 0)
    J = np.flatnonzero(bv > 0)
    ai, bj = av[I], bv[J]
    Cs = _grid_cost(hh, ww)[np.ix_(I, J)]
    fi = f.ravel()[I].copy()
    gj = g.ravel()[J].copy()
    nI, nJ = len(I), len(J)

    def plan(fi, gj):
        with np.errstate(over="ignore"):
            return ai[:, None] * bj[None, :] * np.exp((fi[:, None] + gj[None, :] - Cs) / eps)

    def dual(fi, gj, P):
        return ai @ fi + bj @ gj - eps * P.sum()

    P = plan(fi, gj)
    D0 = dual(fi, gj, P)
    if not np.isfinite(D0):
        # potentials too far from feasible for a local method
        return f, g
    for _ in range(max_steps):
        r, c = P.sum(axis=1), P.sum(axis=0)
        grad = np.concatenate([ai - r, bj - c])
        if np.abs(grad).sum() < 0.1 * tol:
            break
        delta = _newton_direction(P, r, c, eps * grad[:nI], eps * grad[nI:])
        big = np.abs(delta).max()
        if big > radius * eps:
            delta *= radius * eps / big
        slope = grad @ delta
        t, accepted = 1.0, False
        for _ in range(40):
            fn, gn = fi + t * delta[:nI], gj + t * delta[nI:]
            Pn = plan(fn, gn)
            Dn = dual(fn, gn, Pn)
            if np.isfinite(Dn) and Dn >= D0 + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        fi, gj, P, D0 = fn, gn, Pn, Dn
    f_out = f.ravel().copy()
    g_out = g.ravel().copy()
    f_out[I] = fi
    g_out[J] = gj
    return f_out.reshape(hh, ww), g_out.reshape(hh, ww)


def _residual_np(a, b, f, eps):
    """Exact column update ``g = T(f)`` and the L1 row-marginal violation it leaves."""
    hh, ww = a.shape[-2:]
    dy = (np.arange(hh)[:, None] - np.arange(hh)[None, :]).astype(np.float64) ** 2
    dx = (np.arange(ww)[:, None] - np.arange(ww)[None, :]).astype(np.float64) ** 2
    with np.errstate(divide="ignore"):
        la = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), -np.inf)
        lb = np.where(b > 0, np.log(np.where(b > 0, b, 1.0)), -np.inf)
    gt = _softmin_np(la + f / eps, eps, dy, dx)
    fh = _softmin_np(lb + gt / eps, eps, dy, dx)
    z = np.minimum((f - fh) / eps, 50.0)
    viol = np.where(a > 0, a * np.abs(np.exp(z) - 1.0), 0.0)
    return gt, fh, viol.reshape(len(a), -1).sum(axis=1)


def _sinkhorn_backend(a, b, eps, max_iters, tol, omega, check_every):
    args = (float(eps), int(max_iters), float(tol), float(omega), int(check_every))
    if numba_enabled():
        return _sinkhorn_grid_jit(a, b, *args)
    return _sinkhorn_grid_np(a, b, *args)


def _polish_all(a, b, f, g, res, eps, tol, newton_steps):
    """Newton-polish every problem above ``tol``; updates ``f, g, res`` in place."""
    for t in np.flatnonzero(~(res < tol)):
        fp, gp = _newton_polish(a[t], b[t], f[t], g[t], float(eps), float(tol), int(newton_steps))
        # off-support potentials are re-derived as c-transforms before re-checking
        f_full, _, _ = _residual_np(b[t : t + 1], a[t : t + 1], gp[None], float(eps))
        f_full = np.where(a[t] > 0, fp, f_full[0])
        gt, _, r = _residual_np(a[t : t + 1], b[t : t + 1], f_full[None], float(eps))
        if r[0] < res[t] or not np.isfinite(res[t]):
            f[t], g[t], res[t] = f_full, gt[0], r[0]


def sinkhorn_grid(a, b, eps, max_iters=500, tol=1e-7, omega=1.9, check_every=5, newton_steps=200, newton_after=40):
    """Entropic OT potentials between batches of grid histograms.

    Parameters
    ----------
    a, b : ndarray, shape (B, H, W)
        Non-negative weights, each slice summing to one.
    eps : float
        Entropic regularisation in squared-block units.
    omega : float
        Over-relaxation factor applied once the epsilon-scaling warm start
        has reached ``eps``; 1 recovers plain Sinkhorn.
    newton_steps, newton_after : int
        Problems still above ``tol`` after ``newton_after`` Sinkhorn sweeps
        get up to ``newton_steps`` damped Newton steps on the dual; any that
        remain are re-solved with the full ``max_iters`` Sinkhorn budget and
        polished again. ``newton_steps=0`` gives plain Sinkhorn.

    Returns
    -------
    f, g : ndarray, shape (B, H, W)
        Dual potentials; ``g`` satisfies the column marginal exactly.
    iters : ndarray of int
        Sinkhorn sweeps used.
    residual : ndarray of float
        L1 row-marginal violation at exit.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if newton_steps <= 0:
        return _sinkhorn_backend(a, b, eps, max_iters, tol, omega, check_every)
    first = min(int(max_iters), int(newton_after))
    f, g, iters, res = _sinkhorn_backend(a, b, eps, first, tol, omega, check_every)
    _polish_all(a, b, f, g, res, eps, tol, newton_steps)
    bad = np.flatnonzero(~(res < tol))
    if len(bad) and max_iters > first:
        f2, g2, it2, r2 = _sinkhorn_backend(a[bad], b[bad], eps, max_iters, tol, omega, check_every)
        _polish_all(a[bad], b[bad], f2, g2, r2, eps, tol, newton_steps)
        better = r2 < res[bad]
        f[bad[better]], g[bad[better]], res[bad[better]] = f2[better], g2[better], r2[better]
        iters[bad] = it2
    return f, g, iters, res


@njit
def _sinkhorn_sym_one_jit(a, eps, max_iters, tol):
    hh, ww = a.shape
    la = np.empty_like(a)
    for i in range(hh):
        for j in range(ww):
            la[i, j] = math.log(a[i, j]) if a[i, j] > 0.0 else -np.inf
    f = np.zeros_like(a)
    fn = np.empty_like(a)
    work = np.empty_like(a)
    tmp = np.empty_like(a)
    e = max(float((hh - 1) ** 2 + (ww - 1) ** 2), eps)
    residual = np.inf
    it = 0
    while it < max_iters:
        it += 1
        if e > eps:
            e = max(eps, 0.5 * e)
        for i in range(hh):
            for j in range(ww):
                work[i, j] = la[i, j] + f[i, j] / e
        _softmin_jit(work, e, fn, tmp)
        if e == eps:
            residual = 0.0
            for i in range(hh):
                for j in range(ww):
                    if a[i, j] > 0.0:
                        z = (f[i, j] - fn[i, j]) / e
                        if z > 50.0:
                            z = 50.0
                        residual += a[i, j] * abs(math.exp(z) - 1.0)
            if residual < tol:
                return f, it, residual
        for i in range(hh):
            for j in range(ww):
                f[i, j] = 0.5 * (f[i, j] + fn[i, j])
    return f, it, residual


@njit
def _sinkhorn_sym_jit(a, eps, max_iters, tol):
    nb = a.shape[0]
    f = np.empty_like(a)
    iters = np.zeros(nb, dtype=np.int64)
    res = np.zeros(nb, dtype=np.float64)
    for t in range(nb):
        ft, it, r = _sinkhorn_sym_one_jit(a[t], eps, max_iters, tol)
        f[t] = ft
        iters[t] = it
        res[t] = r
    return f, iters, res


def _sinkhorn_sym_np(a, eps, max_iters, tol):
    nb, hh, ww = a.shape
    dy = (np.arange(hh)[:, None] - np.arange(hh)[None, :]).astype(np.float64) ** 2
    dx = (np.arange(ww)[:, None] - np.arange(ww)[None, :]).astype(np.float64) ** 2
    with np.errstate(divide="ignore"):
        la = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), -np.inf)
    f = np.zeros_like(a)
    iters = np.zeros(nb, dtype=np.int64)
    res = np.full(nb, np.inf)
    active = np.ones(nb, dtype=bool)
    e = max(float((hh - 1) ** 2 + (ww - 1) ** 2), eps)
    it = 0
    while it < max_iters and active.any():
        it += 1
        if e > eps:
            e = max(eps, 0.5 * e)
        idx = np.flatnonzero(active)
        fa = f[idx]
        fn = _softmin_np(la[idx] + fa / e, e, dy, dx)
        iters[idx] = it
        if e == eps:
            z = np.minimum((fa - fn) / e, 50.0)
            viol = np.where(a[idx] > 0, a[idx] * np.abs(np.exp(z) - 1.0), 0.0)
            r = viol.reshape(len(idx), -1).sum(axis=1)
            res[idx] = r
            done = r < tol
            active[idx[done]] = False
            fn[done] = fa[done]
        f[idx] = 0.5 * (fa + fn)
    return f, iters, res


def sinkhorn_grid_symmetric(a, eps, max_iters=500, tol=1e-7):
    """Self-transport potential ``f`` with ``OT(a, a) = 2 <a, f>``, by averaged fixed-point iteration.

    Same conventions as :func:`sinkhorn_grid`.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    args = (float(eps), int(max_iters), float(tol))
    if numba_enabled():
        return _sinkhorn_sym_jit(a, *args)
    return _sinkhorn_sym_np(a, *args)


# ---------------------------------------------------------------------------
# peak picking
# ---------------------------------------------------------------------------


@njit
def _local_maxima_jit(d, threshold):
    hh, ww = d.shape
    us = []
    vs = []
    for u in range(hh):
        for v in range(ww):
            val = d[u, v]
            if not val > threshold:
                continue
            ok = True
            for du in range(-1, 2):
                for dv in range(-1, 2):
                    if du == 0 and dv == 0:
                        continue
                    uu = u + du
                    vv = v + dv
                    if 0 <= uu < hh and 0 <= vv < ww and d[uu, vv] >= val:
                        ok = False
            if ok:
                us.append(u)
                vs.append(v)
    out = np.empty((len(us), 2), dtype=np.int64)
    for t in range(len(us)):
        out[t, 0] = us[t]
        out[t, 1] = vs[t]
    return out


def _local_maxima_np(d, threshold):
    hh, ww = d.shape
    padded = np.pad(d, 1, mode="constant", constant_values=-np.inf)
    ok = d > threshold
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            if du == 0 and dv == 0:
                continue
            ok &= d > padded[1 + du : 1 + du + hh, 1 + dv : 1 + dv + ww]
    return np.argwhere(ok).astype(np.int64)


def local_maxima(d, threshold):
    """Row-major ``(K, 2)`` indices of strict 8-neighbourhood maxima above ``threshold``."""
    d = np.ascontiguousarray(d, dtype=np.float64)
    if numba_enabled():
        return _local_maxima_jit(d, float(threshold))
    return _local_maxima_np(d, float(threshold))


@njit
def _suppress_jit(coords, min_distance):
    keep = np.zeros(coords.shape[0], dtype=np.bool_)
    for t in range(coords.shape[0]):
        ok = True
        for s in range(t):
            if keep[s]:
                cheb = max(abs(coords[t, 0] - coords[s, 0]), abs(coords[t, 1] - coords[s, 1]))
                if cheb < min_distance:
                    ok = False
                    break
        keep[t] = ok
    return keep


def _suppress_np(coords, min_distance):
    keep = np.zeros(len(coords), dtype=bool)
    for t in range(len(coords)):
        kept = coords[keep]
        if len(kept) == 0 or np.abs(kept - coords[t]).max(axis=1).min() >= min_distance:
            keep[t] = True
    return keep


def suppress_peaks(coords, min_distance):
    """Greedy keep-mask over ``coords`` (already sorted by priority)."""
    coords = np.ascontiguousarray(coords, dtype=np.int64).reshape(-1, 2)
    if numba_enabled():
        return _suppress_jit(coords, int(min_distance))
    return _suppress_np(coords, int(min_distance))
