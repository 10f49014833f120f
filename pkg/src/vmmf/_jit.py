"""Compiled primitives shared by the kernel, force and field sweeps.

A radial profile is passed around as two arrays:

``prof`` of shape (6, n) holding, on the uniform grid s_k = k*h,
    0: psi      1: psi'
    2: Psi      3: Psi' = s*psi
    4: Phi      5: Phi' = Psi
``meta`` = [h, S, Psi_tot, Phi_S, Q_out, r0, n]

where S is the support radius, Psi_tot = Psi(S), Phi_S = Phi(S) and
Q_out = 2*S*Psi_tot - 2*Phi_S is the exterior value of 2r*m(t, r).
"""

import numpy as np
from numba import njit, prange

# Extra slack added to the light-cone window; any value >= 0 is exact
# because the kernel vanishes identically outside the shell.
WINDOW_MARGIN = 1e-9


@njit(cache=True, inline="always")
def hermite(f, df, h, n, s):
    x = s / h
    k = int(x)
    if k >= n - 1:
        return f[n - 1], 0.0
    th = x - k
    f0 = f[k]
    f1 = f[k + 1]
    d0 = df[k] * h
    d1 = df[k + 1] * h
    th2 = th * th
    th3 = th2 * th
    val = ((2.0 * th3 - 3.0 * th2 + 1.0) * f0 + (th3 - 2.0 * th2 + th) * d0
           + (-2.0 * th3 + 3.0 * th2) * f1 + (th3 - th2) * d1)
    der = ((6.0 * th2 - 6.0 * th) * f0 + (3.0 * th2 - 4.0 * th + 1.0) * d0
           + (-6.0 * th2 + 6.0 * th) * f1 + (3.0 * th2 - 2.0 * th) * d1) / h
    return val, der


@njit(cache=True, inline="always")
def _psi(prof, meta, s):
    return hermite(prof[0], prof[1], meta[0], int(meta[6]), s)


@njit(cache=True, inline="always")
def _Psi(prof, meta, s):
    v, _ = hermite(prof[2], prof[3], meta[0], int(meta[6]), s)
    return v


@njit(cache=True, inline="always")
def _Phi(prof, meta, s):
    S = meta[1]
    if s >= S:
        return meta[3] + meta[2] * (s - S)
    v, _ = hermite(prof[4], prof[5], meta[0], int(meta[6]), s)
    return v


@njit(cache=True, inline="always")
def _Phi_odd(prof, meta, u):
    if u < 0.0:
        return -_Phi(prof, meta, -u)
    return _Phi(prof, meta, u)


@njit(cache=True)
def _kernel_general(prof, meta, tau, r):
    a = r + tau
    b = abs(r - tau)
    Pa = _Psi(prof, meta, a)
    Pb = _Psi(prof, meta, b)
    pa, _ = _psi(prof, meta, a)
    pb, _ = _psi(prof, meta, b)
    inv = 0.5 / r
    Y = (Pa - Pb) * inv
    Yt = (a * pa + (r - tau) * pb) * inv
    Yr = -Y / r + (a * pa - (r - tau) * pb) * inv
    return Y, Yt, Yr


@njit(cache=True)
def kernel_eval(prof, meta, tau, r):
    """Return (Y, dY/dt, dY/dr) at time lag tau and distance r."""
    if abs(r - tau) >= meta[1]:
        return 0.0, 0.0, 0.0
    r0 = meta[5]
    if r < r0:
        p, dp = _psi(prof, meta, tau)
        Y0 = tau * p
        Yt0 = p + tau * dp
        Y1, Yt1, Yr1 = _kernel_general(prof, meta, tau, r0)
        q = r / r0
        q2 = q * q
        return Y0 + (Y1 - Y0) * q2, Yt0 + (Yt1 - Yt0) * q2, Yr1 * q
    return _kernel_general(prof, meta, tau, r)


@njit(cache=True)
def _layer_general(prof, meta, t, r):
    S = meta[1]
    Q = (_Phi(prof, meta, 2.0 * r + S) - _Phi(prof, meta, r + t)
         - meta[3] + _Phi_odd(prof, meta, t - r))
    Qp = 2.0 * meta[2] - _Psi(prof, meta, r + t) - _Psi(prof, meta, abs(t - r))
    m = Q / (2.0 * r)
    mr = (r * Qp - Q) / (2.0 * r * r)
    return m, mr


@njit(cache=True)
def layer_eval(prof, meta, t, r):
    """Return (m, dm/dr) of the initial-layer potential psi * P(t, .)."""
    S = meta[1]
    if t - r >= S:
        return 0.0, 0.0
    if r - t >= S:
        return meta[4] / (2.0 * r), -meta[4] / (2.0 * r * r)
    r0 = meta[5]
    if r < r0:
        m0 = meta[2] - _Psi(prof, meta, t)
        m1, mr1 = _layer_general(prof, meta, t, r0)
        q = r / r0
        return m0 + (m1 - m0) * q * q, mr1 * q
    return _layer_general(prof, meta, t, r)


@njit(cache=True, parallel=True)
def kernel_grid(prof, meta, ts, rs):
    nt = ts.shape[0]
    nr = rs.shape[0]
    out = np.zeros((5, nt, nr))
    for a in prange(nt):
        for b in range(nr):
            Y, Yt, Yr = kernel_eval(prof, meta, ts[a], rs[b])
            m, mr = layer_eval(prof, meta, ts[a], rs[b])
            out[0, a, b] = Y
            out[1, a, b] = Yt
            out[2, a, b] = Yr
            out[3, a, b] = m
            out[4, a, b] = mr
    return out


@njit(cache=True)
def kernel_points(prof, meta, taus, rs):
    n = taus.shape[0]
    out = np.zeros((3, n))
    for i in range(n):
        Y, Yt, Yr = kernel_eval(prof, meta, taus[i], rs[i])
        out[0, i] = Y
        out[1, i] = Yt
        out[2, i] = Yr
    return out


@njit(cache=True)
def layer_points(prof, meta, ts, rs):
    n = ts.shape[0]
    out = np.zeros((2, n))
    for i in range(n):
        m, mr = layer_eval(prof, meta, ts[i], rs[i])
        out[0, i] = m
        out[1, i] = mr
    return out


@njit(cache=True, inline="always")
def gregory(k, n):
    """Weight (in units of dt) of node k in the rule over nodes 0..n."""
    if n == 0:
        return 0.0
    if n == 1:
        return 0.5
    if n == 2:
        return 4.0 / 3.0 if k == 1 else 1.0 / 3.0
    if n == 3:
        return 9.0 / 8.0 if (k == 1 or k == 2) else 3.0 / 8.0
    if n == 4:
        if k == 0 or k == 4:
            return 14.0 / 45.0
        if k == 2:
            return 24.0 / 45.0
        return 64.0 / 45.0
    kk = min(k, n - k)
    if kk == 0:
        return 3.0 / 8.0
    if kk == 1:
        return 7.0 / 6.0
    if kk == 2:
        return 23.0 / 24.0
    return 1.0


@njit(cache=True, inline="always")
def _g(t, dt, k, y, xs, j):
    d0 = y[0] - xs[j, k, 0]
    d1 = y[1] - xs[j, k, 1]
    d2 = y[2] - xs[j, k, 2]
    return (t - k * dt) - np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)


@njit(cache=True)
def window(t, dt, n, y, xs, j, width):
    """Node range [lo, hi] where |g| <= width; empty when lo > hi.

    g(s_k) = (t - s_k) - |y - x_j(s_k)| is strictly decreasing in k.
    """
    if _g(t, dt, n, y, xs, j) > width:
        return 1, 0
    if _g(t, dt, 0, y, xs, j) < -width:
        return 1, 0
    # first k with g <= width
    if _g(t, dt, 0, y, xs, j) <= width:
        lo = 0
    else:
        a, b = 0, n  # g(a) > width, g(b) <= width
        while b - a > 1:
            c = (a + b) // 2
            if _g(t, dt, c, y, xs, j) <= width:
                b = c
            else:
                a = c
        lo = b
    # last k with g >= -width
    if _g(t, dt, n, y, xs, j) >= -width:
        hi = n
    else:
        a, b = 0, n  # g(a) >= -width, g(b) < -width
        while b - a > 1:
            c = (a + b) // 2
            if _g(t, dt, c, y, xs, j) >= -width:
                a = c
            else:
                b = c
        hi = a
    return lo, hi


@njit(cache=True, inline="always")
def _accum(prof, meta, tau, y, src, vj, wq, acc):
    """Add wq-weighted (grad Y + v dY/dt, v x grad Y, Y, v Y) into acc[0:10]."""
    d0 = y[0] - src[0]
    d1 = y[1] - src[1]
    d2 = y[2] - src[2]
    r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if abs(r - tau) >= meta[1]:
        return
    Y, Yt, Yr = kernel_eval(prof, meta, tau, r)
    if r > 0.0:
        s = wq * Yr / r
        g0 = s * d0
        g1 = s * d1
        g2 = s * d2
    else:
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
    yt = wq * Yt
    acc[0] += g0 + vj[0] * yt
    acc[1] += g1 + vj[1] * yt
    acc[2] += g2 + vj[2] * yt
    acc[3] += vj[1] * g2 - vj[2] * g1
    acc[4] += vj[2] * g0 - vj[0] * g2
    acc[5] += vj[0] * g1 - vj[1] * g0
    yw = wq * Y
    acc[6] += yw
    acc[7] += vj[0] * yw
    acc[8] += vj[1] * yw
    acc[9] += vj[2] * yw


@njit(cache=True)
def _pair_memory(prof, meta, t, dt, n, c, y, xs, vs, xp, vp, j, windowed, acc):
    """Memory integral of one source over [0, t_n + c*dt] into acc.

    Nodes 0..n use the Gregory rule; the partial interval [t_n, t]
    uses Simpson with source states xp/vp at its midpoint and end.
    """
    S = meta[1]
    if windowed:
        lo, hi = window(t, dt, n, y, xs, j, S + WINDOW_MARGIN)
    else:
        lo, hi = 0, n
    for k in range(lo, hi + 1):
        wq = gregory(k, n) * dt
        if wq != 0.0:
            _accum(prof, meta, t - k * dt, y, xs[j, k], vs[j, k], wq, acc)
    if c > 0.0:
        L = c * dt
        _accum(prof, meta, t - n * dt, y, xs[j, n], vs[j, n], L / 6.0, acc)
        _accum(prof, meta, 0.5 * L, y, xp[j, 0], vp[j, 0], 4.0 * L / 6.0, acc)
        _accum(prof, meta, 0.0, y, xp[j, 1], vp[j, 1], L / 6.0, acc)


@njit(cache=True, parallel=True)
def forces(prof, meta, t, dt, n, c, xs, vs, xp, vp, x0, w, ty, tv,
           skip, windowed):
    """Lorentz force on each target from all sources.

    xs, vs: (N, K, 3) node positions and velocities of the sources.
    xp, vp: (N, 2, 3) source states at t_n + c*dt/2 and t_n + c*dt.
    ty, tv: (M, 3) target positions and velocities at time t.
    Source skip[i] (if >= 0) is left out of the sum for target i.
    """
    M = ty.shape[0]
    N = xs.shape[0]
    out = np.zeros((M, 3))
    for i in prange(M):
        acc = np.zeros(10)
        E = np.zeros(3)
        Bm = np.zeros(3)
        y = ty[i]
        for j in range(N):
            if j == skip[i]:
                continue
            wj = w[j]
            d0 = y[0] - x0[j, 0]
            d1 = y[1] - x0[j, 1]
            d2 = y[2] - x0[j, 2]
            r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            _, mr = layer_eval(prof, meta, t, r)
            if r > 0.0:
                s = -wj * mr / r
                E[0] += s * d0
                E[1] += s * d1
                E[2] += s * d2
            for q in range(10):
                acc[q] = 0.0
            _pair_memory(prof, meta, t, dt, n, c, y, xs, vs, xp, vp, j,
                         windowed, acc)
            E[0] -= wj * acc[0]
            E[1] -= wj * acc[1]
            E[2] -= wj * acc[2]
            Bm[0] -= wj * acc[3]
            Bm[1] -= wj * acc[4]
            Bm[2] -= wj * acc[5]
        v = tv[i]
        out[i, 0] = E[0] + v[1] * Bm[2] - v[2] * Bm[1]
        out[i, 1] = E[1] + v[2] * Bm[0] - v[0] * Bm[2]
        out[i, 2] = E[2] + v[0] * Bm[1] - v[1] * Bm[0]
    return out


@njit(cache=True, parallel=True)
def fields(prof, meta, t, dt, n, c, xs, vs, xp, vp, x0, w, pts, windowed):
    """E, B, phi, A at the given points; returns an (M, 10) array."""
    M = pts.shape[0]
    N = xs.shape[0]
    out = np.zeros((M, 10))
    for i in prange(M):
        acc = np.zeros(10)
        y = pts[i]
        for j in range(N):
            wj = w[j]
            d0 = y[0] - x0[j, 0]
            d1 = y[1] - x0[j, 1]
            d2 = y[2] - x0[j, 2]
            r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            m, mr = layer_eval(prof, meta, t, r)
            if r > 0.0:
                s = -wj * mr / r
                out[i, 0] += s * d0
                out[i, 1] += s * d1
                out[i, 2] += s * d2
            out[i, 6] += wj * m
            for q in range(10):
                acc[q] = 0.0
            _pair_memory(prof, meta, t, dt, n, c, y, xs, vs, xp, vp, j,
                         windowed, acc)
            for q in range(3):
                out[i, q] -= wj * acc[q]
                out[i, 3 + q] -= wj * acc[3 + q]
                out[i, 7 + q] += wj * acc[7 + q]
            out[i, 6] += wj * acc[6]
    return out


@njit(cache=True, parallel=True)
def fields_refined(prof, meta, t, dt, n, xs, vs, fs, x0, w, pts, gx, gw):
    """Like `fields` at a node time t = n*dt, but each history interval is
    integrated with the Gauss rule (gx, gw on [0, 1]) applied to the cubic
    Hermite interpolant of the source trajectory."""
    M = pts.shape[0]
    N = xs.shape[0]
    q = gx.shape[0]
    S = meta[1]
    out = np.zeros((M, 10))
    for i in prange(M):
        acc = np.zeros(10)
        src = np.zeros(3)
        vj = np.zeros(3)
        y = pts[i]
        for j in range(N):
            wj = w[j]
            d0 = y[0] - x0[j, 0]
            d1 = y[1] - x0[j, 1]
            d2 = y[2] - x0[j, 2]
            r = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            m, mr = layer_eval(prof, meta, t, r)
            if r > 0.0:
                s = -wj * mr / r
                out[i, 0] += s * d0
                out[i, 1] += s * d1
                out[i, 2] += s * d2
            out[i, 6] += wj * m
            if n == 0:
                continue
            for a in range(10):
                acc[a] = 0.0
            lo, hi = window(t, dt, n, y, xs, j, S + WINDOW_MARGIN + dt)
            k0 = max(lo - 1, 0)
            k1 = min(hi, n - 1)
            for k in range(k0, k1 + 1):
                for g in range(q):
                    th = gx[g]
                    th2 = th * th
                    th3 = th2 * th
                    h00 = 2.0 * th3 - 3.0 * th2 + 1.0
                    h10 = (th3 - 2.0 * th2 + th) * dt
                    h01 = -2.0 * th3 + 3.0 * th2
                    h11 = (th3 - th2) * dt
                    p0 = 0.0
                    p1 = 0.0
                    p2 = 0.0
                    for a in range(3):
                        src[a] = (h00 * xs[j, k, a] + h10 * vs[j, k, a]
                                  + h01 * xs[j, k + 1, a] + h11 * vs[j, k + 1, a])
                    # fs holds (xi, F) interleaved: fs[j, k, 0:3]=xi, 3:6=F
                    for a in range(3):
                        val = (h00 * fs[j, k, a] + h10 * fs[j, k, 3 + a]
                               + h01 * fs[j, k + 1, a] + h11 * fs[j, k + 1, 3 + a])
                        if a == 0:
                            p0 = val
                        elif a == 1:
                            p1 = val
                        else:
                            p2 = val
                    ee = np.sqrt(1.0 + p0 * p0 + p1 * p1 + p2 * p2)
                    vj[0] = p0 / ee
                    vj[1] = p1 / ee
                    vj[2] = p2 / ee
                    s_time = (k + th) * dt
                    _accum(prof, meta, t - s_time, y, src, vj, gw[g] * dt, acc)
            for a in range(3):
                out[i, a] -= wj * acc[a]
                out[i, 3 + a] -= wj * acc[3 + a]
                out[i, 7 + a] += wj * acc[7 + a]
            out[i, 6] += wj * acc[6]
    return out
