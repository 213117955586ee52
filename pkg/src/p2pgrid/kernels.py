"""Hot numeric kernels.

Each kernel has a loop form (compiled with numba unless
``P2PGRID_DISABLE_NUMBA`` is set) and a vectorised numpy form. ``fbs`` and
``clear_kkt`` pick the loop form when numba is active and the numpy form
otherwise; both forms stay importable so they can be checked against each
other and benchmarked.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, maybe_njit

# decision columns returned by the best-response kernels
L_, G_, R_, CH_, DCH_ = range(5)
N_DEC = 5


# -- forward/backward sweep ---------------------------------------------------

@maybe_njit
def fbs_loops(order, parent_line, line_from, r, x, p_d, q_d, v0, tol, max_iter):
    """Branch-flow (DistFlow) power flow by forward/backward sweep.

    ``p_d``/``q_d`` are per-bus net demands in p.u. (load minus any fixed
    injection), ``v0`` the slack squared voltage. Returns squared voltages,
    sending-end line flows, squared currents, the slack injections and the
    iteration count (``-1`` when ``max_iter`` was hit).
    """
    n = p_d.shape[0]
    m = r.shape[0]
    v = np.full(n, v0)
    P = np.zeros(m)
    Q = np.zeros(m)
    c = np.zeros(m)
    acc_p = np.zeros(n)
    acc_q = np.zeros(n)
    root = order[0]
    iters = -1
    for it in range(max_iter):
        for i in range(n):
            acc_p[i] = p_d[i]
            acc_q[i] = q_d[i]
        for j in range(n - 1, 0, -1):
            b = order[j]
            k = parent_line[b]
            P[k] = acc_p[b] + r[k] * c[k]
            Q[k] = acc_q[b] + x[k] * c[k]
            f = line_from[k]
            acc_p[f] += P[k]
            acc_q[f] += Q[k]
        for k in range(m):
            c[k] = (P[k] * P[k] + Q[k] * Q[k]) / v[line_from[k]]
        diff = 0.0
        for j in range(1, n):
            b = order[j]
            k = parent_line[b]
            f = line_from[k]
            new = v[f] - 2.0 * (r[k] * P[k] + x[k] * Q[k]) + (r[k] * r[k] + x[k] * x[k]) * c[k]
            d = abs(new - v[b])
            if d > diff:
                diff = d
            v[b] = new
        if diff < tol:
            iters = it + 1
            break
    # consistent final currents/flows for the returned voltages
    for k in range(m):
        c[k] = (P[k] * P[k] + Q[k] * Q[k]) / v[line_from[k]]
    return v, P, Q, c, acc_p[root], acc_q[root], iters


def path_matrix(parent_line, line_from, line_to, n):
    """A[b, k] = 1 when line k lies on the path from the root to bus b."""
    m = line_from.shape[0]
    A = np.zeros((n, m))
    for b in range(n):
        k = parent_line[b]
        while k >= 0:
            A[b, k] = 1.0
            k = parent_line[line_from[k]]
    return A


def fbs_numpy(A, line_from, line_to, r, x, p_d, q_d, v0, tol, max_iter):
    """Vectorised counterpart of :func:`fbs_loops` built on the path matrix."""
    n, m = A.shape
    down = A.T  # down[k, b]: bus b is downstream of line k
    down_lines = A[line_to, :].T  # down_lines[k, j]: line j at or below line k
    z2 = r * r + x * x
    v = np.full(n, float(v0))
    c = np.zeros(m)
    iters = -1
    P = down @ p_d
    Q = down @ q_d
    # a diverging sweep overflows; the caller sees iters == -1
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(max_iter):
            P = down @ p_d + down_lines @ (r * c)
            Q = down @ q_d + down_lines @ (x * c)
            c = (P * P + Q * Q) / v[line_from]
            new = v0 - A @ (2.0 * (r * P + x * Q) - z2 * c)
            diff = np.max(np.abs(new - v)) if n > 0 else 0.0
            v = new
            if diff < tol:
                iters = it + 1
                break
        c = (P * P + Q * Q) / v[line_from]
    root = int(np.flatnonzero(A.sum(axis=1) == 0)[0])
    out_of_root = line_from == root
    p0 = p_d[root] + P[out_of_root].sum()
    q0 = q_d[root] + Q[out_of_root].sum()
    return v, P, Q, c, p0, q0, iters


# -- microgrid best response ---------------------------------------------------

@maybe_njit
def best_response_loops(price, alpha, beta, a, b, gmax, lmin, lmax, ren,
                        pmax, soc, soc_min, soc_max, eta_c, eta_d, lam_d, dt, out):
    """Closed-form maximiser of the separable hourly payoff for every MG.

    The payoff is linear in net power with slope ``price`` so each device
    solves its own one-dimensional concave problem. Writes (L, G, R, ch, dch)
    rows into ``out``.
    """
    for i in range(alpha.shape[0]):
        L = (alpha[i] - price) / (2.0 * beta[i])
        out[i, 0] = min(max(L, lmin[i]), lmax[i])
        if a[i] > 0.0:
            G = (price - b[i]) / (2.0 * a[i])
            out[i, 1] = min(max(G, 0.0), gmax[i])
        else:
            out[i, 1] = gmax[i] if price > b[i] else 0.0
        out[i, 2] = ren[i] if price >= 0.0 else 0.0
        out[i, 3] = 0.0
        out[i, 4] = 0.0
        if price > lam_d[i]:
            room = (soc[i] - soc_min[i]) * eta_d[i] / dt
            out[i, 4] = min(pmax[i], max(room, 0.0))
        elif price < -lam_d[i]:
            room = (soc_max[i] - soc[i]) / (eta_c[i] * dt)
            out[i, 3] = min(pmax[i], max(room, 0.0))


def best_response_numpy(price, alpha, beta, a, b, gmax, lmin, lmax, ren,
                        pmax, soc, soc_min, soc_max, eta_c, eta_d, lam_d, dt, out):
    out[:, 0] = np.clip((alpha - price) / (2.0 * beta), lmin, lmax)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        g_int = np.clip((price - b) / (2.0 * np.where(a > 0, a, 1.0)), 0.0, gmax)
    out[:, 1] = np.where(a > 0, g_int, np.where(price > b, gmax, 0.0))
    out[:, 2] = ren if price >= 0.0 else 0.0
    dch_room = np.minimum(pmax, np.maximum((soc - soc_min) * eta_d / dt, 0.0))
    ch_room = np.minimum(pmax, np.maximum((soc_max - soc) / (eta_c * dt), 0.0))
    out[:, 3] = np.where(price < -lam_d, ch_room, 0.0)
    out[:, 4] = np.where(price > lam_d, dch_room, 0.0)


@maybe_njit
def clear_kkt_loops(pi0, xi, eps, kmax, alpha, beta, a, b, gmax, lmin, lmax, ren,
                    pmax, soc, soc_min, soc_max, eta_c, eta_d, lam_d, dt):
    """Price-adjustment loop with closed-form MG responses.

    Returns (prices, supply, demand, n_iter, converged, decisions); the first
    ``n_iter`` entries of the trajectories are valid and ``decisions`` holds
    the responses at the last evaluated price.
    """
    m = alpha.shape[0]
    prices = np.zeros(kmax)
    supply = np.zeros(kmax)
    demand = np.zeros(kmax)
    dec = np.zeros((m, 5))
    pi = pi0
    converged = False
    n_iter = 0
    for k in range(kmax):
        best_response_loops(pi, alpha, beta, a, b, gmax, lmin, lmax, ren,
                            pmax, soc, soc_min, soc_max, eta_c, eta_d, lam_d, dt, dec)
        s = 0.0
        d = 0.0
        for i in range(m):
            p = dec[i, 1] + dec[i, 2] + dec[i, 4] - dec[i, 0] - dec[i, 3]
            if p > 0.0:
                s += p
            else:
                d -= p
        prices[k] = pi
        supply[k] = s
        demand[k] = d
        n_iter = k + 1
        if abs(d - s) < eps:
            converged = True
            break
        pi = max(0.0, pi + xi * (d - s))
    return prices, supply, demand, n_iter, converged, dec


def clear_kkt_numpy(pi0, xi, eps, kmax, alpha, beta, a, b, gmax, lmin, lmax, ren,
                    pmax, soc, soc_min, soc_max, eta_c, eta_d, lam_d, dt):
    m = alpha.shape[0]
    prices = np.zeros(kmax)
    supply = np.zeros(kmax)
    demand = np.zeros(kmax)
    dec = np.zeros((m, 5))
    pi = pi0
    converged = False
    n_iter = 0
    for k in range(kmax):
        best_response_numpy(pi, alpha, beta, a, b, gmax, lmin, lmax, ren,
                            pmax, soc, soc_min, soc_max, eta_c, eta_d, lam_d, dt, dec)
        p = dec[:, 1] + dec[:, 2] + dec[:, 4] - dec[:, 0] - dec[:, 3]
        s = p[p > 0].sum()
        d = -p[p < 0].sum()
        prices[k], supply[k], demand[k] = pi, s, d
        n_iter = k + 1
        if abs(d - s) < eps:
            converged = True
            break
        pi = max(0.0, pi + xi * (d - s))
    return prices, supply, demand, n_iter, converged, dec


# -- surrogate own-injection slopes ----------------------------------------------

@maybe_njit
def _ln_tangent(h, th, g, b, eps):
    """Layer norm of (N, D) rows and its push-forward of tangents (M, N, D)."""
    n, d = h.shape
    out = np.empty_like(h)
    tout = np.empty_like(th)
    for i in range(n):
        mu = 0.0
        for k in range(d):
            mu += h[i, k]
        mu /= d
        var = 0.0
        for k in range(d):
            var += (h[i, k] - mu) ** 2
        inv = 1.0 / math.sqrt(var / d + eps)
        for k in range(d):
            out[i, k] = (h[i, k] - mu) * inv * g[k] + b[k]
        for j in range(th.shape[0]):
            tm = 0.0
            tx = 0.0
            for k in range(d):
                tm += th[j, i, k]
                tx += th[j, i, k] * (h[i, k] - mu) * inv
            tm /= d
            tx /= d
            for k in range(d):
                xhat = (h[i, k] - mu) * inv
                tout[j, i, k] = inv * (th[j, i, k] - tm - xhat * tx) * g[k]
    return out, tout


@maybe_njit
def encoder_slopes_loops(xn, idx, eW, eb, ln1g, ln1b, Wq, Wk, Wv, Wo, ln2g, ln2b,
                         W1, b1, W2, b2, hW, hb, n_heads, eps):
    """Normalised prediction per bus and d y[idx[j]] / d xn[idx[j], 0].

    Forward-mode: one tangent per requested bus rides along the primal pass.
    Weights are stacked over layers in ``out x in`` layout.
    """
    n = xn.shape[0]
    m = idx.shape[0]
    d = eb.shape[0]
    dk = d // n_heads
    scale = 1.0 / math.sqrt(dk)
    h = xn @ eW.T + eb
    th = np.zeros((m, n, d))
    for j in range(m):
        th[j, idx[j], :] = eW[:, 0]
    for L in range(Wq.shape[0]):
        a, ta = _ln_tangent(h, th, ln1g[L], ln1b[L], eps)
        ta2 = ta.reshape(m * n, d)
        q = a @ Wq[L].T
        k = a @ Wk[L].T
        v = a @ Wv[L].T
        tq = (ta2 @ Wq[L].T).reshape(m, n, d)
        tk = (ta2 @ Wk[L].T).reshape(m, n, d)
        tv = (ta2 @ Wv[L].T).reshape(m, n, d)
        o = np.zeros((n, d))
        to = np.zeros((m, n, d))
        for hd in range(n_heads):
            c0 = hd * dk
            qh = np.ascontiguousarray(q[:, c0:c0 + dk])
            kh = np.ascontiguousarray(k[:, c0:c0 + dk])
            vh = np.ascontiguousarray(v[:, c0:c0 + dk])
            s = (qh @ kh.T) * scale
            A = np.empty((n, n))
            for i in range(n):
                mx = s[i].max()
                tot = 0.0
                for r in range(n):
                    A[i, r] = math.exp(s[i, r] - mx)
                    tot += A[i, r]
                for r in range(n):
                    A[i, r] /= tot
            o[:, c0:c0 + dk] = A @ vh
            # all tangents at once: rows j*n + i
            TQ = np.ascontiguousarray(tq[:, :, c0:c0 + dk]).reshape(m * n, dk)
            TK = np.ascontiguousarray(tk[:, :, c0:c0 + dk]).reshape(m * n, dk)
            TV = np.empty((n, m * dk))
            for j in range(m):
                TV[:, j * dk:(j + 1) * dk] = tv[j, :, c0:c0 + dk]
            S1 = TQ @ kh.T
            S2 = TK @ qh.T
            TA = np.empty((m * n, n))
            for j in range(m):
                for i in range(n):
                    w = 0.0
                    for r in range(n):
                        t_ir = (S1[j * n + i, r] + S2[j * n + r, i]) * scale
                        TA[j * n + i, r] = t_ir
                        w += A[i, r] * t_ir
                    for r in range(n):
                        TA[j * n + i, r] = A[i, r] * (TA[j * n + i, r] - w)
            T1 = TA @ vh
            T2 = A @ TV
            for j in range(m):
                to[j, :, c0:c0 + dk] = T1[j * n:(j + 1) * n] + T2[:, j * dk:(j + 1) * dk]
        h1 = h + o @ Wo[L].T
        th1 = th + (to.reshape(m * n, d) @ Wo[L].T).reshape(m, n, d)
        c, tc = _ln_tangent(h1, th1, ln2g[L], ln2b[L], eps)
        u = c @ W1[L].T + b1[L]
        tu = (tc.reshape(m * n, d) @ W1[L].T).reshape(m, n, u.shape[1])
        gu = np.empty_like(u)
        for i in range(n):
            for r in range(u.shape[1]):
                x = u[i, r]
                cdf = 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
                gu[i, r] = x * cdf
                dg = cdf + x * math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
                for j in range(m):
                    tu[j, i, r] *= dg
        h = h1 + gu @ W2[L].T + b2[L]
        th = th1 + (tu.reshape(m * n, u.shape[1]) @ W2[L].T).reshape(m, n, d)
    y = h @ hW + hb
    t = np.empty(m)
    for j in range(m):
        t[j] = th[j, idx[j]] @ hW
    return y, t


def fbs(order, parent_line, line_from, line_to, r, x, p_d, q_d, v0,
        tol=1e-12, max_iter=500, A=None):
    if USE_NUMBA:
        return fbs_loops(order, parent_line, line_from, r, x, p_d, q_d,
                         float(v0), float(tol), int(max_iter))
    if A is None:
        A = path_matrix(parent_line, line_from, line_to, p_d.shape[0])
    return fbs_numpy(A, line_from, line_to, r, x, p_d, q_d, float(v0), float(tol), int(max_iter))


def clear_kkt(*args):
    return (clear_kkt_loops if USE_NUMBA else clear_kkt_numpy)(*args)


def best_response(*args):
    return (best_response_loops if USE_NUMBA else best_response_numpy)(*args)
