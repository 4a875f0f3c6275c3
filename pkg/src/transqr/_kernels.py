"""Compiled inner loops for the ADMM quantile solver and the lasso."""

import numpy as np
from numba import njit


@njit(cache=True)
def _cd_gram(G, b, pen, rho, beta, Gb, tol, max_sweeps):
    # argmin_beta (rho/2) beta'G beta - rho b'beta + sum_j pen_j |beta_j|,
    # warm-started; Gb tracks G @ beta.
    p = beta.shape[0]
    for _ in range(max_sweeps):
        maxd = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            a = b[j] - Gb[j] + gjj * old
            t = pen[j] / rho
            if a > t:
                new = (a - t) / gjj
            elif a < -t:
                new = (a + t) / gjj
            else:
                new = 0.0
            d = new - old
            if d != 0.0:
                beta[j] = new
                for k in range(p):
                    Gb[k] += G[k, j] * d
                ad = abs(d) * np.sqrt(gjj)
                if ad > maxd:
                    maxd = ad
        if maxd < tol:
            break


@njit(cache=True)
def admm_chunk(X, G, Xty, y, pen, tau, beta, Gb, z, u, state, trace, start,
               n_iter, tol, alpha):
    """Run up to ``n_iter`` over-relaxed ADMM iterations in place.

    Splitting: min sum rho_tau(z) + sum pen_j |beta_j|  s.t.  X beta + z = y.
    ``state`` = [rho, stall_count, last_objective]. Objectives of the raw
    iterates go to ``trace[start:]``. Returns (iterations run, flag) with
    flag 1 = primal/dual residuals below tol, 2 = objective stagnation.
    """
    n, p = X.shape
    rho = state[0]
    stall = state[1]
    last = state[2]
    flag = 0
    k = 0
    xb = np.empty(n)
    while k < n_iter:
        b = Xty - X.T @ (z + u)
        _cd_gram(G, b, pen, rho, beta, Gb, 1e-3 * tol, 200)
        xb[:] = X @ beta
        hi = tau / rho
        lo = -(1.0 - tau) / rho
        rn = 0.0
        zdiff = np.empty(n)
        obj = 0.0
        for i in range(n):
            axh = alpha * xb[i] + (1.0 - alpha) * (y[i] - z[i])
            v = y[i] - axh - u[i]
            if v > hi:
                znew = v - hi
            elif v < lo:
                znew = v - lo
            else:
                znew = 0.0
            zdiff[i] = znew - z[i]
            z[i] = znew
            u[i] += axh + znew - y[i]
            r = abs(xb[i] + znew - y[i])
            if r > rn:
                rn = r
            e = y[i] - xb[i]
            if e > 0.0:
                obj += tau * e
            else:
                obj += (tau - 1.0) * e
        for j in range(p):
            obj += pen[j] * abs(beta[j])
        trace[start + k] = obj
        k += 1
        s = X.T @ zdiff
        sn = rho * np.max(np.abs(s)) if p > 0 else 0.0
        scale = 1.0
        for i in range(n):
            if abs(xb[i]) > scale:
                scale = abs(xb[i])
            if abs(z[i]) > scale:
                scale = abs(z[i])
        if rn <= tol * scale and sn <= tol * max(1.0, np.max(np.abs(Xty))):
            flag = 1
            break
        # stagnation only counts once the splitting is nearly feasible; a flat
        # objective while beta sits at zero is not convergence
        if abs(obj - last) <= tol and rn <= np.sqrt(tol) * scale:
            stall += 1
        else:
            stall = 0
        last = obj
        if stall >= 10:
            flag = 2
            break
        if k % 10 == 0:
            # residual balancing; the scaled dual u rescales with rho
            rn2 = 0.0
            for i in range(n):
                rr = xb[i] + z[i] - y[i]
                rn2 += rr * rr
            sn2 = rho * np.sqrt(np.sum(s * s))
            rn2 = np.sqrt(rn2)
            if rn2 > 10.0 * sn2:
                rho *= 2.0
                for i in range(n):
                    u[i] *= 0.5
            elif sn2 > 10.0 * rn2:
                rho *= 0.5
                for i in range(n):
                    u[i] *= 2.0
    state[0] = rho
    state[1] = stall
    state[2] = last
    return k, flag


@njit(cache=True)
def cd_lasso(D, r, lam, theta, tol, max_sweeps):
    """Cyclic coordinate descent for sum (r - D theta)^2 + lam * ||theta||_1.

    ``theta`` is updated in place (warm start). Returns sweeps used.
    """
    n, p = D.shape
    res = r - D @ theta
    sq = np.empty(p)
    for j in range(p):
        sq[j] = np.sum(D[:, j] * D[:, j])
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        maxd = 0.0
        for j in range(p):
            if sq[j] <= 0.0:
                theta[j] = 0.0
                continue
            old = theta[j]
            a = 0.0
            for i in range(n):
                a += D[i, j] * res[i]
            a = 2.0 * (a + sq[j] * old)
            if a > lam:
                new = (a - lam) / (2.0 * sq[j])
            elif a < -lam:
                new = (a + lam) / (2.0 * sq[j])
            else:
                new = 0.0
            d = new - old
            if d != 0.0:
                theta[j] = new
                for i in range(n):
                    res[i] -= D[i, j] * d
                ad = abs(d) * np.sqrt(sq[j])
                if ad > maxd:
                    maxd = ad
        if maxd < tol:
            break
    return sweeps
