"""Compiled kernels for projecting onto chain-constrained grids.

The feasible set for one grid ``x[0..n-1]`` is described by local rows
``coef . x[start:start+width] >= rhs`` (slopes, curvatures, end levels) plus
an optional equality ``sum(x) = 0``. Rows are stored sorted by ``start`` so
that the Gram matrix of any active subset is banded.

The solver is the dual active-set method of Goldfarb and Idnani, started
from the pool-adjacent-violators solution of the lower-slope-only problem.
Each iteration refactors the (small-bandwidth) Gram matrix from scratch.
"""

import numpy as np
from numba import njit

ROW_SLOPE_LO = 0
ROW_SLOPE_HI = 1
ROW_CURV_HI = 2
ROW_CURV_LO = 3
ROW_LEVEL_LO = 4
ROW_LEVEL_HI = 5


def build_rows(n, slope_lo, slope_hi, curv, level):
    """Constraint rows for ``n`` points with raw (unscaled) bounds.

    ``slope_hi``, ``curv`` and ``level`` may be ``inf`` to drop the rows.
    """
    starts, widths, kinds, rhs = [], [], [], []
    coefs = []

    def add(s, w, k, c, r):
        starts.append(s)
        widths.append(w)
        kinds.append(k)
        coefs.append(c + (0.0,) * (3 - len(c)))
        rhs.append(r)

    if np.isfinite(level) and n >= 1:
        add(0, 1, ROW_LEVEL_LO, (1.0,), -level)
    for i in range(n - 1):
        add(i, 2, ROW_SLOPE_LO, (-1.0, 1.0), slope_lo)
        if np.isfinite(slope_hi):
            add(i, 2, ROW_SLOPE_HI, (1.0, -1.0), -slope_hi)
        if np.isfinite(curv) and i < n - 2:
            add(i, 3, ROW_CURV_HI, (-1.0, 2.0, -1.0), -curv)
            add(i, 3, ROW_CURV_LO, (1.0, -2.0, 1.0), -curv)
    if np.isfinite(level) and n >= 1:
        add(n - 1, 1, ROW_LEVEL_HI, (-1.0,), -level)
    return (
        np.asarray(starts, dtype=np.int64).reshape(-1),
        np.asarray(widths, dtype=np.int64).reshape(-1),
        np.asarray(kinds, dtype=np.int64).reshape(-1),
        np.asarray(coefs, dtype=np.float64).reshape(-1, 3),
        np.asarray(rhs, dtype=np.float64).reshape(-1),
    )


@njit(cache=True)
def pava(y, w):
    """Weighted isotonic (nondecreasing) regression; weights must be positive."""
    n = y.shape[0]
    val = np.empty(n)
    wt = np.empty(n)
    size = np.empty(n, dtype=np.int64)
    nb = 0
    for i in range(n):
        val[nb] = y[i]
        wt[nb] = w[i]
        size[nb] = 1
        nb += 1
        while nb > 1 and val[nb - 2] >= val[nb - 1]:
            tw = wt[nb - 2] + wt[nb - 1]
            val[nb - 2] = (wt[nb - 2] * val[nb - 2] + wt[nb - 1] * val[nb - 1]) / tw
            wt[nb - 2] = tw
            size[nb - 2] += size[nb - 1]
            nb -= 1
    out = np.empty(n)
    pos = 0
    for b in range(nb):
        for _ in range(size[b]):
            out[pos] = val[b]
            pos += 1
    return out


@njit(cache=True)
def _row_dot(k, starts, widths, coefs, v):
    s = 0.0
    for q in range(widths[k]):
        s += coefs[k, q] * v[starts[k] + q]
    return s


@njit(cache=True)
def _row_gram(j, k, starts, widths, coefs, winv):
    # <n_j, D^{-1} n_k> for two local rows
    lo = max(starts[j], starts[k])
    hi = min(starts[j] + widths[j], starts[k] + widths[k])
    s = 0.0
    for x in range(lo, hi):
        s += coefs[j, x - starts[j]] * coefs[k, x - starts[k]] * winv[x]
    return s


@njit(cache=True)
def _row_sum(k, widths, starts, coefs, winv):
    s = 0.0
    for q in range(widths[k]):
        s += coefs[k, q] * winv[starts[k] + q]
    return s


@njit(cache=True)
def _band_factor(idx, na, starts, widths, coefs, winv, reject):
    """Banded Cholesky of the Gram matrix of the local rows ``idx[:na]``.

    With ``reject``, rows (numerically) dependent on earlier accepted rows are
    removed from ``idx`` in place. Returns ``(L, p, n_accepted, ok)`` with
    ``L[j, d] = chol[j, j - d]``.
    """
    p = 0
    for a in range(na):
        end_a = starts[idx[a]] + widths[idx[a]]
        b = a + 1
        while b < na and starts[idx[b]] < end_a:
            b += 1
        if b - 1 - a > p:
            p = b - 1 - a
    L = np.zeros((max(na, 1), p + 1))
    ok = True
    j = 0
    for c in range(na):
        idx[j] = idx[c]
        good = True
        for d in range(min(p, j), -1, -1):
            i = j - d
            s = _row_gram(idx[i], idx[j], starts, widths, coefs, winv)
            for e in range(1, p + 1 - d):
                m = i - e
                if m < 0:
                    break
                s -= L[i, e] * L[j, j - m]
            if d == 0:
                if s <= 1e-12 * _row_gram(idx[j], idx[j], starts, widths, coefs, winv):
                    good = False
                    s = 1e-300
                L[j, 0] = np.sqrt(s)
            else:
                L[j, d] = s / L[i, 0]
        if good:
            j += 1
        elif not reject:
            ok = False
            j += 1
        else:
            for d in range(p + 1):
                L[j, d] = 0.0
    return L, p, j, ok


@njit(cache=True)
def _band_solve(L, p, na, rhs):
    y = rhs.copy()
    for j in range(na):
        s = y[j]
        for d in range(1, min(p, j) + 1):
            s -= L[j, d] * y[j - d]
        y[j] = s / L[j, 0]
    for j in range(na - 1, -1, -1):
        s = y[j]
        for d in range(1, min(p, na - 1 - j) + 1):
            s -= L[j + d, d] * y[j + d]
        y[j] = s / L[j, 0]
    return y


@njit(cache=True)
def _active_solve(L, p, na, idx, has_eq, b, beta, r_loc, r_eq):
    """Solve the bordered system [[G, b], [b', beta]] [y; eta] = [r_loc; r_eq]."""
    if not has_eq:
        return _band_solve(L, p, na, r_loc), 0.0
    g1 = _band_solve(L, p, na, r_loc)
    g2 = _band_solve(L, p, na, b)
    denom = beta
    num = r_eq
    for a in range(na):
        denom -= b[a] * g2[a]
        num -= b[a] * g1[a]
    eta = num / denom
    y = g1 - eta * g2
    return y, eta


@njit(cache=True)
def gi_project(t, w, starts, widths, coefs, rhs, has_eq, x0, act0, u0, nu0, tol, max_iter):
    """Goldfarb-Idnani projection of ``t`` onto the chain-constrained set.

    ``(x0, act0, u0, nu0)`` must be optimal for the equality-constrained
    problem on the initial active set, with ``u0 >= 0``.

    Returns ``(x, active, u, nu, status)``; status 0 = optimal, 1 = infeasible,
    2 = iteration limit.
    """
    n = t.shape[0]
    m = starts.shape[0]
    winv = 1.0 / w
    x = x0.copy()
    act = act0.copy()
    u = u0.copy()
    nu = nu0
    beta = 0.0
    for q in range(n):
        beta += winv[q]
    idx = np.empty(m, dtype=np.int64)
    slack = np.empty(m)
    it = 0
    while True:
        # most violated inactive row, scaled by the row norm
        worst = -tol
        pick = -1
        for k in range(m):
            if act[k]:
                continue
            s = _row_dot(k, starts, widths, coefs, x) - rhs[k]
            nrm = 0.0
            for q in range(widths[k]):
                nrm += coefs[k, q] * coefs[k, q]
            s = s / np.sqrt(nrm)
            slack[k] = s
            if s < worst:
                worst = s
                pick = k
        if pick < 0:
            return x, act, u, nu, 0
        u[pick] = 0.0
        while True:
            it += 1
            if it > max_iter:
                return x, act, u, nu, 2
            na = 0
            for k in range(m):
                if act[k]:
                    idx[na] = k
                    na += 1
            L, p, na, ok = _band_factor(idx, na, starts, widths, coefs, winv, False)
            # N_A' D^{-1} n_p
            rl = np.zeros(max(na, 1))
            bvec = np.zeros(max(na, 1))
            for a in range(na):
                rl[a] = _row_gram(idx[a], pick, starts, widths, coefs, winv)
                if has_eq:
                    bvec[a] = _row_sum(idx[a], widths, starts, coefs, winv)
            req = _row_sum(pick, widths, starts, coefs, winv) if has_eq else 0.0
            if na > 0:
                r, r_eq = _active_solve(L, p, na, idx, has_eq, bvec, beta, rl, req)
            else:
                r = np.zeros(1)
                r_eq = req / beta if has_eq else 0.0
            # z = D^{-1} (n_p - N_A r - 1 r_eq)
            z = np.zeros(n)
            for q in range(widths[pick]):
                z[starts[pick] + q] += coefs[pick, q]
            for a in range(na):
                k = idx[a]
                for q in range(widths[k]):
                    z[starts[k] + q] -= coefs[k, q] * r[a]
            if has_eq:
                for q in range(n):
                    z[q] -= r_eq
            for q in range(n):
                z[q] *= winv[q]
            zn = _row_dot(pick, starts, widths, coefs, z)
            npn = _row_gram(pick, pick, starts, widths, coefs, winv)
            t1 = np.inf
            block = -1
            for a in range(na):
                if r[a] > 0.0:
                    ratio = u[idx[a]] / r[a]
                    if ratio < t1:
                        t1 = ratio
                        block = idx[a]
            s_p = _row_dot(pick, starts, widths, coefs, x) - rhs[pick]
            if zn <= 1e-12 * npn:
                if block < 0:
                    return x, act, u, nu, 1
                for a in range(na):
                    u[idx[a]] -= t1 * r[a]
                nu -= t1 * r_eq
                u[pick] += t1
                u[block] = 0.0
                act[block] = False
                continue
            t2 = -s_p / zn
            step = t2 if t2 <= t1 else t1
            for q in range(n):
                x[q] += step * z[q]
            for a in range(na):
                u[idx[a]] -= step * r[a]
            nu -= step * r_eq
            u[pick] += step
            if t2 <= t1:
                act[pick] = True
                break
            u[block] = 0.0
            act[block] = False


@njit(cache=True)
def pava_start(t, w, starts, kinds, slope_lo, zero_mean):
    """Lower-slope-constrained fit by PAVA with its active rows and multipliers.

    With ``zero_mean`` the fit is shifted by the weighted mean residual; this
    is the exact equality-constrained solution only for uniform weights.
    """
    n = t.shape[0]
    m = starts.shape[0]
    shift = np.empty(n)
    for i in range(n):
        shift[i] = i * slope_lo
    x = pava(t - shift, w) + shift
    nu = 0.0
    if zero_mean:
        mean = 0.0
        for i in range(n):
            mean += x[i]
        mean /= n
        for i in range(n):
            x[i] -= mean
        nu = -w[0] * mean
    # u_i = u_{i-1} + nu - w_i (x_i - t_i), cut at block boundaries
    ucum = np.zeros(n)
    run = 0.0
    for i in range(n - 1):
        run += nu - w[i] * (x[i] - t[i])
        ucum[i] = run
    act = np.zeros(m, dtype=np.bool_)
    u = np.zeros(m)
    scale = 0.0
    for i in range(n):
        scale = max(scale, abs(x[i]))
    for k in range(m):
        if kinds[k] == 0:
            i = starts[k]
            if x[i + 1] - x[i] - slope_lo <= 1e-13 * (1.0 + scale) and ucum[i] > 0.0:
                act[k] = True
                u[k] = ucum[i]
    return x, act, u, nu


@njit(cache=True)
def warm_project(t, w, starts, widths, coefs, rhs, has_eq, guess, tol, max_iter):
    """Goldfarb-Idnani projection started from a guessed active set.

    Dependent rows of the guess are pruned, then rows with negative
    multipliers are dropped until the equality-constrained solution on the
    remaining set is dual feasible; the dual method then adds the rows that
    are still violated.
    """
    n = t.shape[0]
    m = starts.shape[0]
    winv = 1.0 / w
    beta = 0.0
    tsum = 0.0
    for q in range(n):
        beta += winv[q]
        tsum += t[q]
    act = guess.copy()
    idx = np.empty(m, dtype=np.int64)
    u = np.zeros(m)
    nu = 0.0
    while True:
        na = 0
        for k in range(m):
            u[k] = 0.0
            if act[k]:
                idx[na] = k
                na += 1
        nu = 0.0
        if na == 0:
            if has_eq:
                nu = -tsum / beta
            break
        L, p, nacc, ok = _band_factor(idx, na, starts, widths, coefs, winv, True)
        for k in range(m):
            act[k] = False
        for a in range(nacc):
            act[idx[a]] = True
        r = np.empty(nacc)
        bvec = np.zeros(nacc)
        for a in range(nacc):
            k = idx[a]
            r[a] = rhs[k] - _row_dot(k, starts, widths, coefs, t)
            if has_eq:
                bvec[a] = _row_sum(k, widths, starts, coefs, winv)
        if has_eq:
            g2 = _band_solve(L, p, nacc, bvec)
            denom = beta
            for a in range(nacc):
                denom -= bvec[a] * g2[a]
            if denom <= 1e-10 * beta:
                # active rows pin every coordinate; the sum row is dependent
                act[idx[nacc - 1]] = False
                continue
        lam, nu = _active_solve(L, p, nacc, idx, has_eq, bvec, beta, r, -tsum)
        dropped = False
        for a in range(nacc):
            if lam[a] < 0.0:
                act[idx[a]] = False
                dropped = True
            else:
                u[idx[a]] = lam[a]
        if not dropped:
            break
    x = np.empty(n)
    for q in range(n):
        x[q] = t[q] + nu * winv[q]
    for k in range(m):
        if act[k]:
            for q in range(widths[k]):
                x[starts[k] + q] += coefs[k, q] * u[k] * winv[starts[k] + q]
    return gi_project(t, w, starts, widths, coefs, rhs, has_eq, x, act, u, nu, tol, max_iter)


@njit(cache=True)
def violated_rows(x, starts, widths, coefs, rhs, tol):
    m = starts.shape[0]
    out = np.zeros(m, dtype=np.bool_)
    for k in range(m):
        if _row_dot(k, starts, widths, coefs, x) - rhs[k] < -tol:
            out[k] = True
    return out


@njit(cache=True)
def _cold_guess(t, w, starts, widths, kinds, coefs, rhs, slope_lo, zero_mean, tol):
    n = t.shape[0]
    uniform = True
    for q in range(1, n):
        if w[q] != w[0]:
            uniform = False
            break
    if zero_mean and not uniform:
        return np.zeros(starts.shape[0], dtype=np.bool_)
    x0, act, _, _ = pava_start(t, w, starts, kinds, slope_lo, zero_mean)
    return act | violated_rows(x0, starts, widths, coefs, rhs, tol)


@njit(cache=True)
def bcd_update(Y, A, maps, gates, grids, frozen, zero_mean, starts, widths, kinds,
               coefs, rhs, slope_lo, active, have_active, max_sweeps, rtol):
    """Block-coordinate descent over factor grids for a fixed matching.

    ``grids`` (K, n) and ``active`` (K, m) are updated in place. Returns
    ``(start_objective, objective, sweeps, status)``; a nonzero status is
    the first failing projection status.
    """
    P, T = Y.shape
    K = A.shape[1]
    n = grids.shape[1]
    cols = np.empty((P, K))
    for i in range(P):
        for k in range(K):
            cols[i, k] = gates[i, k] * grids[k, maps[k, i]]
    resid = Y.copy()
    for i in range(P):
        for t in range(T):
            s = 0.0
            for k in range(K):
                s += A[t, k] * cols[i, k]
            resid[i, t] -= s
    obj = 0.0
    for i in range(P):
        for t in range(T):
            obj += resid[i, t] * resid[i, t]
    start_obj = obj
    any_free = False
    for k in range(K):
        if not frozen[k]:
            any_free = True
    sweeps = 0
    if not any_free:
        return start_obj, obj, sweeps, 0
    num = np.empty(n)
    w = np.empty(n)
    target = np.empty(n)
    for sweeps in range(1, max_sweeps + 1):
        for k in range(K):
            if frozen[k]:
                continue
            nrm = 0.0
            for t in range(T):
                nrm += A[t, k] * A[t, k]
            num[:] = 0.0
            w[:] = 0.0
            for i in range(P):
                g = gates[i, k]
                if g == 0.0:
                    continue
                proj = 0.0
                for t in range(T):
                    proj += (resid[i, t] + A[t, k] * cols[i, k]) * A[t, k]
                j = maps[k, i]
                num[j] += proj * g
                w[j] += nrm * g * g
            wmax = 0.0
            for j in range(n):
                if w[j] > wmax:
                    wmax = w[j]
            if wmax <= 0.0:
                continue
            tmax = 0.0
            for j in range(n):
                if w[j] > 0.0:
                    target[j] = num[j] / w[j]
                else:
                    # unused index: weak proximal pull towards the current value
                    target[j] = grids[k, j]
                    w[j] = 1e-6 * wmax
                if abs(target[j]) > tmax:
                    tmax = abs(target[j])
            tol = 1e-13 * (1.0 + tmax)
            if have_active[k]:
                guess = active[k].copy()
            else:
                guess = _cold_guess(target, w, starts, widths, kinds, coefs, rhs,
                                    slope_lo, zero_mean[k], tol)
            x, act, _, _, status = warm_project(target, w, starts, widths, coefs, rhs,
                                                zero_mean[k], guess, tol,
                                                50 * (starts.shape[0] + n) + 100)
            if status != 0:
                return start_obj, obj, sweeps, status
            if zero_mean[k]:
                mean = 0.0
                for j in range(n):
                    mean += x[j]
                mean /= n
                for j in range(n):
                    x[j] -= mean
            active[k, :] = act
            have_active[k] = True
            for j in range(n):
                grids[k, j] = x[j]
            for i in range(P):
                new = gates[i, k] * x[maps[k, i]]
                d = new - cols[i, k]
                cols[i, k] = new
                for t in range(T):
                    resid[i, t] -= A[t, k] * d
        new_obj = 0.0
        for i in range(P):
            for t in range(T):
                new_obj += resid[i, t] * resid[i, t]
        dec = obj - new_obj
        obj = new_obj
        if dec <= rtol * max(obj, 1e-300):
            break
    return start_obj, obj, sweeps, 0
