"""Independent reference implementations used by the tests."""

import numpy as np
import quadprog


def _grid_rows(n, c):
    """Dense inequality rows ``G x >= h`` of one constrained grid."""
    h1 = n + 1.0
    rows, rhs = [], []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        rows += [e, -e]
        rhs += [-c.level_bound, -c.level_bound]
    for i in range(n - 1):
        d = np.zeros(n)
        d[i], d[i + 1] = -h1, h1
        rows += [d, -d]
        rhs += [c.slope_lower, -c.slope_upper]
    if c.second_diff_bound is not None:
        for i in range(n - 2):
            d = np.zeros(n)
            d[i], d[i + 1], d[i + 2] = h1**2, -2 * h1**2, h1**2
            rows += [d, -d]
            rhs += [-c.second_diff_bound, -c.second_diff_bound]
    return np.array(rows).reshape(-1, n), np.array(rhs)


def dense_qp(H, f, blocks, eq_blocks, ridge=1e-11):
    """Minimize ``x'Hx - 2 f'x`` subject to per-block grid constraints.

    ``blocks`` lists ``(offset, n, constraints)``; ``eq_blocks`` lists the
    offsets/lengths whose sum must vanish. Solved by the Goldfarb-Idnani
    dual active-set method.
    """
    m = H.shape[0]
    eq, ineq, heq, hin = [], [], [], []
    for off, n in eq_blocks:
        r = np.zeros(m)
        r[off:off + n] = 1.0
        eq.append(r)
        heq.append(0.0)
    for off, n, c in blocks:
        G, h = _grid_rows(n, c)
        full = np.zeros((G.shape[0], m))
        full[:, off:off + n] = G
        ineq.append(full)
        hin.append(h)
    Cm = np.vstack(eq + ineq) if (eq or ineq) else np.zeros((0, m))
    b = np.concatenate([np.array(heq)] + hin) if (eq or ineq) else np.zeros(0)
    P = 2.0 * H + ridge * max(1.0, np.trace(H) / m) * np.eye(m)
    x = quadprog.solve_qp(P, 2.0 * f, Cm.T, b, meq=len(eq))[0]
    return x


def update_step_oracle(Ym, A, maps, constraints, grids, frozen, zero_mean, gates=None):
    """Joint least-squares update over all free grids as one dense QP.

    Returns ``(objective, list of grids)``.
    """
    Ym = np.atleast_2d(Ym)
    P, T = Ym.shape
    K = A.shape[1]
    n = len(grids[0])
    gates = np.ones((P, K)) if gates is None else gates
    free = [k for k in range(K) if not frozen[k]]
    off = {k: j * n for j, k in enumerate(free)}
    D = np.zeros((P * T, len(free) * n))
    y = Ym.ravel().astype(float).copy()
    for i in range(P):
        for t in range(T):
            r = i * T + t
            for k in range(K):
                coef = A[t, k] * gates[i, k]
                if frozen[k]:
                    y[r] -= coef * grids[k][maps[k][i]]
                else:
                    D[r, off[k] + maps[k][i]] += coef
    blocks = [(off[k], n, constraints) for k in free]
    eqs = [(off[k], n) for k in free if zero_mean[k]]
    x = dense_qp(D.T @ D, D.T @ y, blocks, eqs)
    out = [np.asarray(g, dtype=float) if frozen[k] else x[off[k]:off[k] + n]
           for k, g in enumerate(grids)]
    obj = float(np.sum((y - D @ x) ** 2))
    return obj, out


def isotonic_oracle(t, w, constraints, zero_mean):
    n = t.size
    H = np.diag(w)
    x = dense_qp(H, w * t, [(0, n, constraints)], [(0, n)] if zero_mean else [])
    return x, float(np.sum(w * (t - x) ** 2))


def joint_objective(Ym, A, maps, grids, gates=None):
    Ym = np.atleast_2d(Ym)
    K = A.shape[1]
    cols = np.column_stack([np.asarray(grids[k])[maps[k]] for k in range(K)])
    if gates is not None:
        cols = cols * gates
    return float(np.sum((Ym - cols @ A.T) ** 2))
