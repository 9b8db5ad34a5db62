"""Independent reference implementations used by the tests."""

import numpy as np

from bilevel_fda.model import CoefficientSet


def _ball(x, axis=None):
    return x / np.maximum(np.linalg.norm(x, axis=axis, keepdims=True), 1.0)


def sgl_prox_dual(r, K, M, group_thr, sub_thr, gap_tol=1e-13, max_iter=1_000_000):
    """Prox of ``g||b|| + s sum_l ||b_l||`` at ``r`` through its dual.

    The prox equals ``r - P_C(r)`` with ``C = g*Ball + s*(Ball x ... x Ball)``;
    the projection is found by accelerated projected gradient over the two
    sets of ball variables. Stops on a duality gap below ``gap_tol``, which
    bounds the distance to the exact prox by ``sqrt(2 * gap_tol)``.
    """
    r = np.asarray(r, dtype=float).reshape(K, M)
    if group_thr == 0.0 and sub_thr == 0.0:
        return r.ravel().copy()
    L = 2.0 * (group_thr ** 2 + sub_thr ** 2)
    a = np.zeros((K, M))
    b = np.zeros((K, M))
    ya, yb, t = a.copy(), b.copy(), 1.0
    for k in range(max_iter):
        res = group_thr * ya + sub_thr * yb - r
        na = _ball(ya - (2 * group_thr / L) * res)
        nb = _ball(yb - (2 * sub_thr / L) * res, axis=1)
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        ya = na + (t - 1) / tn * (na - a)
        yb = nb + (t - 1) / tn * (nb - b)
        a, b, t = na, nb, tn
        if k % 10 == 0:
            u = group_thr * a + sub_thr * b
            beta = r - u
            primal = 0.5 * np.sum(u * u) + group_thr * np.linalg.norm(beta) \
                + sub_thr * np.linalg.norm(beta, axis=1).sum()
            dual = 0.5 * np.sum(r * r) - 0.5 * np.sum(beta * beta)
            if primal - dual <= gap_tol:
                return beta.ravel()
    raise RuntimeError("dual prox oracle did not reach the gap tolerance")


def prox_objective(beta, r, K, M, group_thr, sub_thr):
    beta = np.asarray(beta).reshape(K, M)
    r = np.asarray(r).reshape(K, M)
    return 0.5 * np.sum((r - beta) ** 2) + group_thr * np.linalg.norm(beta) \
        + sub_thr * np.linalg.norm(beta, axis=1).sum()


def newton_mle(design, y, tol=1e-11, max_iter=200):
    """Unpenalized multinomial MLE by full Newton steps with backtracking."""
    n, K = y.shape
    X = np.hstack([np.ones((n, 1))] + list(design.blocks))
    P = X.shape[1]
    theta = np.zeros((K, P))

    def loglik(th):
        u = th @ X.T
        full = np.vstack([u, np.zeros((1, n))])
        mx = full.max(axis=0)
        return np.sum(y.T * u) - np.sum(mx + np.log(np.exp(full - mx).sum(axis=0)))

    for _ in range(max_iter):
        u = theta @ X.T
        full = np.vstack([u, np.zeros((1, n))])
        e = np.exp(full - full.max(axis=0))
        pi = (e / e.sum(axis=0))[:K].T
        grad = ((y - pi).T @ X).ravel()
        if np.linalg.norm(grad) < tol:
            break
        Hs = np.zeros((K * P, K * P))
        for h in range(K):
            for l in range(K):
                w = pi[:, h] * ((h == l) - pi[:, l])
                Hs[h * P:(h + 1) * P, l * P:(l + 1) * P] = X.T @ (w[:, None] * X)
        step = np.linalg.solve(Hs, grad).reshape(K, P)
        t, ll = 1.0, loglik(theta)
        while loglik(theta + t * step) < ll and t > 1e-10:
            t *= 0.5
        theta = theta + t * step
    blocks, pos = [], 1
    for Z in design.blocks:
        blocks.append(theta[:, pos:pos + Z.shape[1]].copy())
        pos += Z.shape[1]
    return CoefficientSet(theta[:, 0].copy(), blocks)


def closed_form_descent(A, A0, base, K, sizes, prox, max_sweeps=100_000, tol=1e-15):
    """Cyclic descent for orthonormal blocks, each update a closed-form prox."""
    intercepts = np.zeros(K)
    blocks = [np.zeros(K * M) for M in sizes]
    e = base.copy()
    H0_inv = np.linalg.inv(A0.T @ A0)
    for _ in range(max_sweeps):
        before = np.concatenate([intercepts] + blocks)
        d0 = H0_inv @ (A0.T @ e)
        intercepts = intercepts + d0
        e = e - A0 @ d0
        for j, (Aj, M) in enumerate(zip(A, sizes)):
            new = prox(Aj.T @ e + blocks[j], M)
            e = e - Aj @ (new - blocks[j])
            blocks[j] = new
        after = np.concatenate([intercepts] + blocks)
        if np.linalg.norm(after - before) <= tol * max(np.linalg.norm(after), 1.0):
            break
    return intercepts, blocks


def random_orthonormal_problem(n, K, sizes, seed):
    """Weighted blocks with orthonormal columns, an intercept block and a response."""
    rng = np.random.default_rng(seed)
    A = [np.linalg.qr(rng.standard_normal((K * n, K * M)))[0] for M in sizes]
    A0 = np.kron(np.eye(K), np.ones((n, 1))) * 0.4
    base = rng.standard_normal(K * n) + 0.5 * sum(Aj @ rng.standard_normal(Aj.shape[1]) for Aj in A)
    return A, A0, base
