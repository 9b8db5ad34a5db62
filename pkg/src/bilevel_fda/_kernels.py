"""Compiled inner loops for the block coordinate descent."""

import numpy as np
from numba import njit


@njit(cache=True)
def sgl_prox(z, K, M, group_thr, sub_thr):
    """Proximal map of ``group_thr*||b|| + sub_thr*sum_l ||b_l||`` at ``z``.

    ``z`` is laid out as K consecutive sub-blocks of length M.
    """
    h = np.zeros_like(z)
    for l in range(K):
        s = 0.0
        for m in range(M):
            s += z[l * M + m] ** 2
        nrm = np.sqrt(s)
        if nrm > sub_thr:
            scale = (nrm - sub_thr) / nrm
            for m in range(M):
                h[l * M + m] = scale * z[l * M + m]
    hn = np.sqrt(np.sum(h * h))
    if hn <= group_thr:
        return np.zeros_like(z)
    return ((hn - group_thr) / hn) * h


@njit(cache=True)
def block_descent(H, v, K, M, group_thr, sub_thr, x0, step, tol, max_iter):
    """Minimize ``1/2 b'Hb - v'b + group_thr*||b|| + sub_thr*sum_l ||b_l||``.

    Accelerated proximal gradient with gradient-based restart. Returns the
    minimizer and the number of iterations used.
    """
    x = x0.copy()
    y = x0.copy()
    t = 1.0
    for it in range(max_iter):
        g = H @ y - v
        x_new = sgl_prox(y - step * g, K, M, step * group_thr, step * sub_thr)
        gap = np.sqrt(np.sum((y - x_new) ** 2))
        scale = np.sqrt(np.sum(x_new * x_new))
        if gap <= tol * scale or gap == 0.0:
            return x_new, it + 1
        diff = x_new - x
        if np.sum((y - x_new) * diff) > 0.0:
            t = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * diff
            t = t_new
        x = x_new
    return x, max_iter


@njit(cache=True)
def _screen(v, K, M, group_thr, sub_thr):
    s = 0.0
    for l in range(K):
        q = 0.0
        for m in range(M):
            q += v[l * M + m] ** 2
        excess = np.sqrt(q) - sub_thr
        if excess > 0.0:
            s += excess * excess
    return np.sqrt(s) <= group_thr


@njit(cache=True)
def _residual(A, offsets, base, A0, intercepts, b):
    rows = base.size
    e = base - A0 @ intercepts
    for j in range(offsets.size - 1):
        lo, hi = offsets[j], offsets[j + 1]
        e -= A[rows * lo:rows * hi].reshape((rows, hi - lo)) @ b[lo:hi]
    return e


@njit(cache=True)
def cd_sweeps(A, offsets, sizes, K, H_flat, H_offsets, steps, group_thr, sub_thr,
              A0, H0_inv, base, intercepts, b, tol, max_sweeps, refresh_every,
              block_tol, block_max_iter):
    """Cyclic block coordinate descent on one weighted least-squares problem.

    ``A`` holds the weighted expanded blocks ``A_j`` (``Kn x KM_j``, row-major)
    end to end, with coefficient columns ``offsets[j]:offsets[j+1]``;
    ``base`` is the weighted working response, so the residual is
    ``base - A0 @ intercepts - sum_j A_j @ b_j``. Each block is
    updated exactly from ``v = A_j'e + H_j b_j``. Updates ``intercepts`` and
    ``b`` in place and returns the number of sweeps.
    """
    p = sizes.size
    rows = base.size
    e = _residual(A, offsets, base, A0, intercepts, b)
    prev = np.empty(intercepts.size + b.size)
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        if sweep > 0 and sweep % refresh_every == 0:
            e = _residual(A, offsets, base, A0, intercepts, b)
        prev[:K] = intercepts
        prev[K:] = b
        delta0 = H0_inv @ (A0.T @ e)
        intercepts += delta0
        e -= A0 @ delta0
        for j in range(p):
            M = sizes[j]
            lo, hi = offsets[j], offsets[j + 1]
            d = hi - lo
            Aj = A[rows * lo:rows * hi].reshape((rows, d))
            Hj = H_flat[H_offsets[j]:H_offsets[j] + d * d].reshape((d, d))
            bj = b[lo:hi].copy()
            v = Aj.T @ e + Hj @ bj
            if _screen(v, K, M, group_thr[j], sub_thr[j]):
                new = np.zeros(d)
            elif group_thr[j] == 0.0 and sub_thr[j] == 0.0:
                new = np.linalg.solve(Hj, v)
            else:
                new, _ = block_descent(Hj, v, K, M, group_thr[j], sub_thr[j], bj,
                                       steps[j], block_tol, block_max_iter)
            delta = new - bj
            if np.any(delta != 0.0):
                e -= Aj @ delta
                b[lo:hi] = new
        change = np.sqrt(np.sum((intercepts - prev[:K]) ** 2) + np.sum((b - prev[K:]) ** 2))
        norm = np.sqrt(np.sum(intercepts ** 2) + np.sum(b ** 2))
        if change <= tol * max(norm, 1.0):
            break
    return sweeps
