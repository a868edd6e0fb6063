"""Pure-NumPy fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures, same return conventions, same iteration semantics.
"""

import numpy as np


def _dense_laplacian(indptr, indices):
    n = len(indptr) - 1
    L = np.zeros((n, n))
    for i in range(n):
        nb = indices[indptr[i]:indptr[i + 1]]
        L[i, i] = len(nb)
        L[i, nb] = -1.0
    return L


def laplacian_apply(indptr, indices, v):
    v = np.asarray(v, dtype=np.float64)
    deg = np.diff(indptr)
    nsum = np.add.reduceat(v[indices], indptr[:-1]) if len(indices) else np.zeros_like(v)
    nsum[deg == 0] = 0.0
    return deg * v - nsum


def flow_solve(indptr, indices, curv, lin, p0, eta, tol, max_iters):
    L = _dense_laplacian(indptr, indices)
    curv = np.asarray(curv, dtype=np.float64)
    lin = np.asarray(lin, dtype=np.float64)
    p = np.array(p0, dtype=np.float64, copy=True)
    step = np.zeros_like(p)
    it = 0
    while it < max_iters:
        it += 1
        v = curv * p + lin
        if not np.all(np.isfinite(v)):
            return p, it, 2, step
        s = eta * (L @ v)
        step = np.abs(s)
        p = p - s
        if step.max() <= tol:
            return p, it, 0, step
    return p, it, 1, step


def dgd_solve(indptr, indices, lambda_n, x_init, x_k, g, H, use_h, cubic, quad,
              alpha0, tol, t_max, blowup, agree_tol=np.inf):
    L = _dense_laplacian(indptr, indices)
    W = np.eye(len(indptr) - 1) - L / lambda_n
    x = np.array(x_init, dtype=np.float64, copy=True)
    x_k = np.asarray(x_k, dtype=np.float64)
    cubic = np.asarray(cubic, dtype=np.float64)[:, None]
    quad = np.asarray(quad, dtype=np.float64)[:, None]
    t = 0
    while t < t_max:
        t += 1
        xi = x - x_k
        nrm = np.sqrt(np.sum(xi * xi, axis=1, keepdims=True))
        grad = g + (0.5 * cubic * nrm + quad) * xi
        if use_h:
            grad = grad + np.einsum("icj,ij->ic", H, xi)
        lres = np.linalg.norm(L @ x)
        xn = W @ x - (alpha0 / t) * grad
        worst = np.max(np.abs(xn - x))
        x = xn
        sq = np.sum(x * x)
        if not np.isfinite(sq) or np.sqrt(sq) > blowup:
            return x, t, 2
        if worst <= tol and lres <= agree_tol:
            return x, t, 0
    return x, t, 1
