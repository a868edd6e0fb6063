# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: Laplacian flow and decentralized gradient descent.

Both kernels work on CSR neighbor lists so every update of agent ``i``
reads only ``i``'s own state and its neighbors' (the distributed contract).
Semantics match ``_kernels_py`` exactly; see that module for reference
implementations.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, isfinite, INFINITY

cnp.import_array()

ctypedef cnp.int64_t idx_t


def laplacian_apply(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] v):
    cdef Py_ssize_t n = v.shape[0], i, k
    cdef double acc
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            acc = (indptr[i + 1] - indptr[i]) * v[i]
            for k in range(indptr[i], indptr[i + 1]):
                acc -= v[indices[k]]
            o[i] = acc
    return out


def flow_solve(const idx_t[::1] indptr, const idx_t[::1] indices,
               const double[::1] curv, const double[::1] lin,
               const double[::1] p0, double eta, double tol, long max_iters):
    """Iterate ``p <- p - eta L (curv*p + lin)`` until ``max|dp| <= tol``.

    Returns ``(p, iterations, status, step)``; status 0 converged,
    1 iteration budget exhausted, 2 non-finite gradient.
    """
    cdef Py_ssize_t n = p0.shape[0], i, k
    cdef long it = 0
    cdef int status = 1
    cdef double acc, s, worst
    p_arr = np.array(p0, dtype=np.float64, copy=True)
    v_arr = np.empty(n)
    step_arr = np.zeros(n)
    cdef double[::1] p = p_arr
    cdef double[::1] v = v_arr
    cdef double[::1] step = step_arr
    with nogil:
        while it < max_iters:
            it += 1
            for i in range(n):
                v[i] = curv[i] * p[i] + lin[i]
                if not isfinite(v[i]):
                    status = 2
            if status == 2:
                break
            worst = 0.0
            for i in range(n):
                acc = (indptr[i + 1] - indptr[i]) * v[i]
                for k in range(indptr[i], indptr[i + 1]):
                    acc -= v[indices[k]]
                s = eta * acc
                step[i] = fabs(s)
                if step[i] > worst:
                    worst = step[i]
                p[i] -= s
            if worst <= tol:
                status = 0
                break
    return p_arr, it, status, step_arr


def dgd_solve(const idx_t[::1] indptr, const idx_t[::1] indices, double lambda_n,
              const double[:, ::1] x_init, const double[:, ::1] x_k,
              const double[:, ::1] g, const double[:, :, ::1] H, bint use_h,
              const double[::1] cubic, const double[::1] quad,
              double alpha0, double tol, long t_max, double blowup, double agree_tol=INFINITY):
    """Decentralized gradient descent on a separable regularized submodel.

    Iterates ``x <- W x - (alpha0 / t) grad m(x)`` for ``t = 1, 2, ...``
    with ``W = I - (L kron I_d) / lambda_n``.  Agent ``i``'s submodel
    gradient is ``g_i + [use_h] H_i xi_i + (cubic_i / 2)|xi_i| xi_i +
    quad_i xi_i`` with ``xi_i = x_i - x_k_i``.

    Returns ``(x, iterations, status)``; status 0 converged (max-abs update
    ``<= tol`` and consensus residual ``|(L kron I) x| <= agree_tol``, the
    residual measured at the pre-update iterate), 1 budget exhausted,
    2 diverged (``|x| > blowup``).
    """
    cdef Py_ssize_t n = x_init.shape[0], d = x_init.shape[1], i, j, c, k
    cdef long t = 0
    cdef int status = 1
    cdef double alpha, nrm, worst, diff, sq, deg, lres
    x_arr = np.array(x_init, dtype=np.float64, copy=True)
    xn_arr = np.empty((n, d))
    xi_arr = np.empty((n, d))
    gr_arr = np.empty((n, d))
    cdef double[:, ::1] x = x_arr
    cdef double[:, ::1] xn = xn_arr
    cdef double[:, ::1] xi = xi_arr
    cdef double[:, ::1] gr = gr_arr
    with nogil:
        while t < t_max:
            t += 1
            alpha = alpha0 / t
            for i in range(n):
                nrm = 0.0
                for c in range(d):
                    xi[i, c] = x[i, c] - x_k[i, c]
                    nrm += xi[i, c] * xi[i, c]
                nrm = sqrt(nrm)
                for c in range(d):
                    gr[i, c] = g[i, c] + (0.5 * cubic[i] * nrm + quad[i]) * xi[i, c]
                    if use_h:
                        for j in range(d):
                            gr[i, c] += H[i, c, j] * xi[i, j]
            worst = 0.0
            sq = 0.0
            lres = 0.0
            for i in range(n):
                deg = indptr[i + 1] - indptr[i]
                for c in range(d):
                    diff = deg * x[i, c]
                    for k in range(indptr[i], indptr[i + 1]):
                        diff -= x[indices[k], c]
                    lres += diff * diff
                    xn[i, c] = x[i, c] - diff / lambda_n - alpha * gr[i, c]
                    diff = fabs(xn[i, c] - x[i, c])
                    if diff > worst:
                        worst = diff
                    sq += xn[i, c] * xn[i, c]
            for i in range(n):
                for c in range(d):
                    x[i, c] = xn[i, c]
            if not isfinite(sq) or sqrt(sq) > blowup:
                status = 2
                break
            if worst <= tol and sqrt(lres) <= agree_tol:
                status = 0
                break
    return x_arr, t, status
