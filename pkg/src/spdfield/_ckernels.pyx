# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: batched small dense linear algebra, tridiagonal
solves and the regularized incomplete gamma function.

Every routine here has a line-by-line counterpart in ``_pykernels``.
"""

import numpy as np
from libc.math cimport sqrt, fabs, exp, log, lgamma, INFINITY, NAN

cdef double FPMIN = 1e-300
cdef double GAMMA_EPS = 1e-16
cdef int GAMMA_MAXIT = 10000


cdef int _jacobi_one(double[:, ::1] a, double[:, ::1] v, double tol, int max_sweeps) nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k
    cdef int sweep, final_pass = 0
    cdef double off, total, apq, theta, t, c, s, akp, akq, apk, aqk
    for p in range(n):
        for q in range(n):
            v[p, q] = 1.0 if p == q else 0.0
    for sweep in range(max_sweeps):
        off = 0.0
        total = 0.0
        for p in range(n):
            for q in range(n):
                total += a[p, q] * a[p, q]
                if p != q:
                    off += a[p, q] * a[p, q]
        if off == 0.0:
            return sweep
        if sqrt(off) <= tol * sqrt(total):
            # one cleanup sweep after nominal convergence
            if final_pass:
                return sweep
            final_pass = 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if fabs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    akp = v[k, p]
                    akq = v[k, q]
                    v[k, p] = c * akp - s * akq
                    v[k, q] = s * akp + c * akq
    return -1


def jacobi_eigh(a_in, double tol=1e-13, int max_sweeps=100):
    """Batched cyclic Jacobi eigendecomposition.

    Parameters
    ----------
    a_in : ndarray, shape (b, n, n)
        Symmetric matrices.

    Returns
    -------
    w : ndarray, shape (b, n)
        Eigenvalues in ascending order.
    v : ndarray, shape (b, n, n)
        Orthonormal eigenvectors as columns.
    sweeps : ndarray of int, shape (b,)
        Sweeps used, -1 where the iteration did not converge.
    """
    cdef double[:, :, ::1] a = np.array(a_in, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t b = a.shape[0]
    cdef Py_ssize_t n = a.shape[1]
    v_arr = np.empty((b, n, n))
    w_arr = np.empty((b, n))
    sweeps_arr = np.empty(b, dtype=np.int64)
    cdef double[:, :, ::1] v = v_arr
    cdef double[:, ::1] w = w_arr
    cdef long long[::1] sweeps = sweeps_arr
    cdef Py_ssize_t i, k
    with nogil:
        for i in range(b):
            sweeps[i] = _jacobi_one(a[i], v[i], tol, max_sweeps)
            for k in range(n):
                w[i, k] = a[i, k, k]
    order = np.argsort(w_arr, axis=1, kind="stable")
    w_arr = np.take_along_axis(w_arr, order, axis=1)
    v_arr = np.take_along_axis(v_arr, order[:, None, :], axis=2)
    return w_arr, v_arr, sweeps_arr


def chol_upper(a_in, double rel_tol=1e-14):
    """Batched upper Cholesky factor ``U`` with ``U^T U = A``.

    Returns the factors and, per matrix, -1 on success or the index of the
    first pivot that fell below ``rel_tol * trace``.
    """
    cdef double[:, :, ::1] a = np.ascontiguousarray(a_in, dtype=np.float64)
    cdef Py_ssize_t b = a.shape[0]
    cdef Py_ssize_t n = a.shape[1]
    u_arr = np.zeros((b, n, n))
    info_arr = np.full(b, -1, dtype=np.int64)
    cdef double[:, :, ::1] u = u_arr
    cdef long long[::1] info = info_arr
    cdef Py_ssize_t m, i, j, k
    cdef double d, tr, acc
    with nogil:
        for m in range(b):
            tr = 0.0
            for i in range(n):
                tr += a[m, i, i]
            for j in range(n):
                d = a[m, j, j]
                for k in range(j):
                    d -= u[m, k, j] * u[m, k, j]
                if not (d > rel_tol * tr) or not (tr > 0.0):
                    info[m] = j
                    break
                d = sqrt(d)
                u[m, j, j] = d
                for i in range(j + 1, n):
                    acc = a[m, j, i]
                    for k in range(j):
                        acc -= u[m, k, j] * u[m, k, i]
                    u[m, j, i] = acc / d
    return u_arr, info_arr


def thomas(sub_in, diag_in, sup_in, rhs_in):
    """Batched tridiagonal solve without pivoting (SPD systems).

    ``sub`` and ``sup`` have shape (b, n-1); ``diag`` and ``rhs`` (b, n).
    """
    cdef double[:, ::1] lo = np.ascontiguousarray(sub_in, dtype=np.float64)
    cdef double[:, ::1] d = np.array(diag_in, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] up = np.ascontiguousarray(sup_in, dtype=np.float64)
    x_arr = np.array(rhs_in, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] x = x_arr
    cdef Py_ssize_t b = d.shape[0]
    cdef Py_ssize_t n = d.shape[1]
    cdef Py_ssize_t m, i
    cdef double f
    with nogil:
        for m in range(b):
            for i in range(1, n):
                f = lo[m, i - 1] / d[m, i - 1]
                d[m, i] -= f * up[m, i - 1]
                x[m, i] -= f * x[m, i - 1]
            x[m, n - 1] /= d[m, n - 1]
            for i in range(n - 2, -1, -1):
                x[m, i] = (x[m, i] - up[m, i] * x[m, i + 1]) / d[m, i]
    return x_arr


cdef double _log_prefactor(double a, double x) nogil:
    return -x + a * log(x) - lgamma(a)


cdef void _gamma_pq(double a, double x, double* p, double* q) nogil:
    cdef double ap, term, total, b, c, d, h, an, delta, pref
    cdef int i
    if x <= 0.0:
        p[0] = 0.0
        q[0] = 1.0
        return
    if x == INFINITY:
        p[0] = 1.0
        q[0] = 0.0
        return
    pref = _log_prefactor(a, x)
    if x < a + 1.0:
        ap = a
        term = 1.0 / a
        total = term
        for i in range(GAMMA_MAXIT):
            ap += 1.0
            term *= x / ap
            total += term
            if fabs(term) < fabs(total) * GAMMA_EPS:
                break
        p[0] = total * exp(pref)
        q[0] = 1.0 - p[0]
    else:
        b = x + 1.0 - a
        c = 1.0 / FPMIN
        d = 1.0 / b
        h = d
        for i in range(1, GAMMA_MAXIT):
            an = -i * (i - a)
            b += 2.0
            d = an * d + b
            if fabs(d) < FPMIN:
                d = FPMIN
            c = b + an / c
            if fabs(c) < FPMIN:
                c = FPMIN
            d = 1.0 / d
            delta = d * c
            h *= delta
            if fabs(delta - 1.0) < GAMMA_EPS:
                break
        q[0] = exp(pref) * h
        p[0] = 1.0 - q[0]


def gammainc(a_in, x_in):
    """Regularized lower and upper incomplete gamma ``(P(a,x), Q(a,x))``."""
    a_b, x_b = np.broadcast_arrays(np.asarray(a_in, dtype=np.float64),
                                   np.asarray(x_in, dtype=np.float64))
    cdef double[::1] a = np.ascontiguousarray(a_b).ravel()
    cdef double[::1] x = np.ascontiguousarray(x_b).ravel()
    p_arr = np.empty(a.shape[0])
    q_arr = np.empty(a.shape[0])
    cdef double[::1] p = p_arr
    cdef double[::1] q = q_arr
    cdef Py_ssize_t i
    with nogil:
        for i in range(a.shape[0]):
            _gamma_pq(a[i], x[i], &p[i], &q[i])
    return p_arr.reshape(a_b.shape), q_arr.reshape(a_b.shape)


cdef double _gamma_inv_one(double a, double target, bint upper, double tol) nogil:
    # Solve P(a, x) = target (or Q(a, x) = target when upper) for x.
    # Newton in t = log x on f(t) = +-(log F(e^t) - log target), which is
    # increasing in t, safeguarded by a bracket and bisection.
    cdef double lt = log(target)
    cdef double t, lo, hi, f, flo, fhi, p, q, pdf, df, step, tn
    cdef int it
    if not (target > 0.0) or not (target < 1.0):
        return NAN
    t = log(a)
    lo = t
    hi = t
    for it in range(4000):
        _gamma_pq(a, exp(lo), &p, &q)
        flo = (log(q) - lt) * -1.0 if upper else log(p) - lt
        if flo < 0.0:
            break
        lo -= 1.0
    else:
        return NAN
    for it in range(4000):
        _gamma_pq(a, exp(hi), &p, &q)
        if upper:
            fhi = -(log(q) - lt) if q > 0.0 else INFINITY
        else:
            fhi = log(p) - lt
        if fhi > 0.0:
            break
        hi += 1.0
    else:
        return NAN
    t = 0.5 * (lo + hi)
    for it in range(200):
        _gamma_pq(a, exp(t), &p, &q)
        pdf = exp(_log_prefactor(a, exp(t)))
        if upper:
            if q <= 0.0:
                hi = t
                t = 0.5 * (lo + hi)
                continue
            f = -(log(q) - lt)
            df = pdf / q
        else:
            if p <= 0.0:
                lo = t
                t = 0.5 * (lo + hi)
                continue
            f = log(p) - lt
            df = pdf / p
        if f < 0.0:
            lo = t
        else:
            hi = t
        if df > 0.0:
            step = f / df
            tn = t - step
        else:
            tn = 0.5 * (lo + hi)
            step = t - tn
        if tn <= lo or tn >= hi:
            tn = 0.5 * (lo + hi)
            step = t - tn
        t = tn
        if fabs(step) < tol or hi - lo < tol:
            break
    return exp(t)


def gammaincinv(a_in, target_in, bint upper=False, double tol=1e-12):
    """Inverse of the regularized incomplete gamma function in ``x``.

    NaN marks targets outside (0, 1) or a failed bracket.
    """
    a_b, t_b = np.broadcast_arrays(np.asarray(a_in, dtype=np.float64),
                                   np.asarray(target_in, dtype=np.float64))
    cdef double[::1] a = np.ascontiguousarray(a_b).ravel()
    cdef double[::1] tg = np.ascontiguousarray(t_b).ravel()
    x_arr = np.empty(a.shape[0])
    cdef double[::1] x = x_arr
    cdef Py_ssize_t i
    with nogil:
        for i in range(a.shape[0]):
            x[i] = _gamma_inv_one(a[i], tg[i], upper, tol)
    return x_arr.reshape(a_b.shape)
