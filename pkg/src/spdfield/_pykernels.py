"""Pure-Python/numpy counterparts of the compiled kernels.

Same algorithms and stopping rules as ``_ckernels``; loops over matrix
indices are kept in Python while the batch axis is vectorized.
"""

import math

import numpy as np

FPMIN = 1e-300
GAMMA_EPS = 1e-16
GAMMA_MAXIT = 10000


def jacobi_eigh(a_in, tol=1e-13, max_sweeps=100):
    a = np.array(a_in, dtype=np.float64, order="C", copy=True)
    b, n, _ = a.shape
    v = np.broadcast_to(np.eye(n), (b, n, n)).copy()
    sweeps = np.full(b, -1, dtype=np.int64)
    active = np.ones(b, dtype=bool)
    final_pass = np.zeros(b, dtype=bool)
    offmask = ~np.eye(n, dtype=bool)
    for sweep in range(max_sweeps):
        sq = a * a
        total = sq.sum(axis=(1, 2))
        off = (sq * offmask).sum(axis=(1, 2))
        done = active & (off == 0.0)
        nominal = active & ~done & (np.sqrt(off) <= tol * np.sqrt(total))
        done |= nominal & final_pass
        final_pass |= nominal
        sweeps[done] = sweep
        active &= ~done
        if not active.any():
            break
        idx = np.flatnonzero(active)
        sub = a[idx]
        vs = v[idx]
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = sub[:, p, q]
                nz = apq != 0.0
                if not nz.any():
                    continue
                safe = np.where(nz, apq, 1.0)
                with np.errstate(over="ignore", invalid="ignore"):
                    theta = (sub[:, q, q] - sub[:, p, p]) / (2.0 * safe)
                    big = np.abs(theta) > 1e150
                    t = 1.0 / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(theta < 0.0, -t, t)
                t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
                t = np.where(nz, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cc = c[:, None]
                ss = s[:, None]
                akp = sub[:, :, p].copy()
                akq = sub[:, :, q].copy()
                sub[:, :, p] = cc * akp - ss * akq
                sub[:, :, q] = ss * akp + cc * akq
                apk = sub[:, p, :].copy()
                aqk = sub[:, q, :].copy()
                sub[:, p, :] = cc * apk - ss * aqk
                sub[:, q, :] = ss * apk + cc * aqk
                sub[nz, p, q] = 0.0
                sub[nz, q, p] = 0.0
                vkp = vs[:, :, p].copy()
                vkq = vs[:, :, q].copy()
                vs[:, :, p] = cc * vkp - ss * vkq
                vs[:, :, q] = ss * vkp + cc * vkq
        a[idx] = sub
        v[idx] = vs
    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w, v, sweeps


def chol_upper(a_in, rel_tol=1e-14):
    a = np.ascontiguousarray(a_in, dtype=np.float64)
    b, n, _ = a.shape
    u = np.zeros((b, n, n))
    info = np.full(b, -1, dtype=np.int64)
    tr = np.trace(a, axis1=1, axis2=2)
    ok = np.ones(b, dtype=bool)
    for j in range(n):
        d = a[:, j, j] - np.sum(u[:, :j, j] ** 2, axis=1)
        fail = ok & ~((d > rel_tol * tr) & (tr > 0.0))
        info[fail] = j
        ok &= ~fail
        dj = np.sqrt(np.where(ok, d, 1.0))
        u[ok, j, j] = dj[ok]
        for i in range(j + 1, n):
            acc = a[:, j, i] - np.sum(u[:, :j, j] * u[:, :j, i], axis=1)
            u[ok, j, i] = (acc / dj)[ok]
    # rows past a failed pivot stay as computed up to the failure, as in C
    return u, info


def thomas(sub_in, diag_in, sup_in, rhs_in):
    """Batched tridiagonal solve; ``sub[:, i]`` is entry ``(i+1, i)`` and
    ``sup[:, i]`` entry ``(i, i+1)``."""
    lo = np.asarray(sub_in, dtype=np.float64)
    d = np.array(diag_in, dtype=np.float64, copy=True)
    up = np.asarray(sup_in, dtype=np.float64)
    x = np.array(rhs_in, dtype=np.float64, copy=True)
    n = d.shape[1]
    for i in range(1, n):
        f = lo[:, i - 1] / d[:, i - 1]
        d[:, i] -= f * up[:, i - 1]
        x[:, i] -= f * x[:, i - 1]
    x[:, n - 1] /= d[:, n - 1]
    for i in range(n - 2, -1, -1):
        x[:, i] = (x[:, i] - up[:, i] * x[:, i + 1]) / d[:, i]
    return x


def _log_prefactor(a, x):
    return -x + a * math.log(x) - math.lgamma(a)


def _gamma_pq(a, x):
    if x <= 0.0:
        return 0.0, 1.0
    if math.isinf(x):
        return 1.0, 0.0
    pref = _log_prefactor(a, x)
    if x < a + 1.0:
        ap = a
        term = 1.0 / a
        total = term
        for _ in range(GAMMA_MAXIT):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * GAMMA_EPS:
                break
        p = total * math.exp(pref)
        return p, 1.0 - p
    b = x + 1.0 - a
    c = 1.0 / FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, GAMMA_MAXIT):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < FPMIN:
            d = FPMIN
        c = b + an / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < GAMMA_EPS:
            break
    q = math.exp(pref) * h
    return 1.0 - q, q


def gammainc(a_in, x_in):
    a_b, x_b = np.broadcast_arrays(np.asarray(a_in, dtype=np.float64),
                                   np.asarray(x_in, dtype=np.float64))
    p = np.empty(a_b.shape)
    q = np.empty(a_b.shape)
    for i, (a, x) in enumerate(zip(a_b.ravel(), x_b.ravel())):
        p.flat[i], q.flat[i] = _gamma_pq(float(a), float(x))
    return p, q


def _objective(a, t, lt, upper):
    p, q = _gamma_pq(a, math.exp(t))
    if upper:
        return (-(math.log(q) - lt) if q > 0.0 else math.inf), q
    return (math.log(p) - lt if p > 0.0 else -math.inf), p


def _gamma_inv_one(a, target, upper, tol):
    if not (0.0 < target < 1.0):
        return math.nan
    lt = math.log(target)
    lo = hi = math.log(a)
    for _ in range(4000):
        if _objective(a, lo, lt, upper)[0] < 0.0:
            break
        lo -= 1.0
    else:
        return math.nan
    for _ in range(4000):
        if _objective(a, hi, lt, upper)[0] > 0.0:
            break
        hi += 1.0
    else:
        return math.nan
    t = 0.5 * (lo + hi)
    for _ in range(200):
        f, tail = _objective(a, t, lt, upper)
        if tail <= 0.0:
            if upper:
                hi = t
            else:
                lo = t
            t = 0.5 * (lo + hi)
            continue
        df = math.exp(_log_prefactor(a, math.exp(t))) / tail
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
        if abs(step) < tol or hi - lo < tol:
            break
    return math.exp(t)


def gammaincinv(a_in, target_in, upper=False, tol=1e-12):
    a_b, t_b = np.broadcast_arrays(np.asarray(a_in, dtype=np.float64),
                                   np.asarray(target_in, dtype=np.float64))
    x = np.empty(a_b.shape)
    for i, (a, tg) in enumerate(zip(a_b.ravel(), t_b.ravel())):
        x.flat[i] = _gamma_inv_one(float(a), float(tg), bool(upper), tol)
    return x
