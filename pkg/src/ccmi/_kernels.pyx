# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Newton/IRLS kernel for single-index GLMs.

Mirrors ``ccmi._kernels_py`` exactly; the two are interchangeable and the
test-suite checks them against each other.
"""
import numpy as np

from libc.math cimport exp, log1p, fabs, sqrt, isfinite
cimport scipy.linalg.cython_blas as blas

DEF LINEAR = 0
DEF LOGISTIC = 1
DEF POISSON = 2

DEF CONVERGED = 0
DEF MAXITER = 1
DEF SEPARATED = 2
DEF SINGULAR = 3

DEF PROB_EPS = 1e-10
DEF STD_COEF_LIMIT = 10.0


cdef double _evaluate(const double[:, ::1] X, const double[::1] y,
                      const double[::1] w, int family, const double[::1] beta,
                      double[::1] eta_out, double[::1] grad,
                      double[:, ::1] hess, double[:, ::1] work,
                      double[::1] resid, double[::1] mu_out) noexcept nogil:
    """Log-likelihood; fills eta, gradient and the negative Hessian.

    The Hessian is formed with a BLAS rank-k update on the rows of X scaled
    by sqrt(w * variance), which ``work`` (same shape as X) holds.
    """
    cdef int n = <int>X.shape[0]
    cdef int p = <int>X.shape[1]
    cdef int one = 1
    cdef double dzero = 0.0, done = 1.0
    cdef Py_ssize_t i, j, k
    cdef double eta, mu, e, wi, r, v, s, ll = 0.0
    cdef char transT = b'T'
    cdef char transN = b'N'
    cdef char uplo = b'L'
    cdef const double* xi
    cdef double* wk

    # eta = X beta; the C-ordered X is a p x n Fortran matrix
    blas.dgemv(&transT, &p, &n, &done, <double*>&X[0, 0], &p, <double*>&beta[0], &one,
               &dzero, &eta_out[0], &one)
    for i in range(n):
        eta = eta_out[i]
        wi = w[i]
        if wi == 0.0:
            resid[i] = 0.0
            mu_out[i] = 0.0
            for j in range(p):
                work[i, j] = 0.0
            continue
        if family == LOGISTIC:
            if eta >= 0.0:
                e = exp(-eta)
                mu = 1.0 / (1.0 + e)
                ll += wi * (y[i] * eta - eta - log1p(e))
            else:
                e = exp(eta)
                mu = e / (1.0 + e)
                ll += wi * (y[i] * eta - log1p(e))
            v = mu * (1.0 - mu)
            r = y[i] - mu
        elif family == POISSON:
            mu = exp(eta)
            ll += wi * (y[i] * eta - mu)
            v = mu
            r = y[i] - mu
        else:
            mu = eta
            r = y[i] - eta
            ll -= 0.5 * wi * r * r
            v = 1.0
        mu_out[i] = mu
        resid[i] = wi * r
        s = sqrt(wi * v)
        xi = &X[i, 0]
        wk = &work[i, 0]
        for j in range(p):
            wk[j] = s * xi[j]

    blas.dgemv(&transN, &p, &n, &done, <double*>&X[0, 0], &p, &resid[0], &one,
               &dzero, &grad[0], &one)
    # Fortran lower triangle of (work^T work) is the C upper triangle
    blas.dsyrk(&uplo, &transN, &p, &n, &done, &work[0, 0], &p, &dzero, &hess[0, 0], &p)
    for j in range(p):
        for k in range(j + 1, p):
            hess[k, j] = hess[j, k]
    return ll


cdef int _chol_solve(const double[:, ::1] A, const double[::1] b,
                     double[:, ::1] L, double[::1] x) noexcept nogil:
    """Solve A x = b for symmetric positive definite A; -1 if not PD."""
    cdef Py_ssize_t p = A.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s

    for i in range(p):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 1e-12 * fabs(A[i, i]) or s <= 0.0:
                    return -1
                L[i, i] = sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    for i in range(p):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(p - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, p):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return 0


cdef bint _separated(const double[::1] y, const double[::1] w, int family,
                     const double[::1] beta, const double[::1] mu,
                     const double[::1] col_sd) noexcept nogil:
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t p = beta.shape[0]
    cdef Py_ssize_t i, j
    cdef bint all1 = True, all0 = True, seen1 = False, seen0 = False

    if family == LINEAR:
        return False
    for j in range(p):
        if col_sd[j] > 0.0 and fabs(beta[j]) * col_sd[j] > STD_COEF_LIMIT:
            return True
    for i in range(n):
        if w[i] == 0.0:
            continue
        if y[i] > 0.5:
            seen1 = True
            if mu[i] <= 1.0 - PROB_EPS:
                all1 = False
        else:
            seen0 = True
            if mu[i] >= PROB_EPS:
                all0 = False
        if not all0 and not all1:
            return False
    if seen0 and all0:
        return True
    if family == LOGISTIC and seen1 and all1:
        return True
    return False


def fit_irls(double[:, ::1] X, double[::1] y, double[::1] w, int family,
             double[::1] beta0, int max_iter=50, double tol=1e-8,
             int max_halvings=10, bint check_separation=True):
    """Newton-Raphson with step-halving for a weighted single-index GLM.

    Returns ``(beta, information, n_iter, status, loglik)`` where ``status``
    is 0 converged, 1 iteration cap, 2 separation, 3 singular information.
    """
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t i, j
    cdef int it = 0, h, status = MAXITER
    cdef double ll, ll_new, step, change, d, denom, ymin = 1.0, ymax = 0.0
    cdef bint accepted

    beta_a = np.array(beta0, dtype=np.float64, copy=True)
    beta_b = np.empty(p, dtype=np.float64)
    delta_a = np.empty(p, dtype=np.float64)
    grad_a = np.empty(p, dtype=np.float64)
    grad_b = np.empty(p, dtype=np.float64)
    hess_a = np.empty((p, p), dtype=np.float64)
    hess_b = np.empty((p, p), dtype=np.float64)
    chol_a = np.zeros((p, p), dtype=np.float64)
    eta_a = np.empty(n, dtype=np.float64)
    sd_a = np.zeros(p, dtype=np.float64)
    work_a = np.empty((n, p), dtype=np.float64)
    resid_a = np.empty(n, dtype=np.float64)
    mu_a = np.empty(n, dtype=np.float64)

    cdef double[::1] beta = beta_a
    cdef double[::1] trial = beta_b
    cdef double[::1] delta = delta_a
    cdef double[::1] grad = grad_a
    cdef double[::1] grad_t = grad_b
    cdef double[:, ::1] hess = hess_a
    cdef double[:, ::1] hess_t = hess_b
    cdef double[:, ::1] chol = chol_a
    cdef double[::1] eta = eta_a
    cdef double[::1] col_sd = sd_a
    cdef double[:, ::1] work = work_a
    cdef double[::1] resid = resid_a
    cdef double[::1] mu = mu_a
    cdef const double* xi
    cdef double wsum = 0.0, m1, m2
    cdef double[::1] s1, s2

    if family != LINEAR and check_separation:
        for i in range(n):
            if w[i] > 0.0:
                if y[i] < ymin:
                    ymin = y[i]
                if y[i] > ymax:
                    ymax = y[i]
        if ymax <= ymin:
            return beta_a, hess_a * np.nan, 0, SEPARATED, np.nan
        mom1 = np.zeros(p)
        mom2 = np.zeros(p)
        s1 = mom1
        s2 = mom2
        for i in range(n):
            if w[i] > 0.0:
                wsum += 1.0
                xi = &X[i, 0]
                for j in range(p):
                    s1[j] += xi[j]
                    s2[j] += xi[j] * xi[j]
        for j in range(p):
            m1 = s1[j] / wsum
            m2 = s2[j] / wsum
            d = m2 - m1 * m1
            col_sd[j] = sqrt(d) if d > 1e-14 * (1.0 + m2) else 0.0

    with nogil:
        ll = _evaluate(X, y, w, family, beta, eta, grad, hess, work, resid, mu)
        while it < max_iter:
            it += 1
            if _chol_solve(hess, grad, chol, delta) != 0:
                status = SINGULAR
                break
            step = 1.0
            accepted = False
            for h in range(max_halvings + 1):
                for j in range(p):
                    trial[j] = beta[j] + step * delta[j]
                ll_new = _evaluate(X, y, w, family, trial, eta, grad_t, hess_t, work, resid, mu)
                if isfinite(ll_new) and ll_new >= ll - 1e-12 * (1.0 + fabs(ll)):
                    accepted = True
                    break
                step *= 0.5
            change = 0.0
            for j in range(p):
                denom = fabs(trial[j])
                if denom < 1.0:
                    denom = 1.0
                d = fabs(step * delta[j]) / denom
                if d > change:
                    change = d
            if not accepted:
                # restore eta at the current iterate for the separation check
                ll = _evaluate(X, y, w, family, beta, eta, grad, hess, work, resid, mu)
                status = CONVERGED if change < tol else MAXITER
                break
            for j in range(p):
                beta[j] = trial[j]
                grad[j] = grad_t[j]
                for i in range(p):
                    hess[j, i] = hess_t[j, i]
            ll = ll_new
            if check_separation and _separated(y, w, family, beta, mu, col_sd):
                status = SEPARATED
                break
            if change < tol:
                status = CONVERGED
                break
    return beta_a, hess_a, it, status, ll
