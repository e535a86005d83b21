"""Pure-numpy twin of the compiled IRLS kernel.

Used when the extension is not built, or when ``CCMI_PURE_PYTHON=1``.
"""
import numpy as np

LINEAR, LOGISTIC, POISSON = 0, 1, 2
CONVERGED, MAXITER, SEPARATED, SINGULAR = 0, 1, 2, 3

PROB_EPS = 1e-10
STD_COEF_LIMIT = 10.0


def _evaluate(X, y, w, family, beta):
    eta = X @ beta
    with np.errstate(over="ignore", invalid="ignore"):
        if family == LOGISTIC:
            # log(1 + exp(eta)) without overflow
            l1p = np.logaddexp(0.0, eta)
            mu = np.exp(eta - l1p)
            ll = np.sum(w * (y * eta - l1p))
            v = mu * (1.0 - mu)
            r = y - mu
        elif family == POISSON:
            mu = np.exp(eta)
            ll = np.sum(w * (y * eta - mu))
            v = mu
            r = y - mu
        else:
            r = y - eta
            ll = -0.5 * np.sum(w * r * r)
            v = np.ones_like(eta)
    grad = X.T @ (w * r)
    hess = (X * (w * v)[:, None]).T @ X
    return ll, eta, grad, hess


def _separated(y, w, family, beta, eta, col_sd):
    if family == LINEAR:
        return False
    if np.any((col_sd > 0) & (np.abs(beta) * col_sd > STD_COEF_LIMIT)):
        return True
    keep = w != 0
    yk, ek = y[keep], eta[keep]
    with np.errstate(over="ignore"):
        mu = 1.0 / (1.0 + np.exp(-ek)) if family == LOGISTIC else np.exp(ek)
    zeros = yk <= 0.5
    if zeros.any() and np.all(mu[zeros] < PROB_EPS):
        return True
    if family == LOGISTIC and (~zeros).any() and np.all(mu[~zeros] > 1.0 - PROB_EPS):
        return True
    return False


def _chol_solve(A, b):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.diag(L) ** 2 <= 1e-12 * np.abs(np.diag(A))):
        return None
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


def fit_irls(X, y, w, family, beta0, max_iter=50, tol=1e-8, max_halvings=10,
             check_separation=True):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    beta = np.array(beta0, dtype=np.float64, copy=True)
    p = X.shape[1]
    col_sd = np.zeros(p)

    if family != LINEAR and check_separation:
        pos = w > 0
        if y[pos].max() <= y[pos].min():
            return beta, np.full((p, p), np.nan), 0, SEPARATED, np.nan
        Xp = X[pos]
        m1 = Xp.mean(axis=0)
        m2 = (Xp * Xp).mean(axis=0)
        d = m2 - m1 * m1
        col_sd = np.where(d > 1e-14 * (1.0 + m2), np.sqrt(np.maximum(d, 0)), 0.0)

    ll, eta, grad, hess = _evaluate(X, y, w, family, beta)
    status = MAXITER
    it = 0
    while it < max_iter:
        it += 1
        delta = _chol_solve(hess, grad)
        if delta is None:
            status = SINGULAR
            break
        step = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            trial = beta + step * delta
            ll_new, eta_t, grad_t, hess_t = _evaluate(X, y, w, family, trial)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                accepted = True
                break
            step *= 0.5
        change = np.max(np.abs(step * delta) / np.maximum(np.abs(trial), 1.0))
        if not accepted:
            status = CONVERGED if change < tol else MAXITER
            break
        beta, ll, eta, grad, hess = trial, ll_new, eta_t, grad_t, hess_t
        if check_separation and _separated(y, w, family, beta, eta, col_sd):
            status = SEPARATED
            break
        if change < tol:
            status = CONVERGED
            break
    return beta, hess, it, status, ll
