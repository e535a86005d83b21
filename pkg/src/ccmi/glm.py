"""Maximum-likelihood GLMs with observation weights and sandwich covariance.

Five families are supported: linear, logistic, Poisson with log link on a
binary response ("modified Poisson"), multinomial logistic with category 0
as reference, and proportional-odds ordinal logistic.  The three
single-index families run through the IRLS kernel in ``_backend`` (compiled
when available); multinomial and ordinal use a numpy Newton loop.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels_py
from ._backend import fit_irls

MAX_ITER = 50
TOL = 1e-8
MAX_HALVINGS = 10
#: Sandwich flavour.  HC0: no n/(n-1) small-sample factor.
SANDWICH_TYPE = "HC0"

_KERNEL_CODE = {"linear": 0, "logistic": 1, "poisson_log": 2}


class RankDeficientError(np.linalg.LinAlgError):
    """Information matrix is singular for structural reasons."""


@dataclass(frozen=True)
class Family:
    name: str
    k: int = 2

    def __post_init__(self):
        if self.name not in ("linear", "logistic", "poisson_log", "multinomial", "ordinal"):
            raise ValueError(f"unknown family {self.name!r}")
        if self.name in ("multinomial", "ordinal") and self.k < 3:
            raise ValueError(f"{self.name} needs k >= 3; use logistic for k = 2")


LINEAR = Family("linear")
LOGISTIC = Family("logistic")
POISSON = Family("poisson_log")


def multinomial(k):
    return Family("multinomial", k)


def ordinal(k):
    return Family("ordinal", k)


@dataclass
class FitResult:
    """Outcome of one GLM fit.

    ``coef`` is length p for single-index families, shape (p, K-1) for
    multinomial, and (p-1 slopes, K-1 cutpoints) for ordinal.  ``information``
    is the weighted observed information at ``coef`` (for the linear family
    it is X'WX, without the dispersion).
    """

    coef: np.ndarray
    model_cov: np.ndarray
    information: np.ndarray
    converged: bool
    iterations: int
    family: Family
    loglik: float = np.nan
    separated: bool = False
    dispersion: float = np.nan
    n_obs: int = 0
    robust_cov: np.ndarray = field(default=None, repr=False)

    @property
    def max_abs_coef(self):
        return float(np.max(np.abs(self.coef))) if np.size(self.coef) else 0.0

    @property
    def se(self):
        cov = self.robust_cov if self.robust_cov is not None else self.model_cov
        return np.sqrt(np.diag(cov))


def _as_matrix(x):
    values = getattr(x, "values", x)
    return np.ascontiguousarray(values, dtype=np.float64)


def _prep(x, y, weights):
    X = _as_matrix(x)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"x {X.shape} and y {y.shape} are not conformable")
    if weights is None:
        w = np.ones(X.shape[0])
    else:
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if w.shape != y.shape:
            raise ValueError("weights not conformable with y")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be nonnegative and not all zero")
    return X, y, w


def _safe_inv(A):
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError:
        return np.full_like(A, np.nan)


def fit(x, y, family, weights=None, start=None, max_iter=MAX_ITER, tol=TOL):
    """Fit a weighted GLM by Newton-Raphson / IRLS with step-halving.

    Parameters
    ----------
    x : DesignMatrix or array_like, shape (n, p)
        Complete design; first column is the intercept for ordinal fits.
    y : array_like, shape (n,)
        Response.  Categorical families expect integer codes 0..K-1.
    family : Family
    weights : array_like, optional
        Nonnegative observation weights; enter the log-likelihood linearly.
    start : array_like, optional
        Starting coefficients (warm start).

    Returns
    -------
    FitResult
        ``converged`` is False on separation or when the iteration cap is
        hit; that is reported, not raised, so simulation replications can be
        counted as failures.

    Raises
    ------
    RankDeficientError
        If the weighted information matrix is singular at the start.
    """
    X, y, w = _prep(x, y, weights)
    if family.name == "multinomial":
        return _fit_multinomial(X, y, w, family, start, max_iter, tol)
    if family.name == "ordinal":
        return _fit_ordinal(X, y, w, family, start, max_iter, tol)

    code = _KERNEL_CODE[family.name]
    p = X.shape[1]
    if start is None:
        beta0 = np.zeros(p)
        if code == 2 and p and np.all(X[:, 0] == 1.0):
            # log of the weighted mean keeps the first step well scaled
            ybar = np.sum(w * y) / np.sum(w)
            beta0[0] = np.log(ybar) if ybar > 0 else 0.0
    else:
        beta0 = np.array(start, dtype=np.float64)
    beta, info, it, status, ll = fit_irls(X, y, w, code, beta0, max_iter, tol, MAX_HALVINGS, True)
    if status == 3 and it == 1:
        raise RankDeficientError(f"singular information matrix ({p} columns)")
    converged = status == 0
    separated = status in (2, 3)
    n = int(np.count_nonzero(w))
    dispersion = np.nan
    if code == 0:
        r = y - X @ beta
        dispersion = float(np.sum(w * r * r) / np.sum(w) * n / max(n - p, 1))
        model_cov = dispersion * _safe_inv(info)
    elif np.all(np.isfinite(info)):
        model_cov = _safe_inv(info)
    else:
        model_cov = np.full((p, p), np.nan)
    return FitResult(
        coef=np.asarray(beta), model_cov=model_cov, information=np.asarray(info),
        converged=converged, iterations=int(it), family=family, loglik=float(ll),
        separated=separated, dispersion=dispersion, n_obs=n,
    )


# --------------------------------------------------------------------------
# multinomial and ordinal (numpy Newton)

def _newton(evaluate, theta0, max_iter, tol, sep_check):
    theta = np.array(theta0, dtype=np.float64)
    ll, grad, info = evaluate(theta)
    if not np.isfinite(ll):
        return theta, info, 0, 1, ll
    status, it = 1, 0
    while it < max_iter:
        it += 1
        try:
            delta = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            if it == 1:
                raise RankDeficientError("singular information matrix")
            status = 3
            break
        step, accepted = 1.0, False
        for _ in range(MAX_HALVINGS + 1):
            trial = theta + step * delta
            ll_new, g_new, i_new = evaluate(trial)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                accepted = True
                break
            step *= 0.5
        change = np.max(np.abs(step * delta) / np.maximum(np.abs(trial), 1.0))
        if not accepted:
            status = 0 if change < tol else 1
            break
        theta, ll, grad, info = trial, ll_new, g_new, i_new
        if sep_check(theta):
            status = 2
            break
        if change < tol:
            status = 0
            break
    return theta, info, it, status, ll


def _col_sd(X):
    sd = X.std(axis=0)
    sd[sd < 1e-7] = 0.0
    return sd


def _multinomial_eval(X, Y, w, km1):
    n, p = X.shape

    def evaluate(theta):
        B = theta.reshape(km1, p).T
        eta = np.column_stack([np.zeros(n), X @ B])
        lse = special.logsumexp(eta, axis=1)
        P = np.exp(eta - lse[:, None])[:, 1:]
        ll = np.sum(w * (np.sum(Y * eta[:, 1:], axis=1) - lse))
        grad = np.concatenate([X.T @ (w * (Y[:, k] - P[:, k])) for k in range(km1)])
        info = np.empty((km1 * p, km1 * p))
        for k in range(km1):
            for l in range(k, km1):
                d = w * P[:, k] * ((k == l) - P[:, l])
                block = (X * d[:, None]).T @ X
                info[k * p:(k + 1) * p, l * p:(l + 1) * p] = block
                info[l * p:(l + 1) * p, k * p:(k + 1) * p] = block.T
        return ll, grad, info

    return evaluate


def _fit_multinomial(X, y, w, family, start, max_iter, tol):
    n, p = X.shape
    km1 = family.k - 1
    codes = y.astype(int)
    Y = np.zeros((n, km1))
    for k in range(1, family.k):
        Y[:, k - 1] = codes == k
    counts = np.bincount(codes[w > 0], minlength=family.k)
    theta0 = np.zeros(km1 * p) if start is None else np.asarray(start, dtype=float).T.ravel()
    if np.any(counts == 0):
        return _failed(theta0.reshape(km1, p).T, family, n)
    sd = np.tile(_col_sd(X[w > 0]), km1)
    evaluate = _multinomial_eval(X, Y, w, km1)
    theta, info, it, status, ll = _newton(
        evaluate, theta0, max_iter, tol,
        lambda t: bool(np.any((sd > 0) & (np.abs(t) * sd > _kernels_py.STD_COEF_LIMIT))),
    )
    return FitResult(
        coef=theta.reshape(km1, p).T, model_cov=_safe_inv(info), information=info,
        converged=status == 0, iterations=it, family=family, loglik=float(ll),
        separated=status in (2, 3), n_obs=int(np.count_nonzero(w)),
    )


def _failed(coef, family, n):
    q = np.size(coef)
    nan = np.full((q, q), np.nan)
    return FitResult(coef=coef, model_cov=nan, information=nan, converged=False,
                     iterations=0, family=family, separated=True, n_obs=n)


def _ordinal_parts(Xs, codes, theta, K):
    ps = Xs.shape[1]
    beta, alpha = theta[:ps], theta[ps:]
    eta = Xs @ beta
    cut = np.concatenate([[-np.inf], alpha, [np.inf]])
    a = cut[codes + 1] - eta
    b = cut[codes] - eta
    Fa, Fb = special.expit(a), special.expit(b)
    fa, fb = Fa * (1 - Fa), Fb * (1 - Fb)
    return a, b, Fa, Fb, fa, fb


def _ordinal_jacobians(Xs, codes, K):
    n, ps = Xs.shape
    Ja = np.zeros((n, ps + K - 1))
    Jb = np.zeros((n, ps + K - 1))
    Ja[:, :ps] = -Xs
    Jb[:, :ps] = -Xs
    rows = np.arange(n)
    up = codes <= K - 2
    Ja[rows[up], ps + codes[up]] = 1.0
    lo = codes >= 1
    Jb[rows[lo], ps + codes[lo] - 1] = 1.0
    return Ja, Jb


def _ordinal_eval(Xs, codes, w, K):
    Ja, Jb = _ordinal_jacobians(Xs, codes, K)
    ps = Xs.shape[1]

    def evaluate(theta):
        if np.any(np.diff(theta[ps:]) <= 0):
            return -np.inf, None, None
        _, _, Fa, Fb, fa, fb = _ordinal_parts(Xs, codes, theta, K)
        pi = Fa - Fb
        if np.any(pi <= 0):
            return -np.inf, None, None
        ll = np.sum(w * np.log(pi))
        da, db = fa / pi, -fb / pi
        grad = Ja.T @ (w * da) + Jb.T @ (w * db)
        laa = fa * (1 - 2 * Fa) / pi - da * da
        lbb = -fb * (1 - 2 * Fb) / pi - db * db
        lab = fa * fb / (pi * pi)
        H = (Ja * (w * laa)[:, None]).T @ Ja + (Jb * (w * lbb)[:, None]).T @ Jb
        cross = (Ja * (w * lab)[:, None]).T @ Jb
        H += cross + cross.T
        return ll, grad, -H

    return evaluate


def _fit_ordinal(X, y, w, family, start, max_iter, tol):
    if not np.all(X[:, 0] == 1.0):
        raise ValueError("ordinal fit expects an intercept as the first design column")
    K = family.k
    Xs = np.ascontiguousarray(X[:, 1:])
    n, ps = Xs.shape
    codes = y.astype(int)
    counts = np.bincount(codes[w > 0], minlength=K).astype(float)
    if start is None:
        wc = np.array([np.sum(w[codes == k]) for k in range(K)])
        cum = np.cumsum(wc)[:-1] / np.sum(wc)
        theta0 = np.concatenate([np.zeros(ps), special.logit(np.clip(cum, 1e-6, 1 - 1e-6))])
    else:
        theta0 = np.asarray(start, dtype=float)
    if np.any(counts == 0):
        return _failed(theta0, family, n)
    sd = np.concatenate([_col_sd(Xs[w > 0]), np.zeros(K - 1)])
    evaluate = _ordinal_eval(Xs, codes, w, K)
    theta, info, it, status, ll = _newton(
        evaluate, theta0, max_iter, tol,
        lambda t: bool(np.any((sd > 0) & (np.abs(t) * sd > _kernels_py.STD_COEF_LIMIT))),
    )
    return FitResult(
        coef=theta, model_cov=_safe_inv(info), information=info,
        converged=status == 0, iterations=it, family=family, loglik=float(ll),
        separated=status in (2, 3), n_obs=int(np.count_nonzero(w)),
    )


# --------------------------------------------------------------------------
# post-fit quantities

def scores(fit_result, x, y, weights=None):
    """Per-observation weighted score contributions, shape (n, q)."""
    X, y, w = _prep(x, y, weights)
    fam = fit_result.family
    coef = fit_result.coef
    if fam.name in _KERNEL_CODE:
        eta = X @ coef
        if fam.name == "logistic":
            mu = special.expit(eta)
        elif fam.name == "poisson_log":
            mu = np.exp(eta)
        else:
            mu = eta
        return X * (w * (y - mu))[:, None]
    if fam.name == "multinomial":
        km1 = fam.k - 1
        P = predict(fit_result, X)[:, 1:]
        codes = y.astype(int)
        return np.hstack([X * (w * ((codes == k + 1) - P[:, k]))[:, None] for k in range(km1)])
    codes = y.astype(int)
    Xs = X[:, 1:]
    _, _, Fa, Fb, fa, fb = _ordinal_parts(Xs, codes, coef, fam.k)
    pi = Fa - Fb
    Ja, Jb = _ordinal_jacobians(Xs, codes, fam.k)
    return Ja * (w * fa / pi)[:, None] - Jb * (w * fb / pi)[:, None]


def sandwich_cov(fit_result, x, y, weights=None):
    """HC0 sandwich A^-1 B A^-1.

    A is the weighted observed information at the fitted coefficients and
    B the sum of outer products of the weighted per-observation scores.
    Multiplying all weights by a constant leaves the result unchanged.
    """
    if not fit_result.converged:
        raise ValueError("sandwich covariance needs a converged fit")
    U = scores(fit_result, x, y, weights)
    try:
        A_inv = np.linalg.inv(fit_result.information)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError("singular information in sandwich") from exc
    cov = A_inv @ (U.T @ U) @ A_inv
    return 0.5 * (cov + cov.T)


def predict(fit_result, x, family=None):
    """Fitted mean (single-index) or category probabilities (n, K)."""
    fam = family or fit_result.family
    X = _as_matrix(x)
    coef = fit_result.coef
    if fam.name == "linear":
        return X @ coef
    if fam.name == "logistic":
        return special.expit(X @ coef)
    if fam.name == "poisson_log":
        return np.exp(X @ coef)
    if fam.name == "multinomial":
        eta = np.column_stack([np.zeros(X.shape[0]), X @ coef])
        return special.softmax(eta, axis=1)
    ps = X.shape[1] - 1
    eta = X[:, 1:] @ coef[:ps]
    cum = special.expit(coef[ps:][None, :] - eta[:, None])
    cum = np.column_stack([np.zeros(X.shape[0]), cum, np.ones(X.shape[0])])
    return np.diff(cum, axis=1)


def detect_separation(x, y, coef, family, weights=None):
    """Separation/divergence flag for a (possibly partial) fit trajectory.

    True when any non-constant column's coefficient exceeds 10 in units of
    that column's standard deviation, when every member of an observed
    outcome class has fitted probability within 1e-10 of its label, or when
    the response does not vary at all.
    """
    X, y, w = _prep(x, y, weights)
    pos = w > 0
    if family.name == "linear":
        return False
    if y[pos].max() <= y[pos].min():
        return True
    sd = _col_sd(X[pos])
    eta = X @ np.asarray(coef, dtype=float)
    return bool(_kernels_py._separated(y, w, _KERNEL_CODE[family.name],
                                       np.asarray(coef, dtype=float), eta, sd))
