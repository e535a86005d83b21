import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize, special

from ccmi import glm
from ccmi._backend import BACKEND, compiled_fit_irls, python_fit_irls

LOG6 = 1.791759469228055
LOG2 = 0.6931471805599453


def two_by_two():
    # (y=1,x=1):20, (y=0,x=1):10, (y=1,x=0):5, (y=0,x=0):15
    x = np.r_[np.ones(30), np.zeros(20)]
    y = np.r_[np.ones(20), np.zeros(10), np.ones(5), np.zeros(15)]
    return np.column_stack([np.ones(50), x]), y


def saturated_poisson(n=100):
    x = np.r_[np.ones(n), np.zeros(n)]
    y = np.r_[np.ones(n // 5), np.zeros(n - n // 5), np.ones(n // 10), np.zeros(n - n // 10)]
    return np.column_stack([np.ones(2 * n), x]), y


def logistic_loglik(beta, X, y):
    eta = X @ beta
    return np.sum(y * eta - np.logaddexp(0, eta))


def test_two_by_two_log_odds_ratio():
    X, y = two_by_two()
    f = glm.fit(X, y, glm.LOGISTIC)
    assert f.converged
    assert abs(f.coef[1] - LOG6) < 1e-6


def test_two_by_two_grid_search_oracle():
    # brute-force likelihood grid around the optimum, refined twice
    X, y = two_by_two()
    center = np.zeros(2)
    for half in (4.0, 0.05, 0.001):
        g = np.linspace(-half, half, 201)
        A, B = np.meshgrid(center[0] + g, center[1] + g, indexing="ij")
        ll = np.array([[logistic_loglik(np.array([a, b]), X, y) for a, b in zip(ra, rb)]
                       for ra, rb in zip(A, B)])
        i, j = np.unravel_index(np.argmax(ll), ll.shape)
        center = np.array([A[i, j], B[i, j]])
    f = glm.fit(X, y, glm.LOGISTIC)
    assert np.allclose(f.coef, center, atol=2e-5)


def test_saturated_poisson_is_log_rr():
    X, y = saturated_poisson()
    f = glm.fit(X, y, glm.POISSON)
    assert f.converged
    assert abs(f.coef[1] - LOG2) < 1e-6


def test_saturated_poisson_robust_se_delta_method():
    X, y = saturated_poisson()
    f = glm.fit(X, y, glm.POISSON)
    cov = glm.sandwich_cov(f, X, y)
    delta = np.sqrt((1 - 0.2) / (100 * 0.2) + (1 - 0.1) / (100 * 0.1))
    assert abs(np.sqrt(cov[1, 1]) - delta) < 1e-6


@pytest.mark.parametrize("family", [glm.LINEAR, glm.LOGISTIC, glm.POISSON])
def test_constant_weights_scale_covariance(family, rng):
    n = 400
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.random(n) < 0.4])
    eta = X @ np.array([-1.2, 0.3, 0.4])
    y = {"linear": eta + rng.normal(size=n),
         "logistic": (rng.random(n) < special.expit(eta)).astype(float),
         "poisson_log": (rng.random(n) < np.exp(eta)).astype(float)}[family.name]
    f1 = glm.fit(X, y, family)
    f7 = glm.fit(X, y, family, np.full(n, 7.0))
    assert np.allclose(f1.coef, f7.coef, atol=1e-10)
    assert np.allclose(f7.model_cov, f1.model_cov / 7.0, rtol=1e-8)


def test_duplicated_rows_equal_weight_two(rng):
    n = 300
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < special.expit(X @ [0.2, 0.8])).astype(float)
    dup = glm.fit(np.vstack([X, X]), np.r_[y, y], glm.LOGISTIC)
    w2 = glm.fit(X, y, glm.LOGISTIC, np.full(n, 2.0))
    assert np.allclose(dup.coef, w2.coef, atol=1e-10)


def test_linear_sandwich_close_to_model_cov(rng):
    n = 10_000
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.random(n) < 0.3])
    y = X @ [1.0, 2.0, -0.5] + rng.normal(size=n)
    f = glm.fit(X, y, glm.LINEAR)
    ratio = np.diag(glm.sandwich_cov(f, X, y)) / np.diag(f.model_cov)
    assert np.all(np.abs(ratio - 1) < 0.10)


def test_sandwich_requires_convergence():
    X = np.column_stack([np.ones(4), [0.0, 1, 2, 3]])
    y = np.array([0.0, 0, 1, 1])
    f = glm.fit(X, y, glm.LOGISTIC)
    assert not f.converged
    with pytest.raises(ValueError):
        glm.sandwich_cov(f, X, y)


def test_singular_design_raises():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    y = (np.arange(10) % 2).astype(float)
    with pytest.raises(glm.RankDeficientError):
        glm.fit(X, y, glm.LOGISTIC)


# -- predict -------------------------------------------------------------

def test_predict_trivial_cases():
    X = np.column_stack([np.ones(5), np.arange(5.0)])
    zero = glm.FitResult(np.zeros(2), None, None, True, 0, glm.LOGISTIC)
    assert np.allclose(glm.predict(zero, X), 0.5)
    assert np.allclose(glm.predict(zero, X, glm.POISSON), 1.0)
    multi = glm.FitResult(np.zeros((2, 2)), None, None, True, 0, glm.multinomial(3))
    assert np.allclose(glm.predict(multi, X), 1 / 3)


@given(st.integers(3, 6), st.integers(0, 2 ** 31 - 1))
def test_category_probabilities_sum_to_one(k, seed):
    r = np.random.default_rng(seed)
    X = np.column_stack([np.ones(20), r.normal(size=(20, 2))])
    multi = glm.FitResult(r.normal(size=(3, k - 1)), None, None, True, 0, glm.multinomial(k))
    ordc = np.r_[r.normal(size=2), np.sort(r.normal(size=k - 1))]
    ordf = glm.FitResult(ordc, None, None, True, 0, glm.ordinal(k))
    for f in (multi, ordf):
        P = glm.predict(f, X)
        assert P.shape == (20, k)
        assert np.all(np.abs(P.sum(axis=1) - 1) < 1e-12)
        assert np.all(P >= 0)


# -- separation ------------------------------------------------------------

def test_detect_separation_examples():
    X = np.column_stack([np.ones(4), [0.0, 1, 2, 3]])
    y = np.array([0.0, 0, 1, 1])
    assert not glm.fit(X, y, glm.LOGISTIC).converged
    assert glm.fit(X, y, glm.LOGISTIC).separated
    X2, y2 = two_by_two()
    assert not glm.detect_separation(X2, y2, [np.log(5 / 15), LOG6], glm.LOGISTIC)
    assert glm.detect_separation(X2, np.zeros(50), [0.0, 0.0], glm.LOGISTIC)
    f = glm.fit(X2, np.zeros(50), glm.LOGISTIC)
    assert not f.converged and f.separated


def test_detect_separation_large_standardized_coefficient():
    X = np.column_stack([np.ones(6), [0.0, 0, 0, 1, 1, 1]])
    y = np.array([0.0, 1, 0, 1, 0, 1])
    assert glm.detect_separation(X, y, [0.0, 25.0], glm.LOGISTIC)
    assert not glm.detect_separation(X, y, [0.0, 15.0], glm.LOGISTIC)


# -- ordinal / multinomial against direct optimisation --------------------------

def _ordinal_negll(theta, Xs, y, K):
    ps = Xs.shape[1]
    beta, alpha = theta[:ps], np.sort(theta[ps:])
    cum = special.expit(alpha[None, :] - (Xs @ beta)[:, None])
    cum = np.column_stack([np.zeros(len(y)), cum, np.ones(len(y))])
    p = np.diff(cum, axis=1)[np.arange(len(y)), y.astype(int)]
    return -np.sum(np.log(np.maximum(p, 1e-300)))


def test_ordinal_matches_direct_optimisation(rng):
    n, K = 600, 3
    Xs = rng.normal(size=(n, 2))
    lat = Xs @ [0.8, -0.5] + rng.logistic(size=n)
    y = np.digitize(lat, [-0.5, 0.7]).astype(float)
    f = glm.fit(np.column_stack([np.ones(n), Xs]), y, glm.ordinal(K))
    assert f.converged
    ref = optimize.minimize(_ordinal_negll, np.r_[0, 0, -1, 1], args=(Xs, y, K),
                            method="Nelder-Mead", options=dict(xatol=1e-9, fatol=1e-11, maxiter=20000))
    assert np.allclose(f.coef, ref.x, atol=1e-4)


def test_multinomial_matches_direct_optimisation(rng):
    n, K = 600, 3
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    B = np.array([[0.2, -0.4], [0.9, -0.7]])
    P = special.softmax(np.column_stack([np.zeros(n), X @ B]), axis=1)
    y = (rng.random(n)[:, None] > np.cumsum(P, axis=1)).sum(axis=1).astype(float)

    def negll(t):
        eta = np.column_stack([np.zeros(n), X @ t.reshape(2, 2)])
        return -np.sum(eta[np.arange(n), y.astype(int)] - special.logsumexp(eta, axis=1))

    f = glm.fit(X, y, glm.multinomial(K))
    ref = optimize.minimize(negll, np.zeros(4), method="Nelder-Mead",
                            options=dict(xatol=1e-9, fatol=1e-11, maxiter=20000))
    assert np.allclose(f.coef.ravel(), ref.x, atol=1e-4)


def test_family_validation():
    with pytest.raises(ValueError):
        glm.ordinal(2)
    with pytest.raises(ValueError):
        glm.Family("probit")


# -- properties -----------------------------------------------------------------

def _random_instance(seed, family):
    r = np.random.default_rng(seed)
    n = int(r.integers(60, 300))
    X = np.column_stack([np.ones(n), r.normal(size=n), r.random(n) < 0.5])
    beta = np.array([-1.5, r.normal(0, 0.3), r.normal(0, 0.3)])
    eta = X @ beta
    if family is glm.LINEAR:
        y = eta + r.normal(size=n)
    elif family is glm.LOGISTIC:
        y = (r.random(n) < special.expit(eta)).astype(float)
    else:
        y = (r.random(n) < np.minimum(np.exp(eta), 1)).astype(float)
    w = r.uniform(0.5, 3.0, size=n)
    return X, y, w


families = st.sampled_from([glm.LINEAR, glm.LOGISTIC, glm.POISSON])


@given(st.integers(0, 2 ** 31 - 1), families)
def test_score_vanishes_at_optimum(seed, family):
    X, y, w = _random_instance(seed, family)
    f = glm.fit(X, y, family, w)
    if f.converged:
        U = glm.scores(f, X, y, w).sum(axis=0)
        assert np.max(np.abs(U)) < 1e-6 * len(y)


@given(st.integers(0, 2 ** 31 - 1), families)
def test_row_permutation_invariance(seed, family):
    X, y, w = _random_instance(seed, family)
    perm = np.random.default_rng(seed + 1).permutation(len(y))
    a = glm.fit(X, y, family, w)
    b = glm.fit(X[perm], y[perm], family, w[perm])
    assert a.converged == b.converged
    if a.converged:
        assert np.allclose(a.coef, b.coef, atol=1e-8)


@given(st.integers(0, 2 ** 31 - 1))
def test_logistic_matches_nelder_mead(seed):
    X, y, _ = _random_instance(seed, glm.LOGISTIC)
    f = glm.fit(X, y, glm.LOGISTIC)
    if not f.converged:
        return
    ref = optimize.minimize(lambda b: -logistic_loglik(b, X, y), f.coef + 0.3, method="Nelder-Mead",
                            options=dict(xatol=1e-10, fatol=1e-12, maxiter=40000))
    assert np.allclose(f.coef, ref.x, atol=1e-4)


@pytest.mark.skipif(compiled_fit_irls is None, reason="extension not built")
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 2))
def test_compiled_and_python_kernels_agree(seed, code):
    family = [glm.LINEAR, glm.LOGISTIC, glm.POISSON][code]
    X, y, w = _random_instance(seed, family)
    a = compiled_fit_irls(X, y, w, code, np.zeros(3))
    b = python_fit_irls(X, y, w, code, np.zeros(3))
    assert a[2:4] == b[2:4]
    assert np.allclose(a[0], b[0], atol=1e-10)
    assert np.allclose(a[1], b[1], rtol=1e-9, atol=1e-9)


def test_backend_reported():
    assert BACKEND in ("cython", "python")
