"""EM engine: objective, E/M steps, full fits, sandwich covariance."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from longmix import (
    EmSettings,
    MixtureFit,
    e_step,
    fit_em,
    fit_quasi_glm,
    get_family,
    m_step_beta,
    m_step_phi,
    m_step_pi,
    penalized_objective,
    quasi_likelihood,
    sandwich_covariance,
)
from longmix.em import order_components
from longmix.exceptions import ArgumentError, SettingsError
from conftest import make_dataset, make_two_cluster_dataset

GAUSSIAN = get_family("gaussian")
POISSON = get_family("poisson")


# --------------------------------------------------------------------- #
# single-population quasi-GLM oracles
# --------------------------------------------------------------------- #


def test_gaussian_glm_equals_ols_oracle():
    """Gaussian-identity quasi-GLM is ordinary least squares."""
    rng = np.random.default_rng(777)
    X = np.column_stack([np.ones(12), rng.normal(size=12), rng.uniform(size=12)])
    y = rng.normal(size=12)
    beta = fit_quasi_glm(y, X, GAUSSIAN)
    # frozen oracle: lstsq solution for this exact seeded instance
    assert np.allclose(beta, [0.21940853, 0.12561033, -0.60690826], atol=1e-7)
    assert np.allclose(beta, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-9)


def test_poisson_glm_matches_frozen_optimizer_oracle():
    """Weighted poisson-log fit vs an independently maximized objective.

    The frozen values come from a Nelder-Mead maximization of the
    weighted quasi-log-density run to 1e-12 tolerance.
    """
    X = np.array([[1.0, 0.2], [1.0, -0.5], [1.0, 1.1], [1.0, 0.4]])
    y = np.array([2.0, 0.0, 7.0, 3.0])
    w = np.array([1.0, 0.5, 2.0, 1.0])
    beta = fit_quasi_glm(y, X, POISSON, weights=w)
    assert np.allclose(beta, [0.30418677, 1.51564653], atol=1e-4)
    obj = float(np.sum(w * POISSON.q(np.exp(X @ beta), y)))
    assert obj == pytest.approx(-0.3793337194189436, abs=1e-8)


# --------------------------------------------------------------------- #
# objective and E/M steps
# --------------------------------------------------------------------- #


def brute_force_quasi_likelihood(data, fit, family):
    total = 0.0
    for i, s in enumerate(data.subjects):
        terms = []
        for k in range(fit.K):
            mu = family.link(s.X @ fit.beta[k])
            terms.append(np.log(fit.pi[k]) + float(np.sum(family.q(mu, s.y))))
        total += logsumexp(terms)
    return total


def random_fit(K, p, seed):
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(K) * 3)
    return MixtureFit(
        pi=pi, beta=rng.normal(size=(K, p)), phi=rng.uniform(0.5, 2.0, size=K)
    )


def test_quasi_likelihood_matches_brute_force(small_gaussian):
    fit = random_fit(3, small_gaussian.p, seed=2)
    got = quasi_likelihood(small_gaussian, fit, GAUSSIAN)
    assert got == pytest.approx(
        brute_force_quasi_likelihood(small_gaussian, fit, GAUSSIAN), rel=1e-12
    )


def test_penalized_objective_subtracts_monitored_penalty(small_gaussian):
    fit = random_fit(2, small_gaussian.p, seed=3)
    lam, eps = 0.05, 1e-10
    q = quasi_likelihood(small_gaussian, fit, GAUSSIAN)
    pen = small_gaussian.n * lam * np.sum(np.log(eps + fit.pi) - np.log(eps))
    got = penalized_objective(small_gaussian, fit, GAUSSIAN, lam)
    assert got == pytest.approx(q - pen, rel=1e-12)
    assert penalized_objective(small_gaussian, fit, GAUSSIAN, 0.0) == pytest.approx(q)


def test_e_step_rows_normalized_and_match_direct(small_gaussian):
    fit = random_fit(3, small_gaussian.p, seed=4)
    u = e_step(small_gaussian, fit, GAUSSIAN)
    assert u.shape == (small_gaussian.n, 3)
    assert np.allclose(u.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(u >= 0)
    # direct computation for one subject
    s = small_gaussian.subjects[0]
    scores = [
        np.log(fit.pi[k])
        + float(np.sum(GAUSSIAN.q(s.X @ fit.beta[k], s.y))) / fit.phi[k]
        for k in range(3)
    ]
    direct = np.exp(scores - logsumexp(scores))
    assert np.allclose(u[0], direct, atol=1e-12)


def test_m_step_pi_untruncated_is_mean_responsibility():
    """When nothing is truncated the update is exactly the analytic mean."""
    rng = np.random.default_rng(0)
    u = rng.dirichlet(np.ones(3) * 5, size=50)
    pi, kept = m_step_pi(u, 0.01)
    ubar = u.mean(axis=0)
    assert np.all(kept)
    assert np.allclose(pi, (ubar - 0.01) / (1 - 0.03), atol=1e-14)
    assert pi.sum() == pytest.approx(1.0, abs=1e-12)


def test_m_step_pi_truncates_and_renormalizes():
    u = np.array([[0.98, 0.01, 0.01]] * 100)
    pi, kept = m_step_pi(u, 0.05)
    assert kept.tolist() == [True, False, False]
    assert pi.tolist() == [1.0]


def test_m_step_pi_rejects_infeasible_penalty():
    u = np.full((10, 4), 0.25)
    with pytest.raises(SettingsError):
        m_step_pi(u, 0.3)  # 0.3 * 4 >= 1


@given(lam=st.floats(0.0, 0.05), seed=st.integers(0, 50))
def test_m_step_pi_always_a_distribution(lam, seed):
    rng = np.random.default_rng(seed)
    u = rng.dirichlet(np.ones(4), size=30)
    pi, kept = m_step_pi(u, lam)
    assert pi.shape[0] == int(kept.sum())
    assert np.all(pi > 0)
    assert pi.sum() == pytest.approx(1.0, abs=1e-9)


def test_m_step_phi_matches_weighted_residual_moments(small_gaussian):
    rng = np.random.default_rng(9)
    u = rng.dirichlet(np.ones(2), size=small_gaussian.n)
    beta = rng.normal(size=(2, small_gaussian.p))
    phi = m_step_phi(small_gaussian, u, beta, GAUSSIAN)
    for k in range(2):
        num = den = 0.0
        for i, s in enumerate(small_gaussian.subjects):
            r2 = np.sum((s.y - s.X @ beta[k]) ** 2)
            num += u[i, k] * r2
            den += u[i, k] * s.m
        assert phi[k] == pytest.approx(num / den, rel=1e-12)


def test_m_step_beta_solves_weighted_quasi_score(small_gaussian):
    rng = np.random.default_rng(10)
    u = rng.dirichlet(np.ones(2), size=small_gaussian.n)
    fit = random_fit(2, small_gaussian.p, seed=10)
    beta = m_step_beta(small_gaussian, u, fit, GAUSSIAN, EmSettings())
    for k in range(2):
        w = u[small_gaussian.subject_index, k]
        resid = small_gaussian.Y - small_gaussian.X @ beta[k]
        score = small_gaussian.X.T @ (w * resid)
        assert np.max(np.abs(score)) < 1e-6


# --------------------------------------------------------------------- #
# full EM fits
# --------------------------------------------------------------------- #


def single_component_init(data, family):
    beta = fit_quasi_glm(data.Y, data.X, family) * 0.5  # deliberately off
    u = np.ones((data.n, 1))
    phi = m_step_phi(data, u, beta[None, :], family)
    return MixtureFit(pi=np.ones(1), beta=beta[None, :], phi=phi)


def test_fit_em_single_component_equals_glm(small_gaussian):
    """lambda=0 with K=1 reduces to a single quasi-GLM (OLS here)."""
    init = single_component_init(small_gaussian, GAUSSIAN)
    fit = fit_em(small_gaussian, GAUSSIAN, init, EmSettings(lam=0.0))
    ols = np.linalg.lstsq(small_gaussian.X, small_gaussian.Y, rcond=None)[0]
    assert fit.K == 1
    assert np.allclose(fit.beta[0], ols, atol=1e-7)


def test_fit_em_monotone_ascent_without_dispersion():
    """lambda=0 and phi held at 1 is plain EM: Q never decreases."""
    data, _, _ = make_two_cluster_dataset(n=30, seed=7)
    init = random_fit(3, 2, seed=1)
    fit = fit_em(data, GAUSSIAN, init, EmSettings(lam=0.0, fixed_phi=1.0))
    diffs = np.diff(fit.objective_trace)
    assert np.all(diffs >= -1e-7 * (1.0 + np.abs(fit.objective_trace[:-1])))


def test_fit_em_recovers_two_separated_components(two_cluster):
    data, labels, betas = two_cluster
    init = random_fit(2, 2, seed=3)
    # push the random init toward the data so both components survive
    init = MixtureFit(
        pi=np.array([0.5, 0.5]),
        beta=betas + 0.5,
        phi=np.array([1.0, 1.0]),
    )
    fit = fit_em(data, GAUSSIAN, init, EmSettings(lam=0.01))
    assert fit.K == 2
    assert fit.converged
    order = np.argsort(fit.beta[:, 0])
    assert np.allclose(fit.beta[order], betas[np.argsort(betas[:, 0])], atol=0.3)


def test_fit_em_bitwise_deterministic(two_cluster):
    data, _, betas = two_cluster
    init = MixtureFit(
        pi=np.array([0.5, 0.5]), beta=betas + 0.3, phi=np.array([1.0, 1.0])
    )
    a = fit_em(data, GAUSSIAN, init, EmSettings(lam=0.01))
    b = fit_em(data, GAUSSIAN, init, EmSettings(lam=0.01))
    assert np.array_equal(a.objective_trace, b.objective_trace)
    assert np.array_equal(a.beta, b.beta)
    assert np.array_equal(a.pi, b.pi)
    assert np.array_equal(a.phi, b.phi)


def test_fit_em_invariant_to_init_label_permutation(two_cluster):
    data, _, betas = two_cluster
    init = MixtureFit(
        pi=np.array([0.4, 0.6]), beta=betas + 0.3, phi=np.array([1.0, 1.2])
    )
    perm = MixtureFit(
        pi=init.pi[::-1].copy(), beta=init.beta[::-1].copy(), phi=init.phi[::-1].copy()
    )
    a = fit_em(data, GAUSSIAN, init, EmSettings(lam=0.01))
    b = fit_em(data, GAUSSIAN, perm, EmSettings(lam=0.01))
    assert np.allclose(a.beta, b.beta, atol=1e-9)
    assert np.allclose(a.pi, b.pi, atol=1e-9)


def test_order_components_idempotent_and_sorts():
    fit = MixtureFit(
        pi=np.array([0.3, 0.7]),
        beta=np.array([[3.0, 1.0], [-1.0, 2.0]]),
        phi=np.array([1.0, 2.0]),
    )
    ordered = order_components(fit)
    assert np.allclose(ordered.beta[:, 0], [-1.0, 3.0])
    assert np.allclose(ordered.pi, [0.7, 0.3])
    again = order_components(ordered)
    assert np.array_equal(again.beta, ordered.beta)


def test_mixture_fit_validation():
    with pytest.raises(ArgumentError):
        MixtureFit(pi=np.array([0.5, 0.6]), beta=np.zeros((2, 1)), phi=np.ones(2))
    with pytest.raises(ArgumentError):
        MixtureFit(pi=np.array([1.0, 0.0]), beta=np.zeros((2, 1)), phi=np.ones(2))
    with pytest.raises(ArgumentError):
        MixtureFit(pi=np.ones(1), beta=np.zeros((2, 1)), phi=np.ones(2))


# --------------------------------------------------------------------- #
# sandwich covariance
# --------------------------------------------------------------------- #


def test_psi_gradient_matches_finite_differences():
    from longmix.em import _psi_gradients, _theta_pack, _theta_unpack

    data = make_dataset(n=12, m=3, p=2, seed=21)
    fit = random_fit(2, 2, seed=21)
    K, p = 2, 2
    theta = _theta_pack(fit)

    def psi_per_subject(th):
        pi, beta = _theta_unpack(th, K, p)
        vals = []
        for s in data.subjects:
            terms = [
                np.log(pi[k]) + float(np.sum(GAUSSIAN.q(s.X @ beta[k], s.y)))
                for k in range(K)
            ]
            vals.append(logsumexp(terms))
        return np.asarray(vals)

    grads = _psi_gradients(data, GAUSSIAN, fit.pi, fit.beta)
    h = 1e-6
    for j in range(theta.shape[0]):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        num = (psi_per_subject(tp) - psi_per_subject(tm)) / (2 * h)
        # floor the denominator: near-zero entries are roundoff-limited in FD
        denom = np.maximum(np.abs(num), 1e-3)
        assert np.max(np.abs(num - grads[:, j]) / denom) < 1e-5


def test_sandwich_single_component_equals_cluster_robust_ols():
    data = make_dataset(n=40, m=4, p=2, seed=30, sigma=0.7)
    ols = np.linalg.lstsq(data.X, data.Y, rcond=None)[0]
    fit = MixtureFit(pi=np.ones(1), beta=ols[None, :], phi=np.array([1.0]))
    cov = sandwich_covariance(data, fit, GAUSSIAN)
    # oracle: cluster-robust OLS sandwich computed from first principles
    n = data.n
    B = np.zeros((2, 2))
    grads = np.zeros((n, 2))
    for i, s in enumerate(data.subjects):
        B += s.X.T @ s.X / n
        grads[i] = s.X.T @ (s.y - s.X @ ols)
    A = np.cov(grads.T, bias=True)
    oracle = np.linalg.inv(B) @ A @ np.linalg.inv(B) / n
    assert np.allclose(cov, oracle, rtol=1e-4, atol=1e-8)


def test_sandwich_positive_variances(two_cluster):
    data, _, betas = two_cluster
    init = MixtureFit(
        pi=np.array([0.5, 0.5]), beta=betas + 0.2, phi=np.array([1.0, 1.0])
    )
    fit = fit_em(data, GAUSSIAN, init, EmSettings(lam=0.01))
    cov = sandwich_covariance(data, fit, GAUSSIAN)
    assert cov.shape == (2 * 2 + 1, 2 * 2 + 1)
    assert np.all(np.diag(cov) > 0)
