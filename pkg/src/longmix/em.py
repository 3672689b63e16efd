"""Modified EM algorithm for the penalized quasi-likelihood mixture.

For a fixed tuning parameter the algorithm alternates:

* E-step: responsibilities from the dispersion-scaled quasi-log-density
  ``q(mu; y) / phi_k``,
* proportion update in closed form with soft-thresholding at the tuning
  parameter (components driven to zero are pruned and the algorithm
  continues with fewer components),
* per-component regression update by weighted Fisher scoring on the
  quasi-score equations,
* dispersion update by the residual-moment method.

The monitored objective is the quasi-likelihood minus
``n * lambda * sum_k [log(eps + pi_k) - log(eps)]`` with a tiny fixed
eps; the proportion update itself never uses eps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .data import LongitudinalDataset
from .exceptions import (
    ArgumentError,
    CollapseError,
    InnerSolverError,
    NearSingularError,
    NumericalError,
    RankDeficiencyError,
    SettingsError,
)
from .families import ModelFamily

__all__ = [
    "MixtureFit",
    "EmSettings",
    "quasi_likelihood",
    "penalized_objective",
    "e_step",
    "m_step_pi",
    "m_step_beta",
    "m_step_phi",
    "fit_em",
    "fit_quasi_glm",
    "order_components",
    "sandwich_covariance",
]

TRACE_EPSILON = 1e-10


@dataclass
class MixtureFit:
    """Fitted mixture: proportions, coefficient matrix, dispersions."""

    pi: np.ndarray  # (K,)
    beta: np.ndarray  # (K, p)
    phi: np.ndarray  # (K,)
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    converged: bool = False
    iterations: int = 0

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.phi = np.asarray(self.phi, dtype=float)
        self.objective_trace = np.asarray(self.objective_trace, dtype=float)
        if not (self.pi.shape[0] == self.beta.shape[0] == self.phi.shape[0]):
            raise ArgumentError("pi, beta, phi must agree on the number of components")
        if np.any(self.pi <= 0):
            raise ArgumentError("proportions must be strictly positive (prune zeros)")
        if abs(self.pi.sum() - 1.0) > 1e-10:
            raise ArgumentError("proportions must sum to 1")

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]


@dataclass(frozen=True)
class EmSettings:
    """Knobs for a single EM run at fixed tuning parameter ``lam``."""

    lam: float = 0.0
    max_iter: int = 500
    tol_obj: float = 1e-8
    tol_param: float = 1e-6
    beta_tol: float = 1e-8
    beta_max_steps: int = 50
    max_halvings: int = 30
    prune_threshold: float = 1e-8
    min_effective_subjects: float = 2.0
    phi_floor: float = 1e-8
    seed: int = 0
    fixed_phi: float | None = None  # hold dispersions fixed (diagnostics only)

    def __post_init__(self):
        if self.lam < 0:
            raise SettingsError("lambda must be nonnegative")
        for name in ("tol_obj", "tol_param", "beta_tol"):
            if getattr(self, name) <= 0:
                raise SettingsError(f"{name} must be positive")


# --------------------------------------------------------------------- #
# per-row building blocks
# --------------------------------------------------------------------- #


def _row_q(data: LongitudinalDataset, family: ModelFamily, beta: np.ndarray) -> np.ndarray:
    """q(g(x'beta_k); y) for every pooled row and component: (N, K)."""
    eta = data.X @ beta.T
    mu = family.link(eta)
    family.check_mean(mu)
    return family.q(mu, data.Y[:, None])


def _subject_log_weights(data, family, fit, dispersed: bool) -> np.ndarray:
    """log pi_k + sum_j q(.) per subject; q divided by phi_k when dispersed."""
    qrows = _row_q(data, family, fit.beta)
    if dispersed:
        qrows = qrows / fit.phi[None, :]
    sums = data.subject_sums(qrows)
    return np.log(fit.pi)[None, :] + sums


# --------------------------------------------------------------------- #
# objective and E/M steps
# --------------------------------------------------------------------- #


def quasi_likelihood(data: LongitudinalDataset, fit: MixtureFit, family: ModelFamily) -> float:
    """Working-independence quasi-log-likelihood of the mixture."""
    logw = _subject_log_weights(data, family, fit, dispersed=False)
    if np.any(np.isnan(logw)) or np.any(np.isposinf(logw)):
        i, k = np.argwhere(~(np.isfinite(logw) | np.isneginf(logw)))[0]
        raise NumericalError(
            f"non-finite component exponent for subject index {i}, component {k}"
        )
    return float(np.sum(logsumexp(logw, axis=1)))


def penalized_objective(
    data: LongitudinalDataset,
    fit: MixtureFit,
    family: ModelFamily,
    lam: float,
    epsilon: float = TRACE_EPSILON,
) -> float:
    """Quasi-likelihood minus the log-proportion penalty (monitoring only)."""
    if epsilon <= 0:
        raise ArgumentError("epsilon must be positive")
    q = quasi_likelihood(data, fit, family)
    penalty = data.n * lam * float(np.sum(np.log(epsilon + fit.pi) - np.log(epsilon)))
    return q - penalty


def e_step(data: LongitudinalDataset, fit: MixtureFit, family: ModelFamily) -> np.ndarray:
    """Posterior responsibilities (n, K); rows sum to one."""
    logw = _subject_log_weights(data, family, fit, dispersed=True)
    row_max = logw.max(axis=1)
    dead = ~np.isfinite(row_max)
    if np.any(dead):
        i = int(np.flatnonzero(dead)[0])
        raise NumericalError(
            f"all component weights vanished for subject index {i}"
        )
    w = np.exp(logw - row_max[:, None])
    return w / w.sum(axis=1, keepdims=True)


def m_step_pi(u: np.ndarray, lam: float):
    """Closed-form proportion update with soft truncation at ``lam``.

    Returns ``(pi, kept)`` where ``pi`` holds the renormalized surviving
    proportions and ``kept`` is the boolean mask of surviving components.
    When no entry is truncated the raw values already sum to one and no
    renormalization is applied.
    """
    K = u.shape[1]
    if lam * K >= 1.0:
        raise SettingsError(
            f"lambda * K = {lam * K:.4f} >= 1; penalty too large for K={K}"
        )
    ubar = u.mean(axis=0)
    raw = np.maximum(0.0, (ubar - lam) / (1.0 - lam * K))
    kept = raw > 0.0
    if not np.any(kept):
        raise CollapseError("proportion update truncated every component")
    pi = raw[kept]
    if not np.all(kept):
        pi = pi / pi.sum()
    return pi, kept


def _fisher_scoring(y, X, w, family, beta0, settings: EmSettings, label=""):
    """Solve the weighted quasi-score equations by expected-information Newton."""
    beta = np.asarray(beta0, dtype=float).copy()

    def parts(b):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            eta = X @ b
            mu = family.link(eta)
            family.check_mean(mu)
            d = family.link_deriv(eta)
            v = family.variance(mu)
            obj = float(np.sum(w * family.q(mu, y)))
        if not np.isfinite(obj):
            raise NumericalError(f"non-finite quasi-likelihood{label}")
        return mu, d, v, obj

    mu, d, v, obj = parts(beta)
    for _ in range(settings.beta_max_steps):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            resid = (y - mu) / v
            score = X.T @ (w * d * resid)
            if np.all(np.isfinite(score)) and np.max(np.abs(score)) <= settings.beta_tol:
                return beta
            W = w * d * d / v
            info = X.T @ (X * W[:, None])
        if not (np.all(np.isfinite(score)) and np.all(np.isfinite(info))):
            raise RankDeficiencyError(f"non-finite quasi-score system{label}")
        # a (near-)singular system gets an escalating ridge; the damped
        # direction is still an ascent direction and step-halving below
        # protects the objective
        scale_diag = float(np.mean(np.diag(info))) or 1.0
        tau = 0.0
        eye = np.eye(info.shape[0])
        while True:
            try:
                step = np.linalg.solve(info + tau * scale_diag * eye, score)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                break
            tau = 1e-10 if tau == 0.0 else tau * 100.0
            if tau > 1.0:
                raise RankDeficiencyError(
                    f"singular expected information matrix{label}"
                ) from None
        # step-halving on the weighted quasi-likelihood
        scale = 1.0
        for _h in range(settings.max_halvings + 1):
            cand = beta + scale * step
            try:
                mu_c, d_c, v_c, obj_c = parts(cand)
            except Exception:
                scale *= 0.5
                continue
            if obj_c >= obj - 1e-12:
                break
            scale *= 0.5
        else:
            # no acceptable step; treat as converged-at-boundary
            return beta
        step_norm = float(np.linalg.norm(scale * step))
        beta, mu, d, v, obj = cand, mu_c, d_c, v_c, obj_c
        if step_norm <= settings.tol_param:
            return beta
    resid = (y - mu) / v
    score = X.T @ (w * d * resid)
    if np.max(np.abs(score)) <= max(settings.beta_tol, 1e-6 * (1.0 + np.abs(obj))):
        return beta
    raise InnerSolverError(
        f"quasi-score solver did not converge{label}", last_iterate=beta
    )


def m_step_beta(
    data: LongitudinalDataset,
    u: np.ndarray,
    fit: MixtureFit,
    family: ModelFamily,
    settings: EmSettings,
) -> np.ndarray:
    """Update every component's coefficients from the weighted quasi-score."""
    beta = fit.beta.copy()
    for k in range(fit.K):
        if float(np.sum(u[:, k] * data.m)) <= 0:
            raise ArgumentError(f"component {k} has zero effective weight")
        w_rows = u[data.subject_index, k]
        beta[k] = _fisher_scoring(
            data.Y, data.X, w_rows, family, beta[k], settings,
            label=f" for component {k}",
        )
    return beta


def m_step_phi(
    data: LongitudinalDataset,
    u: np.ndarray,
    beta: np.ndarray,
    family: ModelFamily,
    phi_floor: float = 1e-8,
) -> np.ndarray:
    """Residual-moment dispersion update, floored at ``phi_floor``."""
    K = beta.shape[0]
    phi = np.empty(K)
    for k in range(K):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            eta = data.X @ beta[k]
            mu = family.link(eta)
            r2 = (data.Y - mu) ** 2 / family.variance(mu)
        # extreme interim coefficients can overflow the squared residual;
        # a huge finite dispersion keeps such a component harmless
        r2 = np.nan_to_num(r2, nan=1e300, posinf=1e300)
        per_subject = data.subject_sums(r2)
        denom = float(np.sum(data.m * u[:, k]))
        if denom <= 0:
            raise ArgumentError(f"component {k} has zero effective weight")
        phi[k] = float(np.sum(u[:, k] * per_subject)) / denom
    return np.maximum(phi, phi_floor)


def order_components(fit: MixtureFit) -> MixtureFit:
    """Sort components by the first coefficient, then second, then -pi."""
    keys = [-fit.pi]
    if fit.p >= 2:
        keys.append(fit.beta[:, 1])
    keys.append(fit.beta[:, 0])
    order = np.lexsort(tuple(keys))
    return replace(
        fit,
        pi=fit.pi[order],
        beta=fit.beta[order],
        phi=fit.phi[order],
    )


def fit_em(
    data: LongitudinalDataset,
    family: ModelFamily,
    init: MixtureFit,
    settings: EmSettings,
) -> MixtureFit:
    """Run the modified EM from ``init`` until the objective plateaus.

    Pruned components are dropped permanently and iteration continues
    with the reduced mixture; the lambda*K < 1 requirement is rechecked
    every iteration because K only shrinks.
    """
    pi = init.pi.copy()
    beta = init.beta.copy()
    phi = init.phi.copy()
    if settings.fixed_phi is not None:
        phi = np.full_like(phi, settings.fixed_phi)
    trace = []
    converged = False
    it = 0
    iters_since_prune = 0
    for it in range(1, settings.max_iter + 1):
        cur = MixtureFit(pi=pi, beta=beta, phi=phi)
        u = e_step(data, cur, family)
        pi_new, kept = m_step_pi(u, settings.lam)
        # additional guards: float dust and degenerate components
        eff = u.sum(axis=0)[kept]
        keep2 = (pi_new > settings.prune_threshold) & (
            eff >= settings.min_effective_subjects
        )
        pruned = (not np.all(kept)) or (not np.all(keep2))
        if not np.any(keep2):
            raise CollapseError("all mixture components were pruned")
        pi_prev, beta_prev, phi_prev = pi, beta, phi
        pi = pi_new[keep2]
        pi = pi / pi.sum()
        beta = beta[kept][keep2]
        phi = phi[kept][keep2]
        u = u[:, kept][:, keep2]
        u = u / u.sum(axis=1, keepdims=True)
        cur = MixtureFit(pi=pi, beta=beta, phi=phi)
        beta = m_step_beta(data, u, cur, family, settings)
        if settings.fixed_phi is None:
            phi = m_step_phi(data, u, beta, family, settings.phi_floor)
        qp = penalized_objective(
            data,
            MixtureFit(pi=pi, beta=beta, phi=phi),
            family,
            settings.lam,
            TRACE_EPSILON,
        )
        trace.append(qp)
        if pruned:
            iters_since_prune = 0
        else:
            iters_since_prune += 1
        if len(trace) >= 2 and iters_since_prune >= 1:
            rel = abs(trace[-1] - trace[-2]) / (abs(trace[-1]) + 1.0)
            dparam = max(
                float(np.max(np.abs(pi - pi_prev))),
                float(np.max(np.abs(beta - beta_prev))),
                float(np.max(np.abs(phi - phi_prev))),
            )
            # the dispersion-aware E-step paired with the dispersion-free
            # M-step can settle into an exact 2-cycle (a boundary subject
            # flipping membership each iteration); a lag-2 plateau is
            # treated as numerical convergence as well
            rel2 = (
                abs(trace[-1] - trace[-3]) / (abs(trace[-1]) + 1.0)
                if len(trace) >= 3 and iters_since_prune >= 2
                else np.inf
            )
            if (
                rel <= settings.tol_obj
                or rel2 <= settings.tol_obj
                or dparam <= settings.tol_param
            ):
                converged = True
                break
    fit = MixtureFit(
        pi=pi,
        beta=beta,
        phi=phi,
        objective_trace=np.asarray(trace),
        converged=converged,
        iterations=it,
    )
    return order_components(fit)


def fit_quasi_glm(
    y: np.ndarray,
    X: np.ndarray,
    family: ModelFamily,
    settings: EmSettings | None = None,
    beta0: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Single-population quasi-GLM fit (unit weights by default)."""
    settings = settings or EmSettings()
    y = np.asarray(y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if beta0 is None:
        beta0 = _glm_start(y, X, family)
    return _fisher_scoring(y, X, w, family, beta0, settings)


def _glm_start(y, X, family):
    """Cheap starting value: least squares on the linearized response."""
    if family.name == "gaussian":
        target = y
    elif family.name == "poisson":
        target = np.log(np.maximum(y, 0.5))
    else:
        target = family.inverse_link(np.clip(y, 0.02, 0.98))
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    return coef


# --------------------------------------------------------------------- #
# sandwich covariance
# --------------------------------------------------------------------- #


def _theta_pack(fit: MixtureFit) -> np.ndarray:
    if fit.K == 1:
        return fit.beta.ravel().copy()
    return np.concatenate([fit.beta.ravel(), fit.pi[:-1]])


def _theta_unpack(theta: np.ndarray, K: int, p: int):
    beta = theta[: K * p].reshape(K, p)
    if K == 1:
        pi = np.ones(1)
    else:
        head = theta[K * p :]
        pi = np.concatenate([head, [1.0 - head.sum()]])
    return pi, beta


def _psi_gradients(data, family, pi, beta):
    """Per-subject gradient of log Psi w.r.t. (beta stacked, pi_1..pi_{K-1})."""
    K, p = beta.shape
    qrows = _row_q(data, family, beta)
    sums = data.subject_sums(qrows)  # (n, K)
    logw = np.log(pi)[None, :] + sums
    lse = logsumexp(logw, axis=1)
    w = np.exp(logw - lse[:, None])  # posterior under q (no dispersion)
    n = data.n
    dim = K * p + (K - 1 if K > 1 else 0)
    grads = np.empty((n, dim))
    eta = data.X @ beta.T
    mu = family.link(eta)
    d = family.link_deriv(eta)
    v = family.variance(mu)
    g = d * (data.Y[:, None] - mu) / v  # (N, K)
    for k in range(K):
        per_subj = data.subject_sums(data.X * g[:, k, None])  # (n, p)
        grads[:, k * p : (k + 1) * p] = w[:, k, None] * per_subj
    if K > 1:
        fk = np.exp(sums - lse[:, None])  # f_k / Psi
        grads[:, K * p :] = fk[:, : K - 1] - fk[:, K - 1 :]
    return grads


def sandwich_covariance(
    data: LongitudinalDataset, fit: MixtureFit, family: ModelFamily
) -> np.ndarray:
    """Robust covariance of the free parameters: Binv A Binv / n.

    Free parameters are the stacked coefficients and the first K-1
    proportions; dispersions are excluded because the estimating
    objective does not involve them.  A is the empirical covariance of
    per-subject gradients; B is the average negative Hessian obtained by
    central finite differences of the analytic gradient.
    """
    K, p = fit.K, fit.p
    theta = _theta_pack(fit)
    n = data.n

    def mean_grad(th):
        pi, beta = _theta_unpack(th, K, p)
        if np.any(pi <= 0):
            raise NumericalError("proportion left the simplex during differencing")
        return _psi_gradients(data, family, pi, beta).mean(axis=0)

    grads = _psi_gradients(data, family, fit.pi, fit.beta)
    gbar = grads.mean(axis=0)
    centered = grads - gbar
    A = centered.T @ centered / n

    dim = theta.shape[0]
    H = np.empty((dim, dim))
    for j in range(dim):
        h = 1e-5 * (1.0 + abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        H[:, j] = (mean_grad(tp) - mean_grad(tm)) / (2.0 * h)
    B = -0.5 * (H + H.T)
    cond = np.linalg.cond(B)
    if not np.isfinite(cond) or cond > 1e12:
        raise NearSingularError(
            f"near-singular curvature matrix (condition number {cond:.3e})",
            condition_number=float(cond),
        )
    Binv = np.linalg.inv(B)
    return Binv @ A @ Binv / n
