"""Two-step refinement: per-class GEE with a working correlation.

After the mixture fit classifies every subject, each class is
re-estimated by generalized estimating equations under an
independence, AR(1) or exchangeable working correlation.  Class
assignments are taken from the mixture fit and never change here;
proportions are kept from the fit and only the regression and
dispersion parameters are refit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset, SubjectBlock
from .em import MixtureFit
from .exceptions import (
    ArgumentError,
    ClassCollapseError,
    InnerSolverError,
    NumericalError,
)
from .families import ModelFamily
from .selection import classify

__all__ = [
    "WorkingCorrelation",
    "RefinedFit",
    "correlation_matrix",
    "estimate_rho",
    "gee_fit",
    "refine",
]

KINDS = ("independence", "ar1", "exchangeable")


@dataclass(frozen=True)
class WorkingCorrelation:
    kind: str
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown working correlation {self.kind!r}")


@dataclass
class RefinedFit:
    beta: np.ndarray  # (K, p)
    phi: np.ndarray  # (K,)
    rho: np.ndarray  # (K,)
    pi: np.ndarray  # carried over from the mixture fit
    assignment: np.ndarray  # (n,) class per subject
    kind: str
    independence_fallback: bool = False


def correlation_matrix(kind: str, rho: float, m: int) -> np.ndarray:
    """Working correlation matrix R(rho) of size m."""
    if kind == "independence" or m == 1:
        return np.eye(m)
    if kind == "ar1":
        idx = np.arange(m)
        return rho ** np.abs(idx[:, None] - idx[None, :])
    R = np.full((m, m), rho)
    np.fill_diagonal(R, 1.0)
    return R


def estimate_rho(residuals: list[np.ndarray], kind: str) -> tuple[float, bool]:
    """Moment estimate of the correlation from Pearson residuals.

    Returns (rho, fallback); fallback is True when no subject has at
    least two observations, in which case independence is used.
    """
    if kind == "independence":
        return 0.0, False
    usable = [e for e in residuals if e.shape[0] >= 2]
    if not usable:
        return 0.0, True
    max_m = max(e.shape[0] for e in usable)
    if kind == "ar1":
        num = sum(float(np.sum(e[:-1] * e[1:])) for e in usable)
        den = sum(e.shape[0] - 1 for e in usable)
        rho = num / den
        return float(np.clip(rho, -0.99, 0.99)), False
    # exchangeable
    num = 0.0
    den = 0
    for e in usable:
        m = e.shape[0]
        s = float(np.sum(e))
        num += 0.5 * (s * s - float(np.sum(e * e)))
        den += m * (m - 1) // 2
    rho = num / den
    lower = -1.0 / (max_m - 1) + 1e-6
    return float(np.clip(rho, lower, 0.99)), False


def gee_fit(
    subjects: list[SubjectBlock],
    family: ModelFamily,
    kind: str,
    init_beta: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> tuple[np.ndarray, float, float, bool]:
    """Solve the GEE estimating equations for one class.

    Returns (beta, phi, rho, fallback).
    """
    if not subjects:
        raise ClassCollapseError("empty class passed to the GEE solver")
    beta = np.asarray(init_beta, dtype=float).copy()
    p = beta.shape[0]
    rho = 0.0
    phi = 1.0
    fallback = False
    for _ in range(max_iter):
        lhs = np.zeros((p, p))
        rhs = np.zeros(p)
        resid_rows = []
        sq_sum = 0.0
        n_obs = 0
        for s in subjects:
            eta = s.X @ beta
            mu = family.link(eta)
            family.check_mean(mu)
            d = family.link_deriv(eta)
            v = family.variance(mu)
            r = s.y - mu
            sq_sum += float(np.sum(r * r / v))
            n_obs += s.m
            resid_rows.append((mu, d, v, r))
        phi = max(sq_sum / n_obs, 1e-10)
        pearson = [
            r / np.sqrt(phi * v) for (_mu, _d, v, r) in resid_rows
        ]
        rho, fb = estimate_rho(pearson, kind)
        fallback = fallback or fb
        eff_kind = "independence" if fb else kind
        for s, (mu, d, v, r) in zip(subjects, resid_rows):
            D = s.X * d[:, None]  # d mu / d beta
            A_half = np.sqrt(v)
            R = correlation_matrix(eff_kind, rho, s.m)
            V = phi * (A_half[:, None] * R * A_half[None, :])
            try:
                Vinv_r = np.linalg.solve(V, r)
                Vinv_D = np.linalg.solve(V, D)
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"singular working covariance for subject {s.subject_id!r}"
                ) from None
            lhs += D.T @ Vinv_D
            rhs += D.T @ Vinv_r
        try:
            step = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            raise NumericalError("singular GEE normal matrix") from None
        beta = beta + step
        if float(np.max(np.abs(step))) <= tol:
            return beta, phi, rho, fallback
    raise InnerSolverError("GEE iteration did not converge", last_iterate=beta)


def refine(
    data: LongitudinalDataset,
    fit: MixtureFit,
    family: ModelFamily,
    kind: str,
) -> RefinedFit:
    """Classify every subject with the fit, then run GEE within each class."""
    if kind not in KINDS:
        raise ArgumentError(f"unknown working correlation {kind!r}")
    assignment = np.array(
        [classify(fit, family, s)[0] for s in data.subjects], dtype=int
    )
    K = fit.K
    beta = fit.beta.copy()
    phi = fit.phi.copy()
    rho = np.zeros(K)
    fallback = False
    for k in range(K):
        members = [s for s, a in zip(data.subjects, assignment) if a == k]
        if not members:
            raise ClassCollapseError(f"class {k} is empty after assignment")
        beta[k], phi[k], rho[k], fb = gee_fit(members, family, kind, fit.beta[k])
        fallback = fallback or fb
    return RefinedFit(
        beta=beta,
        phi=phi,
        rho=rho,
        pi=fit.pi.copy(),
        assignment=assignment,
        kind=kind,
        independence_fallback=fallback,
    )
