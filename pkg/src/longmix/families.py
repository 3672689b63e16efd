"""Model families: link function, variance function and quasi-likelihood.

Each family specifies the mean map ``mu = link(eta)`` for the linear
predictor ``eta = x'beta``, its derivative, the variance function
``V(mu)`` and the quasi-log-density ``q(mu; y)`` whose mu-derivative is
``(y - mu) / V(mu)``.  The additive constant of ``q`` is pinned by
taking the integral of ``(y - t)/V(t)`` from ``y`` to ``mu``, so
``q(y; y) = 0`` and ``q <= 0`` for every family (gaussian:
``-(y-mu)^2/2``; poisson: ``y log(mu/y) - (mu - y)``; binomial: the
binomial deviance half).  The convention matters: constants do not
cancel across components with unequal dispersions, nor in the
selection criterion.

Out-of-domain means raise rather than clamp; a diverging inner Newton
step should surface as an error, not be hidden.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .exceptions import ArgumentError, MeanDomainError

__all__ = [
    "ModelFamily",
    "get_family",
    "quasi_log_density",
    "quasi_log_density_dispersed",
    "FAMILY_NAMES",
]


@dataclass(frozen=True)
class ModelFamily:
    """Immutable bundle of link, variance and quasi-likelihood callables.

    All callables are vectorized over numpy arrays.  Instances carry no
    state and are safe to share across workers.
    """

    name: str
    link: Callable[[np.ndarray], np.ndarray]
    link_deriv: Callable[[np.ndarray], np.ndarray]
    inverse_link: Callable[[np.ndarray], np.ndarray]
    variance: Callable[[np.ndarray], np.ndarray]
    q: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    in_domain: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def check_mean(self, mu) -> None:
        mu = np.asarray(mu, dtype=float)
        ok = self.in_domain(mu)
        if not np.all(ok):
            bad = mu[~np.asarray(ok, dtype=bool)].ravel()
            raise MeanDomainError(
                f"mean {bad[0]!r} outside the domain of family '{self.name}'"
            )


def _gaussian_q(mu, y):
    return -0.5 * (y - mu) ** 2


def _poisson_q(mu, y):
    return special.xlogy(y, mu) - special.xlogy(y, y) - (mu - y)


def _binomial_q(mu, y):
    return (
        special.xlogy(y, mu)
        - special.xlogy(y, y)
        + special.xlogy(1.0 - y, 1.0 - mu)
        - special.xlogy(1.0 - y, 1.0 - y)
    )


_GAUSSIAN = ModelFamily(
    name="gaussian",
    link=lambda eta: np.asarray(eta, dtype=float),
    link_deriv=lambda eta: np.ones_like(np.asarray(eta, dtype=float)),
    inverse_link=lambda mu: np.asarray(mu, dtype=float),
    variance=lambda mu: np.ones_like(np.asarray(mu, dtype=float)),
    q=_gaussian_q,
    in_domain=lambda mu: np.isfinite(mu),
)

_POISSON = ModelFamily(
    name="poisson",
    link=np.exp,
    link_deriv=np.exp,
    inverse_link=np.log,
    variance=lambda mu: np.asarray(mu, dtype=float),
    q=_poisson_q,
    in_domain=lambda mu: np.isfinite(mu) & (mu > 0),
)


def _expit_deriv(eta):
    p = special.expit(eta)
    return p * (1.0 - p)


_BINOMIAL = ModelFamily(
    name="binomial",
    link=special.expit,
    link_deriv=_expit_deriv,
    inverse_link=special.logit,
    variance=lambda mu: np.asarray(mu, dtype=float) * (1.0 - np.asarray(mu, dtype=float)),
    q=_binomial_q,
    in_domain=lambda mu: np.isfinite(mu) & (mu > 0) & (mu < 1),
)

_FAMILIES = {
    "gaussian": _GAUSSIAN,
    "poisson": _POISSON,
    "binomial": _BINOMIAL,
}

FAMILY_NAMES = tuple(sorted(_FAMILIES))


def get_family(name: str) -> ModelFamily:
    """Resolve a family by its user-facing name."""
    try:
        return _FAMILIES[name]
    except KeyError:
        raise ArgumentError(
            f"unknown family {name!r}; expected one of {', '.join(FAMILY_NAMES)}"
        ) from None


def quasi_log_density(family: ModelFamily, mu, y):
    """q(mu; y), the antiderivative of (y - t)/V(t), with pinned constant."""
    family.check_mean(mu)
    return family.q(np.asarray(mu, dtype=float), np.asarray(y, dtype=float))


def quasi_log_density_dispersed(family: ModelFamily, mu, phi, y):
    """q(mu; y) / phi: the dispersion-scaled integrand divides by phi."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise ArgumentError(f"dispersion must be positive, got {phi!r}")
    return quasi_log_density(family, mu, y) / phi
