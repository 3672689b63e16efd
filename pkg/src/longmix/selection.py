"""Initialization, tuning-parameter search and the classification rule.

The number of components is chosen implicitly: the smallest
tuning-parameter value is fitted from several K-means-based
initializations (different cluster counts) and the start with the best
penalized objective wins; the remaining grid values are then fitted by
warm-starting each run from the previous value's converged fit, so the
component count only shrinks along the path.  The value minimizing the
BIC-type criterion is selected, ties breaking toward the larger
(sparser) value.

Warm-starting matters: fitting every grid value directly from the raw
many-cluster initialization lets a large penalty prune several small
clusters that jointly cover one true component before the E-step can
consolidate them, which silently merges components.  Started from an
already-consolidated fit, a component is only pruned when its own mean
responsibility genuinely falls below the penalty level.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from .data import LongitudinalDataset, SubjectBlock
from .em import (
    EmSettings,
    MixtureFit,
    e_step,  # noqa: F401  (re-exported for callers pairing init with EM)
    fit_em,
    fit_quasi_glm,
    m_step_phi,
    order_components,
    penalized_objective,
)
from .exceptions import ArgumentError, SelectionError
from .families import ModelFamily

__all__ = [
    "LambdaGrid",
    "SelectionResult",
    "init_kmeans",
    "default_lambda_grid",
    "bic",
    "select_lambda",
    "order_labels",
    "classify",
]


@dataclass(frozen=True)
class LambdaGrid:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) == 0:
            raise ArgumentError("lambda grid is empty")
        if any(v < 0 for v in vals):
            raise ArgumentError("lambda values must be nonnegative")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ArgumentError("lambda grid must be strictly increasing")
        object.__setattr__(self, "values", vals)


@dataclass
class SelectionResult:
    chosen_lambda: float
    fit: MixtureFit
    table: list[tuple[float, int, float, bool]]  # (lambda, K, BIC, converged)
    init: MixtureFit


def default_lambda_grid(n: int, k_init: int) -> LambdaGrid:
    """20 log-spaced values of a/sqrt(n), a in [0.05, 5], kept feasible.

    Values are filtered so that lambda * k_init < 0.99, which the
    closed-form proportion update requires at the initial K.
    """
    if n < 2:
        raise ArgumentError("need at least two subjects")
    a = np.geomspace(0.05, 5.0, 20)
    lam = a / np.sqrt(n)
    lam = lam[lam * k_init < 0.99]
    if lam.size == 0:
        raise ArgumentError(
            f"no feasible lambda for n={n}, k_init={k_init}"
        )
    return LambdaGrid(tuple(lam))


def _subject_features(data: LongitudinalDataset, family: ModelFamily) -> np.ndarray:
    """One feature vector per subject for K-means.

    Subjects with more observations than covariates get their own
    quasi-GLM coefficients (minimum-norm least squares under rank
    deficiency); short subjects get (mean, sd) of the response,
    zero-padded to the common width.
    """
    p = data.p
    width = max(p, 2)
    feats = np.zeros((data.n, width))
    for i, s in enumerate(data.subjects):
        coef = None
        if s.m > p:
            if family.name == "gaussian":
                coef, *_ = np.linalg.lstsq(s.X, s.y, rcond=None)
            else:
                try:
                    coef = fit_quasi_glm(s.y, s.X, family)
                except Exception:
                    coef = None
        if coef is not None and np.all(np.isfinite(coef)):
            feats[i, :p] = coef
        else:
            feats[i, 0] = s.y.mean()
            feats[i, 1] = s.y.std()
    return feats


def _random_partition(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.resize(np.arange(K), n)
    rng.shuffle(labels)
    return labels


def init_kmeans(
    data: LongitudinalDataset,
    family: ModelFamily,
    k_init: int,
    seed: int = 0,
) -> MixtureFit:
    """K-means over per-subject features, then per-cluster quasi-GLM fits."""
    if k_init > data.n:
        raise ArgumentError(f"k_init={k_init} exceeds the number of subjects {data.n}")
    feats = _subject_features(data, family)
    labels = None
    for attempt in range(10):
        km = KMeans(
            n_clusters=k_init,
            init="k-means++",
            n_init=20,
            max_iter=100,
            random_state=seed + attempt,
        )
        cand = km.fit_predict(feats)
        if np.unique(cand).size == k_init:
            labels = cand
            break
    if labels is None:
        labels = _random_partition(data.n, k_init, np.random.default_rng(seed))

    n = data.n
    p = data.p
    counts = np.bincount(labels, minlength=k_init).astype(float)
    pi = np.maximum(counts / n, 1.0 / (2.0 * n))
    pi = pi / pi.sum()

    pooled_beta = fit_quasi_glm(data.Y, data.X, family)
    beta = np.tile(pooled_beta, (k_init, 1))
    for k in range(k_init):
        mask = labels[data.subject_index] == k
        if mask.sum() > p:
            try:
                cand = fit_quasi_glm(
                    data.Y[mask], data.X[mask], family, beta0=pooled_beta.copy()
                )
            except Exception:
                continue  # keep the pooled coefficients for degenerate clusters
            if not np.all(np.isfinite(cand)):
                continue
            if family.name != "gaussian":
                # tiny clusters can separate; an exploding linear predictor
                # would swamp the first E-step
                if np.max(np.abs(data.X[mask] @ cand)) > 30.0:
                    continue
            beta[k] = cand

    u_hard = np.zeros((n, k_init))
    u_hard[np.arange(n), labels] = 1.0
    # avoid zero-weight components in the dispersion update
    u_soft = np.maximum(u_hard, 1e-8)
    phi = np.clip(m_step_phi(data, u_soft, beta, family), None, 1e6)
    return MixtureFit(pi=pi, beta=beta, phi=phi)


def bic(
    data: LongitudinalDataset, fit: MixtureFit, family: ModelFamily
) -> float:
    """BIC-type criterion: dispersion-aware data fit plus K(p+2) log n.

    """
    from .em import _subject_log_weights

    logw = _subject_log_weights(data, family, fit, dispersed=True)
    datafit = -2.0 * float(np.sum(logsumexp(logw, axis=1)))
    penalty = fit.K * (data.p + 2) * np.log(data.n)
    return datafit + penalty


def select_lambda(
    data: LongitudinalDataset,
    family: ModelFamily,
    grid: LambdaGrid,
    settings: EmSettings,
    k_init: int = 10,
    seed: int = 0,
    init: MixtureFit | None = None,
    start_offsets: tuple[int, ...] = (0, 2, 5),
) -> SelectionResult:
    """Fit the grid by a warm-started path and pick the minimum BIC.

    The smallest grid value is fitted from one initialization per entry
    of ``start_offsets`` (each offset added to ``k_init``) and the start
    with the largest penalized objective wins; larger grid values are
    warm-started from the previous converged fit.  When an explicit
    ``init`` is supplied it is the single start.
    """
    lam0 = float(grid.values[0])
    run0 = replace(settings, lam=lam0)
    failures = []
    first = None
    if init is not None:
        starts = [init]
    else:
        kis = sorted({min(k_init + off, data.n) for off in start_offsets})
        starts = []
        for ki in kis:
            try:
                starts.append(init_kmeans(data, family, ki, seed=seed))
            except Exception as exc:
                failures.append((lam0, repr(exc)))
    for start in starts:
        try:
            fit = fit_em(data, family, start, run0)
            qp = penalized_objective(data, fit, family, lam0)
        except Exception as exc:  # recorded; other starts may succeed
            failures.append((lam0, repr(exc)))
            continue
        if first is None or qp > first[1]:
            first = (fit, qp, start)
    if first is None:
        raise SelectionError(
            "no start converged at the smallest tuning value", failures=failures
        )
    init = first[2]

    table = []
    best = None
    cur = first[0]
    for lam in grid.values:
        lam = float(lam)
        if lam == lam0:
            fit = first[0]
        else:
            try:
                fit = fit_em(data, family, cur, replace(settings, lam=lam))
            except Exception as exc:  # recorded; selection continues
                failures.append((lam, repr(exc)))
                table.append((lam, 0, float("nan"), False))
                continue
        table.append((lam, fit.K, bic(data, fit, family), fit.converged))
        if fit.converged:
            cur = fit
            crit = table[-1][2]
            if best is None or crit <= best[1]:
                best = (lam, crit, fit)
    if best is None:
        raise SelectionError(
            "no tuning-parameter value produced a converged fit", failures=failures
        )
    return SelectionResult(
        chosen_lambda=best[0], fit=order_labels(best[2]), table=table, init=init
    )


def order_labels(fit: MixtureFit) -> MixtureFit:
    """Resolve label switching by ordering components on their coefficients."""
    return order_components(fit)


def classify(
    fit: MixtureFit, family: ModelFamily, subject: SubjectBlock
) -> tuple[int, np.ndarray]:
    """Assign a subject to the component with the largest posterior score.

    Returns the class index (ties to the lowest index) and the
    normalized posterior vector.
    """
    if subject.X.shape[1] != fit.p:
        raise ArgumentError(
            f"subject has {subject.X.shape[1]} covariates, fit expects {fit.p}"
        )
    eta = subject.X @ fit.beta.T
    mu = family.link(eta)
    family.check_mean(mu)
    q = family.q(mu, subject.y[:, None]) / fit.phi[None, :]
    scores = np.log(fit.pi) + q.sum(axis=0)
    k_star = int(np.argmax(scores))
    post = np.exp(scores - logsumexp(scores))
    post = post / post.sum()
    return k_star, post
