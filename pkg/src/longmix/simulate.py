"""Synthetic longitudinal mixture designs and the replication harness.

Three stock designs are provided:

* ``example1``: two gaussian components, 300 subjects with six visits on
  a clinical-style covariate layout and AR(1)(0.6) within-subject
  correlation.
* ``example2``: two overdispersed count components; within-subject
  dependence is induced by a Gaussian copula with negative-binomial
  margins (variance phi * mu), so the achieved Pearson correlation
  differs slightly from the latent AR(1) coefficient.
* ``example3``: five gaussian components mixing AR(1), exchangeable and
  independence correlation structures.

The harness runs R independent replications (generate, select the
tuning parameter, classify a fresh test set) and aggregates selection
rates, misclassification and bias/MSE conditional on the correct number
of components, with per-replication seeds derived from a single master
seed by a counter-based split.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .data import LongitudinalDataset, SubjectBlock
from .em import EmSettings
from .exceptions import ArgumentError
from .families import get_family
from .gee import correlation_matrix, refine
from .metrics import bias_mse_table, misclassification
from .selection import LambdaGrid, classify, default_lambda_grid, select_lambda

__all__ = [
    "ComponentSpec",
    "SimDesign",
    "example1_design",
    "example2_design",
    "example3_design",
    "design_from_name",
    "generate",
    "gen_gaussian_mixture",
    "gen_count_mixture",
    "FitConfig",
    "ReplicationReport",
    "run_replications",
]


@dataclass(frozen=True)
class ComponentSpec:
    weight: float
    beta: tuple[float, ...]
    dispersion: float  # sigma^2 for gaussian, phi for counts
    corr_kind: str = "independence"
    rho: float = 0.0


@dataclass(frozen=True)
class SimDesign:
    name: str
    n: int
    family: str
    components: tuple[ComponentSpec, ...]
    covariates: str  # "clinical6" or "unit_uniform"

    def __post_init__(self):
        w = sum(c.weight for c in self.components)
        if abs(w - 1.0) > 1e-10:
            raise ArgumentError("component weights must sum to 1")

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def p(self) -> int:
        return len(self.components[0].beta)

    @property
    def dispersion_label(self) -> str:
        return "sigma2" if self.family == "gaussian" else "phi"

    def parameter_names(self) -> list[str]:
        names = []
        for k in range(self.K):
            names.extend(f"beta{k + 1}{j + 1}" for j in range(self.p))
        names.extend(f"{self.dispersion_label}{k + 1}" for k in range(self.K))
        names.extend(f"pi{k + 1}" for k in range(self.K))
        return names

    def true_values(self) -> np.ndarray:
        vals = []
        for c in self.components:
            vals.extend(c.beta)
        vals.extend(c.dispersion for c in self.components)
        vals.extend(c.weight for c in self.components)
        return np.asarray(vals, dtype=float)


def example1_design() -> SimDesign:
    return SimDesign(
        name="ex1",
        n=300,
        family="gaussian",
        covariates="clinical6",
        components=(
            ComponentSpec(0.5, (0.08, -0.01, -0.4, 0.06), 0.5, "ar1", 0.6),
            ComponentSpec(0.5, (-0.1, -0.05, 3.0, 0.3), 0.8, "ar1", 0.6),
        ),
    )


def example2_design(rho: float) -> SimDesign:
    return SimDesign(
        name=f"ex2:{rho:g}",
        n=150,
        family="poisson",
        covariates="unit_uniform",
        components=(
            ComponentSpec(1.0 / 3.0, (0.0, 3.0, -1.0, 1.0), 2.0, "ar1", rho),
            ComponentSpec(2.0 / 3.0, (4.0, -2.0, 0.0, 1.0), 1.0, "ar1", rho),
        ),
    )


def example3_design() -> SimDesign:
    return SimDesign(
        name="ex3",
        n=500,
        family="gaussian",
        covariates="unit_uniform",
        components=(
            ComponentSpec(0.25, (2.0, 1.0, -1.0, 1.5, 1.0), 0.5, "ar1", 0.6),
            ComponentSpec(0.25, (-4.0, 2.0, 1.0, -2.0, 0.0), 0.3, "ar1", 0.6),
            ComponentSpec(0.15, (-2.0, -2.0, 1.0, 0.0, 1.0), 0.1, "exchangeable", 0.3),
            ComponentSpec(0.15, (0.0, 1.0, 0.0, 1.0, 1.0), 0.15, "exchangeable", 0.3),
            ComponentSpec(0.2, (-4.0, 0.0, -1.0, -1.0, -1.5), 0.6, "independence", 0.0),
        ),
    )


def design_from_name(spec: str) -> SimDesign:
    """Parse 'ex1', 'ex2:RHO' or 'ex3'."""
    if spec == "ex1":
        return example1_design()
    if spec.startswith("ex2"):
        parts = spec.split(":")
        if len(parts) != 2:
            raise ArgumentError("example 2 requires a correlation, e.g. ex2:0.3")
        return example2_design(float(parts[1]))
    if spec == "ex3":
        return example3_design()
    raise ArgumentError(f"unknown example {spec!r}")


# --------------------------------------------------------------------- #
# covariate layouts
# --------------------------------------------------------------------- #

_VISIT_WINDOWS = ((350, 390), (710, 770), (1080, 1160), (1450, 1550), (1820, 1930))


def _covariates_clinical6(rng: np.random.Generator) -> np.ndarray:
    """Six visits: treatment and sex indicators, entry age, visit month."""
    x1 = float(rng.integers(0, 2))
    x2 = float(rng.uniform(30.0, 80.0))
    x3 = float(rng.integers(0, 2))
    times = [0.0] + [float(rng.uniform(a, b)) for a, b in _VISIT_WINDOWS]
    X = np.empty((6, 4))
    X[:, 0] = x1
    X[:, 1] = x2
    X[:, 2] = x3
    X[:, 3] = np.asarray(times) / 30.5
    return X


def _covariates_unit_uniform(rng: np.random.Generator, p: int) -> np.ndarray:
    """Intercept plus p-1 observation-level U(0,1) covariates; m ~ 2+Pois(3)."""
    m = 2 + int(rng.poisson(3.0))
    X = np.empty((m, p))
    X[:, 0] = 1.0
    X[:, 1:] = rng.uniform(0.0, 1.0, size=(m, p - 1))
    return X


def _draw_X(design: SimDesign, rng: np.random.Generator) -> np.ndarray:
    if design.covariates == "clinical6":
        return _covariates_clinical6(rng)
    if design.covariates == "unit_uniform":
        return _covariates_unit_uniform(rng, design.p)
    raise ArgumentError(f"unknown covariate layout {design.covariates!r}")


def _draw_labels(design: SimDesign, n: int, rng: np.random.Generator) -> np.ndarray:
    w = np.array([c.weight for c in design.components])
    return rng.choice(design.K, size=n, p=w)


def _corr_cholesky(comp: ComponentSpec, m: int) -> np.ndarray:
    R = correlation_matrix(comp.corr_kind, comp.rho, m)
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ArgumentError(
            f"correlation matrix not positive definite (kind={comp.corr_kind}, "
            f"rho={comp.rho}, m={m})"
        ) from None


def gen_gaussian_mixture(design: SimDesign, seed, labels=None):
    """Draw a gaussian-mixture dataset; returns (dataset, labels)."""
    if design.family != "gaussian":
        raise ArgumentError("gen_gaussian_mixture requires a gaussian design")
    rng = np.random.default_rng(seed)
    n = design.n if labels is None else len(labels)
    if labels is None:
        labels = _draw_labels(design, n, rng)
    labels = np.asarray(labels, dtype=int)
    subjects = []
    for i in range(n):
        comp = design.components[labels[i]]
        X = _draw_X(design, rng)
        m = X.shape[0]
        mu = X @ np.asarray(comp.beta)
        L = _corr_cholesky(comp, m)
        y = mu + np.sqrt(comp.dispersion) * (L @ rng.standard_normal(m))
        subjects.append(SubjectBlock(subject_id=f"s{i:05d}", y=y, X=X))
    cols = [f"x{j + 1}" for j in range(design.p)]
    return LongitudinalDataset(subjects, cols), labels


def gen_count_mixture(design: SimDesign, seed, labels=None):
    """Correlated overdispersed counts via a Gaussian copula with NB margins."""
    if design.family != "poisson":
        raise ArgumentError("gen_count_mixture requires a count design")
    for c in design.components:
        if c.dispersion < 1.0:
            raise ArgumentError(
                "count margins require dispersion >= 1 (no underdispersion)"
            )
    rng = np.random.default_rng(seed)
    n = design.n if labels is None else len(labels)
    if labels is None:
        labels = _draw_labels(design, n, rng)
    labels = np.asarray(labels, dtype=int)
    subjects = []
    for i in range(n):
        comp = design.components[labels[i]]
        X = _draw_X(design, rng)
        m = X.shape[0]
        mu = np.exp(X @ np.asarray(comp.beta))
        L = _corr_cholesky(comp, m)
        z = L @ rng.standard_normal(m)
        u = np.clip(ndtr(z), 1e-12, 1.0 - 1e-12)
        phi = comp.dispersion
        if phi > 1.0:
            r = mu / (phi - 1.0)
            y = stats.nbinom.ppf(u, r, r / (r + mu))
        else:
            y = stats.poisson.ppf(u, mu)
        subjects.append(
            SubjectBlock(subject_id=f"s{i:05d}", y=y.astype(float), X=X)
        )
    cols = [f"x{j + 1}" for j in range(design.p)]
    return LongitudinalDataset(subjects, cols), labels


def generate(design: SimDesign, seed, labels=None):
    if design.family == "gaussian":
        return gen_gaussian_mixture(design, seed, labels)
    return gen_count_mixture(design, seed, labels)


def _achieved_lag1_corr(data, labels, design) -> float:
    """Empirical lag-1 Pearson-residual correlation under the true model."""
    prods, count = 0.0, 0
    for s, lab in zip(data.subjects, labels):
        comp = design.components[lab]
        if design.family == "gaussian":
            mu = s.X @ np.asarray(comp.beta)
            v = np.full(s.m, comp.dispersion)
        else:
            mu = np.exp(s.X @ np.asarray(comp.beta))
            v = comp.dispersion * mu
        e = (s.y - mu) / np.sqrt(v)
        if s.m >= 2:
            prods += float(np.sum(e[:-1] * e[1:]))
            count += s.m - 1
    return prods / count if count else float("nan")


# --------------------------------------------------------------------- #
# replication harness
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class FitConfig:
    k_init: int = 10
    grid: tuple[float, ...] | None = None  # None = default grid
    settings: EmSettings = field(default_factory=EmSettings)
    refine_kind: str | None = None  # "ar1" | "exchangeable" | "independence"
    test_per_component: int = 100


@dataclass
class ReplicationReport:
    design_name: str
    parameter_names: list[str]
    true_values: np.ndarray
    per_rep: list[dict]
    k_histogram: dict[int, int]
    selection_rate: float
    n_conditioned: int
    pql: dict | None
    pql2: dict | None
    mis_median: float
    mis_p025: float
    mis_p975: float
    failures: int
    achieved_rho: float


def _aligned_parameters(design, beta, phi, pi, perm) -> np.ndarray:
    """Reorder component parameters so slot k matches true component k."""
    K, p = design.K, design.p
    a_beta = np.empty((K, p))
    a_phi = np.empty(K)
    a_pi = np.empty(K)
    for est_k in range(K):
        true_k = perm[est_k]
        a_beta[true_k] = beta[est_k]
        a_phi[true_k] = phi[est_k]
        a_pi[true_k] = pi[est_k]
    return np.concatenate([a_beta.ravel(), a_phi, a_pi])


def _one_replication(args):
    design, config, rep, master_seed = args
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(rep,))
    seed_train, seed_test, seed_init = ss.spawn(3)
    family = get_family(design.family)
    rec = {"rep": rep, "k_hat": None, "lambda": None, "mis": None,
           "failure": None, "params": None, "params2": None,
           "achieved_rho": None}
    try:
        data, labels = generate(design, seed_train)
        rec["achieved_rho"] = _achieved_lag1_corr(data, labels, design)
        if config.grid is None:
            grid = default_lambda_grid(data.n, config.k_init)
        else:
            grid = LambdaGrid(tuple(config.grid))
        result = select_lambda(
            data,
            family,
            grid,
            config.settings,
            k_init=config.k_init,
            seed=int(seed_init.generate_state(1)[0] % (2**31)),
        )
        fit = result.fit
        rec["k_hat"] = fit.K
        rec["lambda"] = result.chosen_lambda
        if fit.K != design.K:
            return rec
        tpc = config.test_per_component
        test_labels = np.repeat(np.arange(design.K), tpc)
        test_data, _ = generate(design, seed_test, labels=test_labels)
        preds = np.array(
            [classify(fit, family, s)[0] for s in test_data.subjects], dtype=int
        )
        summary = misclassification(
            test_labels, preds, n_true=design.K, n_pred=fit.K
        )
        rec["mis"] = summary.rate
        perm = summary.permutation
        rec["params"] = _aligned_parameters(design, fit.beta, fit.phi, fit.pi, perm)
        if config.refine_kind:
            refined = refine(data, fit, family, config.refine_kind)
            rec["params2"] = _aligned_parameters(
                design, refined.beta, refined.phi, refined.pi, perm
            )
    except Exception as exc:
        rec["failure"] = repr(exc)
    return rec


def run_replications(
    design: SimDesign,
    reps: int,
    config: FitConfig,
    seed: int = 0,
    jobs: int = 1,
) -> ReplicationReport:
    """Run the full generate/select/classify loop ``reps`` times."""
    if reps < 1:
        raise ArgumentError("need at least one replication")
    tasks = [(design, config, r, seed) for r in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_one_replication, tasks, chunksize=1))
    else:
        records = [_one_replication(t) for t in tasks]
    records.sort(key=lambda r: r["rep"])

    hist: dict[int, int] = {}
    for r in records:
        if r["k_hat"] is not None:
            hist[r["k_hat"]] = hist.get(r["k_hat"], 0) + 1
    good = [r for r in records if r["params"] is not None]
    ok_reps = [r for r in records if r["failure"] is None]
    sel_rate = (
        sum(1 for r in ok_reps if r["k_hat"] == design.K) / len(ok_reps)
        if ok_reps
        else 0.0
    )
    truth = design.true_values()
    pql = (
        bias_mse_table(np.vstack([r["params"] for r in good]), truth)
        if good
        else None
    )
    good2 = [r for r in good if r["params2"] is not None]
    pql2 = (
        bias_mse_table(np.vstack([r["params2"] for r in good2]), truth)
        if good2
        else None
    )
    mis = np.array([r["mis"] for r in good], dtype=float)
    if mis.size:
        mis_median = float(np.median(mis))
        mis_lo, mis_hi = (float(v) for v in np.percentile(mis, [2.5, 97.5]))
    else:
        mis_median = mis_lo = mis_hi = float("nan")
    rhos = np.array(
        [r["achieved_rho"] for r in records if r["achieved_rho"] is not None]
    )
    return ReplicationReport(
        design_name=design.name,
        parameter_names=design.parameter_names(),
        true_values=truth,
        per_rep=records,
        k_histogram=dict(sorted(hist.items())),
        selection_rate=sel_rate,
        n_conditioned=len(good),
        pql=pql,
        pql2=pql2,
        mis_median=mis_median,
        mis_p025=mis_lo,
        mis_p975=mis_hi,
        failures=sum(1 for r in records if r["failure"] is not None),
        achieved_rho=float(np.mean(rhos)) if rhos.size else float("nan"),
    )
