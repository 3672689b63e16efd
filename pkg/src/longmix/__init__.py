"""Finite mixtures of marginal regression models for longitudinal data.

Quasi-likelihood based: only the link and the mean-variance relation are
specified per component.  The number of components is selected by a
penalized EM that shrinks mixture proportions to zero, with the tuning
parameter chosen by a BIC-type criterion.
"""

from .data import (
    ColumnSchema,
    LongitudinalDataset,
    Standardization,
    SubjectBlock,
    load_csv,
    standardize,
    write_csv,
)
from .em import (
    EmSettings,
    MixtureFit,
    e_step,
    fit_em,
    fit_quasi_glm,
    m_step_beta,
    m_step_phi,
    m_step_pi,
    penalized_objective,
    quasi_likelihood,
    sandwich_covariance,
)
from .families import (
    ModelFamily,
    get_family,
    quasi_log_density,
    quasi_log_density_dispersed,
)
from .gee import RefinedFit, WorkingCorrelation, estimate_rho, gee_fit, refine
from .metrics import ConfusionSummary, bias_mse_table, misclassification
from .selection import (
    LambdaGrid,
    SelectionResult,
    bic,
    classify,
    default_lambda_grid,
    init_kmeans,
    order_labels,
    select_lambda,
)
from .simulate import (
    ComponentSpec,
    FitConfig,
    ReplicationReport,
    SimDesign,
    design_from_name,
    example1_design,
    example2_design,
    example3_design,
    gen_count_mixture,
    gen_gaussian_mixture,
    generate,
    run_replications,
)

__version__ = "0.1.0"
