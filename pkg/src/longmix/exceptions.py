"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``category`` used by the CLI
to map failures to exit codes.
"""


class LongmixError(Exception):
    category = "error"


class MeanDomainError(LongmixError):
    """Mean value outside the family's admissible domain."""

    category = "domain"


class ArgumentError(LongmixError):
    category = "argument"


class SettingsError(LongmixError):
    category = "settings"


class SchemaError(LongmixError):
    category = "schema"


class ParseError(LongmixError):
    category = "parse"

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyInputError(LongmixError):
    category = "empty-input"


class DegenerateColumnError(LongmixError):
    category = "degenerate-column"


class NumericalError(LongmixError):
    category = "numerical"


class RankDeficiencyError(NumericalError):
    category = "rank-deficiency"


class InnerSolverError(NumericalError):
    """Inner Fisher-scoring solver failed to converge; carries last iterate."""

    category = "inner-solver"

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class CollapseError(LongmixError):
    """All mixture components were pruned."""

    category = "collapse"


class ClassCollapseError(LongmixError):
    """A class became empty during the refinement stage."""

    category = "class-collapse"


class NearSingularError(NumericalError):
    category = "near-singular"

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class SelectionError(LongmixError):
    """Every tuning-parameter value failed; carries per-value failures."""

    category = "selection"

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or []
