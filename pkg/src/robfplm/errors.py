"""Exception hierarchy.

Every error carries a stable ``code`` string so the command-line front end
can emit machine-readable failures.
"""


class FplmError(Exception):
    code = "fplm_error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class InvalidDimensionError(FplmError, ValueError):
    code = "invalid_dimension"


class DomainError(FplmError, ValueError):
    code = "out_of_domain"


class DegenerateScaleError(FplmError, ArithmeticError):
    """The M-scale equation has no positive root.

    When raised from the S-estimator, ``coefficients`` holds the exact fit
    that produced the (near) zero residuals.
    """

    code = "degenerate_scale"

    def __init__(self, message, coefficients=None):
        super().__init__(message)
        self.coefficients = coefficients


class SingularDesignError(FplmError, ArithmeticError):
    code = "singular_design"


class FlatObjectiveError(FplmError, ArithmeticError):
    code = "flat_objective"


class InsufficientDataError(FplmError, ValueError):
    code = "insufficient_data"


class SelectionFailedError(FplmError, RuntimeError):
    code = "selection_failed"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_dict(self):
        out = super().to_dict()
        out["cells"] = {f"{k[0]},{k[1]}": v for k, v in self.diagnostics.items()}
        return out


class DegenerateTestSetError(FplmError, ValueError):
    code = "degenerate_test_set"


class ParseError(FplmError, ValueError):
    code = "parse_error"


class ConfigError(FplmError, ValueError):
    code = "invalid_config"
