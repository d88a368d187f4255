"""
Exception Hierarchy for driftlab
================================

Every failure the library can signal on purpose derives from DriftLabError,
so callers (and the CLI) can tell modelling errors apart from bugs.
"""

from typing import Any, Dict, List, Optional


class DriftLabError(Exception):
    """Base class for all driftlab errors"""

    code: str = "driftlab_error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable payload used by the CLI error channel"""
        payload: Dict[str, Any] = {"error": self.code, "message": self.message}
        if self.details:
            payload["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return payload


class InputValidationError(DriftLabError):
    """Malformed input: bad dimensions, non-finite values, invalid measures"""

    code = "validation_error"


class DomainError(DriftLabError):
    """Input lies outside the domain where a formula is defined"""

    code = "domain_error"


class SolverFailure(DriftLabError):
    """Fixed-point or root solver did not reach tolerance"""

    code = "solver_failure"

    def __init__(self, message: str, residual: float, iterations: int, **details: Any):
        super().__init__(message, residual=residual, iterations=iterations, **details)
        self.residual = residual
        self.iterations = iterations


class SingularityError(DriftLabError):
    """A denominator vanished or an integrand was not finite"""

    code = "singularity_error"

    def __init__(self, message: str, atom: Optional[float] = None, **details: Any):
        super().__init__(message, atom=atom, **details)
        self.atom = atom


class SchemaError(DriftLabError):
    """Input table is missing required columns"""

    code = "schema_error"

    def __init__(self, message: str, missing: List[str], **details: Any):
        super().__init__(message, missing=list(missing), **details)
        self.missing = list(missing)


class NumericalInconsistencyError(DriftLabError):
    """Two computations that must agree did not"""

    code = "numerical_inconsistency"


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, bool)) or value is None:
        return value
    if isinstance(value, float):
        return value if value == value and abs(value) != float("inf") else str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)
