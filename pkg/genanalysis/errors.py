"""Exception hierarchy shared across the pipeline."""

from typing import Any, Dict, Optional


class GenAnalysisError(Exception):
    """Base error; carries structured details for the CLI."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": type(self).__name__,
            "message": self.message,
            "details": self.details,
        }


class ContractViolation(GenAnalysisError, ValueError):
    """Precondition failed (dimensions, ranges, counts)."""


class ConfigError(GenAnalysisError):
    """Invalid configuration file or override."""


class SpecParseError(GenAnalysisError):
    """Family spec could not be parsed or validated."""

    def __init__(self, message: str, line: int = 0, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["line"] = line
        super().__init__(f"line {line}: {message}", details)
        self.line = line


class DegenerateGradientError(GenAnalysisError):
    """Gradient requested on a smooth-min switching locus or a zero-norm point."""


class EmptyLevelSetError(GenAnalysisError):
    """The zero level set does not cross the sampling box."""


class MeshError(GenAnalysisError):
    """Mesh fails a structural requirement (isolated vertex, zero area)."""


class FactorizationError(GenAnalysisError):
    """A G block or the KKT matrix could not be factored."""

    def __init__(self, message: str, vertex: int = -1, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["vertex"] = int(vertex)
        super().__init__(message, details)
        self.vertex = int(vertex)


class ExtractionError(GenAnalysisError):
    """Surface extraction failed at an intermediate latent code."""

    def __init__(self, message: str, step: int, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["step"] = int(step)
        super().__init__(message, details)
        self.step = int(step)


class MissingCorrespondenceError(GenAnalysisError):
    """A similarity-graph edge has no correspondence set."""

    def __init__(self, pair, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["pair"] = [int(pair[0]), int(pair[1])]
        super().__init__(f"Missing correspondences for shape pair {tuple(pair)}", details)
        self.pair = tuple(pair)
