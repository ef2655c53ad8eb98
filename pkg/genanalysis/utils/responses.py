"""CLI response utilities."""

import json
import sys
from typing import Any, Dict, Optional, TextIO

import numpy as np

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays so json.dumps accepts them."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


def success_response(data: Any, stream: Optional[TextIO] = None) -> int:
    """
    Print a successful result as one JSON document on stdout.

    Args:
        data: Result data (dict, list, or any JSON-serializable object)
        stream: Output stream (defaults to stdout)

    Returns:
        Process exit code
    """
    stream = stream or sys.stdout
    stream.write(json.dumps(to_jsonable(data), sort_keys=True) + "\n")
    return EXIT_OK


def error_response(
    message: str,
    exit_code: int = EXIT_FAILURE,
    details: Dict = None,
    error_type: str = "GenAnalysisError",
    stream: Optional[TextIO] = None
) -> int:
    """
    Print a structured error on stderr.

    Args:
        message: Error message
        exit_code: Process exit code to return
        details: Optional additional error details
        error_type: Error class name
        stream: Output stream (defaults to stderr)

    Returns:
        The exit code, so callers can `return error_response(...)`
    """
    content: Dict[str, Any] = {"error": message, "type": error_type, "exit_code": exit_code}
    if details:
        content["details"] = to_jsonable(details)

    stream = stream or sys.stderr
    stream.write(json.dumps(content, sort_keys=True) + "\n")
    return exit_code


def metrics_summary(metrics: Dict[str, Any]) -> Dict[str, Any]:
    """
    Round float metrics for display.

    Args:
        metrics: Metric name -> value

    Returns:
        Dictionary with floats rounded to 6 decimals
    """
    summary = {}
    for key, value in to_jsonable(metrics).items():
        summary[key] = round(value, 6) if isinstance(value, float) else value
    return summary
