import numpy as np

from fedprompt.errors import NumericalError

UNIT_TOLERANCE = 1e-6


def require_finite(name: str, *arrays: np.ndarray) -> None:
    """Raise if any array holds NaN or infinity.

    :param name: label used in the error message
    :type name: str
    :raises NumericalError: on the first non-finite array
    """
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NumericalError(f"non-finite values in {name}")


def normalize_rows(x: np.ndarray, name: str = "vector") -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize along the last axis.

    :param x: array of shape (..., n)
    :type x: np.ndarray
    :param name: label used in the error message
    :type name: str
    :raises NumericalError: if any row has zero norm
    :return: normalized array and the norms, shape (...)
    :rtype: tuple[np.ndarray, np.ndarray]
    """
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0.0):
        raise NumericalError(f"cannot normalize zero {name}")
    return x / norms[..., None], norms


def normalize_jacobian(unit: np.ndarray, norm: float) -> np.ndarray:
    """Jacobian of ``x -> x / |x|`` at a point with direction ``unit`` and length ``norm``."""
    return (np.eye(unit.shape[-1]) - np.outer(unit, unit)) / norm


def has_unit_rows(x: np.ndarray, tolerance: float = UNIT_TOLERANCE) -> bool:
    return bool(np.all(np.abs(np.linalg.norm(x, axis=-1) - 1.0) <= tolerance))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm difference scaled by the larger of the two max-norms.

    :param analytic: gradient from the chain rule
    :type analytic: np.ndarray
    :param numeric: finite-difference estimate
    :type numeric: np.ndarray
    :return: max|a - n| / max(max|a|, max|n|, 1e-12)
    :rtype: float
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)
