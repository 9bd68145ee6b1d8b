# Central finite-difference gradient checking

import logging
from typing import Callable, Dict

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
# Components smaller than this are compared on an absolute scale
MAGNITUDE_FLOOR = 1e-5


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """
    Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every component of x.

    x is perturbed in place and restored after each component.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_x.size):
        old = flat_x[i]
        flat_x[i] = old + h
        right = f(x)
        flat_x[i] = old - h
        left = f(x)
        flat_x[i] = old
        flat_grad[i] = (right - left) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = MAGNITUDE_FLOOR) -> float:
    """Largest componentwise |a - n| / max(|a|, |n|, floor)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"Shape mismatch: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, h: float = DEFAULT_STEP
) -> float:
    """Relative error between an analytic gradient and central differences at x"""
    return relative_error(analytic, numerical_gradient(f, x.copy(), h))


def check_blocks(
    f: Callable[[Dict[str, np.ndarray]], float],
    blocks: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    h: float = DEFAULT_STEP,
) -> Dict[str, float]:
    """
    check_gradient for every named parameter block, the others held fixed

    Returns:
        Dict[str, float]: relative error per block
    """
    errors = {}
    working = {name: value.copy() for name, value in blocks.items()}
    for name in blocks:
        errors[name] = relative_error(
            analytic[name], numerical_gradient(lambda _: f(working), working[name], h)
        )
        logger.debug(f"gradcheck {name}: relative error {errors[name]:.3e}")
    return errors
