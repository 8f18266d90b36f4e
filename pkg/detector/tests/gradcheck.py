"""
Central finite differences for checking tape gradients
"""
import numpy as np


def numeric_gradient(fn, array: np.ndarray, eps: float = 1e-6, indices=None) -> np.ndarray:
    """d fn() / d array, perturbing ``array`` in place one element at a time.

    With ``indices`` only those entries are perturbed; the rest stay zero.
    """
    grad = np.zeros_like(array)
    for index in (np.ndindex(array.shape) if indices is None else indices):
        original = array[index]
        array[index] = original + eps
        plus = fn()
        array[index] = original - eps
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2 * eps)
    return grad


def sample_indices(shape: tuple, count: int, rng: np.random.Generator) -> list:
    if shape == ():
        return [()]
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def relative_error(analytic, numeric) -> float:
    analytic = np.zeros_like(numeric) if analytic is None else np.asarray(analytic)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)
