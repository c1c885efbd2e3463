"""Central finite-difference utilities for checking analytic gradients.

All checks run in float64: with the default step of 1e-3, float32 rounding
would be the same order as the truncation error and the comparison would be
meaningless. The convention throughout is a scalar objective ``f()`` that
reads a parameter array in place; coordinates are perturbed one at a time.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = ["numeric_grad", "numeric_grad_smooth", "relative_errors", "max_relative_error"]

DEFAULT_STEP = 1e-3
ERROR_FLOOR = 1e-8


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = DEFAULT_STEP,
                 coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of f with respect to arr, one flat coordinate at a time.

    ``arr`` must be float64 and must be the very array ``f`` reads. Returns a
    full-shape gradient when ``coords`` is None, else a 1-D array with one
    entry per requested flat coordinate.
    """
    if arr.dtype != np.float64:
        raise TypeError(f"finite differences need float64 arrays, got {arr.dtype}")
    flat = arr.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        out = np.zeros(flat.size)
    else:
        out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        plus = f()
        flat[i] = orig - step
        minus = f()
        flat[i] = orig
        out[j] = (plus - minus) / (2.0 * step)
    if len(out) == arr.size and isinstance(coords, range):
        return out.reshape(arr.shape)
    return out


def numeric_grad_smooth(f: Callable[[], tuple[float, bytes]], arr: np.ndarray,
                        step: float = DEFAULT_STEP,
                        coords: Sequence[int] | None = None,
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Central differences restricted to coordinates where f stays smooth.

    ``f`` returns (value, region fingerprint). A coordinate whose +step and
    -step evaluations land in different piecewise-linear regions (a ReLU
    flipped sign or a pool argmax moved) is excluded: the difference
    quotient there averages two distinct slopes and says nothing about the
    analytic gradient. Returns (gradients, valid mask), both one entry per
    requested coordinate.
    """
    if arr.dtype != np.float64:
        raise TypeError(f"finite differences need float64 arrays, got {arr.dtype}")
    flat = arr.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = np.zeros(len(coords))
    valid = np.zeros(len(coords), dtype=bool)
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        plus, pattern_plus = f()
        flat[i] = orig - step
        minus, pattern_minus = f()
        flat[i] = orig
        out[j] = (plus - minus) / (2.0 * step)
        valid[j] = pattern_plus == pattern_minus
    return out, valid


def relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                    floor: float = ERROR_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = ERROR_FLOOR) -> float:
    errs = relative_errors(analytic, numeric, floor)
    return float(errs.max()) if errs.size else 0.0
