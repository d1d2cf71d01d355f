"""Descending order that is stable under floating-point rounding."""

import numpy as np

# values this close (relative) are treated as equal and keep index order
TIE_RTOL = 1e-12


def descending_order(values: np.ndarray, rtol: float = TIE_RTOL) -> np.ndarray:
    """Indices by descending value; near-equal values keep ascending index order."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(-values, kind="stable")
    s = values[order]
    if s.size < 2:
        return order
    finite = np.isfinite(s[:-1]) & np.isfinite(s[1:])
    gap = np.where(finite, s[:-1] - s[1:], np.inf)
    breaks = gap > rtol * np.maximum(np.abs(np.where(finite, s[:-1], 0.0)), np.finfo(np.float64).tiny)
    group = np.concatenate([[0], np.cumsum(breaks)])
    return order[np.lexsort((order, group))]
