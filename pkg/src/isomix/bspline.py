"""Cubic (or general degree) B-spline bases on equally spaced knots."""
import numpy as np
from scipy.interpolate import BSpline

__all__ = ["SplineSpanError", "knot_vector", "bspline_basis", "n_basis", "difference_matrix"]


class SplineSpanError(ValueError):
    """Evaluation point outside the knot span."""


def n_basis(knot_count, degree=3):
    """Number of basis functions for ``knot_count`` distinct knots."""
    return knot_count + degree - 1


def knot_vector(span, knot_count, degree=3):
    """Full knot vector: ``knot_count`` equally spaced knots over ``span``,
    with both boundary knots repeated ``degree + 1`` times."""
    lo, hi = float(span[0]), float(span[1])
    if knot_count < degree + 1:
        raise ValueError(f"knot_count must be >= degree + 1 = {degree + 1}, got {knot_count}")
    if not hi > lo:
        raise ValueError(f"empty knot span [{lo}, {hi}]")
    inner = np.linspace(lo, hi, knot_count)
    return np.concatenate([np.full(degree, lo), inner, np.full(degree, hi)])


def bspline_basis(times, knot_count, degree=3, span=None):
    """Basis matrix of shape ``(len(times), knot_count + degree - 1)``.

    ``span`` defaults to ``(min(times), max(times))``. Times outside the
    span raise :class:`SplineSpanError`; there is no extrapolation.
    """
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if span is None:
        span = (t.min(), t.max())
    lo, hi = span
    width = hi - lo
    if np.any(t < lo - 1e-12 * width) or np.any(t > hi + 1e-12 * width):
        raise SplineSpanError(f"times outside the knot span [{lo}, {hi}]")
    t = np.clip(t, lo, hi)
    knots = knot_vector(span, knot_count, degree)
    return BSpline.design_matrix(t, knots, degree).toarray()


def difference_matrix(n, order=1):
    """``(n - order) x n`` finite-difference operator."""
    return np.diff(np.eye(n), n=order, axis=0)
