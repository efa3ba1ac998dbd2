"""Simplex geometry: closure, perturbation and the log-ratio transforms.

Compositions are arrays whose last axis runs over the ``K`` parts; every
function here broadcasts over leading axes. The ilr basis ``V`` is stored
as a ``K x (K-1)`` matrix so that ``ilr(p) = clr(p) @ V``.
"""
from functools import lru_cache

import numpy as np

__all__ = [
    "CompositionError",
    "closure",
    "perturb",
    "perturb_inv",
    "build_ilr_basis",
    "clr",
    "alr",
    "ilr",
    "ilr_inv",
]


class CompositionError(ValueError):
    """Input is not a valid point of (or map into) the open simplex."""


def _check_parts(x, what):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise CompositionError(f"{what} needs at least 2 parts, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise CompositionError(f"{what} contains non-finite entries")
    return x


def closure(v):
    """Rescale strictly positive vectors to unit sum along the last axis."""
    v = _check_parts(v, "closure")
    if np.any(v <= 0):
        raise CompositionError("closure requires strictly positive entries")
    return v / v.sum(axis=-1, keepdims=True)


def perturb(p, q):
    """Simplex group operation: closure of the elementwise product."""
    p = _check_parts(p, "perturb")
    q = _check_parts(q, "perturb")
    if p.shape[-1] != q.shape[-1]:
        raise CompositionError(f"dimension mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return closure(p * q)


def perturb_inv(p):
    """Inverse element under perturbation (closure of reciprocals)."""
    return closure(1.0 / _check_parts(p, "perturb_inv"))


@lru_cache(maxsize=None)
def _basis(K):
    V = np.zeros((K, K - 1))
    for j in range(K - 1):
        rest = K - 1 - j
        V[j, j] = np.sqrt(rest / (rest + 1.0))
        V[j + 1:, j] = -1.0 / np.sqrt(rest * (rest + 1.0))
    V.setflags(write=False)
    return V


def build_ilr_basis(K):
    """Orthonormal balance basis from the partition {1|2..K}, {2|3..K}, ...

    Column ``j`` contrasts part ``j`` against all later parts. The first
    nonzero entry of every column is positive. The result is cached and
    read-only; copy it before modifying.
    """
    if int(K) != K or K < 2:
        raise CompositionError(f"ilr basis needs K >= 2, got {K}")
    return _basis(int(K))


def _log_interior(p, what):
    p = _check_parts(p, what)
    if np.any(p <= 0):
        raise CompositionError(f"{what} is undefined for zero or negative proportions")
    return np.log(p)


def clr(p):
    """Centred log-ratio; output sums to zero along the last axis."""
    lp = _log_interior(p, "clr")
    return lp - lp.mean(axis=-1, keepdims=True)


def alr(p, denom=-1):
    """Additive log-ratio against part ``denom``; that coordinate is dropped."""
    lp = _log_interior(p, "alr")
    K = lp.shape[-1]
    if not -K <= denom < K:
        raise CompositionError(f"denominator index {denom} out of range for K={K}")
    denom %= K
    out = lp - lp[..., denom:denom + 1]
    return np.delete(out, denom, axis=-1)


def ilr(p, V=None):
    """Isometric log-ratio coordinates ``clr(p) @ V`` (K-1 per composition)."""
    c = clr(p)
    if V is None:
        V = build_ilr_basis(c.shape[-1])
    V = np.asarray(V)
    if V.shape != (c.shape[-1], c.shape[-1] - 1):
        raise CompositionError(f"basis shape {V.shape} does not match K={c.shape[-1]}")
    return c @ V


def ilr_inv(phi, V=None):
    """Map ilr coordinates back to the simplex.

    The exponent is shifted by its maximum before exponentiating, so large
    coordinates cannot overflow.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 0:
        raise CompositionError("ilr coordinates must be at least 1-d")
    if not np.all(np.isfinite(phi)):
        raise CompositionError("ilr coordinates must be finite")
    K = phi.shape[-1] + 1
    if V is None:
        V = build_ilr_basis(K)
    V = np.asarray(V)
    if V.shape != (K, K - 1):
        raise CompositionError(f"basis shape {V.shape} does not match K={K}")
    z = phi @ V.T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
