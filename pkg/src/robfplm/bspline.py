"""Normalized B-spline bases and quadrature inner products for curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidDimensionError

# Points this far outside the domain are snapped back in; anything further is
# an error (no extrapolation).
_DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis of a given order on ``[domain_lo, domain_hi]``.

    ``knots`` is the full knot vector: the two boundary knots repeated
    ``order`` times around the interior knots, so that
    ``dimension == len(interior_knots) + order``.
    """

    order: int
    knots: np.ndarray
    domain_lo: float
    domain_hi: float

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        k = self.order
        if k < 2:
            raise InvalidDimensionError(f"spline order must be >= 2, got {k}")
        if not self.domain_lo < self.domain_hi:
            raise DomainError(
                f"degenerate domain [{self.domain_lo}, {self.domain_hi}]")
        if knots.size < 2 * k or np.any(np.diff(knots) < 0):
            raise InvalidDimensionError("knot vector must be non-decreasing "
                                        "with at least 2*order entries")
        if np.any(knots[:k] != self.domain_lo) or np.any(knots[-k:] != self.domain_hi):
            raise InvalidDimensionError(
                "boundary knots must have multiplicity equal to the order")
        inner = knots[k:-k]
        if inner.size and (inner[0] <= self.domain_lo or inner[-1] >= self.domain_hi):
            raise InvalidDimensionError(
                "interior knots must lie strictly inside the domain")

    @property
    def dimension(self) -> int:
        return self.knots.size - self.order

    @property
    def interior_knots(self) -> np.ndarray:
        return self.knots[self.order:-self.order]

    @property
    def spacing_ratio(self) -> float:
        """Ratio of the largest to the smallest knot spacing."""
        breaks = np.unique(self.knots)
        gaps = np.diff(breaks)
        return float(gaps.max() / gaps.min())

    def __call__(self, t):
        return basis_eval(self, t)

    def to_dict(self) -> dict:
        return {"order": self.order, "knots": self.knots.tolist(),
                "domain": [self.domain_lo, self.domain_hi]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        return cls(int(d["order"]), np.asarray(d["knots"], dtype=float),
                   float(d["domain"][0]), float(d["domain"][1]))


@dataclass(frozen=True)
class FunctionalSample:
    """``n`` curves observed on a shared, strictly increasing grid."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid must be one-dimensional with at least 2 points")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if values.shape[1] != grid.size:
            raise ValueError(f"curves have {values.shape[1]} columns but the "
                             f"grid has {grid.size} points")
        if not (np.all(np.isfinite(grid)) and np.all(np.isfinite(values))):
            raise ValueError("curves contain non-finite entries")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.n

    def subset(self, idx) -> "FunctionalSample":
        return FunctionalSample(self.grid, self.values[idx])


def make_basis(dimension: int, order: int = 4, domain=(0.0, 1.0),
               placement="equispaced") -> SplineBasis:
    """Build a clamped B-spline basis with ``dimension - order`` interior knots.

    Parameters
    ----------
    dimension : int
        Number of basis functions ``p``.
    order : int
        Spline order (4 gives cubic splines).
    domain : tuple of float
        ``(lo, hi)`` interval.
    placement : "equispaced" or array_like
        Either uniform interior knots, or a sample of points whose empirical
        quantiles give the interior knots.
    """
    dimension, order = int(dimension), int(order)
    lo, hi = float(domain[0]), float(domain[1])
    if order < 2:
        raise InvalidDimensionError(f"spline order must be >= 2, got {order}")
    if dimension < order:
        raise InvalidDimensionError(
            f"basis dimension {dimension} is smaller than the order {order}")
    if not lo < hi:
        raise DomainError(f"degenerate domain [{lo}, {hi}]")
    m = dimension - order
    if isinstance(placement, str):
        if placement != "equispaced":
            raise ValueError(f"unknown knot placement {placement!r}")
        inner = np.linspace(lo, hi, m + 2)[1:-1]
    else:
        pts = np.asarray(placement, dtype=float).ravel()
        if pts.size == 0:
            raise ValueError("quantile placement needs a non-empty set of points")
        inner = np.quantile(pts, np.arange(1, m + 1) / (m + 1))
        if m and (np.any(np.diff(inner) <= 0) or inner[0] <= lo or inner[-1] >= hi):
            raise InvalidDimensionError(
                "empirical quantiles do not give distinct interior knots")
    knots = np.concatenate([np.full(order, lo), inner, np.full(order, hi)])
    return SplineBasis(order, knots, lo, hi)


def _check_domain(basis: SplineBasis, t: np.ndarray) -> np.ndarray:
    lo, hi = basis.domain_lo, basis.domain_hi
    slack = _DOMAIN_SLACK * (hi - lo)
    if t.size and (np.any(~np.isfinite(t)) or t.min() < lo - slack or t.max() > hi + slack):
        raise DomainError(f"evaluation points outside the basis domain [{lo}, {hi}]")
    return np.clip(t, lo, hi)


def basis_eval(basis: SplineBasis, t):
    """Evaluate all basis functions at ``t``.

    Returns a vector of length ``p`` for scalar ``t`` and an ``(len(t), p)``
    matrix otherwise. Uses the triangular Cox-de Boor scheme, which only
    forms convex combinations and so stays non-negative.
    """
    scalar = np.ndim(t) == 0
    t = _check_domain(basis, np.atleast_1d(np.asarray(t, dtype=float)).ravel())
    k, p, knots = basis.order, basis.dimension, basis.knots
    # span i satisfies knots[i] <= t < knots[i+1]; the right end uses the last span
    span = np.searchsorted(knots, t, side="right") - 1
    span = np.clip(span, k - 1, p - 1)

    npts = t.size
    vals = np.zeros((npts, k))
    vals[:, 0] = 1.0
    left = np.empty((npts, k))
    right = np.empty((npts, k))
    for j in range(1, k):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(npts)
        for r in range(j):
            temp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved

    out = np.zeros((npts, p))
    cols = span[:, None] - (k - 1) + np.arange(k)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out[0] if scalar else out


def trapezoid_weights(grid) -> np.ndarray:
    """Composite trapezoid weights for a strictly increasing grid."""
    grid = np.asarray(grid, dtype=float)
    h = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def inner_products(sample: FunctionalSample, basis: SplineBasis) -> np.ndarray:
    """Approximate ``<X_i, B_j>`` by the trapezoid rule on the sample grid."""
    B = basis_eval(basis, sample.grid)
    return sample.values @ (B * trapezoid_weights(sample.grid)[:, None])


@dataclass(frozen=True)
class AffineMap:
    """Affine map of ``[lo, hi]`` onto ``[0, 1]``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DomainError(f"degenerate domain [{self.lo}, {self.hi}]")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def to_unit(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / self.length

    def from_unit(self, u):
        return self.lo + np.asarray(u, dtype=float) * self.length

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        slack = _DOMAIN_SLACK * self.length
        return bool(np.all(x >= self.lo - slack) and np.all(x <= self.hi + slack))
