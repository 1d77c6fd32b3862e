"""Robust BIC and selection of the two spline-basis dimensions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateScaleError, FplmError, SelectionFailedError
from .model import Dataset, FplmFit, fit
from .rho import RhoFunction
from .solver import SolverControl

RULES = ("global", "first-local")


def rbic_value(residuals, sigma: float, rho: RhoFunction, n: int, p1: int, p2: int) -> float:
    """``log(sigma**2 * sum(rho(r / sigma))) + log(n) / n * (p1 + p2)``."""
    if not sigma > 0:
        raise DegenerateScaleError("RBIC needs a positive residual scale")
    total = float(np.sum(rho.rho(np.asarray(residuals, dtype=float) / sigma)))
    if not total > 0:
        raise DegenerateScaleError("RBIC is -inf: the loss of every residual is zero")
    return math.log(sigma**2 * total) + math.log(n) / n * (p1 + p2)


def rbic(fit_: FplmFit, n: int = None) -> float:
    """RBIC of a fitted model, using its own scale and loss."""
    n = fit_.n if n is None else n
    return rbic_value(fit_.residuals, fit_.sigma, fit_.rho1, n, fit_.p1, fit_.p2)


def dimension_range(n: int, order: int = 4) -> tuple:
    """Dimension range ``max(n**(1/5) / 2, 4) <= p <= 8 + 2 n**(1/5)`` (integer bounds)."""
    r = n ** 0.2
    # n ** 0.2 is inexact even for perfect fifth powers
    lo = max(math.ceil(r / 2 - 1e-9), 4, order)
    hi = math.floor(8 + 2 * r + 1e-9)
    return lo, hi


@dataclass(frozen=True)
class SelectionGrid:
    """Inclusive ranges of candidate dimensions for the slope and eta bases."""

    p1_range: tuple = (4, 13)
    p2_range: tuple = (4, 13)
    order: int = 4

    def __post_init__(self):
        for rng in (self.p1_range, self.p2_range):
            lo, hi = rng
            if lo > hi:
                raise ValueError(f"empty dimension range {rng}")
            if lo < self.order:
                raise ValueError(f"dimension lower bound {lo} is below the spline order")

    @classmethod
    def from_rule(cls, n: int, order: int = 4) -> "SelectionGrid":
        r = dimension_range(n, order)
        return cls(r, r, order)

    @property
    def p1_values(self):
        return np.arange(self.p1_range[0], self.p1_range[1] + 1)

    @property
    def p2_values(self):
        return np.arange(self.p2_range[0], self.p2_range[1] + 1)


@dataclass
class SelectionResult:
    p1: int
    p2: int
    fit: FplmFit
    table: np.ndarray
    p1_values: np.ndarray
    p2_values: np.ndarray
    failures: dict = field(default_factory=dict)

    def table_rows(self):
        for i, p1 in enumerate(self.p1_values):
            for j, p2 in enumerate(self.p2_values):
                yield int(p1), int(p2), float(self.table[i, j])


def _tie_key(i, j, p1v, p2v):
    return (p1v[i] + p2v[j], p1v[i])


def pick_cell(table, p1_values, p2_values, rule: str = "global"):
    """Index ``(i, j)`` of the selected cell of an RBIC table (NaN = failed)."""
    if rule not in RULES:
        raise ValueError(f"unknown selection rule {rule!r}")
    finite = np.isfinite(table)
    if not finite.any():
        return None
    rows, cols = table.shape
    if rule == "global":
        best = np.min(table[finite])
        cells = [(i, j) for i in range(rows) for j in range(cols)
                 if finite[i, j] and table[i, j] == best]
        return min(cells, key=lambda c: _tie_key(*c, p1_values, p2_values))
    for i in range(rows):
        for j in range(cols):
            if not finite[i, j]:
                continue
            v = table[i, j]
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if all(not (0 <= a < rows and 0 <= b < cols) or not finite[a, b]
                   or table[a, b] >= v for a, b in nbrs):
                return i, j
    return None


def select_dimensions(ds: Dataset, grid: SelectionGrid = SelectionGrid(),
                      estimator: str = "mm", ctrl: SolverControl = SolverControl(),
                      rule: str = "global", **fit_kwargs) -> SelectionResult:
    """Fit every cell of the grid and select ``(p1, p2)`` by RBIC.

    Each cell uses the same solver seed. Cells that fail are recorded in
    ``failures`` and left as NaN in the table.
    """
    p1v, p2v = grid.p1_values, grid.p2_values
    table = np.full((p1v.size, p2v.size), np.nan)
    fits = {}
    failures = {}
    for i, p1 in enumerate(p1v):
        for j, p2 in enumerate(p2v):
            try:
                f = fit(ds, int(p1), int(p2), estimator, ctrl, order=grid.order, **fit_kwargs)
            except FplmError as exc:
                failures[(int(p1), int(p2))] = exc.to_dict()
                continue
            table[i, j] = f.rbic
            fits[(i, j)] = f
    cell = pick_cell(table, p1v, p2v, rule)
    if cell is None:
        raise SelectionFailedError("every cell of the selection grid failed", failures)
    i, j = cell
    return SelectionResult(int(p1v[i]), int(p2v[j]), fits[cell], table, p1v, p2v, failures)
