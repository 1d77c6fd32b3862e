"""Semi-functional linear models: design assembly, fitting and prediction.

The model is ``y = <X, beta> + eta(z) + sigma * eps``, optionally with an
intercept, a varying-coefficient multiplier ``v`` on ``eta`` and extra
scalar covariates ``w``. Both ``beta`` and ``eta`` are expanded in B-spline
bases built on ``[0, 1]``; curve grids and ``z`` are mapped affinely onto
that interval before the design is assembled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import median_abs_deviation

from .bspline import (AffineMap, FunctionalSample, SplineBasis, basis_eval,
                      inner_products, make_basis, trapezoid_weights)
from .errors import (DegenerateTestSetError, DomainError, InsufficientDataError)
from .rho import B_SCALE, C0_TUKEY, C1_TUKEY, C_HUBER, RhoFunction, huber, quadratic, tukey
from .scale import MScaleSpec
from .solver import (RegressionFit, SolverControl, m_estimate_noscale, mm_step, ols,
                     s_estimate)

ESTIMATORS = ("mm", "ls", "m_huber")
MONOTONE_RESOLUTION = 512


def canonical_estimator(name: str) -> str:
    name = {"m": "m_huber", "huber": "m_huber"}.get(name, name)
    if name not in ESTIMATORS:
        raise ValueError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    return name


@dataclass(frozen=True)
class Dataset:
    """Response, functional covariate and scalar covariates for ``n`` units.

    ``t_domain`` and ``z_domain`` default to the range of the curve grid and
    of ``z``. ``include_intercept`` defaults to whether ``v`` is given.
    """

    y: np.ndarray
    curves: FunctionalSample
    z: np.ndarray
    v: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    include_intercept: Optional[bool] = None
    t_domain: Optional[tuple] = None
    z_domain: Optional[tuple] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        z = np.asarray(self.z, dtype=float).ravel()
        n = y.size
        if self.curves.n != n or z.size != n:
            raise ValueError(f"length mismatch: y has {n} entries, curves "
                             f"{self.curves.n}, z {z.size}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise ValueError("y and z must be finite")
        v = None if self.v is None else np.asarray(self.v, dtype=float).ravel()
        if v is not None and (v.size != n or not np.all(np.isfinite(v))):
            raise ValueError("v must be finite with one entry per observation")
        w = None
        if self.w is not None:
            w = np.asarray(self.w, dtype=float)
            w = w.reshape(n, -1) if w.ndim == 1 else w
            if w.shape[0] != n or not np.all(np.isfinite(w)):
                raise ValueError("w must be finite with one row per observation")
            if w.shape[1] == 0:
                w = None
        intercept = (v is not None) if self.include_intercept is None else bool(self.include_intercept)
        grid = self.curves.grid
        t_dom = tuple(map(float, self.t_domain)) if self.t_domain is not None else (
            float(grid[0]), float(grid[-1]))
        z_dom = tuple(map(float, self.z_domain)) if self.z_domain is not None else (
            float(z.min()), float(z.max()))
        if not AffineMap(*t_dom).contains(grid):
            raise DomainError(f"curve grid outside the declared domain {t_dom}")
        if not AffineMap(*z_dom).contains(z):
            raise DomainError(f"z values outside the declared domain {z_dom}")
        for name, val in (("y", y), ("z", z), ("v", v), ("w", w),
                          ("include_intercept", intercept), ("t_domain", t_dom),
                          ("z_domain", z_dom)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def t_map(self) -> AffineMap:
        return AffineMap(*self.t_domain)

    @property
    def z_map(self) -> AffineMap:
        return AffineMap(*self.z_domain)

    @property
    def n_extra(self) -> int:
        return 0 if self.w is None else self.w.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.curves.subset(idx), self.z[idx],
                       None if self.v is None else self.v[idx],
                       None if self.w is None else self.w[idx],
                       self.include_intercept, self.t_domain, self.z_domain)

    def with_response(self, y) -> "Dataset":
        return Dataset(y, self.curves, self.z, self.v, self.w,
                       self.include_intercept, self.t_domain, self.z_domain)


@dataclass(frozen=True)
class ColumnMap:
    intercept: Optional[slice]
    beta: slice
    eta: slice
    extra: Optional[slice]
    q: int


def _column_map(p1, p2, intercept, m) -> ColumnMap:
    start = 1 if intercept else 0
    beta = slice(start, start + p1)
    eta = slice(beta.stop, beta.stop + p2)
    extra = slice(eta.stop, eta.stop + m) if m else None
    return ColumnMap(slice(0, 1) if intercept else None, beta, eta, extra,
                     eta.stop + m)


def build_design(ds: Dataset, basis_beta: SplineBasis, basis_eta: SplineBasis):
    """Stack ``[intercept | <X_i, B_j> | (v_i *) B_j(z_i) | w_i]`` column blocks.

    Returns
    -------
    D : ndarray, shape (n, q)
    cmap : ColumnMap
    """
    unit_curves = FunctionalSample(ds.t_map.to_unit(ds.curves.grid), ds.curves.values)
    xb = inner_products(unit_curves, basis_beta)
    zb = basis_eval(basis_eta, ds.z_map.to_unit(ds.z)).reshape(ds.n, -1)
    if ds.v is not None:
        zb = zb * ds.v[:, None]
    blocks = []
    if ds.include_intercept:
        blocks.append(np.ones((ds.n, 1)))
    blocks += [xb, zb]
    if ds.w is not None:
        blocks.append(ds.w)
    cmap = _column_map(basis_beta.dimension, basis_eta.dimension,
                       ds.include_intercept, ds.n_extra)
    return np.hstack(blocks), cmap


@dataclass(frozen=True)
class FplmFit:
    """A fitted semi-functional linear model.

    ``beta(t)`` and ``eta(z)`` take points in the original domains. Because
    the inner products are computed after mapping the curve grid onto
    ``[0, 1]``, the fitted slope on the original scale is the unit-domain
    spline divided by the length of the curve domain.
    """

    estimator: str
    basis_beta: SplineBasis
    basis_eta: SplineBasis
    t_map: AffineMap
    z_map: AffineMap
    coef_beta: np.ndarray
    coef_eta: np.ndarray
    intercept: Optional[float]
    coef_extra: Optional[np.ndarray]
    sigma: float
    residuals: np.ndarray
    rbic: float
    rho1: RhoFunction
    has_v: bool = False
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def p1(self) -> int:
        return self.basis_beta.dimension

    @property
    def p2(self) -> int:
        return self.basis_eta.dimension

    @property
    def n(self) -> int:
        return self.residuals.size

    @property
    def coefficients(self) -> np.ndarray:
        parts = [] if self.intercept is None else [np.array([self.intercept])]
        parts += [self.coef_beta, self.coef_eta]
        if self.coef_extra is not None:
            parts.append(self.coef_extra)
        return np.concatenate(parts)

    def beta(self, t):
        u = self.t_map.to_unit(t)
        return basis_eval(self.basis_beta, u) @ self.coef_beta / self.t_map.length

    def eta(self, z):
        return basis_eval(self.basis_eta, self.z_map.to_unit(z)) @ self.coef_eta

    def eta_mod(self, z, resolution: int = MONOTONE_RESOLUTION, restrict: str = "range"):
        """Monotone (non-decreasing) modification of ``eta``, interpolated at ``z``."""
        u = np.linspace(0.0, 1.0, resolution)
        mod = monotone_modify(basis_eval(self.basis_eta, u) @ self.coef_eta, u, restrict)
        uz = self.z_map.to_unit(z)
        if not AffineMap(0.0, 1.0).contains(uz):
            raise DomainError("z outside the fitted domain")
        return np.interp(uz, u, mod)

    def predict(self, newdata: Dataset) -> np.ndarray:
        return predict(self, newdata)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "basis_beta": self.basis_beta.to_dict(),
            "basis_eta": self.basis_eta.to_dict(),
            "t_domain": [self.t_map.lo, self.t_map.hi],
            "z_domain": [self.z_map.lo, self.z_map.hi],
            "coef_beta": self.coef_beta.tolist(),
            "coef_eta": self.coef_eta.tolist(),
            "intercept": self.intercept,
            "coef_extra": None if self.coef_extra is None else self.coef_extra.tolist(),
            "sigma": self.sigma,
            "rbic": self.rbic,
            "rho1": self.rho1.to_dict(),
            "has_v": self.has_v,
            "residuals": self.residuals.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FplmFit":
        extra = d.get("coef_extra")
        return cls(
            estimator=d["estimator"],
            basis_beta=SplineBasis.from_dict(d["basis_beta"]),
            basis_eta=SplineBasis.from_dict(d["basis_eta"]),
            t_map=AffineMap(*d["t_domain"]), z_map=AffineMap(*d["z_domain"]),
            coef_beta=np.asarray(d["coef_beta"], dtype=float),
            coef_eta=np.asarray(d["coef_eta"], dtype=float),
            intercept=d.get("intercept"),
            coef_extra=None if extra is None else np.asarray(extra, dtype=float),
            sigma=float(d["sigma"]), residuals=np.asarray(d["residuals"], dtype=float),
            rbic=float(d["rbic"]), rho1=RhoFunction(**d["rho1"]),
            has_v=bool(d.get("has_v", False)), diagnostics=d.get("diagnostics", {}))


def fit(ds: Dataset, p1: int, p2: int, estimator: str = "mm",
        ctrl: SolverControl = SolverControl(), *, order: int = 4,
        rho0: Optional[RhoFunction] = None, b: float = B_SCALE,
        rho1: Optional[RhoFunction] = None, rho_huber: Optional[RhoFunction] = None,
        eta_knots: str = "equispaced") -> FplmFit:
    """Fit the model with bases of dimension ``p1`` (slope) and ``p2`` (eta).

    Parameters
    ----------
    estimator : {"mm", "ls", "m_huber"}
        ``mm`` runs the S-estimator (Tukey ``rho0``, M-scale with
        ``n - q`` in the denominator) and then the MM step with ``rho1`` at
        the S-scale. ``ls`` is ordinary least squares. ``m_huber`` is the
        Huber M-estimator with the scale fixed at 1.
    eta_knots : {"equispaced", "quantile"}
        Knot placement for the ``eta`` basis; ``quantile`` uses the
        observed ``z``.
    """
    from .selection import rbic_value

    estimator = canonical_estimator(estimator)
    basis_beta = make_basis(p1, order, (0.0, 1.0))
    placement = ds.z_map.to_unit(ds.z) if eta_knots == "quantile" else "equispaced"
    basis_eta = make_basis(p2, order, (0.0, 1.0), placement)
    D, cmap = build_design(ds, basis_beta, basis_eta)
    n, q = D.shape
    if n <= q:
        raise InsufficientDataError(f"n={n} observations for q={q} coefficients")
    y = ds.y
    diagnostics = {}

    if estimator == "mm":
        rho0 = rho0 or tukey(C0_TUKEY)
        rho1 = rho1 or tukey(C1_TUKEY)
        spec = MScaleSpec(rho0, b, q)
        s_fit = s_estimate(D, y, spec, ctrl)
        sigma = s_fit.scale
        final = mm_step(D, y, sigma, rho1, s_fit.coefficients, ctrl)
        diagnostics["s_step"] = s_fit.summary()
    elif estimator == "ls":
        rho1 = quadratic()
        final = ols(D, y)
        sigma = float(np.sqrt(final.objective / (n - q)))
    else:
        rho1 = rho_huber or huber(C_HUBER)
        final = m_estimate_noscale(D, y, rho1, ctrl)
        sigma = 1.0
    diagnostics["final_step"] = final.summary()

    coef = final.coefficients
    residuals = y - D @ coef
    return FplmFit(
        estimator=estimator, basis_beta=basis_beta, basis_eta=basis_eta,
        t_map=ds.t_map, z_map=ds.z_map,
        coef_beta=coef[cmap.beta].copy(), coef_eta=coef[cmap.eta].copy(),
        intercept=None if cmap.intercept is None else float(coef[0]),
        coef_extra=None if cmap.extra is None else coef[cmap.extra].copy(),
        sigma=float(sigma), residuals=residuals,
        rbic=rbic_value(residuals, sigma, rho1, n, p1, p2),
        rho1=rho1, has_v=ds.v is not None, diagnostics=diagnostics)


def predict(fit: FplmFit, newdata: Dataset) -> np.ndarray:
    """Fitted values ``intercept + <X, beta> + (v *) eta(z) + w @ coef_extra``."""
    if not fit.t_map.contains(newdata.curves.grid):
        raise DomainError("curve grid outside the fitted domain")
    if not fit.z_map.contains(newdata.z):
        raise DomainError("z outside the fitted domain")
    if fit.has_v != (newdata.v is not None):
        raise ValueError("new data must match the fitted model's use of v")
    ds = Dataset(newdata.y, newdata.curves, newdata.z, newdata.v, newdata.w,
                 fit.intercept is not None, (fit.t_map.lo, fit.t_map.hi),
                 (fit.z_map.lo, fit.z_map.hi))
    if ds.n_extra != (0 if fit.coef_extra is None else fit.coef_extra.size):
        raise ValueError("new data has a different number of extra covariates")
    D, _ = build_design(ds, fit.basis_beta, fit.basis_eta)
    return D @ fit.coefficients


def monotone_modify(eta_values, grid=None, restrict: str = "range") -> np.ndarray:
    """Non-decreasing modification of a function sampled on ``[0, 1]``.

    Applies the level-set operator ``U(f)(u) = |{z : f(z) <= u}| + a`` twice:
    first to ``eta`` (giving a distribution function, restricted to an
    interval of levels), then to that restriction. The inner operator is a
    Riemann sum with trapezoid cell weights, which makes it a step function;
    the outer integral of its indicator is then exact. The result reproduces
    any non-decreasing input on the grid.

    Parameters
    ----------
    restrict : {"range", "endpoints"}
        Level interval for the inner step. ``range`` uses
        ``[min eta, max eta]`` and yields the increasing rearrangement of
        ``eta``. ``endpoints`` uses ``[eta(0), eta(1)]``, which clamps the
        output to the endpoint values; if ``eta(1) <= eta(0)`` the result is
        the constant ``eta(0)``. Both agree for non-decreasing input.
    """
    eta = np.asarray(eta_values, dtype=float).ravel()
    G = eta.size
    grid = np.linspace(0.0, 1.0, G) if grid is None else np.asarray(grid, dtype=float)
    if G < 3 or grid.size != G:
        raise ValueError("need at least 3 values on a matching grid")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    if abs(grid[0]) > 1e-12 or abs(grid[-1] - 1.0) > 1e-12:
        raise ValueError("grid must span [0, 1]")
    if restrict == "range":
        lo, hi = eta.min(), eta.max()
    elif restrict == "endpoints":
        lo, hi = eta[0], eta[-1]
    else:
        raise ValueError(f"unknown restriction {restrict!r}")
    if hi <= lo:
        return np.full(G, eta[0])
    order = np.argsort(eta, kind="stable")
    levels = eta[order]
    cdf = np.cumsum(trapezoid_weights(grid)[order])
    # {u : cdf(u) <= z} ends at the first level whose cumulative weight exceeds z;
    # cumulative weights often hit grid values exactly, so ties count as <=
    m = np.searchsorted(cdf, grid + 1e-12, side="right")
    upper = np.where(m < G, levels[np.minimum(m, G - 1)], np.inf)
    return np.clip(upper, lo, hi)


def prediction_metrics(y_test, y_hat, flags=None) -> dict:
    """Squared prediction errors scaled by the squared MAD of ``y_test``.

    The MAD is normalized for consistency at the normal. ``mspe_clean``
    averages over points whose flag is false and is only reported when
    ``flags`` is given.
    """
    y_test = np.asarray(y_test, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y_test.shape != y_hat.shape:
        raise ValueError("y_test and y_hat differ in length")
    s = median_abs_deviation(y_test, scale="normal")
    if not s > 0:
        raise DegenerateTestSetError("MAD of the test responses is zero")
    se = (y_test - y_hat) ** 2 / s**2
    out = {"mspe": float(se.mean()), "medspe": float(np.median(se))}
    if flags is not None:
        flags = np.asarray(flags, dtype=bool).ravel()
        if flags.shape != se.shape:
            raise ValueError("flags differ in length from y_test")
        keep = ~flags
        out["mspe_clean"] = float(se[keep].mean()) if keep.any() else float("nan")
        out["n_flagged"] = int(flags.sum())
    return out


def flag_outliers(residuals, whisker: float = 1.5) -> np.ndarray:
    """Boxplot rule: flag residuals beyond ``whisker`` IQRs from the quartiles."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size < 4:
        raise ValueError("need at least 4 residuals")
    q1, q3 = np.percentile(r, [25, 75])
    iqr = q3 - q1
    return (r < q1 - whisker * iqr) | (r > q3 + whisker * iqr)
