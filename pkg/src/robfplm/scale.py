"""M-scale estimation of residuals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateScaleError
from .rho import B_SCALE, C0_TUKEY, RhoFunction

MAD_CONSTANT = 0.6745
EQUATION_TOL = 1e-9
MAX_ITER = 200


@dataclass(frozen=True)
class MScaleSpec:
    """Describes the equation ``sum(rho0(r / s)) / (n - d) = b``."""

    rho0: RhoFunction = field(default_factory=lambda: RhoFunction("tukey", C0_TUKEY))
    b: float = B_SCALE
    dof_correction: int = 0

    def __post_init__(self):
        if not 0 < self.b < self.rho0.sup:
            raise ValueError(f"b={self.b} must lie in (0, sup rho0)")
        if self.dof_correction < 0:
            raise ValueError("dof_correction must be non-negative")

    def with_dof(self, d: int) -> "MScaleSpec":
        return MScaleSpec(self.rho0, self.b, int(d))


def initial_scale(residuals) -> float:
    """Normalized median absolute deviation about the median."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("initial_scale needs at least one residual")
    return float(np.median(np.abs(r - np.median(r))) / MAD_CONSTANT)


def _zero_mask(r):
    return np.abs(r) < 1e-14 * (1.0 + np.max(np.abs(r)))


def mscale(residuals, spec: MScaleSpec = MScaleSpec(), tol: float = EQUATION_TOL,
           max_iter: int = MAX_ITER, s0: float = None) -> float:
    """Solve the M-scale equation for ``s > 0``.

    Safeguarded Newton iterations on ``f(s) = mean_rho(r / s) - b``. A
    bracket ``[lo, hi]`` is tightened from the sign of ``f`` on every step;
    a Newton step leaving it is replaced by the fixed-point step
    ``s * sqrt(mean_rho / b)``, and that in turn by bisection in log scale.
    Iteration stops once the equation residual is below ``tol`` and the step
    is at rounding level, so the result is equivariant to near machine
    precision.

    Parameters
    ----------
    s0 : float, optional
        Starting value; the normalized MAD of the residuals by default.

    Raises
    ------
    DegenerateScaleError
        If too many residuals are zero for a positive root to exist.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    n = r.size
    denom = n - spec.dof_correction
    if denom <= 0:
        raise ValueError(f"need n > dof_correction, got n={n}, d={spec.dof_correction}")
    b = spec.b

    nonzero = np.count_nonzero(~_zero_mask(r))
    if nonzero == 0 or spec.rho0.sup * nonzero / denom <= b:
        raise DegenerateScaleError(
            f"{n - nonzero} of {n} residuals are zero; the M-scale equation "
            f"has no positive root")

    s = initial_scale(r) if s0 is None or not s0 > 0 or not np.isfinite(s0) else float(s0)
    if not s > 0:
        s = float(np.max(np.abs(r)))
    lo, hi = 0.0, np.inf
    fused = spec.rho0.rho_psiu
    for _ in range(max_iter):
        rv, pu = fused(r / s)
        fs = float(rv.sum()) / denom - b
        if fs > 0:
            lo = s
        else:
            hi = s
        # Newton step on f(s); falls back to the fixed-point map, then bisection
        slope = -float(pu.sum()) / (denom * s)
        s_new = s - fs / slope if slope < 0 else np.nan
        if not lo <= s_new <= hi:
            s_new = s * np.sqrt((fs + b) / b)
        if not lo <= s_new <= hi:
            s_new = np.sqrt(lo * hi) if lo > 0 and np.isfinite(hi) else (
                2.0 * lo if lo > 0 else 0.5 * hi)
        step = abs(s_new - s)
        s = s_new
        if abs(fs) < tol and step <= 4e-15 * s:
            break
        if np.isfinite(hi) and hi - lo <= 4e-16 * hi:
            break
    return float(s)
