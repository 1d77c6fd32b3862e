"""S-, MM- and Huber M-regression over a generic design matrix.

The S-estimator is computed with a fast-S scheme: random elemental
subsamples, a few concentration steps on every candidate, then full
iterative refinement of the best few. The MM step is IRWLS at a fixed scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import DegenerateScaleError, FlatObjectiveError, SingularDesignError
from .rho import RhoFunction, huber
from .scale import MScaleSpec, mscale

PIVOT_RTOL = 1e-10
EXACT_FIT_RTOL = 1e-10
# step lengths tried along each S-refinement direction (1 = plain IRWLS)
EXTRAPOLATION = np.array([1.0, 2.0, 4.0, 8.0, 16.0, 32.0])


@dataclass(frozen=True)
class SolverControl:
    n_subsamples: int = 500
    k_refine_steps: int = 2
    best_candidates: int = 5
    irwls_tol: float = 1e-8
    max_irwls_iter: int = 500
    seed: int = 0
    # relative coefficient change that ends the S refinement of a candidate
    refine_tol: float = 1e-7

    def __post_init__(self):
        for name in ("n_subsamples", "k_refine_steps", "best_candidates", "max_irwls_iter"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not (self.irwls_tol > 0 and self.refine_tol > 0):
            raise ValueError("tolerances must be positive")

    def replace(self, **changes) -> "SolverControl":
        d = dict(self.__dict__)
        d.update(changes)
        return SolverControl(**d)


@dataclass(frozen=True)
class RegressionFit:
    coefficients: np.ndarray
    scale: float
    residuals: np.ndarray
    objective: float
    converged: bool
    iterations: int
    dropped: tuple = ()
    n_singular: int = 0
    objective_trace: tuple = field(default=(), repr=False)

    def summary(self) -> dict:
        return {"scale": self.scale, "objective": self.objective,
                "converged": self.converged, "iterations": self.iterations,
                "dropped_columns": list(self.dropped),
                "singular_subsamples": self.n_singular}


def wls(D, y, w=None):
    """Weighted least squares through a column-pivoted QR factorization.

    Columns whose pivot falls below ``1e-10`` times the largest pivot are
    dropped (their coefficient is set to zero).

    Returns
    -------
    coef : ndarray
    dropped : tuple of int
    """
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    if w is None:
        A, rhs = D, y
    else:
        sw = np.sqrt(w)
        A, rhs = D * sw[:, None], y * sw
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        raise FlatObjectiveError("weighted design is identically zero")
    rank = int(np.sum(diag > PIVOT_RTOL * diag[0]))
    coef = np.zeros(D.shape[1])
    sol = scipy.linalg.solve_triangular(R[:rank, :rank], Q[:, :rank].T @ rhs,
                                        check_finite=False)
    coef[piv[:rank]] = sol
    return coef, tuple(sorted(int(j) for j in piv[rank:]))


def wls_fast(D, y, w):
    """Weighted least squares by Cholesky on the normal equations.

    Falls back to :func:`wls` (pivoted QR) whenever the factorization fails
    or the Cholesky diagonal spreads over more than ``1e7``, so rank
    decisions are always made by the QR route.
    """
    A = D * w[:, None]
    G = A.T @ D
    c, info = lapack.dpotrf(G, lower=0, clean=0)
    if info == 0:
        d = np.abs(np.diag(c))
        if d.min() > 1e-7 * d.max():
            coef, info = lapack.dpotrs(c, A.T @ y, lower=0)
            if info == 0 and np.all(np.isfinite(coef)):
                return coef, ()
    return wls(D, y, w)


def _relative_change(new, old):
    return np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-300)


def _batch_solve(G, rhs):
    """Solve a stack of systems; rows with a singular matrix come back NaN."""
    try:
        return np.linalg.solve(G, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.full(rhs.shape, np.nan)
        sign, _ = np.linalg.slogdet(G)
        ok = sign != 0
        if ok.any():
            try:
                out[ok] = np.linalg.solve(G[ok], rhs[ok][..., None])[..., 0]
            except np.linalg.LinAlgError:
                for k in np.flatnonzero(ok):
                    try:
                        out[k] = np.linalg.solve(G[k], rhs[k])
                    except np.linalg.LinAlgError:
                        pass
        return out


def _gram_stack(D):
    """Return a function mapping row weights ``W`` (m, n) to ``D' diag(W_k) D``."""
    q = D.shape[1]
    iu, ju = np.triu_indices(q)
    products = D[:, iu] * D[:, ju]

    def gram(W):
        U = W @ products
        G = np.empty((W.shape[0], q, q))
        G[:, iu, ju] = U
        G[:, ju, iu] = U
        return G

    return gram


def _batch_mscale(absR, s, spec: MScaleSpec, n_iter: int = 30, rtol: float = 1e-10):
    """Newton iterations for the M-scale of every row of ``absR``.

    Rows stop individually once their relative step is below ``rtol``.
    """
    denom = absR.shape[1] - spec.dof_correction
    fused, b = spec.rho0.rho_psiu, spec.b
    s = np.array(s, dtype=float)
    rows = np.arange(s.size)
    A = absR
    for _ in range(n_iter):
        sa = s[rows]
        rv, pu = fused(A / sa[:, None])
        f = rv.sum(axis=1) / denom - b
        slope = -pu.sum(axis=1) / (denom * sa)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = sa - f / slope
            fixed = sa * np.sqrt((f + b) / b)
        ok = (slope < 0) & (newton > 0.5 * sa) & (newton < 2.0 * sa)
        s_new = np.where(ok, newton, fixed)
        s_new = np.where(s_new > 0, s_new, 0.5 * sa)
        s[rows] = s_new
        going = np.abs(s_new - sa) > rtol * sa
        if not going.any():
            break
        if not going.all():
            rows, A = rows[going], A[going]
    return s


def _degenerate_rows(absR, spec: MScaleSpec):
    zero = absR < 1e-14 * (1.0 + absR.max(axis=1, keepdims=True))
    denom = absR.shape[1] - spec.dof_correction
    return spec.rho0.sup * (~zero).sum(axis=1) / denom <= spec.b


def _candidate_scales(absR, spec: MScaleSpec, s0=None):
    """M-scales of candidate residual rows; ``inf`` where no positive root exists."""
    bad = _degenerate_rows(absR, spec)
    bad |= ~np.all(np.isfinite(absR), axis=1)
    out = np.full(absR.shape[0], np.inf)
    ok = ~bad
    if ok.any():
        a = absR[ok]
        if s0 is None:
            s = np.median(a, axis=1) / 0.6745
            s = np.where(s > 0, s, a.max(axis=1))
        else:
            s = np.where(np.isfinite(s0[ok]) & (s0[ok] > 0), s0[ok], a.max(axis=1))
        out[ok] = _batch_mscale(a, s, spec, rtol=1e-8)
    return out


def _refine_batch(D, y, C, spec: MScaleSpec, ctrl: SolverControl, gram):
    """Concentrate several candidates to convergence, side by side.

    Every candidate runs its own IRWLS with rho0 weights and an exact scale
    update per step; it stops when its scale would increase (rounding level
    near the optimum) or its relative coefficient change drops below
    ``ctrl.refine_tol``.
    """
    rho0 = spec.rho0
    C = C.copy()
    m = C.shape[0]
    R = y[None, :] - C @ D.T
    absR = np.abs(R)
    degenerate = _degenerate_rows(absR, spec)
    if degenerate.any():
        k = int(np.flatnonzero(degenerate)[0])
        raise DegenerateScaleError("a candidate fit leaves too many zero residuals",
                                   coefficients=C[k].copy())
    s0 = np.median(absR, axis=1) / 0.6745
    s0 = np.where(s0 > 0, s0, absR.max(axis=1))
    s = _batch_mscale(absR, s0, spec, n_iter=100, rtol=1e-13)
    traces = [[v] for v in s]
    iters = np.zeros(m, dtype=int)
    conv = np.zeros(m, dtype=bool)
    dropped = [()] * m
    active = np.arange(m)
    for it in range(1, ctrl.max_irwls_iter + 1):
        W = rho0.weight(R[active] / s[active, None])
        G = gram(W)
        rhs = (W * y[None, :]) @ D
        new = np.empty((active.size, D.shape[1]))
        try:
            L = np.linalg.cholesky(G)
            d = np.abs(np.diagonal(L, axis1=1, axis2=2))
            fine = d.min(axis=1) > 1e-7 * d.max(axis=1)
        except np.linalg.LinAlgError:
            fine = np.zeros(active.size, dtype=bool)
        if fine.any():
            new[fine] = np.linalg.solve(G[fine], rhs[fine][..., None])[..., 0]
        for j in np.flatnonzero(~fine):
            new[j], dropped[active[j]] = wls(D, y, W[j])
        # try longer steps along the IRWLS direction and keep the best scale
        old = C[active]
        na, q = new.shape
        trial = old[:, None, :] + EXTRAPOLATION[None, :, None] * (new - old)[:, None, :]
        trial = trial.reshape(-1, q)
        R_trial = y[None, :] - trial @ D.T
        abs_trial = np.abs(R_trial)
        degenerate = _degenerate_rows(abs_trial, spec).reshape(na, -1)
        if degenerate[:, 0].any():
            j = int(np.flatnonzero(degenerate[:, 0])[0])
            raise DegenerateScaleError("a candidate fit leaves too many zero residuals",
                                       coefficients=new[j].copy())
        s_trial = np.full(degenerate.size, np.inf)
        ok = ~degenerate.ravel()
        s_trial[ok] = _batch_mscale(abs_trial[ok], np.repeat(s[active], EXTRAPOLATION.size)[ok],
                                    spec, n_iter=100, rtol=1e-13)
        s_trial = s_trial.reshape(na, -1)
        pick = np.argmin(s_trial, axis=1)
        sel = np.arange(na) * EXTRAPOLATION.size + pick
        new, R_new, s_new = trial[sel], R_trial[sel], s_trial[np.arange(na), pick]
        delta = (np.linalg.norm(new - old, axis=1)
                 / np.maximum(np.linalg.norm(old, axis=1), 1e-300))
        worse = s_new > s[active]
        take = ~worse
        rows = active[take]
        C[rows], R[rows], s[rows] = new[take], R_new[take], s_new[take]
        for k, v in zip(rows, s_new[take]):
            traces[k].append(v)
        iters[active] = it
        stop = worse | (delta < ctrl.refine_tol)
        conv[active[stop]] = True
        active = active[~stop]
        if active.size == 0:
            break
    return C, s, conv, iters, dropped, traces


def subsample_indices(n: int, q: int, ctrl: SolverControl) -> np.ndarray:
    """Row indices of the elemental subsamples, one sorted row of ``q`` per draw."""
    rng = np.random.default_rng(ctrl.seed)
    idx = np.argpartition(rng.random((ctrl.n_subsamples, n)), q - 1, axis=1)[:, :q]
    idx.sort(axis=1)
    return idx


def s_estimate(D, y, spec: MScaleSpec, ctrl: SolverControl = SolverControl()) -> RegressionFit:
    """S-regression estimate: coefficients minimizing the M-scale of the residuals.

    Deterministic given ``ctrl.seed``; the subsample draws depend only on
    ``n``, ``q`` and the seed, never on ``y``.

    Raises
    ------
    SingularDesignError
        If no elemental subsample has a non-singular design.
    DegenerateScaleError
        If some candidate fits the data exactly (too many zero residuals);
        the exception carries that candidate's coefficients.
    """
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    n, q = D.shape
    if n <= q:
        raise SingularDesignError(f"need more observations ({n}) than columns ({q})")
    if spec.dof_correction >= n:
        raise ValueError("dof_correction must be smaller than n")
    K = ctrl.n_subsamples
    idx = subsample_indices(n, q, ctrl)

    Ds = D[idx]
    usable = ~np.any(np.all(Ds == 0.0, axis=1), axis=1)
    B = np.full((K, q), np.nan)
    if usable.any():
        B[usable] = _batch_solve(Ds[usable], y[idx[usable]])
    usable &= np.all(np.isfinite(B), axis=1)
    n_singular = int(K - usable.sum())
    if not usable.any():
        raise SingularDesignError(
            f"all {K} elemental subsamples gave a singular design")
    draw = np.flatnonzero(usable)
    B = B[usable]

    R = y[None, :] - B @ D.T
    absR = np.abs(R)
    exact = absR < EXACT_FIT_RTOL * max(np.max(np.abs(y)), 1e-300)
    denom = n - spec.dof_correction
    perfect = spec.rho0.sup * (~exact).sum(axis=1) / denom <= spec.b
    if perfect.any():
        k = int(np.flatnonzero(perfect)[0])
        raise DegenerateScaleError(
            "an elemental fit reproduces the response exactly; the residual "
            "scale is zero", coefficients=B[k].copy())
    s_raw = _candidate_scales(absR, spec)

    # concentration steps with one fixed-point scale update each
    rho0, b = spec.rho0, spec.b
    gram = _gram_stack(D)
    Bc, Rc, s = B, R, s_raw.copy()
    for _ in range(ctrl.k_refine_steps):
        W = rho0.weight(Rc / s[:, None])
        G = gram(W)
        rhs = (W * y[None, :]) @ D
        Bn = _batch_solve(G, rhs)
        bad = ~np.all(np.isfinite(Bn), axis=1)
        Bn[bad] = Bc[bad]
        Bc = Bn
        Rc = y[None, :] - Bc @ D.T
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            s = s * np.sqrt(rho0.rho(Rc / s[:, None]).sum(axis=1) / denom / b)
        s[~(np.isfinite(s) & (s > 0))] = np.inf
    s_conc = _candidate_scales(np.abs(Rc), spec, s)

    pool_coef = np.vstack([B, Bc])
    pool_scale = np.concatenate([s_raw, s_conc])
    pool_draw = np.concatenate([draw, draw])
    norms = np.linalg.norm(pool_coef, axis=1)
    order = np.lexsort((pool_draw, norms, pool_scale))
    chosen = []
    seen = set()
    for k in order:
        key = pool_coef[k].tobytes()
        if key in seen:
            continue
        seen.add(key)
        chosen.append(k)
        if len(chosen) == ctrl.best_candidates:
            break

    C, sc, conv, iters, dropped, traces = _refine_batch(
        D, y, pool_coef[chosen], spec, ctrl, gram)
    norms = np.linalg.norm(C, axis=1)
    k = min(range(len(chosen)), key=lambda j: (sc[j], norms[j]))
    coef = C[k]
    r = y - D @ coef
    scale = mscale(r, spec, s0=sc[k])
    return RegressionFit(coefficients=coef, scale=scale, residuals=r, objective=scale,
                         converged=bool(conv[k]), iterations=int(iters[k]),
                         dropped=dropped[k], n_singular=n_singular,
                         objective_trace=tuple(traces[k]))


def _irwls(D, y, sigma, rho: RhoFunction, init, ctrl: SolverControl):
    coef = np.asarray(init, dtype=float).copy()
    r = y - D @ coef
    obj = float(np.sum(rho.rho(r / sigma)))
    trace = [obj]
    converged = False
    dropped = ()
    it = 0
    for it in range(1, ctrl.max_irwls_iter + 1):
        w = rho.weight(r / sigma)
        if not np.any(w > 0):
            raise FlatObjectiveError(
                "all IRWLS weights are zero; the loss is flat at the current "
                "fit (try a larger tuning constant)")
        try:
            new, dropped = wls_fast(D, y, w)
        except FlatObjectiveError as exc:
            raise FlatObjectiveError(
                f"{exc}; the loss is flat at the current fit (try a larger "
                f"tuning constant)") from None
        r_new = y - D @ new
        obj_new = float(np.sum(rho.rho(r_new / sigma)))
        # near the minimum the objective is flat to rounding while the
        # coefficients still move, so only a real increase triggers halving
        slack = obj * (1 + 1e-13)
        step = 1.0
        while obj_new > slack and step > 1e-3:
            step /= 2
            cand = coef + step * (new - coef)
            r_cand = y - D @ cand
            o = float(np.sum(rho.rho(r_cand / sigma)))
            if o <= obj_new:
                new, r_new, obj_new = cand, r_cand, o
        if obj_new > slack:
            converged = True
            break
        delta = _relative_change(new, coef)
        coef, r, obj = new, r_new, obj_new
        trace.append(obj)
        if delta < ctrl.irwls_tol:
            converged = True
            break
    return RegressionFit(coefficients=coef, scale=float(sigma), residuals=y - D @ coef,
                         objective=obj, converged=converged, iterations=it,
                         dropped=dropped, objective_trace=tuple(trace))


def mm_step(D, y, sigma: float, rho1: RhoFunction, init,
            ctrl: SolverControl = SolverControl()) -> RegressionFit:
    """M-estimate at the fixed scale ``sigma``, by IRWLS started at ``init``.

    The objective ``sum(rho1(r / sigma))`` never increases across iterations.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    return _irwls(D, y, float(sigma), rho1, init, ctrl)


def ols(D, y) -> RegressionFit:
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    coef, dropped = wls(D, y)
    r = y - D @ coef
    return RegressionFit(coefficients=coef, scale=float("nan"), residuals=r,
                         objective=float(r @ r), converged=True, iterations=1,
                         dropped=dropped)


def m_estimate_noscale(D, y, rho: RhoFunction = huber(),
                       ctrl: SolverControl = SolverControl()) -> RegressionFit:
    """Huber-type M-estimate with the residual scale pinned to 1.

    Started from least squares; the loss is convex so IRWLS reaches the
    global minimum.
    """
    start = ols(D, y).coefficients
    return _irwls(np.asarray(D, dtype=float), np.asarray(y, dtype=float), 1.0, rho,
                  start, ctrl)
