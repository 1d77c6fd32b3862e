"""Monte Carlo study: data-generating process, contamination and metrics.

Curves follow a Gaussian Karhunen-Loeve expansion on ``[0, 1]`` with
cosine eigenfunctions and score variances ``j**-2``; ``z`` is uniform on
``[-1, 1]`` and errors are standard normal. Two contamination schemes are
available: ``c1`` (vertical outliers in the errors) and ``c2`` (shifted
second score together with shifted errors, i.e. high-leverage outliers).
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bspline import FunctionalSample
from .errors import DomainError, FplmError
from .model import Dataset, canonical_estimator
from .selection import SelectionGrid, select_dimensions
from .solver import SolverControl

log = logging.getLogger(__name__)

SCENARIOS = ("clean", "c1", "c2")
TARGETS = ("beta", "eta", "eta_mod")
METRICS = ("bias2", "mise", "bias2_trim", "mise_trim")
Z_DOMAIN = (-1.0, 1.0)
T_DOMAIN = (0.0, 1.0)
CONTAMINATION = 0.10
SIGMA0 = 1.0


def kl_basis(t, n_terms: int = 50) -> np.ndarray:
    """Eigenfunctions ``1, sqrt(2) cos((j - 1) pi t)`` as columns."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    j = np.arange(n_terms)
    phi = np.sqrt(2.0) * np.cos(np.pi * j[None, :] * t[:, None])
    phi[:, 0] = 1.0
    return phi


def beta_coefficients(n_terms: int = 50) -> np.ndarray:
    j = np.arange(1, n_terms + 1, dtype=float)
    b = 4.0 * (-1.0) ** (j + 1) / j**2
    b[0] = 0.3
    return b


def true_beta(t, n_terms: int = 50):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < T_DOMAIN[0]) or np.any(t_arr > T_DOMAIN[1]):
        raise DomainError("true_beta is defined on [0, 1]")
    out = kl_basis(t_arr.ravel(), n_terms) @ beta_coefficients(n_terms)
    return float(out[0]) if t_arr.ndim == 0 else out.reshape(t_arr.shape)


def true_eta(z):
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr < Z_DOMAIN[0]) or np.any(z_arr > Z_DOMAIN[1]):
        raise DomainError("true_eta is defined on [-1, 1]")
    out = 3.0 * np.arctan(10.0 * (z_arr - 0.5))
    return float(out) if z_arr.ndim == 0 else out


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 300
    n_rep: int = 100
    n_terms: int = 50
    grid_size: int = 100
    scenario: str = "clean"
    mu: Optional[float] = None
    seed: int = 20200101
    M: int = 100
    trim_q: Optional[int] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if (self.scenario != "clean") != (self.mu is not None):
            raise ValueError("mu is required exactly when the scenario is contaminated")
        if self.n_terms < 2:
            raise ValueError("n_terms must be at least 2")
        if self.n < 2 or self.n_rep < 1 or self.grid_size < 2 or self.M < 3:
            raise ValueError("invalid sizes in simulation config")
        if self.trim_q is None:
            object.__setattr__(self, "trim_q", int(self.M * 0.05))
        if not 0 <= self.trim_q < self.M / 2:
            raise ValueError("trim_q must leave at least one grid point")


@dataclass
class Truth:
    scores: np.ndarray
    signal: np.ndarray
    eta: np.ndarray
    errors: np.ndarray
    contaminated: np.ndarray


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(replicate)])


def simulate(config: SimulationConfig, replicate: int = 0):
    """Draw one sample.

    All random draws happen in the same order for every scenario, so the
    clean and contaminated versions of a replicate share their uncontaminated
    units exactly.

    Returns
    -------
    Dataset, Truth
    """
    rng = replicate_rng(config.seed, replicate)
    n, J = config.n, config.n_terms
    sd = 1.0 / np.arange(1, J + 1)
    scores = rng.standard_normal((n, J)) * sd
    z = rng.uniform(*Z_DOMAIN, size=n)
    eps = rng.standard_normal(n)
    flag = rng.random(n) < CONTAMINATION
    eps_out = rng.standard_normal(n)
    score_out = rng.standard_normal(n)

    errors = eps.copy()
    if config.scenario == "c1":
        errors[flag] = config.mu + 0.5 * eps_out[flag]
    elif config.scenario == "c2":
        errors[flag] = config.mu + 0.5 * eps_out[flag]
        scores[flag, 1] = config.mu / 2 + 0.5 * score_out[flag]
    else:
        flag = np.zeros(n, dtype=bool)

    grid = np.linspace(*T_DOMAIN, config.grid_size)
    curves = scores @ kl_basis(grid, J).T
    signal = scores @ beta_coefficients(J)
    eta = true_eta(z)
    y = signal + eta + SIGMA0 * errors
    ds = Dataset(y, FunctionalSample(grid, curves), z, t_domain=T_DOMAIN, z_domain=Z_DOMAIN)
    return ds, Truth(scores, signal, eta, errors, flag)


def compute_metrics(estimates, truth, trim_q: int) -> dict:
    """Integrated squared bias and MISE, full and trimmed, over replicate grids.

    ``estimates`` has one row per replicate, evaluated on the same grid as
    ``truth``. The trimmed versions drop ``trim_q`` points at each end.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.asarray(truth, dtype=float).ravel()
    if est.shape[1] != truth.size:
        raise ValueError("replicate grids and truth grid differ in size")
    M = truth.size
    err = est - truth[None, :]
    bias_sq = err.mean(axis=0) ** 2
    sq = (err**2).mean(axis=0)
    inner = slice(trim_q, M - trim_q)
    return {"bias2": float(bias_sq.mean()), "mise": float(sq.mean()),
            "bias2_trim": float(bias_sq[inner].mean()),
            "mise_trim": float(sq[inner].mean())}


@dataclass
class MonteCarloReport:
    config: SimulationConfig
    estimators: tuple
    metrics: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)
    dims: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    t_grid: np.ndarray = None
    z_grid: np.ndarray = None

    def value(self, estimator: str, target: str, metric: str) -> float:
        return self.metrics[(canonical_estimator(estimator), target)][metric]

    def long_rows(self):
        for (est, target), cell in self.metrics.items():
            for metric in METRICS:
                yield est, target, metric, cell[metric]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["estimator", "target", "metric", "value"])
            for row in self.long_rows():
                writer.writerow([row[0], row[1], row[2], repr(row[3])])

    def to_json(self, path=None):
        payload = {
            "config": asdict(self.config),
            "estimators": list(self.estimators),
            "metrics": [{"estimator": e, "target": t, "metric": m, "value": v}
                        for e, t, m, v in self.long_rows()],
            "selected_dims": {e: [list(d) if d is not None else None for d in dims]
                              for e, dims in self.dims.items()},
            "failures": {e: {str(k): v for k, v in f.items()}
                         for e, f in self.failures.items()},
        }
        if path is None:
            return payload
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
        return payload

    def write_grids(self, directory):
        """One CSV per (estimator, target): rows are replicates, columns grid points."""
        os.makedirs(directory, exist_ok=True)
        for (est, target), arr in self.grids.items():
            pts = self.t_grid if target == "beta" else self.z_grid
            with open(os.path.join(directory, f"{est}_{target}.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow([repr(float(p)) for p in pts])
                for row in arr:
                    writer.writerow([repr(float(x)) for x in row])


def metric_grids(M: int):
    return np.linspace(*T_DOMAIN, M), np.linspace(*Z_DOMAIN, M)


def run_replicate(config: SimulationConfig, replicate: int, estimators,
                  grid: SelectionGrid, ctrl: SolverControl, rule: str):
    """Simulate, select and fit one replicate for every estimator.

    Returns a dict ``estimator -> (p1, p2, beta_grid, eta_grid, eta_mod_grid)``
    or ``estimator -> error dict`` on failure.
    """
    ds, _ = simulate(config, replicate)
    t_grid, z_grid = metric_grids(config.M)
    out = {}
    for est in estimators:
        try:
            sel = select_dimensions(ds, grid, est, ctrl, rule)
        except FplmError as exc:
            out[est] = exc.to_dict()
            continue
        f = sel.fit
        out[est] = (sel.p1, sel.p2, f.beta(t_grid), f.eta(z_grid), f.eta_mod(z_grid))
    return out


def _run_replicate_star(args):
    return run_replicate(*args)


def run_study(config: SimulationConfig, estimators=("ls", "m_huber", "mm"),
              rule: str = "global", grid: SelectionGrid = SelectionGrid(),
              ctrl: SolverControl = SolverControl(), n_jobs: Optional[int] = None,
              progress=None) -> MonteCarloReport:
    """Run the full Monte Carlo loop and aggregate the metrics.

    Replicates are independent (random streams keyed on ``(seed, index)``)
    and may run in worker processes; aggregation is by replicate index.
    Failed replicates are recorded per estimator and left out of the
    metrics.
    """
    estimators = tuple(canonical_estimator(e) for e in estimators)
    n_jobs = n_jobs or 1
    jobs = [(config, r, estimators, grid, ctrl, rule) for r in range(config.n_rep)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_replicate_star, jobs))
    else:
        results = []
        for job in jobs:
            results.append(run_replicate(*job))
            if progress is not None:
                progress(len(results), config.n_rep)

    t_grid, z_grid = metric_grids(config.M)
    truth = {"beta": true_beta(t_grid, config.n_terms), "eta": true_eta(z_grid)}
    truth["eta_mod"] = truth["eta"]
    report = MonteCarloReport(config, estimators, t_grid=t_grid, z_grid=z_grid)
    for est in estimators:
        rows = {t: [] for t in TARGETS}
        dims, fails = [], {}
        for r, res in enumerate(results):
            cell = res[est]
            if isinstance(cell, dict):
                fails[r] = cell
                dims.append(None)
                continue
            dims.append((cell[0], cell[1]))
            for t, arr in zip(TARGETS, cell[2:]):
                rows[t].append(arr)
        report.dims[est] = dims
        report.failures[est] = fails
        if fails:
            log.warning("%s: %d of %d replicates failed", est, len(fails), config.n_rep)
        for t in TARGETS:
            if not rows[t]:
                continue
            arr = np.vstack(rows[t])
            report.grids[(est, t)] = arr
            report.metrics[(est, t)] = compute_metrics(arr, truth[t], config.trim_q)
    return report
