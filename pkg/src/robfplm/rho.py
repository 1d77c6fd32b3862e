"""Loss functions for robust regression: Tukey bisquare, Huber, quadratic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Default tuning constants for the S-scale, the MM step and the Huber
# comparison estimator.
C0_TUKEY = 1.54764
B_SCALE = 0.5
C1_TUKEY = 3.444
C_HUBER = 1.345

FAMILIES = ("tukey", "huber", "quadratic")


@dataclass(frozen=True)
class RhoFunction:
    """A rho-function of a given family with tuning constant ``c``.

    The Tukey bisquare is normalized so that its supremum is 1. Huber is
    ``t**2 / 2`` inside ``[-c, c]`` and linear outside (unbounded). The
    quadratic ``t**2`` ignores ``c`` and only serves as a least-squares
    reference.
    """

    family: str = "tukey"
    c: float = C1_TUKEY

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown rho family {self.family!r}")
        if not (np.isfinite(self.c) and self.c > 0):
            raise ValueError(f"tuning constant must be positive, got {self.c}")

    @property
    def bounded(self) -> bool:
        return self.family == "tukey"

    @property
    def sup(self) -> float:
        return 1.0 if self.bounded else np.inf

    def rho(self, t):
        t = np.asarray(t, dtype=float)
        c = self.c
        if self.family == "tukey":
            u2 = np.minimum((t / c) ** 2, 1.0)
            return 1.0 - (1.0 - u2) ** 3
        if self.family == "huber":
            a = np.abs(t)
            return np.where(a <= c, 0.5 * t * t, c * a - 0.5 * c * c)
        return t * t

    def psi(self, t):
        t = np.asarray(t, dtype=float)
        c = self.c
        if self.family == "tukey":
            u2 = (t / c) ** 2
            return np.where(u2 < 1.0, 6.0 * t / c**2 * (1.0 - u2) ** 2, 0.0)
        if self.family == "huber":
            return np.clip(t, -c, c)
        return 2.0 * t

    def weight(self, t):
        """IRWLS weight ``psi(t) / t``, with its limit at ``t = 0``."""
        t = np.asarray(t, dtype=float)
        c = self.c
        if self.family == "tukey":
            u2 = (t / c) ** 2
            return np.where(u2 < 1.0, 6.0 / c**2 * (1.0 - u2) ** 2, 0.0)
        if self.family == "huber":
            a = np.abs(t)
            with np.errstate(divide="ignore"):
                return np.where(a <= c, 1.0, c / np.maximum(a, c))
        return np.full_like(t, 2.0)

    def rho_psiu(self, t):
        """``rho(t)`` and ``psi(t) * t`` in one pass (used by scale solvers)."""
        t = np.asarray(t, dtype=float)
        if self.family == "tukey":
            v = np.minimum(t * t * (1.0 / self.c**2), 1.0)
            a = 1.0 - v
            a2 = a * a
            return 1.0 - a2 * a, 6.0 * v * a2
        return self.rho(t), self.psi(t) * t

    def __call__(self, t):
        return self.rho(t)

    def to_dict(self) -> dict:
        return {"family": self.family, "c": self.c}


def tukey(c: float = C1_TUKEY) -> RhoFunction:
    return RhoFunction("tukey", c)


def huber(c: float = C_HUBER) -> RhoFunction:
    return RhoFunction("huber", c)


def quadratic() -> RhoFunction:
    return RhoFunction("quadratic", 1.0)
