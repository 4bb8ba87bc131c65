"""Polynomial extrapolators with degree chosen by AIC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

DEGREES = (1, 2, 3)
# Residuals below this fraction of the target scale are floating-point
# noise; flooring RSS there keeps exact fits from competing on rounding.
RSS_REL_FLOOR = 1e-10


def aic(rss: float, n: int, k: int) -> float:
    return n * math.log(rss / n) + 2 * k


def floored_rss(residuals: np.ndarray, y: np.ndarray) -> float:
    n = len(y)
    floor = n * (RSS_REL_FLOOR * max(float(np.abs(y).max()), 1e-300)) ** 2
    return max(float(np.dot(residuals, residuals)), floor)


@dataclass
class PolyModel:
    degree: int
    coef: list[float]
    domain: tuple[float, float]
    aic_by_degree: dict[int, float]

    @property
    def s_min(self) -> float:
        return self.domain[0]

    @property
    def s_max(self) -> float:
        return self.domain[1]

    def _poly(self) -> Polynomial:
        return Polynomial(self.coef, domain=list(self.domain), window=[-1.0, 1.0])

    def predict(self, s: float | np.ndarray) -> np.ndarray | float:
        return self._poly()(s)

    def to_json(self) -> dict:
        return {"degree": self.degree, "coef": list(self.coef), "domain": list(self.domain),
                "aic": {str(k): v for k, v in self.aic_by_degree.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "PolyModel":
        return cls(obj["degree"], [float(c) for c in obj["coef"]], tuple(obj["domain"]),
                   {int(k): v for k, v in obj["aic"].items()})


def fit_poly(s: np.ndarray, y: np.ndarray) -> PolyModel:
    """Least-squares fits of degree 1-3; the minimum-AIC degree wins."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n_distinct = len(np.unique(s))
    if n_distinct < 2:
        raise ValueError(f"need at least 2 distinct lengths to fit, got {n_distinct}")
    n = len(y)
    domain = (float(s.min()), float(s.max()))
    fits: dict[int, tuple[float, Polynomial]] = {}
    for deg in DEGREES:
        if n_distinct < deg + 1:
            break
        poly = Polynomial.fit(s, y, deg, domain=list(domain), window=[-1.0, 1.0])
        fits[deg] = (aic(floored_rss(y - poly(s), y), n, deg + 1), poly)
    best = min(fits, key=lambda d: (fits[d][0], d))
    coef = np.zeros(best + 1)
    got = fits[best][1].coef
    coef[:len(got)] = got
    return PolyModel(best, [float(c) for c in coef], domain,
                     {d: a for d, (a, _) in fits.items()})
