"""Closed-form confidence/accuracy analytics for a binary predictor that is
always ``1 - gamma`` confident: its log-perplexity, the accuracy needed to keep
perplexity fixed when confidence rises, iso-perplexity curves, free-lunch
thresholds, and inverting an observed ``(L, a)`` pair back to ``gamma``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

ROOT_TOL = 1e-12
ROOT_MAX_ITER = 200
GRID_POINTS = 512


class DomainError(ValueError):
    pass


def pplx_model(a, gamma):
    """``-a log(1 - gamma) - (1 - a) log gamma``; vectorises over numpy inputs."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g <= 0) or np.any(g >= 1):
        raise DomainError("gamma must lie strictly between 0 and 1")
    a = np.asarray(a, dtype=np.float64)
    out = -a * np.log1p(-g) - (1 - a) * np.log(g)
    return float(out) if out.ndim == 0 else out


def _critical(a, gamma, dg):
    g = gamma - dg
    return (pplx_model(a, gamma) + np.log(g)) / (np.log(g) - np.log1p(-g))


def critical_accuracy(a, gamma, delta_gamma):
    """Accuracy a' at which a model ``delta_gamma`` more confident matches the old perplexity.

    Not clamped to [0, 1]: values above 1 mean no accuracy can compensate.
    """
    gm = np.asarray(gamma, dtype=np.float64)
    dg = np.asarray(delta_gamma, dtype=np.float64)
    if np.any(gm <= 0) or np.any(gm >= 0.5):
        raise DomainError("gamma must lie in (0, 1/2)")
    if np.any(dg < 0) or np.any(dg >= gm):
        raise DomainError("delta_gamma must lie in [0, gamma)")
    out = _critical(a, gm, dg)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class IsoPoint:
    a: float
    gamma: float
    delta_gamma: float
    a_prime: float

    @property
    def delta_over_gamma(self) -> float:
        return self.delta_gamma / self.gamma

    @property
    def exceeds_one(self) -> bool:
        return self.a_prime > 1.0

    @property
    def pplx(self) -> float:
        return pplx_model(self.a, self.gamma)


def default_grid(gamma: float, points: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 0.999 * gamma, points)


def iso_curve(a: float, gamma: float, delta_grid: Iterable[float] | None = None) -> list[IsoPoint]:
    grid = default_grid(gamma) if delta_grid is None else np.asarray(list(delta_grid), dtype=np.float64)
    ap = np.atleast_1d(critical_accuracy(a, gamma, grid))
    return [IsoPoint(float(a), float(gamma), float(d), float(x)) for d, x in zip(grid, ap)]


def _root(f: Callable[[float], float], lo: float, hi: float, xtol: float = ROOT_TOL) -> float:
    """Bracketed root of ``f`` on ``[lo, hi]`` (Brent's method; a zero at an end is returned)."""
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    return brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=ROOT_MAX_ITER)


def critical_slope(a: float, gamma: float, h: float = 1e-5) -> float:
    """Central-difference d a'/d delta_gamma at zero shift."""
    return (_critical(a, gamma, h) - _critical(a, gamma, -h)) / (2 * h)


def free_lunch_threshold(gamma: float) -> float:
    """Smallest base accuracy for which more confidence alone lowers perplexity.

    Located as the root of :func:`critical_slope` in ``a``; analytically
    the answer is ``1 - gamma``, which the tests hold it to.
    """
    if not 0 < gamma < 0.5:
        raise DomainError("gamma must lie in (0, 1/2)")
    if critical_slope(1.0, gamma) >= 0:
        return 1.0
    if critical_slope(0.0, gamma) < 0:
        return 0.0
    return _root(lambda a: critical_slope(a, gamma), 0.0, 1.0)


@dataclass(frozen=True)
class GammaFit:
    feasible: bool
    gamma: float | None
    solutions: tuple[float, ...] = ()

    def __str__(self) -> str:
        if not self.feasible:
            return "INFEASIBLE"
        return " ".join(f"{g:.12g}" for g in self.solutions)


INFEASIBLE = GammaFit(False, None, ())


def min_pplx(a: float) -> float:
    """Minimum over gamma of the model perplexity: the binary entropy of ``a``."""
    if a in (0.0, 1.0):
        return 0.0
    return -a * math.log(a) - (1 - a) * math.log1p(-a)


def fit_gamma(L: float, a: float) -> GammaFit:
    """Solve ``pplx_model(a, gamma) = L`` for gamma.

    The curve falls on ``(0, 1 - a]`` and rises on ``[1 - a, 1)``; each branch
    is solved separately.  Among solutions below 1/2 the rising branch (not
    over-confident) is preferred, then the falling one.
    """
    if L < 0 or not 0 <= a <= 1:
        raise DomainError("need L >= 0 and a in [0, 1]")
    star = 1.0 - a
    floor = min_pplx(a)
    if L < floor - ROOT_TOL:
        return INFEASIBLE
    if L <= floor + ROOT_TOL:
        if star in (0.0, 1.0):
            return INFEASIBLE  # minimum only approached at the open ends
        return GammaFit(True, star, (star,))

    log, log1p = math.log, math.log1p

    def f(g):
        return -a * log1p(-g) - (1 - a) * log(g) - L

    # Each branch is solved in log coordinates (log gamma on the falling side,
    # log(1 - gamma) on the rising side) so roots near 0 or 1 keep relative
    # precision; near gamma -> 1 the curve is too steep for an absolute bracket.
    sols: list[float] = []
    if star > 0 and f(1e-300) >= 0:
        u = _root(lambda u: f(math.exp(u)), math.log(1e-300), math.log(min(star, 1 - 1e-16)), xtol=ROOT_TOL * 0.1)
        sols.append(math.exp(u))
    if star < 1 and f(1 - 1e-16) >= 0:
        # v = log(1 - gamma); v = log(1e-16) is the gamma -> 1 end
        v = _root(lambda v: f(-math.expm1(v)), math.log(1e-16), math.log1p(-max(star, 1e-300)), xtol=ROOT_TOL * 0.1)
        root = -math.expm1(v)
        if not sols or abs(root - sols[0]) > ROOT_TOL:
            sols.append(root)
    if not sols:
        return INFEASIBLE
    sols.sort()
    rising = [g for g in sols if g >= star and g < 0.5]
    falling = [g for g in sols if g < star and g < 0.5]
    pick = (rising or falling or sols)[0]
    return GammaFit(True, pick, tuple(sols))


def misranked_pairs(points: Sequence[tuple[float, float]]) -> list[tuple[int, int]]:
    """Ordered pairs ``(i, j)`` where ``L_i < L_j`` yet ``a_i < a_j``."""
    pts = [(float(L), float(acc)) for L, acc in points]
    return [(i, j) for i, (li, ai) in enumerate(pts) for j, (lj, aj) in enumerate(pts)
            if li < lj and ai < aj]


def misranked_fraction(points: Sequence[tuple[float, float]]) -> float:
    n = len(points)
    if n < 2:
        raise ValueError("need at least two points")
    return len(misranked_pairs(points)) / (n * (n - 1) / 2)
