"""Adaptive quadrature on the real line with automatic truncation."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

PEAK_FRACTION = 1e-14
GROWTH_LIMIT = 1e6


def _safe(f: Callable[[np.ndarray], np.ndarray]) -> Callable[[float], float]:
    def g(y: float) -> float:
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            v = float(np.asarray(f(np.array([y], dtype=float))).reshape(-1)[0])
        return v if math.isfinite(v) else math.nan

    return g


def truncation_radius(f, center: float = 0.0, scale: float = 1.0, max_radius: float = 1e6) -> float:
    """Smallest ``center +- R`` (doubling from ``scale``) beyond which ``|f| < 1e-14`` of its peak."""
    g = _safe(f)
    probe = center + scale * np.linspace(-4, 4, 81)
    peak = max(abs(g(y)) for y in probe if math.isfinite(g(y)))
    radius = scale
    while radius < max_radius:
        edge = [abs(g(center - radius)), abs(g(center + radius))]
        if any(math.isfinite(e) and e > GROWTH_LIMIT * peak for e in edge):
            # Growth away from the centre: a later zero would only be an underflow.
            raise ArithmeticError("integrand grows away from its centre; quadrature diverges")
        if all(math.isfinite(e) and e <= PEAK_FRACTION * peak for e in edge):
            return radius
        radius *= 2.0
    raise ArithmeticError("integrand does not decay; quadrature diverges")


def integrate_line(
    f: Callable[[np.ndarray], np.ndarray],
    low: float = -math.inf,
    high: float = math.inf,
    breaks: Sequence[float] = (),
    center: float = 0.0,
    scale: float = 1.0,
    epsrel: float = 1e-10,
) -> float:
    """Integrate a vectorised ``f`` over ``[low, high]``.

    Infinite ends are truncated at the radius where ``f`` falls below
    ``1e-14`` of its peak; ``breaks`` are split points (discontinuities).
    """
    g = _safe(f)
    if not (math.isfinite(low) and math.isfinite(high)):
        r = truncation_radius(f, center, scale)
        low = max(low, center - r)
        high = min(high, center + r)
    edges = [low] + sorted(b for b in breaks if low < b < high) + [high]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, err = integrate.quad(g, a, b, epsabs=0.0, epsrel=epsrel, limit=500)
        if not math.isfinite(val):
            raise ArithmeticError("quadrature did not converge")
        total += val
    return total
