"""Functionals of the branching process and the numerical checks built on them.

The quantities here are the additive martingale ``W_t = exp(-lambda_c t) <phi, X_t>``,
its restriction ``U_t`` to a ball, and the normalised ratio
``exp(-lambda_c t) <g, X_t> / (<g, phi_tilde> W)`` whose convergence to 1 is the
strong law being checked.  Quadrature-based helpers are one-dimensional.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import optimize, special, stats

from ._quad import integrate_line
from .engine import EnsembleRun, ParticleSystem, SimConfig, run_replicates, simulate_ensemble
from .models import Model, as_points
from .spine import sample_spine_endpoints, spine_expectation

Array = np.ndarray

TEST_FUNCTION_KINDS = ("indicator-ball", "bump", "phi-restricted")


# --------------------------------------------------------------------------
# containers

@dataclass(frozen=True, eq=False)
class StatSeries:
    """Per-replicate values of a functional; ``values`` is ``(n_replicates, n_times)``."""

    times: Array
    values: Array
    label: str

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(times):
            raise ValueError("values must be (replicates, len(times))")
        if np.isnan(values).any():
            raise ValueError("StatSeries values must not contain NaN")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_replicates(self) -> int:
        return self.values.shape[0]

    def column(self, t: float) -> Array:
        k = int(np.argmin(np.abs(self.times - t)))
        return self.values[:, k]

    def to_csv(self, dest=None) -> str:
        """Write ``label,replicate,t,value`` rows; returns the text when ``dest`` is None."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["label", "replicate", "t", "value"])
        for r in range(self.n_replicates):
            for t, v in zip(self.times, self.values[r]):
                writer.writerow([self.label, r, repr(float(t)), repr(float(v))])
        text = buf.getvalue()
        if dest is None:
            return text
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text


@dataclass(frozen=True, eq=False)
class TestFunction:
    """A compactly supported test function on a ball.

    ``phi-restricted`` is ``phi 1_B`` and needs ``phi``; the bump is
    ``exp(1 - 1/(1 - |y-c|^2/r^2))`` on the open ball (peak 1).
    """

    kind: str
    support_center: Array
    support_radius: float
    phi: Optional[Callable[[Array], Array]] = field(default=None, repr=False)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.kind not in TEST_FUNCTION_KINDS:
            raise ValueError(f"kind must be one of {TEST_FUNCTION_KINDS}")
        if not self.support_radius > 0:
            raise ValueError("support_radius must be positive")
        if self.kind == "phi-restricted" and self.phi is None:
            raise ValueError("phi-restricted test function needs phi")
        object.__setattr__(self, "support_center",
                           np.atleast_1d(np.asarray(self.support_center, dtype=float)))

    @classmethod
    def ball(cls, radius: float = 1.0, center=0.0, kind: str = "indicator-ball",
             model: Optional[Model] = None) -> "TestFunction":
        return cls(kind, center, radius, None if model is None else model.eigen.phi)

    @property
    def dim(self) -> int:
        return len(self.support_center)

    def contains(self, y: Array) -> Array:
        y = as_points(y, self.dim)
        return np.linalg.norm(y - self.support_center, axis=-1) <= self.support_radius

    def __call__(self, y: Array) -> Array:
        y = as_points(y, self.dim)
        r2 = np.sum((y - self.support_center) ** 2, axis=-1) / self.support_radius**2
        if self.kind == "indicator-ball":
            return (r2 <= 1.0).astype(float)
        if self.kind == "phi-restricted":
            return np.where(r2 <= 1.0, self.phi(y), 0.0)
        out = np.zeros(len(y))
        inside = r2 < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
        return out

    @property
    def is_indicator_type(self) -> bool:
        return self.kind in ("indicator-ball", "phi-restricted")

    def interval(self) -> tuple:
        c = float(self.support_center[0])
        return c - self.support_radius, c + self.support_radius


# --------------------------------------------------------------------------
# functionals of a single particle system

def _unit_mass(system: ParticleSystem, model: Model) -> Array:
    """Underlying particle counts (undo the phi-weighting of a weighted system)."""
    if not system.weighted or system.count == 0:
        return np.ones(system.count)
    return math.exp(model.lambda_c * system.time) * system.weights / model.eigen.phi(system.positions)


def w_phi(system: ParticleSystem, model: Model) -> float:
    """``exp(-lambda_c t) <phi, X_t>``."""
    if system.count == 0:
        return 0.0
    if system.weighted:
        return float(np.sum(system.weights))
    return math.exp(-model.lambda_c * system.time) * float(np.sum(model.eigen.phi(system.positions)))


def u_t(system: ParticleSystem, model: Model, B: TestFunction) -> float:
    """``exp(-lambda_c t) <phi 1_B, X_t>``."""
    if not B.is_indicator_type:
        raise ValueError("u_t needs an indicator-type B")
    if system.count == 0:
        return 0.0
    inside = B.contains(system.positions)
    return math.exp(-model.lambda_c * system.time) * float(
        np.sum(model.eigen.phi(system.positions[inside]) * _unit_mass(system, model)[inside]))


def g_phi_tilde(model: Model, g: Union[TestFunction, Callable]) -> float:
    """``<g, phi_tilde>`` by quadrature (one-dimensional models)."""
    if model.dim != 1:
        raise ValueError("quadrature helpers are one-dimensional")

    def integrand(y):
        pts = y[:, None]
        return g(pts) * model.eigen.phi_tilde(pts)

    if isinstance(g, TestFunction):
        lo, hi = g.interval()
        return integrate_line(integrand, lo, hi, breaks=model.singular_points, epsrel=1e-10)
    return integrate_line(integrand, breaks=model.singular_points)


def slln_ratio(system: ParticleSystem, model: Model, g: TestFunction, w_limit: float,
               g_pair: Optional[float] = None) -> float:
    """``exp(-lambda_c t) <g, X_t> / (<g, phi_tilde> w_limit)``."""
    if not w_limit > 0:
        raise ValueError("w_limit must be positive")
    g_pair = g_phi_tilde(model, g) if g_pair is None else g_pair
    if g_pair == 0:
        raise ZeroDivisionError("<g, phi_tilde> = 0")
    if system.count == 0:
        return 0.0
    num = float(np.sum(g(system.positions) * _unit_mass(system, model)))
    return math.exp(-model.lambda_c * system.time) * num / (g_pair * w_limit)


# --------------------------------------------------------------------------
# ensemble series

def _live(run: EnsembleRun) -> Array:
    return ~np.asarray(run.capped, dtype=bool)


def w_series(run: EnsembleRun, label: str = "W_phi") -> StatSeries:
    """``W_t`` at every snapshot for the replicates that were not capped."""
    live = _live(run)
    vals = np.stack([run.w_phi(k)[live] for k in range(len(run.snapshots))], axis=1)
    return StatSeries(run.times, vals, label)


def u_series(run: EnsembleRun, B: TestFunction, label: str = "U") -> StatSeries:
    live = _live(run)
    phi = run.model.eigen.phi
    cols = []
    for k, snap in enumerate(run.snapshots):
        f = lambda y: phi(y) * B.contains(y)
        cols.append(math.exp(-run.model.lambda_c * snap.time) * run.pairing(f, k)[live])
    return StatSeries(run.times, np.stack(cols, axis=1), label)


@dataclass
class SllnResult:
    series: StatSeries
    w_limit: Array
    excluded: int  # capped or W_limit ~ 0 replicates


def slln_series(run: EnsembleRun, g: TestFunction, *, w_floor: float = 1e-12,
                label: str = "slln_ratio") -> SllnResult:
    """SLLN ratios at every snapshot, normalised by each replicate's final ``W``."""
    model = run.model
    g_pair = g_phi_tilde(model, g)
    w_last = run.w_phi(len(run.snapshots) - 1)
    keep = _live(run) & (w_last > w_floor)
    cols = []
    for k, snap in enumerate(run.snapshots):
        num = math.exp(-model.lambda_c * snap.time) * run.pairing(g, k)
        cols.append(num[keep] / (g_pair * w_last[keep]))
    series = StatSeries(run.times, np.stack(cols, axis=1), label)
    return SllnResult(series=series, w_limit=w_last[keep], excluded=int((~keep).sum()))


# --------------------------------------------------------------------------
# closed-form quadrature oracles

def expectation_oracle(model: Model, g: Union[TestFunction, Callable], x, t: float) -> float:
    """``E_x <g, X_t> = exp(lambda_c t) phi(x) int p(t,x,y) g(y)/phi(y) dy``."""
    if model.eigen.spine_density is None or model.dim != 1:
        raise ValueError("expectation_oracle needs a closed-form 1-d spine density")
    x0 = as_points(x, 1)
    phi_x = float(model.eigen.phi(x0)[0])
    scale = math.exp(model.lambda_c * t) * phi_x
    if isinstance(g, TestFunction):
        dens = model.eigen.spine_density
        lo, hi = g.interval()

        def integrand(y):
            pts = y[:, None]
            return dens(t, x0[0], pts) * g(pts) / model.eigen.phi(pts)

        val = integrate_line(integrand, lo, hi, epsrel=1e-10)
    else:
        val = spine_expectation(model, lambda y: g(y) / model.eigen.phi(y), t, x0)
    if not math.isfinite(val):
        raise ArithmeticError("quadrature did not converge")
    return scale * val


def outside_envelope_tail(model: Model, x, t: float, radius: Optional[float] = None) -> float:
    """``int_{|y| > a_t} p(t,x,y) / phi(y) dy`` (expected mass outside ``D_{a_t}``, rescaled)."""
    if model.eigen.spine_law is None or model.dim != 1:
        raise ValueError("outside_envelope_tail needs a closed-form 1-d spine law")
    a = float(model.spread_bound(t)) if radius is None else float(radius)
    mean, var = model.eigen.spine_law(t, float(as_points(x, 1)[0, 0]))
    mean, sd = float(np.ravel(mean)[0]), math.sqrt(float(var))

    def integrand(z):
        y = (mean + sd * z)[:, None]
        return np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) / model.eigen.phi(y)

    zl, zh = (-a - mean) / sd, (a - mean) / sd
    upper = integrate_line(integrand, zh, math.inf, center=zh, scale=1.0)
    lower = integrate_line(integrand, -math.inf, zl, center=zl, scale=1.0)
    return upper + lower


def expected_outside_mass(model: Model, x, t: float, radius: Optional[float] = None) -> float:
    """``E_x <1_{D^c_{a_t}}, X_t>``."""
    phi_x = float(model.eigen.phi(as_points(x, 1))[0])
    return math.exp(model.lambda_c * t) * phi_x * outside_envelope_tail(model, x, t, radius)


def growth_classifier(model: Model, *, max_doublings: int = 14) -> str:
    """Classify by whether ``<phi_tilde, 1>`` is finite.

    Integrates over balls of radius ``2^k``; converging totals give
    ``local-equals-global`` and non-shrinking increments give
    ``global-exceeds-local``.
    """
    d = model.dim
    if d == 1:
        def shell(r0, r1):
            f = lambda y: model.eigen.phi_tilde(y[:, None])
            brk = model.singular_points
            return (integrate_line(f, -r1, -r0, breaks=brk, epsrel=1e-10)
                    + integrate_line(f, r0, r1, breaks=brk, epsrel=1e-10))
    else:
        rng = np.random.default_rng(0)
        dirs = rng.normal(size=(8, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = np.array([0.5, 1.0, 2.0, 4.0])
        e1 = np.eye(d)[0]
        axis = model.eigen.phi_tilde(radii[:, None] * e1)
        for u in dirs:
            if not np.allclose(model.eigen.phi_tilde(radii[:, None] * u), axis, rtol=1e-8, atol=0):
                return "undetermined"
        area = 2 * math.pi ** (d / 2) / special.gamma(d / 2)

        def shell(r0, r1):
            return integrate_line(
                lambda s: area * s ** (d - 1) * model.eigen.phi_tilde(s[:, None] * e1), r0, r1)

    # Totals over the balls of radius 2^k, accumulated shell by shell.
    totals = [shell(0.0, 1.0)]
    try:
        for k in range(1, max_doublings):
            totals.append(totals[-1] + shell(2.0 ** (k - 1), 2.0**k))
    except ArithmeticError:
        return "undetermined"
    inc = np.diff(totals)
    if abs(inc[-1]) <= 1e-8 * abs(totals[-1]) and abs(inc[-2]) <= 1e-6 * abs(totals[-1]):
        return "local-equals-global"
    if np.all(inc[-3:] > 0) and np.all(inc[-3:] >= 0.9 * inc[-4:-1]):
        return "global-exceeds-local"
    return "undetermined"


def remark9_ode_mixing(model: Model, start, horizon: float = 100.0, h: float = 1e-4) -> float:
    """Hitting time of ``|f| <= 1`` for the flow ``f' = spine drift(f)`` (RK4, step ``h``)."""
    if model.dim != 1:
        raise ValueError("remark9_ode_mixing is one-dimensional")
    f = float(as_points(start, 1)[0, 0])
    if abs(f) <= 1.0:
        return 0.0
    drift = model.eigen.spine_drift

    def v(y):
        return float(drift(np.array([[y]]))[0, 0])

    t = 0.0
    while t < horizon:
        k1 = v(f)
        k2 = v(f + 0.5 * h * k1)
        k3 = v(f + 0.5 * h * k2)
        k4 = v(f + h * k3)
        nxt = f + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if abs(nxt) <= 1.0:
            # Linear interpolation inside the last step.
            return t + h * (abs(f) - 1.0) / (abs(f) - abs(nxt))
        f, t = nxt, t + h
    return math.inf


# --------------------------------------------------------------------------
# admissibility checks

def _kde(samples: Array, y: Array) -> tuple:
    """Gaussian kernel density estimate and its pointwise standard error."""
    n = len(samples)
    bw = 1.06 * float(np.std(samples)) * n ** (-0.2)
    k = np.exp(-0.5 * ((y[None, :] - samples[:, None]) / bw) ** 2) / (bw * math.sqrt(2 * math.pi))
    return k.mean(axis=0), k.std(axis=0, ddof=1) / math.sqrt(n)


def check_iii_star(model: Model, B: TestFunction, t_grid: Sequence[float],
                   x_per_t: Optional[Callable[[float], Array]] = None, *, n_y: int = 201,
                   zeta_scale: float = 1.0, n_paths: int = 100_000, max_paths: int = 400_000,
                   dt: float = 1e-2, seed: int = 0, return_se: bool = False) -> list:
    """``sup_{x in D_t, y in B} |p(zeta(t), x, y) / (phi phi_tilde)(y) - 1|`` for each ``t``.

    ``D_t`` is the ball of radius ``t`` sampled by ``x_per_t`` (default 81
    points).  Without a closed-form density the spine transition is estimated
    by a kernel density over simulated spine endpoints; if the relative SE
    exceeds 10% the sample is doubled (up to ``max_paths``).
    """
    if model.dim != 1:
        raise ValueError("check_iii_star is one-dimensional")
    lo, hi = B.interval()
    y = np.linspace(lo, hi, n_y)
    target = model.eigen.phi(y[:, None]) * model.eigen.phi_tilde(y[:, None])
    dens = model.eigen.spine_density
    if x_per_t is None:
        n_x = 81 if dens is not None else 5
        x_per_t = (lambda t: np.linspace(-t, t, n_x)) if dens is not None \
            else (lambda t: np.linspace(0.0, t, n_x))
    out = []
    for i, t in enumerate(t_grid):
        zeta = zeta_scale * float(model.mixing_time(t))
        worst, worst_se = 0.0, 0.0
        for j, x in enumerate(np.atleast_1d(x_per_t(t))):
            if dens is not None:
                p = dens(zeta, np.array([x]), y[:, None])
                se = np.zeros_like(p)
            else:
                n = n_paths
                while True:
                    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, j, n)))
                    ends = sample_spine_endpoints(model, x, zeta, dt, n, rng)[:, 0]
                    p, se = _kde(ends, y)
                    if np.max(se / np.maximum(p, 1e-300)) <= 0.1 or 2 * n > max_paths:
                        break
                    n *= 2
            dev = np.abs(p / target - 1.0)
            k = int(np.argmax(dev))
            if dev[k] > worst:
                worst, worst_se = float(dev[k]), float(se[k] / target[k])
        out.append((float(t), worst, worst_se) if return_se else (float(t), worst))
    return out


@dataclass
class CheckIvResult:
    fraction: float
    n_valid: int
    n_capped: int
    burn_in: int
    times: Array
    spread: Array
    exceed_fraction: Array  # per lattice time: fraction of replicates outside D_{a_t}
    expected_outside: Array  # quadrature E<1_{D^c}, X_t> per lattice time (nan if unavailable)

    @property
    def tail_sum(self) -> float:
        return float(np.nansum(self.expected_outside[self.burn_in + 1:]))


def check_iv(model: Model, x, delta: float, n_max: int, replicates: int, rng=None, *,
             seed: int = 0, burn_in: Optional[int] = None, dt: float = 1e-3,
             spread_override: Optional[Callable] = None, max_particles: int = 100_000,
             parallel: int = 1) -> CheckIvResult:
    """Fraction of replicates with ``supp X_{n delta}`` inside ``D_{a_{n delta}}`` for all
    ``burn_in < n <= n_max`` (default burn-in ``n_max // 2``)."""
    burn_in = n_max // 2 if burn_in is None else burn_in
    cfg = SimConfig(dt=dt, t_end=n_max * delta, snapshot_delta=delta, seed=seed,
                    max_particles=max_particles)
    if rng is not None:
        run = simulate_ensemble(model, x, cfg, replicates, rng)
    else:
        run = run_replicates(model, x, cfg, replicates, parallel=parallel)
    spread_fn = model.spread_bound if spread_override is None else spread_override
    times = np.arange(n_max + 1) * delta
    spread = np.array([float(spread_fn(t)) for t in times])
    live = _live(run)
    ok = live.copy()
    exceed = np.zeros(n_max + 1)
    for n in range(n_max + 1):
        k = run.index_of(times[n])
        inside = run.support_radius(k) <= spread[n]
        exceed[n] = float(np.mean(~inside[live])) if live.any() else math.nan
        if n > burn_in:
            ok &= inside
    expected = np.full(n_max + 1, math.nan)
    if model.eigen.spine_law is not None and model.dim == 1:
        for n in range(1, n_max + 1):
            expected[n] = expected_outside_mass(model, x, times[n], spread[n])
    n_valid = int(live.sum())
    return CheckIvResult(
        fraction=float(ok[live].mean()) if n_valid else math.nan, n_valid=n_valid,
        n_capped=int((~live).sum()), burn_in=burn_in, times=times, spread=spread,
        exceed_fraction=exceed, expected_outside=expected,
    )


def auto_prune_radius(model: Model, t_end: float, ball_radius: float,
                      tol: float = 1e-8) -> Optional[float]:
    """Radius beyond which particles of an outward OU model can be dropped.

    A particle at ``R`` has fewer than ``exp(beta_sup t_end) P_R(hit ball)``
    expected descendants ever reaching the ball, with the hitting probability
    given by the OU scale function; the radius makes this below ``tol``.
    Returns None when no such bound is available.
    """
    if model.ou_rate is None or model.ou_rate >= 0 or not math.isfinite(model.beta_sup) \
            or model.noise_sigma is None or model.dim != 1:
        return None
    kappa = -model.ou_rate / model.noise_sigma**2

    def log_erfc(z):
        return math.log(special.erfcx(z)) - z * z

    r0 = max(ball_radius, 0.0)
    target = math.log(tol) - model.beta_sup * t_end

    def excess(r):
        return log_erfc(math.sqrt(kappa) * r) - log_erfc(math.sqrt(kappa) * r0) - target

    hi = r0 + 1.0
    while excess(hi) > 0:
        hi *= 2.0
    return float(optimize.brentq(excess, r0, hi))


@dataclass
class ExtinctionProbe:
    times: Array
    fractions: Array
    n_valid: int
    n_capped: int
    prune_radius: Optional[float]
    empty: Array  # (n_valid, n_times) booleans


def local_extinction_probe(model: Model, B: Optional[TestFunction], t_grid: Sequence[float],
                           replicates: int, rng=None, *, x=0.0, seed: int = 0, dt: float = 1e-2,
                           prune_radius: Union[str, float, None] = "auto",
                           max_particles: int = 200_000, parallel: int = 1) -> ExtinctionProbe:
    """Fraction of replicates with ``X_t(B) = 0`` at each ``t`` (``B=None`` is the empty set)."""
    t_grid = np.asarray(t_grid, dtype=float)
    if B is None:
        ones = np.ones((replicates, len(t_grid)), dtype=bool)
        return ExtinctionProbe(t_grid, np.ones(len(t_grid)), replicates, 0, None, ones)
    t_end = float(t_grid.max())
    if prune_radius == "auto":
        reach = float(np.max(np.abs(B.interval()))) if B.dim == 1 else \
            float(np.linalg.norm(B.support_center) + B.support_radius)
        prune_radius = auto_prune_radius(model, t_end, reach)
    cfg = SimConfig(dt=dt, t_end=t_end, snapshot_times=tuple(float(t) for t in t_grid), seed=seed,
                    prune_radius=prune_radius, max_particles=max_particles)
    if rng is not None:
        run = simulate_ensemble(model, x, cfg, replicates, rng)
    else:
        run = run_replicates(model, x, cfg, replicates, parallel=parallel)
    live = _live(run)
    empty = np.stack([run.pairing(lambda y: B.contains(y).astype(float), run.index_of(t))[live] == 0
                      for t in t_grid], axis=1)
    return ExtinctionProbe(t_grid, empty.mean(axis=0), int(live.sum()), int((~live).sum()),
                           prune_radius, empty)


# --------------------------------------------------------------------------
# calibrated tests

def sign_test_decrease(before: Array, after: Array) -> tuple:
    """One-sided sign test that ``after < before`` pairwise; returns ``(k, n, p)``."""
    before, after = np.asarray(before), np.asarray(after)
    diff = after - before
    n = int(np.sum(diff != 0))
    k = int(np.sum(diff < 0))
    if n == 0:
        return 0, 0, 1.0
    return k, n, float(stats.binomtest(k, n, 0.5, alternative="greater").pvalue)


def paired_increase_test(earlier: Array, later: Array) -> tuple:
    """One-sided binomial test on discordant pairs that the event rate increased.

    ``earlier`` and ``later`` are per-replicate booleans; returns ``(k, n, p)``
    with ``k`` replicates switching false to true out of ``n`` switching.
    """
    earlier, later = np.asarray(earlier, bool), np.asarray(later, bool)
    up = int(np.sum(~earlier & later))
    down = int(np.sum(earlier & ~later))
    n = up + down
    if n == 0:
        return 0, 0, 1.0
    return up, n, float(stats.binomtest(up, n, 0.5, alternative="greater").pvalue)


def mean_and_se(values: Array) -> tuple:
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values)))
