"""Spine paths, changes of measure and the tilted (size-biased) process.

Under the tilted law the population is a single *spine* moving by the
h-transformed motion (drift ``b + a grad(phi)/phi``) which splits at rate
``2 beta``; at each fission the non-spine child starts an ordinary
branching diffusion.  Conditionally on the spine data the expected value of
``W_t`` is ``exp(-lambda_c t) phi(Y_t) + sum_i exp(-lambda_c s_i) phi(Y_{s_i})``,
implemented in :func:`spine_conditional_expectation`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate

from ._quad import integrate_line
from .engine import (EnsembleRun, SimConfig, Trajectory, _move, _to_trajectory, ParticleSystem,
                     batch_rng, run_replicates, simulate_ensemble)
from .models import Model, as_points

Array = np.ndarray

__all__ = [
    "PathRecord",
    "PathBatch",
    "SpineRealization",
    "NotProductPCritical",
    "sample_spine_path",
    "sample_spine_endpoints",
    "sample_paths",
    "girsanov_weight",
    "sample_fission_times",
    "poisson_tilt_weight",
    "simulate_tilted",
    "run_tilted",
    "realization_from_run",
    "spine_conditional_expectation",
    "resimulate_subtrees",
    "nested_conditional_means",
    "spine_expectation",
    "lemma16_terms",
    "realization_to_json",
]


class NotProductPCritical(ValueError):
    """Raised when ``<phi^p, phi_tilde>`` or ``<beta phi^p, phi_tilde>`` diverges."""


@dataclass(frozen=True)
class PathRecord:
    """A discretised single-particle path.

    ``beta_int[k]`` is ``int_0^{t_k} beta(Y_s) ds`` and ``log_girsanov[k]`` is
    the log of ``phi(Y_t)/phi(x) exp(-int (lambda_c - beta))``; the latter is
    a density only when ``measure == "original"``.
    """

    times: Array
    positions: Array
    beta_int: Array
    log_girsanov: Array
    measure: str = "spine"

    def at(self, t: float) -> Array:
        k = int(np.argmin(np.abs(self.times - t)))
        return self.positions[k]


@dataclass(frozen=True)
class PathBatch:
    """Many independent paths on a common grid; arrays are ``(n_paths, n_steps + 1, ...)``."""

    times: Array
    positions: Array
    beta_int: Array
    log_girsanov: Array
    measure: str = "spine"

    def __len__(self) -> int:
        return self.positions.shape[0]

    def record(self, i: int) -> PathRecord:
        return PathRecord(self.times, self.positions[i], self.beta_int[i], self.log_girsanov[i],
                          self.measure)


@dataclass
class SpineRealization:
    spine: PathRecord
    fission_times: Array
    fission_positions: Array
    coins: Array
    subtrees: list = field(default_factory=list)  # (birth_time, Trajectory)


def _path_functionals(model: Model, times: Array, pos: Array) -> tuple:
    """Running trapezoid integral of beta and the log Girsanov weight along paths."""
    n_paths, n_pts, d = pos.shape
    flat = pos.reshape(-1, d)
    beta = model.breeding(flat).reshape(n_paths, n_pts)
    dt = np.diff(times)
    inc = 0.5 * (beta[:, 1:] + beta[:, :-1]) * dt
    beta_int = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)
    with np.errstate(divide="ignore"):
        log_phi = np.log(model.eigen.phi(flat)).reshape(n_paths, n_pts)
    log_g = log_phi - log_phi[:, :1] - model.lambda_c * times[None, :] + beta_int
    return beta_int, log_g


def sample_paths(model: Model, x, t_end: float, dt: float, n_paths: int, rng, *,
                 measure: str = "spine", use_exact_ou: bool = True) -> PathBatch:
    """Sample ``n_paths`` single-particle paths under the spine or the original motion."""
    if measure not in ("spine", "original"):
        raise ValueError("measure must be 'spine' or 'original'")
    x0 = as_points(x, model.dim)[0]
    n_steps = int(round(t_end / dt)) if t_end > 0 else 0
    times = np.arange(n_steps + 1) * dt
    pos = np.empty((n_paths, n_steps + 1, model.dim))
    pos[:, 0] = x0
    cur = np.tile(x0, (n_paths, 1))
    for k in range(1, n_steps + 1):
        cur = _move(model, cur, dt, rng, measure == "spine", use_exact_ou)
        pos[:, k] = cur
    beta_int, log_g = _path_functionals(model, times, pos)
    return PathBatch(times, pos, beta_int, log_g, measure)


def sample_spine_endpoints(model: Model, x, t_end: float, dt: float, n_paths: int, rng, *,
                           use_exact_ou: bool = True) -> Array:
    """Positions ``Y_t`` of ``n_paths`` spine paths at ``t_end`` without storing the paths."""
    x0 = as_points(x, model.dim)[0]
    n_steps = int(round(t_end / dt)) if t_end > 0 else 0
    cur = np.tile(x0, (n_paths, 1))
    for _ in range(n_steps):
        cur = _move(model, cur, dt, rng, True, use_exact_ou)
    return cur


def sample_spine_path(model: Model, x, t_end: float, dt: float, rng, *, measure: str = "spine",
                      use_exact_ou: bool = True) -> PathRecord:
    """One path under the h-transformed motion (or the original one with ``measure='original'``)."""
    return sample_paths(model, x, t_end, dt, 1, rng, measure=measure,
                        use_exact_ou=use_exact_ou).record(0)


def girsanov_weight(path: Union[PathRecord, PathBatch], model: Model):
    """``phi(Y_t)/phi(x) exp(-int_0^t (lambda_c - beta(Y_s)) ds)`` at the path's end.

    Meaningful for paths sampled under the original motion; returns an array
    for a :class:`PathBatch`.
    """
    if path.measure != "original":
        raise ValueError("girsanov_weight needs a path sampled under the original motion")
    lg = path.log_girsanov
    return np.exp(lg[..., -1]) if isinstance(path, PathBatch) else float(np.exp(lg[-1]))


def sample_fission_times(spine: PathRecord, model: Model, rng) -> Array:
    """Poisson times with intensity ``2 beta(Y_t)`` along a recorded path (time change)."""
    cum = 2.0 * np.asarray(spine.beta_int)
    total = cum[-1]
    out = []
    acc = rng.exponential()
    while acc < total:
        out.append(acc)
        acc += rng.exponential()
    if not out:
        return np.zeros(0)
    return np.interp(np.array(out), cum, spine.times)


def poisson_tilt_weight(event_times: Sequence[float], rate_fn_along_path, t: float) -> float:
    """``2^{n_t} exp(-int_0^t g(s) ds)`` for events sampled at rate ``g``.

    ``rate_fn_along_path`` is a constant, a callable ``g(s)``, or a pair
    ``(times, values)`` integrated by the trapezoid rule.
    """
    n_t = int(np.sum(np.asarray(event_times, dtype=float) <= t))
    if callable(rate_fn_along_path):
        integral, _ = integrate.quad(rate_fn_along_path, 0.0, t, limit=200)
    elif np.ndim(rate_fn_along_path) == 0:
        integral = float(rate_fn_along_path) * t
    else:
        times, values = (np.asarray(a, dtype=float) for a in rate_fn_along_path)
        sel = times <= t
        integral = float(np.trapezoid(values[sel], times[sel]))
    return float(2.0**n_t * math.exp(-integral))


# --------------------------------------------------------------------------
# tilted process

def realization_from_run(run: EnsembleRun, r: int = 0) -> SpineRealization:
    """Extract replicate ``r`` of a tilted run (needs ``record_spine=True``)."""
    if run.spine_path is None:
        raise ValueError("run has no recorded spine path")
    model = run.model
    times = run.spine_times
    pos = run.spine_path[:, r][None]
    beta_int, log_g = _path_functionals(model, times, pos)
    spine = PathRecord(times, pos[0], beta_int[0], log_g[0], "spine")
    ft, fx, fc = run.fissions(r)
    subtrees = []
    for i, (s, y) in enumerate(zip(ft, fx)):
        systems = []
        for k, snap in enumerate(run.snapshots):
            if snap.time + 1e-12 < s:
                continue
            sel = (snap.replicate == r) & (snap.subtree == i)
            systems.append(ParticleSystem(time=snap.time, positions=snap.positions[sel],
                                          weights=np.ones(int(sel.sum())), ids=snap.ids[sel],
                                          model=model))
        subtrees.append((float(s), Trajectory(systems=systems, capped=bool(run.capped[r]))))
    return SpineRealization(spine=spine, fission_times=ft, fission_positions=fx, coins=fc,
                            subtrees=subtrees)


def simulate_tilted(model: Model, x, cfg: SimConfig, rng: Optional[np.random.Generator] = None):
    """One draw of the tilted process from ``x``.

    Returns ``(realization, trajectory)``: the spine data with its subtrees,
    and the assembled population (spine plus all subtrees) at the snapshot times.
    """
    run = simulate_ensemble(model, x, cfg, 1, rng, tilted=True, record_spine=True)
    return realization_from_run(run, 0), _to_trajectory(run, 0)


def run_tilted(model: Model, x, cfg: SimConfig, n_replicates: int, *, batch_size: int = 250,
               parallel: int = 1, record_spine: bool = False) -> EnsembleRun:
    """Tilted ensemble, batched and seeded as :func:`run_replicates`."""
    return run_replicates(model, x, cfg, n_replicates, batch_size=batch_size, parallel=parallel,
                          tilted=True, record_spine=record_spine)


def spine_conditional_expectation(real: SpineRealization, model: Model, t: float) -> float:
    """Conditional mean of ``W_t`` given the spine path and its fission times."""
    sp = real.spine
    if t > sp.times[-1] + 1e-12:
        raise ValueError("t exceeds the realization horizon")
    lam = model.lambda_c
    y_t = sp.at(t)[None]
    total = math.exp(-lam * t) * float(model.eigen.phi(y_t)[0])
    sel = real.fission_times <= t + 1e-12
    if sel.any():
        s = real.fission_times[sel]
        total += float(np.sum(np.exp(-lam * s) * model.eigen.phi(real.fission_positions[sel])))
    return total


def nested_conditional_means(realizations: Sequence[SpineRealization], model: Model, t: float,
                             dt: float, n_redraws: int, rng, *, use_exact_ou: bool = True,
                             max_particles: int = 100_000) -> Array:
    """Re-draw every subtree ``n_redraws`` times with the spine data frozen.

    Returns an ``(n_realizations, n_redraws)`` array of ``W_t`` values.
    """
    n_real = len(realizations)
    lam = model.lambda_c
    im_t, im_x, im_r, im_s = [], [], [], []
    base = np.empty(n_real)
    for j, real in enumerate(realizations):
        base[j] = math.exp(-lam * t) * float(model.eigen.phi(real.spine.at(t)[None])[0])
        sel = real.fission_times <= t + 1e-12
        for i, (s, y) in enumerate(zip(real.fission_times[sel], real.fission_positions[sel])):
            reps = j * n_redraws + np.arange(n_redraws)
            im_t.append(np.full(n_redraws, s))
            im_x.append(np.tile(y, (n_redraws, 1)))
            im_r.append(reps)
            im_s.append(np.full(n_redraws, i))
    out = np.repeat(base[:, None], n_redraws, axis=1)
    if not im_t:
        return out
    cfg = SimConfig(dt=dt, t_end=t, max_particles=max_particles, use_exact_ou=use_exact_ou)
    run = simulate_ensemble(
        model, np.zeros((0, model.dim)), cfg, n_real * n_redraws, rng,
        immigrants=(np.concatenate(im_t), np.concatenate(im_x), np.concatenate(im_r),
                    np.concatenate(im_s)),
    )
    if run.capped.any():
        raise RuntimeError("subtree re-simulation exceeded max_particles")
    w = run.w_phi(len(run.snapshots) - 1).reshape(n_real, n_redraws)
    return out + w


def resimulate_subtrees(real: SpineRealization, model: Model, t: float, dt: float, n_redraws: int,
                        rng, **kwargs) -> Array:
    """``W_t`` for ``n_redraws`` fresh subtree draws along one frozen spine."""
    return nested_conditional_means([real], model, t, dt, n_redraws, rng, **kwargs)[0]


def realization_to_json(real: SpineRealization, max_points: int = 10_000) -> dict:
    """JSON-ready summary: decimated spine polyline, fissions and subtree sizes."""
    sp = real.spine
    n = len(sp.times)
    stride = max(1, math.ceil(n / max_points))
    idx = np.arange(0, n, stride)
    if idx[-1] != n - 1:
        idx = np.append(idx[: max_points - 1], n - 1)
    return {
        "spine": {"t": sp.times[idx].tolist(), "x": sp.positions[idx].tolist()},
        "fission_times": np.asarray(real.fission_times).tolist(),
        "fission_positions": np.asarray(real.fission_positions).tolist(),
        "coins": np.asarray(real.coins).tolist(),
        "subtrees": [
            {"birth_time": s, "final_size": traj.systems[-1].count if traj.systems else 0}
            for s, traj in real.subtrees
        ],
    }


# --------------------------------------------------------------------------
# spine moments and the L^p terms

def spine_expectation(model: Model, f: Callable[[Array], Array], t: float, x) -> float:
    """``E^phi_x[f(Y_t)]`` by quadrature against the closed-form spine law (dim 1)."""
    law = model.eigen.spine_law
    if law is None or model.dim != 1:
        raise ValueError("spine_expectation needs a closed-form 1-d spine law")
    x0 = float(as_points(x, 1)[0, 0])
    mean, var = law(t, x0)
    mean, var = float(np.ravel(mean)[0]), float(var)
    if var <= 0:
        return float(f(np.array([[mean]]))[0])
    sd = math.sqrt(var)

    def integrand(z):
        return f((mean + sd * z)[:, None]) * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

    return integrate_line(integrand, center=0.0, scale=1.0)


def _check_p_critical(model: Model, p_exp: float) -> None:
    from .models import phi_pairing, product_p_star

    try:
        p_star = product_p_star(model)
    except ValueError:
        p_star = math.inf
    if p_exp >= p_star:
        raise NotProductPCritical(f"not product-p-critical at p={p_exp} (threshold {p_star:.6g})")
    q = p_exp - 1.0
    try:
        phi_pairing(model, lambda y: model.eigen.phi(y) ** q)
        phi_pairing(model, lambda y: model.breeding(y) * model.eigen.phi(y) ** q)
    except ArithmeticError as exc:
        raise NotProductPCritical(f"not product-p-critical at p={p_exp}") from exc


def lemma16_terms(model: Model, x, t: float, p_exp: float, *, method: str = "auto",
                  n_paths: int = 20_000, dt: float = 1e-2, rng=None) -> tuple:
    """Spine term ``A`` and sum term ``B`` bounding ``E[(W_t)^p] / phi(x)``.

    ``A = exp(-lambda_c q t) E^phi_x[phi(Y_t)^q]`` and
    ``B = E^phi_x[int_0^t exp(-lambda_c q s) 2 beta(Y_s) phi(Y_s)^q ds]`` with
    ``q = p - 1``.  Uses quadrature against the closed-form spine law when
    available (``method='quadrature'``), otherwise Monte Carlo over spine paths.
    """
    if not 1.0 < p_exp <= 2.0:
        raise ValueError("p_exp must lie in (1, 2]")
    q = p_exp - 1.0
    lam = model.lambda_c
    phi = model.eigen.phi
    if model.dim == 1:
        _check_p_critical(model, p_exp)
    if method == "auto":
        method = "quadrature" if (model.eigen.spine_law is not None and model.dim == 1) else "monte_carlo"

    def phi_q(y):
        return phi(y) ** q

    def beta_phi_q(y):
        return model.breeding(y) * phi(y) ** q

    if method == "quadrature":
        a = math.exp(-lam * q * t) * spine_expectation(model, phi_q, t, x)
        if t == 0:
            return a, 0.0
        b, _ = integrate.quad(
            lambda s: math.exp(-lam * q * s) * 2.0 * spine_expectation(model, beta_phi_q, s, x),
            0.0, t, limit=200, epsrel=1e-10,
        )
        return a, b
    if method != "monte_carlo":
        raise ValueError("method must be 'auto', 'quadrature' or 'monte_carlo'")
    rng = batch_rng(0, 0) if rng is None else rng
    paths = sample_paths(model, x, t, dt, n_paths, rng, measure="spine")
    n_paths_, n_pts, d = paths.positions.shape
    flat = paths.positions.reshape(-1, d)
    vals = (np.exp(-lam * q * paths.times)[None, :]
            * 2.0 * beta_phi_q(flat).reshape(n_paths_, n_pts))
    a = math.exp(-lam * q * t) * float(np.mean(phi_q(paths.positions[:, -1])))
    b = float(np.mean(np.trapezoid(vals, paths.times, axis=1))) if n_pts > 1 else 0.0
    return a, b
