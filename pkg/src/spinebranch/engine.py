"""Forward simulation of strictly dyadic branching diffusions.

Particles move by the model's diffusion and carry an exponential clock: the
integral of the breeding rate along the path (trapezoid rule on the step
grid) is accumulated against an Exp(1) threshold, and the particle splits in
two at the end of the step in which the threshold is crossed.

The work is done by a vectorised ensemble engine that advances many
independent replicates at once on flat arrays tagged with a replicate index.
The same engine also runs the tilted construction (one marked *spine*
particle per replicate moving by the h-transformed motion and splitting at
twice the rate) and can inject immigrant particles at prescribed times.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .models import Model, as_points

Array = np.ndarray

__all__ = [
    "Particle",
    "ParticleSystem",
    "SimConfig",
    "Snapshot",
    "EnsembleRun",
    "Trajectory",
    "WeightedTrajectory",
    "step_motion",
    "advance_branch_clock",
    "simulate",
    "simulate_weighted",
    "simulate_ensemble",
    "run_replicates",
    "batch_rng",
]


@dataclass
class Particle:
    position: Array
    weight: float = 1.0
    beta_integral: float = 0.0
    clock_threshold: float = 1.0
    lineage_id: int = 0


@dataclass(frozen=True)
class ParticleSystem:
    """Atomic measure ``sum_i w_i delta_{x_i}`` at a fixed time."""

    time: float
    positions: Array
    weights: Array
    ids: Array
    model: Optional[Model] = field(default=None, repr=False)
    alive: bool = True
    weighted: bool = False

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def particles(self) -> list:
        return [Particle(position=p.copy(), weight=float(w), lineage_id=int(i))
                for p, w, i in zip(self.positions, self.weights, self.ids)]

    def pairing(self, f: Callable[[Array], Array]) -> float:
        """``<f, X>`` for the plain process (weights ignored)."""
        if self.count == 0:
            return 0.0
        return float(np.sum(f(self.positions)))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_end: float = 1.0
    max_particles: int = 100_000
    seed: int = 0
    use_exact_ou: bool = True
    snapshot_delta: Optional[float] = None
    snapshot_times: tuple = ()
    prune_radius: Optional[float] = None

    def __post_init__(self):
        if not (self.dt > 0 and self.t_end > 0):
            raise ValueError("dt and t_end must be positive")
        if self.dt > self.t_end:
            raise ValueError("dt must not exceed t_end")
        if self.max_particles < 1:
            raise ValueError("max_particles must be >= 1")
        if self.snapshot_delta is not None and self.snapshot_delta <= 0:
            raise ValueError("snapshot_delta must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def sample_times(self) -> Array:
        """Snapshot times: ``0``, the lattice ``k * delta``, extra times and ``t_end``."""
        times = {0.0, self.n_steps * self.dt}
        if self.snapshot_delta is not None:
            k = np.arange(0, int(math.floor(self.t_end / self.snapshot_delta + 1e-9)) + 1)
            times.update(float(v) for v in k * self.snapshot_delta)
        times.update(float(t) for t in self.snapshot_times if 0 <= t <= self.t_end + 1e-12)
        steps = sorted({int(round(t / self.dt)) for t in times})
        return np.array(steps, dtype=int)


def batch_rng(seed: int, batch: int) -> np.random.Generator:
    """Independent generator for replicate batch ``batch`` of run ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(batch),)))


# --------------------------------------------------------------------------
# single-step operations

def _exact_ou(pos: Array, rate: float, sigma: float, dt: float, rng) -> Array:
    if rate == 0.0:
        sd = sigma * math.sqrt(dt)
    else:
        sd = sigma * math.sqrt(-math.expm1(-2.0 * rate * dt) / (2.0 * rate))
    return pos * math.exp(-rate * dt) + sd * rng.standard_normal(pos.shape)


def _euler(pos: Array, drift: Callable, model: Model, dt: float, rng) -> Array:
    noise = rng.standard_normal(pos.shape)
    if model.noise_sigma is not None:
        inc = model.noise_sigma * math.sqrt(dt) * noise
    else:
        chol = np.linalg.cholesky(model.diffusion(pos) * dt)
        inc = np.einsum("nij,nj->ni", chol, noise)
    return pos + drift(pos) * dt + inc


def _move(model: Model, pos: Array, dt: float, rng, spine: bool, exact: bool,
          drift_override: Optional[Callable] = None) -> Array:
    if len(pos) == 0:
        return pos.copy()
    if drift_override is not None:
        return _euler(pos, drift_override, model, dt, rng)
    if spine:
        rate = model.eigen.spine_ou_rate
        if exact and rate is not None and model.noise_sigma is not None:
            return _exact_ou(pos, rate, model.noise_sigma, dt, rng)
        return _euler(pos, model.eigen.spine_drift, model, dt, rng)
    if exact and model.ou_rate is not None and model.noise_sigma is not None:
        return _exact_ou(pos, model.ou_rate, model.noise_sigma, dt, rng)
    return _euler(pos, model.drift, model, dt, rng)


def step_motion(model: Model, position, dt: float, rng, drift_override: Optional[Callable] = None,
                *, spine: bool = False, use_exact_ou: bool = True) -> Array:
    """One motion increment of length ``dt``.

    OU-type motions (``model.ou_rate`` / ``eigen.spine_ou_rate`` set) are
    sampled from the exact Gaussian transition when ``use_exact_ou``;
    everything else uses Euler--Maruyama.  ``spine=True`` moves by the
    h-transformed motion.  Rows that leave the domain come back as NaN
    (the particle is killed).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    single = np.ndim(position) <= 1 and model.dim >= 1 and np.size(position) == model.dim
    pos = as_points(position, model.dim)
    new = _move(model, pos, dt, rng, spine, use_exact_ou, drift_override)
    new[~model.domain.contains(new)] = np.nan
    return new[0] if single else new


def advance_branch_clock(particle: Particle, model: Model, dt: float, pre_pos, post_pos, rng,
                         rate_multiplier: float = 1.0) -> tuple:
    """Accumulate ``int beta`` over one step and report whether the clock rang.

    On a ring the integral is reset and a fresh Exp(1) threshold is drawn.
    """
    beta = model.breeding(as_points(np.vstack([np.ravel(pre_pos), np.ravel(post_pos)]), model.dim))
    acc = particle.beta_integral + rate_multiplier * dt * 0.5 * float(beta[0] + beta[1])
    ring = acc >= particle.clock_threshold
    if ring:
        out = replace(particle, position=np.asarray(post_pos, dtype=float), beta_integral=0.0,
                      clock_threshold=float(rng.exponential()))
    else:
        out = replace(particle, position=np.asarray(post_pos, dtype=float), beta_integral=acc)
    return out, bool(ring)


# --------------------------------------------------------------------------
# ensemble engine

@dataclass
class Snapshot:
    time: float
    positions: Array
    replicate: Array
    ids: Array
    spine: Array
    subtree: Array


@dataclass
class EnsembleRun:
    """Snapshots of ``n_replicates`` independent runs stored as flat arrays.

    ``capped[r]`` marks replicates that exceeded ``max_particles``; their
    particles are dropped from that time on and they should be excluded
    from statistics.
    """

    model: Model
    config: SimConfig
    n_replicates: int
    snapshots: list
    capped: Array
    capped_time: Array
    n_branch_events: Array
    weighted: bool = False
    tilted: bool = False
    spine_times: Optional[Array] = None
    spine_path: Optional[Array] = None
    fission_replicate: Array = field(default_factory=lambda: np.zeros(0, dtype=int))
    fission_time: Array = field(default_factory=lambda: np.zeros(0))
    fission_position: Array = field(default_factory=lambda: np.zeros((0, 1)))
    fission_coin: Array = field(default_factory=lambda: np.zeros(0, dtype=int))
    n_pruned: Array = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def times(self) -> Array:
        return np.array([s.time for s in self.snapshots])

    def index_of(self, t: float) -> int:
        times = self.times
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > 0.5 * self.config.dt:
            raise KeyError(f"no snapshot at t={t}")
        return k

    def pairing(self, f: Callable[[Array], Array], k: int) -> Array:
        """Per-replicate ``<f, X_t>`` at snapshot ``k``."""
        s = self.snapshots[k]
        vals = f(s.positions) if len(s.positions) else np.zeros(0)
        return np.bincount(s.replicate, weights=vals, minlength=self.n_replicates)

    def counts(self, k: int) -> Array:
        return np.bincount(self.snapshots[k].replicate, minlength=self.n_replicates)

    def w_phi(self, k: int) -> Array:
        t = self.snapshots[k].time
        return math.exp(-self.model.lambda_c * t) * self.pairing(self.model.eigen.phi, k)

    def support_radius(self, k: int) -> Array:
        s = self.snapshots[k]
        out = np.zeros(self.n_replicates)
        if len(s.positions):
            np.maximum.at(out, s.replicate, np.linalg.norm(s.positions, axis=-1))
        return out

    def weights(self, k: int) -> Array:
        s = self.snapshots[k]
        if not self.weighted:
            return np.ones(len(s.positions))
        return math.exp(-self.model.lambda_c * s.time) * self.model.eigen.phi(s.positions)

    def system(self, k: int, r: int = 0) -> ParticleSystem:
        s = self.snapshots[k]
        sel = s.replicate == r
        return ParticleSystem(time=s.time, positions=s.positions[sel], weights=self.weights(k)[sel],
                              ids=s.ids[sel], model=self.model, alive=not self.capped[r],
                              weighted=self.weighted)

    def fissions(self, r: int) -> tuple:
        sel = self.fission_replicate == r
        return self.fission_time[sel], self.fission_position[sel], self.fission_coin[sel]


@dataclass
class Trajectory:
    systems: list
    capped: bool = False
    capped_time: float = math.nan

    @property
    def times(self) -> Array:
        return np.array([s.time for s in self.systems])


@dataclass
class WeightedTrajectory:
    weighted: Trajectory
    plain: Trajectory
    mass: Array  # total weighted mass |X^hat_t| = W_t^phi at each snapshot


def _group_rank(keys: Array) -> Array:
    """Rank of each element among equal keys, in order of appearance."""
    if len(keys) == 0:
        return np.zeros(0, dtype=int)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    start = np.r_[0, np.flatnonzero(np.diff(sk)) + 1]
    first = np.repeat(start, np.diff(np.r_[start, len(sk)]))
    rank = np.empty(len(keys), dtype=int)
    rank[order] = np.arange(len(keys)) - first
    return rank


def simulate_ensemble(
    model: Model,
    init,
    cfg: SimConfig,
    n_replicates: int,
    rng: Optional[np.random.Generator] = None,
    *,
    tilted: bool = False,
    record_spine: bool = False,
    immigrants: Optional[tuple] = None,
    weighted: bool = False,
) -> EnsembleRun:
    """Run ``n_replicates`` independent copies from the configuration ``init``.

    With ``tilted=True`` the first point of ``init`` is the spine start and
    only that particle is used; the spine moves by the h-transformed motion
    and splits at rate ``2 beta``.  ``immigrants = (times, positions,
    replicates, subtree)`` injects plain particles at the given grid times.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    rng = batch_rng(cfg.seed, 0) if rng is None else rng
    d = model.dim
    dt = cfg.dt
    n_steps = cfg.n_steps
    x0 = as_points(init, d)
    if tilted:
        x0 = x0[:1]
    if len(x0) == 0 and immigrants is None:
        raise ValueError("initial configuration must be nonempty")
    if len(x0) and not np.all(model.domain.contains(x0)):
        raise ValueError("initial positions must lie in the domain")

    m = len(x0)
    pos = np.tile(x0, (n_replicates, 1))
    rep = np.repeat(np.arange(n_replicates), m)
    ids = np.tile(np.arange(m), n_replicates)
    next_id = np.full(n_replicates, m, dtype=np.int64)
    bint = np.zeros(len(pos))
    thr = rng.exponential(size=len(pos))
    spine = np.zeros(len(pos), dtype=bool)
    if tilted:
        spine[:] = True
    subtree = np.full(len(pos), -1, dtype=np.int64)
    n_fiss = np.zeros(n_replicates, dtype=np.int64)

    if immigrants is not None:
        im_t, im_x, im_r, im_s = immigrants
        im_step = np.rint(np.asarray(im_t, dtype=float) / dt).astype(int)
        order = np.argsort(im_step, kind="stable")
        im_step = im_step[order]
        im_x = as_points(im_x, d)[order]
        im_r = np.asarray(im_r, dtype=int)[order]
        im_s = np.asarray(im_s, dtype=int)[order]
    else:
        im_step = np.zeros(0, dtype=int)
    im_ptr = 0

    capped = np.zeros(n_replicates, dtype=bool)
    capped_time = np.full(n_replicates, np.nan)
    n_branch = np.zeros(n_replicates, dtype=np.int64)
    n_pruned = np.zeros(n_replicates, dtype=np.int64)
    snap_steps = set(cfg.sample_times().tolist())
    snapshots = []
    f_rep, f_t, f_x, f_c = [], [], [], []
    spine_path = None
    if record_spine and tilted:
        spine_path = np.full((n_steps + 1, n_replicates, d), np.nan)
        spine_path[0] = x0[0]

    def keep(mask):
        nonlocal pos, rep, ids, bint, thr, spine, subtree
        pos, rep, ids, bint, thr = pos[mask], rep[mask], ids[mask], bint[mask], thr[mask]
        spine, subtree = spine[mask], subtree[mask]

    def snap(step):
        snapshots.append(Snapshot(time=step * dt, positions=pos.copy(), replicate=rep.copy(),
                                  ids=ids.copy(), spine=spine.copy(), subtree=subtree.copy()))

    def inject(step):
        nonlocal im_ptr, pos, rep, ids, bint, thr, spine, subtree
        j = im_ptr
        while j < len(im_step) and im_step[j] <= step:
            j += 1
        if j == im_ptr:
            return
        sl = slice(im_ptr, j)
        im_ptr = j
        live = ~capped[im_r[sl]]
        r = im_r[sl][live]
        k = len(r)
        new_ids = next_id[r] + _group_rank(r)
        np.add.at(next_id, r, 1)
        pos = np.concatenate([pos, im_x[sl][live]])
        rep = np.concatenate([rep, r])
        ids = np.concatenate([ids, new_ids])
        bint = np.concatenate([bint, np.zeros(k)])
        thr = np.concatenate([thr, rng.exponential(size=k)])
        spine = np.concatenate([spine, np.zeros(k, dtype=bool)])
        subtree = np.concatenate([subtree, im_s[sl][live]])

    inject(0)
    if 0 in snap_steps:
        snap(0)
    beta_old = model.breeding(pos) if len(pos) else np.zeros(0)
    for step in range(1, n_steps + 1):
        new = np.empty_like(pos)
        base = ~spine
        new[base] = _move(model, pos[base], dt, rng, False, cfg.use_exact_ou)
        if spine.any():
            new[spine] = _move(model, pos[spine], dt, rng, True, cfg.use_exact_ou)
        alive = model.domain.contains(new)
        pos = new
        beta_new = np.zeros(len(pos))
        if alive.any():
            beta_new[alive] = model.breeding(pos[alive])
        mult = np.where(spine, 2.0, 1.0)
        bint = bint + mult * dt * 0.5 * (beta_old + beta_new)
        if not alive.all():
            keep(alive)
            beta_new = beta_new[alive]

        fire = np.flatnonzero(bint >= thr)
        if len(fire):
            bint[fire] = 0.0
            thr[fire] = rng.exponential(size=len(fire))
            r = rep[fire]
            np.add.at(n_branch, r, 1)
            child_ids = next_id[r] + _group_rank(r)
            np.add.at(next_id, r, 1)
            child_sub = subtree[fire].copy()
            sp = spine[fire]
            if sp.any():
                sr = r[sp]
                child_sub[sp] = n_fiss[sr]
                coins = rng.integers(0, 2, size=len(sr))
                f_rep.append(sr)
                f_t.append(np.full(len(sr), step * dt))
                f_x.append(pos[fire[sp]].copy())
                f_c.append(coins)
                n_fiss[sr] += 1
                # The coin picks which child carries the spine lineage id onwards.
                swap = np.zeros(len(fire), dtype=bool)
                swap[np.flatnonzero(sp)[coins == 1]] = True
                parent_ids = ids[fire].copy()
                ids[fire[swap]] = child_ids[swap]
                child_ids[swap] = parent_ids[swap]
            pos = np.concatenate([pos, pos[fire]])
            rep = np.concatenate([rep, r])
            ids = np.concatenate([ids, child_ids])
            bint = np.concatenate([bint, np.zeros(len(fire))])
            thr = np.concatenate([thr, rng.exponential(size=len(fire))])
            spine = np.concatenate([spine, np.zeros(len(fire), dtype=bool)])
            subtree = np.concatenate([subtree, child_sub])
            beta_new = np.concatenate([beta_new, beta_new[fire]])

        if cfg.prune_radius is not None and len(pos):
            far = (np.linalg.norm(pos, axis=-1) > cfg.prune_radius) & ~spine
            if far.any():
                np.add.at(n_pruned, rep[far], 1)
                keep(~far)
                beta_new = beta_new[~far]

        counts = np.bincount(rep, minlength=n_replicates)
        over = (counts > cfg.max_particles) & ~capped
        if over.any():
            capped |= over
            capped_time[over] = step * dt
            drop = over[rep]
            keep(~drop)
            beta_new = beta_new[~drop]

        if record_spine and tilted and spine.any():
            spine_path[step, rep[spine]] = pos[spine]
        inject(step)
        if len(beta_new) < len(pos):
            beta_new = np.concatenate([beta_new, model.breeding(pos[len(beta_new):])])
        beta_old = beta_new
        if step in snap_steps:
            snap(step)

    if f_rep:
        fr, ft, fx, fc = (np.concatenate(f_rep), np.concatenate(f_t), np.concatenate(f_x),
                          np.concatenate(f_c))
    else:
        fr, ft, fx, fc = (np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, d)),
                          np.zeros(0, dtype=int))
    return EnsembleRun(
        model=model, config=cfg, n_replicates=n_replicates, snapshots=snapshots, capped=capped,
        capped_time=capped_time, n_branch_events=n_branch, weighted=weighted, tilted=tilted,
        spine_times=np.arange(n_steps + 1) * dt if spine_path is not None else None,
        spine_path=spine_path, fission_replicate=fr, fission_time=ft, fission_position=fx,
        fission_coin=fc, n_pruned=n_pruned,
    )


def merge_runs(runs: Sequence[EnsembleRun]) -> EnsembleRun:
    """Concatenate batch runs (replicate indices are offset batch by batch)."""
    first = runs[0]
    offsets = np.cumsum([0] + [r.n_replicates for r in runs[:-1]])
    snaps = []
    for k in range(len(first.snapshots)):
        parts = [r.snapshots[k] for r in runs]
        snaps.append(Snapshot(
            time=parts[0].time,
            positions=np.concatenate([p.positions for p in parts]),
            replicate=np.concatenate([p.replicate + o for p, o in zip(parts, offsets)]),
            ids=np.concatenate([p.ids for p in parts]),
            spine=np.concatenate([p.spine for p in parts]),
            subtree=np.concatenate([p.subtree for p in parts]),
        ))
    spine_path = None
    if first.spine_path is not None:
        spine_path = np.concatenate([r.spine_path for r in runs], axis=1)
    return replace(
        first,
        n_replicates=int(sum(r.n_replicates for r in runs)),
        snapshots=snaps,
        capped=np.concatenate([r.capped for r in runs]),
        capped_time=np.concatenate([r.capped_time for r in runs]),
        n_branch_events=np.concatenate([r.n_branch_events for r in runs]),
        n_pruned=np.concatenate([r.n_pruned for r in runs]),
        spine_path=spine_path,
        fission_replicate=np.concatenate([r.fission_replicate + o for r, o in zip(runs, offsets)]),
        fission_time=np.concatenate([r.fission_time for r in runs]),
        fission_position=np.concatenate([r.fission_position for r in runs]),
        fission_coin=np.concatenate([r.fission_coin for r in runs]),
    )


def run_replicates(model: Model, init, cfg: SimConfig, n_replicates: int, *,
                   batch_size: int = 250, parallel: int = 1, **kwargs) -> EnsembleRun:
    """Run replicates in fixed-size batches, batch ``b`` seeded by ``(cfg.seed, b)``.

    Output depends only on ``(model, init, cfg, n_replicates, batch_size)``;
    ``parallel`` only sets the number of worker threads.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    sizes = [min(batch_size, n_replicates - s) for s in range(0, n_replicates, batch_size)]

    def one(b):
        return simulate_ensemble(model, init, cfg, sizes[b], batch_rng(cfg.seed, b), **kwargs)

    if parallel > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            runs = list(pool.map(one, range(len(sizes))))
    else:
        runs = [one(b) for b in range(len(sizes))]
    return runs[0] if len(runs) == 1 else merge_runs(runs)


def _to_trajectory(run: EnsembleRun, r: int = 0) -> Trajectory:
    systems = [run.system(k, r) for k in range(len(run.snapshots))]
    return Trajectory(systems=systems, capped=bool(run.capped[r]), capped_time=float(run.capped_time[r]))


def simulate(model: Model, init, cfg: SimConfig, rng: Optional[np.random.Generator] = None) -> Trajectory:
    """Simulate one replicate; deterministic given ``cfg.seed`` (or ``rng``)."""
    run = simulate_ensemble(model, init, cfg, 1, rng)
    return _to_trajectory(run)


def simulate_weighted(model: Model, init, cfg: SimConfig,
                      rng: Optional[np.random.Generator] = None) -> WeightedTrajectory:
    """Simulate the h-weighted process (``h = phi``) and recover the plain view.

    A particle at ``x`` at time ``t`` carries weight ``exp(-lambda_c t) phi(x)``,
    so the total weighted mass is ``W_t^phi``; the plain process is recovered
    from ``X_t(B) = exp(lambda_c t) <1_B / phi, X^hat_t>``.
    """
    run = simulate_ensemble(model, init, cfg, 1, rng, weighted=True)
    weighted = _to_trajectory(run)
    plain_systems = []
    for s in weighted.systems:
        unit = math.exp(model.lambda_c * s.time) * s.weights / model.eigen.phi(s.positions) \
            if s.count else np.zeros(0)
        plain_systems.append(ParticleSystem(time=s.time, positions=s.positions, weights=unit,
                                            ids=s.ids, model=model, alive=s.alive))
    mass = np.array([float(np.sum(s.weights)) for s in weighted.systems])
    plain = Trajectory(systems=plain_systems, capped=weighted.capped, capped_time=weighted.capped_time)
    return WeightedTrajectory(weighted=weighted, plain=plain, mass=mass)
