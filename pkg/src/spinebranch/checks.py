"""Named verification suites.

Each suite takes a parameter dict (merged over its defaults), a seed and a
thread count and returns a list of :class:`CheckResult`.  The defaults are
the calibrated settings used by the acceptance tests.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps

from .engine import SimConfig, batch_rng, run_replicates
from .models import (check_adjoint_harmonicity, check_harmonicity, fd_principal_eigenvalue,
                     harmonicity_grid, make_compact_beta_bbm, model_from_config, phi_pairing,
                     solve_lambda_c_compact)
from .spine import (girsanov_weight, lemma16_terms, nested_conditional_means, poisson_tilt_weight,
                    realization_from_run, run_tilted, sample_fission_times, sample_paths,
                    spine_conditional_expectation)
from .stats import (TestFunction, auto_prune_radius, check_iii_star, check_iv,
                    local_extinction_probe, mean_and_se, paired_increase_test, outside_envelope_tail,
                    sign_test_decrease, slln_series, w_series)

INWARD_OU = {"kind": "inward_ou_quadratic", "params": {"sigma": 1.0, "mu": 2.0, "b_quad": 1.0, "beta0": 0.5}}
OUTWARD_OU_SUPER = {"kind": "outward_ou_constant", "params": {"sigma": 1.0, "mu": 0.5, "b_const": 1.0}}
OUTWARD_OU_SUB = {"kind": "outward_ou_constant", "params": {"sigma": 1.0, "mu": 2.0, "b_const": 1.0}}
CAPPED_LIMIT = 0.5


class CappedError(RuntimeError):
    """More than half of the replicates hit ``max_particles``."""


@dataclass
class CheckResult:
    check: str
    statistic: float
    threshold: float
    passed: bool
    comparison: str = "<"
    details: dict = field(default_factory=dict)
    series: list = field(default_factory=list)
    runtime: float = 0.0

    def to_json(self) -> dict:
        return {"check": self.check, "statistic": self.statistic, "threshold": self.threshold,
                "pass": bool(self.passed), "comparison": self.comparison, "details": self.details}

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag}  {self.check}: statistic={self.statistic:.6g} "
                f"{self.comparison} threshold={self.threshold:.6g}")


def _result(check, statistic, threshold, comparison="<", **details) -> CheckResult:
    ops = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal}
    passed = bool(ops[comparison](statistic, threshold))
    return CheckResult(check, float(statistic), float(threshold), passed, comparison, details)


def _guard_capped(run, name):
    frac = float(np.mean(run.capped))
    if frac > CAPPED_LIMIT:
        raise CappedError(f"{name}: {frac:.0%} of replicates exceeded max_particles")
    return int(np.sum(run.capped))


# --------------------------------------------------------------------------
# suites

def eigen_structure(p, seed, parallel):
    out = []
    for label, cfg in (("inward_ou", INWARD_OU), ("outward_ou", OUTWARD_OU_SUPER)):
        model = model_from_config(cfg)
        pair = phi_pairing(model)
        out.append(_result(f"eigen-structure.pairing[{label}]", abs(pair - 1.0), p["pairing_tol"],
                           "<=", pairing=pair))
        grid = harmonicity_grid(model, dx=p["dx"])
        res = check_harmonicity(model, grid, dx=p["dx"])
        adj = check_adjoint_harmonicity(model, grid, dx=p["dx"])
        out.append(_result(f"eigen-structure.harmonicity[{label}]", res, p["residual_tol"],
                           adjoint_residual=adj))
    return out


def compact_eigenvalue(p, seed, parallel):
    model = make_compact_beta_bbm(p["big_m"], p["half_width"])
    lam = solve_lambda_c_compact(p["big_m"], p["half_width"])
    fd = fd_principal_eigenvalue(model.breeding, length=p["fd_length"], n=p["fd_points"])
    return [_result("compact-eigenvalue", abs(lam - fd), p["tol"], lambda_c=lam, fd_oracle=fd)]


def martingale_mean(p, seed, parallel):
    model = model_from_config(p["model"])
    cfg = SimConfig(dt=p["dt"], t_end=p["t_end"], seed=seed, max_particles=p["max_particles"],
                    snapshot_delta=p.get("snapshot_delta"))
    run = run_replicates(model, p["x"], cfg, p["replicates"], parallel=parallel)
    n_capped = _guard_capped(run, "martingale-mean")
    series = w_series(run)
    w = series.values[:, -1]
    mean, se = mean_and_se(w)
    target = float(model.phi(p["x"])[0])
    res = _result("martingale-mean", abs(mean - target) / se, 3.0, mean=mean, se=se,
                  target=target, replicates=len(w), capped=n_capped)
    res.series = [series]
    return [res]


def tilts(p, seed, parallel):
    model = model_from_config(p["model"])
    paths = sample_paths(model, p["x"], p["t_end"], p["dt"], p["girsanov_n"], batch_rng(seed, 0),
                         measure="original")
    w = girsanov_weight(paths, model)
    mean, se = mean_and_se(w)
    out = [_result("tilts.girsanov", abs(mean - 1.0) / se, 3.0, mean=mean, se=se, n=len(w))]
    # Poisson events at rate 2 beta along original-motion paths.
    rng = batch_rng(seed, 1)
    weights = np.empty(p["poisson_n"])
    chunk = 10_000
    for start in range(0, p["poisson_n"], chunk):
        n = min(chunk, p["poisson_n"] - start)
        batch = sample_paths(model, p["x"], p["t_end"], p["poisson_dt"], n, rng, measure="original")
        for i in range(n):
            rec = batch.record(i)
            events = sample_fission_times(rec, model, rng)
            rate = 2.0 * model.breeding(rec.positions)
            weights[start + i] = poisson_tilt_weight(events, (rec.times, rate), p["t_end"])
    mean, se = mean_and_se(weights)
    out.append(_result("tilts.poisson", abs(mean - 1.0) / se, 3.0, mean=mean, se=se, n=len(weights)))
    return out


def spine_construction(p, seed, parallel):
    model = model_from_config(p["model"])
    cap = p["cap"]
    cfg_t = SimConfig(dt=p["dt"], t_end=p["t_end"], seed=seed, max_particles=p["max_particles"])
    cfg_p = SimConfig(dt=p["dt"], t_end=p["t_end"], seed=seed + 1, max_particles=p["max_particles"])
    tilted = run_tilted(model, p["x"], cfg_t, p["replicates"], parallel=parallel)
    plain = run_replicates(model, p["x"], cfg_p, p["replicates"], parallel=parallel)
    _guard_capped(tilted, "spine-construction")
    _guard_capped(plain, "spine-construction")
    k = len(plain.snapshots) - 1
    a = np.minimum(tilted.counts(k), cap)[~tilted.capped]
    b = (np.minimum(plain.counts(k), cap) * plain.w_phi(k) / float(model.phi(p["x"])[0]))[~plain.capped]
    ma, sa = mean_and_se(a)
    mb, sb = mean_and_se(b)
    se = math.hypot(sa, sb)
    return [_result("spine-construction", abs(ma - mb) / se, 3.0, tilted_mean=ma, tilted_se=sa,
                    weighted_mean=mb, weighted_se=sb)]


def spine_decomposition(p, seed, parallel):
    model = model_from_config(p["model"])
    t = p["t_end"]
    cfg = SimConfig(dt=p["dt"], t_end=t, seed=seed)
    run = run_tilted(model, p["x"], cfg, p["spines"], record_spine=True)
    reals = [realization_from_run(run, r) for r in range(p["spines"])]
    exact = np.array([spine_conditional_expectation(r, model, t) for r in reals])
    draws = nested_conditional_means(reals, model, t, p["dt"], p["redraws"], batch_rng(seed, 1))
    diff = draws.mean(axis=1) - exact
    se = draws.std(axis=1, ddof=1) / math.sqrt(p["redraws"])
    pooled_z = abs(diff.mean()) / (math.sqrt(np.sum(se**2)) / len(se))
    # Spines without fissions have W fixed; allow for rounding there.
    outside = np.abs(diff) > 3.0 * se + 1e-12
    k_out = int(outside.sum())
    p_excess = float(sps.binomtest(k_out, len(se), 2 * sps.norm.sf(3.0), alternative="greater").pvalue)
    return [
        _result("spine-decomposition.pooled", pooled_z, 3.0, spines=len(se), redraws=p["redraws"]),
        _result("spine-decomposition.per-spine", p_excess, 0.01, ">=", spines_outside_3se=k_out,
                max_abs_z=float(np.max(np.abs(diff[se > 1e-12]) / se[se > 1e-12], initial=0.0))),
    ]


def slln_trend(p, seed, parallel):
    model = model_from_config(p["model"])
    g = TestFunction.ball(p["ball_radius"])
    t0, t1 = p["t_early"], p["t_late"]
    prune = auto_prune_radius(model, t1, p["ball_radius"]) if p["prune"] else None
    cfg = SimConfig(dt=p["dt"], t_end=t1, snapshot_times=(t0, t1), seed=seed, prune_radius=prune,
                    max_particles=p["max_particles"])
    run = run_replicates(model, p["x"], cfg, p["replicates"], parallel=parallel)
    n_capped = _guard_capped(run, "slln-trend")
    res = slln_series(run, g)
    d0 = np.abs(res.series.column(t0) - 1.0)
    d1 = np.abs(res.series.column(t1) - 1.0)
    k, n, pval = sign_test_decrease(d0, d1)
    med0, med1 = float(np.median(d0)), float(np.median(d1))
    r1 = _result("slln-trend.sign-test", pval, 0.01, "<", decreases=k, pairs=n,
                 median_early=med0, median_late=med1, excluded_w_zero=res.excluded,
                 capped=n_capped, prune_radius=prune)
    r1.passed = r1.passed and med1 < med0
    r1.series = [res.series]
    r2 = _result("slln-trend.final-median", med1, p["median_tol"], "<")
    return [r1, r2]


def dichotomy(p, seed, parallel):
    B = TestFunction.ball(p["ball_radius"])
    times = p["times"]
    sub = model_from_config(p["subcritical"])
    probe = local_extinction_probe(sub, B, times, p["replicates"], x=p["x"], seed=seed, dt=p["dt"],
                                   parallel=parallel)
    e = probe.empty
    decrease_p = [paired_increase_test(e[:, j + 1], e[:, j])[2] for j in range(len(times) - 1)]
    k, n, inc_p = paired_increase_test(e[:, 0], e[:, -1])
    fr = probe.fractions.tolist()
    out = [
        _result("dichotomy.subcritical-nondecreasing", min(decrease_p), 0.01, ">=", fractions=fr,
                times=list(times), decrease_pvalues=decrease_p),
        _result("dichotomy.subcritical-increase", inc_p, 0.01, "<", fractions=fr, switches_up=k,
                switches=n),
    ]
    sup = model_from_config(p["supercritical"])
    probe2 = local_extinction_probe(sup, B, times, p["replicates"], x=p["x"], seed=seed + 1,
                                    dt=p["dt"], parallel=parallel)
    out.append(_result("dichotomy.supercritical-final", float(probe2.fractions[-1]), 0.9, "<",
                       fractions=probe2.fractions.tolist(), prune_radius=probe2.prune_radius))
    return out


def admissibility(p, seed, parallel):
    model = model_from_config(p["model"])
    B = TestFunction.ball(p["ball_radius"])
    devs = check_iii_star(model, B, p["iii_times"])
    vals = [d for _, d in devs]
    decreasing = all(b < a for a, b in zip(vals, vals[1:]))
    r1 = _result("admissibility.mixing", vals[-1], p["iii_tol"], "<", deviations=devs,
                 strictly_decreasing=decreasing)
    r1.passed = r1.passed and decreasing
    iv = check_iv(model, p["x"], p["delta"], p["n_max"], p["replicates"], seed=seed, dt=p["dt"],
                  parallel=parallel)
    r2 = _result("admissibility.containment", iv.fraction, p["iv_fraction"], ">=",
                 burn_in=iv.burn_in, exceed_fraction=iv.exceed_fraction,
                 expected_outside=iv.expected_outside, capped=iv.n_capped)
    tail = outside_envelope_tail(model, p["x"], p["tail_t"])
    bound = math.exp(-(model.lambda_c + p["tail_eps"]) * p["tail_t"])
    r3 = _result("admissibility.envelope-tail", tail, bound, "<", t=p["tail_t"])
    return [r1, r2, r3]


def lp_terms(p, seed, parallel):
    model = model_from_config(p["model"])
    q = p["p_exp"] - 1.0
    target = phi_pairing(model, lambda y: model.eigen.phi(y) ** q)
    a20, b20 = lemma16_terms(model, p["x"], p["t_mid"], p["p_exp"])
    _, b40 = lemma16_terms(model, p["x"], p["t_late"], p["p_exp"])
    scaled = math.exp(model.lambda_c * q * p["t_mid"]) * a20
    return [
        _result("lp-terms.spine-term", abs(scaled - target), p["a_tol"], "<", scaled_a=scaled,
                target=target),
        _result("lp-terms.sum-plateau", abs(b40 - b20) / b20, p["b_tol"], "<", b_mid=b20, b_late=b40),
    ]


@dataclass(frozen=True)
class Suite:
    run: Callable
    defaults: dict
    summary: str


SUITES = {
    "eigen-structure": Suite(eigen_structure, {"pairing_tol": 1e-6, "residual_tol": 1e-4, "dx": 1e-3},
                             "normalisation and harmonicity of the eigenfunctions"),
    "compact-eigenvalue": Suite(compact_eigenvalue, {"big_m": 1.0, "half_width": 1.0, "tol": 1e-3,
                                                     "fd_length": 20.0, "fd_points": 4000},
                                "matching-equation eigenvalue vs finite differences"),
    "martingale-mean": Suite(martingale_mean, {"model": INWARD_OU, "x": 0.0, "dt": 1e-3, "t_end": 1.0,
                                               "replicates": 2000, "max_particles": 100_000},
                             "mean of W_t equals phi(x)"),
    "tilts": Suite(tilts, {"model": INWARD_OU, "x": 0.0, "dt": 1e-3, "t_end": 1.0, "girsanov_n": 5000,
                           "poisson_n": 100_000, "poisson_dt": 1e-2},
                   "path and Poisson changes of measure have unit mean"),
    "spine-construction": Suite(spine_construction, {"model": INWARD_OU, "x": 0.0, "dt": 1e-3,
                                                     "t_end": 1.0, "replicates": 4000, "cap": 20,
                                                     "max_particles": 100_000},
                                "tilted ensemble vs W-weighted plain ensemble"),
    "spine-decomposition": Suite(spine_decomposition, {"model": INWARD_OU, "x": 0.0, "dt": 1e-3,
                                                       "t_end": 1.0, "spines": 50, "redraws": 200},
                                 "nested re-simulation vs the spine conditional mean"),
    "slln-trend": Suite(slln_trend, {"model": OUTWARD_OU_SUPER, "x": 0.0, "dt": 1e-3, "t_early": 2.0,
                                     "t_late": 6.0, "replicates": 200, "ball_radius": 1.0,
                                     "median_tol": 0.15, "prune": True, "max_particles": 1_000_000},
                        "SLLN ratios approach 1"),
    "dichotomy": Suite(dichotomy, {"subcritical": OUTWARD_OU_SUB, "supercritical": OUTWARD_OU_SUPER, "x": 0.0,
                                   "times": [2.0, 6.0, 10.0], "replicates": 500, "dt": 1e-2,
                                   "ball_radius": 1.0},
                       "local extinction iff lambda_c <= 0"),
    "admissibility": Suite(admissibility, {"model": INWARD_OU, "x": 0.0, "ball_radius": 1.0,
                                       "iii_times": [5.0, 10.0, 20.0], "iii_tol": 0.05, "delta": 0.5,
                                       "n_max": 10, "replicates": 500, "dt": 1e-3,
                                       "iv_fraction": 0.99, "tail_t": 5.0, "tail_eps": 0.05},
                         "mixing and spread conditions"),
    "lp-terms": Suite(lp_terms, {"model": INWARD_OU, "x": 0.0, "p_exp": 2.0, "t_mid": 20.0, "t_late": 40.0,
                               "a_tol": 1e-4, "b_tol": 1e-4},
                     "spine and sum terms of the L^p bound"),
}


def run_suite(name: str, params: dict | None = None, seed: int = 0, parallel: int = 1) -> list:
    """Run a named suite; ``params`` override its defaults."""
    if name not in SUITES:
        raise KeyError(f"unknown check {name!r}")
    suite = SUITES[name]
    merged = {**suite.defaults, **(params or {})}
    start = time.perf_counter()
    results = suite.run(merged, seed, parallel)
    elapsed = time.perf_counter() - start
    for r in results:
        r.runtime = elapsed
    return results
