import json
import math

import numpy as np
import pytest
from scipy import integrate

from conftest import mean_se, within_se
from spinebranch.engine import SimConfig, batch_rng
from spinebranch.models import make_inward_ou_quadratic, product_p_star
from spinebranch.spine import (NotProductPCritical, PathRecord, girsanov_weight, lemma16_terms,
                               nested_conditional_means, poisson_tilt_weight, realization_to_json,
                               resimulate_subtrees, run_tilted, realization_from_run,
                               sample_fission_times, sample_paths, sample_spine_endpoints,
                               sample_spine_path, simulate_tilted, spine_conditional_expectation,
                               spine_expectation)
from spinebranch.stats import TestFunction


def _gauss_phi(model):
    # phi(y) = c exp(g y^2)
    c = float(model.eigen.phi(np.array([[0.0]]))[0])
    g = math.log(float(model.eigen.phi(np.array([[1.0]]))[0]) / c)
    return c, g


def _gauss_power_mean(c, g, q, m, v):
    # E[phi(Y)^q] for Y ~ N(m, v)
    s = 1.0 - 2.0 * q * g * v
    return c**q / math.sqrt(s) * math.exp(q * g * m * m / s)


# --------------------------------------------------------------------------
# spine motion

def test_spine_equilibrium_variance(inward):
    y = sample_spine_endpoints(inward, 0.3, 40.0, 0.5, 50_000, np.random.default_rng(0))[:, 0]
    mean, var = 0.0, 1 / (2 * math.sqrt(2))
    assert abs(y.mean() - mean) < 3 * math.sqrt(var / len(y))
    assert y.var() == pytest.approx(var, rel=3 * math.sqrt(2 / len(y)))


def test_spine_law_matches_paths(outward):
    t = 1.0
    m, v = outward.eigen.spine_law(t, 0.8)
    y = sample_spine_endpoints(outward, 0.8, t, 1e-2, 40_000, np.random.default_rng(1),
                               use_exact_ou=False)[:, 0]
    mean, se = mean_se(y)
    assert within_se(mean, se, float(np.ravel(m)[0]))
    assert y.var() == pytest.approx(float(v), rel=0.03)


def test_path_record_fields(inward):
    path = sample_spine_path(inward, 0.0, 1.0, 0.1, np.random.default_rng(2))
    assert isinstance(path, PathRecord)
    assert path.times.shape == (11,) and path.positions.shape == (11, 1)
    assert path.beta_int[0] == 0.0 and np.all(np.diff(path.beta_int) >= 0)
    assert np.array_equal(path.at(0.5), path.positions[5])
    with pytest.raises(ValueError):
        sample_paths(inward, 0.0, 1.0, 0.1, 2, np.random.default_rng(0), measure="other")


# --------------------------------------------------------------------------
# changes of measure

def test_girsanov_weight_has_unit_mean(inward):
    batch = sample_paths(inward, 0.0, 2.0, 1e-2, 20_000, np.random.default_rng(3),
                         measure="original")
    w = girsanov_weight(batch, inward)
    m, se = mean_se(w)
    assert within_se(m, se, 1.0)
    assert girsanov_weight(batch.record(0), inward) == pytest.approx(w[0])
    with pytest.raises(ValueError):
        girsanov_weight(sample_spine_path(inward, 0.0, 0.1, 0.1, np.random.default_rng(0)), inward)


def test_girsanov_reweights_to_spine_law(inward):
    # Weighted original paths reproduce the spine mean of f(Y_t).
    t = 1.0
    batch = sample_paths(inward, 0.5, t, 1e-2, 40_000, np.random.default_rng(4),
                         measure="original")
    w = girsanov_weight(batch, inward)
    f = batch.positions[:, -1, 0] ** 2
    m, se = mean_se(w * f)
    assert within_se(m, se, spine_expectation(inward, lambda y: y[:, 0] ** 2, t, 0.5))


def test_fission_count_is_poisson(inward):
    rng = np.random.default_rng(5)
    path = sample_spine_path(inward, 1.0, 3.0, 1e-2, rng)
    lam = 2.0 * path.beta_int[-1]
    counts = np.array([len(sample_fission_times(path, inward, rng)) for _ in range(5000)])
    m, se = mean_se(counts)
    assert within_se(m, se, lam)
    assert counts.var() == pytest.approx(lam, rel=0.1)


def test_poisson_tilt_forms_agree():
    events = [0.2, 0.7, 1.5]
    g = lambda s: 1.0 + s  # noqa: E731
    grid = np.linspace(0.0, 2.0, 20_001)
    a = poisson_tilt_weight(events, g, 2.0)
    b = poisson_tilt_weight(events, (grid, 1.0 + grid), 2.0)
    assert a == pytest.approx(8.0 * math.exp(-4.0))
    assert b == pytest.approx(a, rel=1e-8)
    assert poisson_tilt_weight(events, 1.0, 1.0) == pytest.approx(4.0 * math.exp(-1.0))


def test_poisson_tilt_unit_mean():
    rng = np.random.default_rng(6)
    rate, t = 1.5, 2.0
    w = np.array([poisson_tilt_weight(np.cumsum(rng.exponential(1 / rate, 20)), rate, t)
                  for _ in range(50_000)])
    m, se = mean_se(w)
    assert within_se(m, se, 1.0)


# --------------------------------------------------------------------------
# tilted process and the decomposition

def test_simulate_tilted_structure(inward):
    cfg = SimConfig(dt=1e-3, t_end=2.0, seed=7, snapshot_delta=1.0)
    real, traj = simulate_tilted(inward, 0.0, cfg, batch_rng(7, 0))
    assert len(real.fission_times) == len(real.subtrees)
    assert np.all(np.diff(real.fission_times) >= 0)
    assert set(np.unique(real.coins)).issubset({0, 1})
    assert traj.systems[-1].count == 1 + sum(s[1].systems[-1].count for s in real.subtrees)


def test_conditional_expectation_without_fissions(inward):
    cfg = SimConfig(dt=1e-3, t_end=1.0, seed=8, prune_radius=0.0)
    run = run_tilted(inward, 0.0, cfg, 200, record_spine=True)
    for r in range(run.n_replicates):
        real = realization_from_run(run, r)
        if len(real.fission_times) == 0:
            expected = math.exp(-inward.lambda_c) * float(inward.phi(real.spine.positions[-1:])[0])
            assert spine_conditional_expectation(real, inward, 1.0) == pytest.approx(expected)
            break
    else:
        pytest.fail("no fission-free replicate")
    with pytest.raises(ValueError):
        spine_conditional_expectation(real, inward, 5.0)


def test_resimulation_keeps_spine_data(inward):
    cfg = SimConfig(dt=1e-3, t_end=1.0, seed=9)
    real, _ = simulate_tilted(inward, 0.0, cfg, batch_rng(9, 0))
    before = (real.spine.positions.copy(), real.fission_times.copy(), real.fission_positions.copy())
    resimulate_subtrees(real, inward, 1.0, 1e-3, 20, np.random.default_rng(0))
    assert np.array_equal(before[0], real.spine.positions)
    assert np.array_equal(before[1], real.fission_times)
    assert np.array_equal(before[2], real.fission_positions)


def test_nested_means_match_decomposition(inward):
    t = 1.0
    cfg = SimConfig(dt=1e-3, t_end=t, seed=10)
    run = run_tilted(inward, 0.0, cfg, 20, record_spine=True)
    reals = [realization_from_run(run, r) for r in range(20)]
    w = nested_conditional_means(reals, inward, t, 1e-3, 400, np.random.default_rng(10))
    target = np.array([spine_conditional_expectation(r, inward, t) for r in reals])
    se = w.std(axis=1, ddof=1) / math.sqrt(w.shape[1])
    z = (w.mean(axis=1) - target).sum() / math.sqrt((se**2).sum())
    assert abs(z) < 3


def test_tilted_mean_of_phi_pairing(inward):
    # Under the tilt E[W_t] = E[W_t^2] / phi(x) under the original law, >= phi(x).
    cfg = SimConfig(dt=1e-3, t_end=1.0, seed=11)
    run = run_tilted(inward, 0.0, cfg, 500)
    assert np.all(run.counts(len(run.snapshots) - 1) >= 1)
    m, _ = mean_se(run.w_phi(len(run.snapshots) - 1))
    assert m > float(inward.phi([[0.0]])[0])


def test_json_is_decimated(inward):
    cfg = SimConfig(dt=1e-4, t_end=2.0, seed=12, prune_radius=0.0)
    real, _ = simulate_tilted(inward, 0.0, cfg, batch_rng(12, 0))
    doc = realization_to_json(real, max_points=10_000)
    assert len(doc["spine"]["t"]) <= 10_000
    assert doc["spine"]["t"][-1] == pytest.approx(2.0)
    json.dumps(doc)


# --------------------------------------------------------------------------
# L^p terms

@pytest.mark.parametrize("fixture", ["inward", "outward"])
@pytest.mark.parametrize("p_exp", [1.5, 2.0])
def test_lemma16_spine_term_closed_form(request, fixture, p_exp):
    model = request.getfixturevalue(fixture)
    q, t, x = p_exp - 1.0, 1.5, 0.4
    c, gamma = _gauss_phi(model)
    m, v = model.eigen.spine_law(t, x)
    expected = math.exp(-model.lambda_c * q * t) * _gauss_power_mean(c, gamma, q, float(np.ravel(m)[0]), float(v))
    a, b = lemma16_terms(model, x, t, p_exp)
    assert a == pytest.approx(expected, rel=1e-6)
    assert b > 0


def test_lemma16_constant_breeding_sum_term(outward):
    # With constant beta the sum term is an integral of the spine term.
    p_exp, t, x = 2.0, 1.0, 0.2
    b_const = outward.params["b_const"]
    a_of = lambda s: lemma16_terms(outward, x, s, p_exp)[0]  # noqa: E731
    expected, _ = integrate.quad(lambda s: 2.0 * b_const * a_of(s), 0.0, t)
    assert lemma16_terms(outward, x, t, p_exp)[1] == pytest.approx(expected, rel=1e-6)


def test_lemma16_monte_carlo_agrees(inward):
    aq, bq = lemma16_terms(inward, 0.0, 1.0, 2.0, method="quadrature")
    am, bm = lemma16_terms(inward, 0.0, 1.0, 2.0, method="monte_carlo", n_paths=20_000,
                           rng=np.random.default_rng(13))
    assert am == pytest.approx(aq, rel=0.02)
    assert bm == pytest.approx(bq, rel=0.02)


def test_lemma16_p_outside_range(inward):
    for p in (1.0, 2.5):
        with pytest.raises(ValueError):
            lemma16_terms(inward, 0.0, 1.0, p)


def test_not_product_p_critical():
    model = make_inward_ou_quadratic(sigma=1.0, mu=1.45, b_quad=1.0)
    p_star = product_p_star(model)
    assert p_star == pytest.approx(1.567, abs=5e-3)
    lemma16_terms(model, 0.0, 1.0, 1.5)
    with pytest.raises(NotProductPCritical):
        lemma16_terms(model, 0.0, 1.0, 2.0)


def test_lemma16_terms_at_time_zero(inward):
    a, b = lemma16_terms(inward, 0.3, 0.0, 1.5)
    assert a == pytest.approx(float(inward.phi([[0.3]])[0]) ** 0.5)
    assert b == 0.0


def test_spine_expectation_needs_closed_form(compact):
    with pytest.raises(ValueError):
        spine_expectation(compact, lambda y: y[:, 0], 1.0, 0.0)


def test_indicator_under_spine(inward):
    B = TestFunction.ball(0.5)
    y = sample_spine_endpoints(inward, 0.0, 1.0, 1e-2, 20_000, np.random.default_rng(14))
    m, se = mean_se(B(y))
    assert within_se(m, se, spine_expectation(inward, B, 1.0, 0.0))
