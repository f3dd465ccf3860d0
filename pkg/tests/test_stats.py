import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import mean_se, within_se
from spinebranch.engine import ParticleSystem, SimConfig, batch_rng, run_replicates, simulate_weighted
from spinebranch.models import phi_pairing
from spinebranch.stats import (StatSeries, TestFunction, auto_prune_radius, check_iii_star, check_iv,
                               expectation_oracle, expected_outside_mass, g_phi_tilde,
                               growth_classifier, local_extinction_probe, mean_and_se,
                               outside_envelope_tail, paired_increase_test, remark9_ode_mixing,
                               sign_test_decrease, slln_ratio, slln_series, u_series, u_t, w_phi,
                               w_series)


def _system(model, xs, t=0.0):
    pts = np.asarray(xs, dtype=float).reshape(-1, 1)
    return ParticleSystem(time=t, positions=pts, weights=np.ones(len(pts)),
                          ids=np.arange(len(pts)), model=model)


# --------------------------------------------------------------------------
# containers

def test_stat_series_validation_and_csv():
    s = StatSeries([0.0, 0.5], [[1.0, 2.0], [3.0, 4.0]], "W")
    assert s.n_replicates == 2
    assert np.array_equal(s.column(0.5), [2.0, 4.0])
    text = s.to_csv()
    assert text.startswith("label,replicate,t,value\r\n")
    assert "W,1,0.5,4.0\r\n" in text
    with pytest.raises(ValueError):
        StatSeries([0.0], [[math.nan]], "bad")
    with pytest.raises(ValueError):
        StatSeries([0.0, 1.0], [[1.0]], "bad")


def test_test_function_kinds(inward):
    y = np.array([[0.0], [0.9], [1.5]])
    ind = TestFunction.ball(1.0)
    bump = TestFunction.ball(1.0, kind="bump")
    phir = TestFunction.ball(1.0, kind="phi-restricted", model=inward)
    assert np.array_equal(ind(y), [1.0, 1.0, 0.0])
    assert bump(y)[0] == pytest.approx(1.0) and 0 < bump(y)[1] < 1 and bump(y)[2] == 0
    assert np.allclose(phir(y), [*inward.phi(y[:2]), 0.0])
    assert ind.is_indicator_type and phir.is_indicator_type and not bump.is_indicator_type
    assert ind.interval() == (-1.0, 1.0)
    with pytest.raises(ValueError):
        TestFunction("square", 0.0, 1.0)
    with pytest.raises(ValueError):
        TestFunction("indicator-ball", 0.0, 0.0)
    with pytest.raises(ValueError):
        TestFunction("phi-restricted", 0.0, 1.0)


# --------------------------------------------------------------------------
# single-system functionals

def test_u_equals_w_when_ball_covers_support(inward):
    sys = _system(inward, [-0.5, 0.1, 0.7], t=1.0)
    assert u_t(sys, inward, TestFunction.ball(10.0)) == pytest.approx(w_phi(sys, inward))
    assert u_t(sys, inward, TestFunction.ball(0.1, center=5.0)) == 0.0
    with pytest.raises(ValueError):
        u_t(sys, inward, TestFunction.ball(1.0, kind="bump"))


def test_weighted_and_plain_views_agree(inward):
    wt = simulate_weighted(inward, [0.2], SimConfig(dt=1e-3, t_end=1.0, seed=3), batch_rng(3, 0))
    B = TestFunction.ball(0.5)
    for ws, ps in zip(wt.weighted.systems, wt.plain.systems):
        assert w_phi(ws, inward) == pytest.approx(w_phi(ps, inward), rel=1e-10)
        assert u_t(ws, inward, B) == pytest.approx(u_t(ps, inward, B), rel=1e-10, abs=1e-300)


def test_slln_ratio_self_normalised(inward):
    sys = _system(inward, [-0.3, 0.4], t=2.0)
    g = TestFunction.ball(30.0, kind="phi-restricted", model=inward)
    w = w_phi(sys, inward)
    assert slln_ratio(sys, inward, g, w) == pytest.approx(1.0, rel=1e-8)
    with pytest.raises(ValueError):
        slln_ratio(sys, inward, g, 0.0)


def test_slln_numerator_additive_over_partition(inward):
    sys = _system(inward, [-0.8, -0.2, 0.3, 0.9], t=1.0)
    whole = TestFunction.ball(1.0)
    left = TestFunction.ball(0.5, center=-0.5)
    right = TestFunction.ball(0.5, center=0.5)
    num = lambda g: slln_ratio(sys, inward, g, 1.0) * g_phi_tilde(inward, g)  # noqa: E731
    assert num(whole) == pytest.approx(num(left) + num(right))
    assert g_phi_tilde(inward, whole) == pytest.approx(
        g_phi_tilde(inward, left) + g_phi_tilde(inward, right), rel=1e-8)


# --------------------------------------------------------------------------
# ensemble series

def test_series_shapes_and_lattice(inward):
    cfg = SimConfig(dt=1e-3, t_end=1.0, seed=4, snapshot_delta=0.25)
    run = run_replicates(inward, 0.0, cfg, 50)
    ws = w_series(run)
    assert ws.values.shape == (50, 5)
    assert np.allclose(ws.times, [0.0, 0.25, 0.5, 0.75, 1.0])
    for t in ws.times:
        assert run.times[run.index_of(t)] == pytest.approx(t)
    us = u_series(run, TestFunction.ball(50.0))
    assert np.allclose(us.values, ws.values)
    res = slln_series(run, TestFunction.ball(1.0))
    assert res.series.n_replicates + res.excluded == 50
    assert np.all(res.w_limit > 0)


def test_mean_u_matches_oracle(outward):
    t = 3.0
    B = TestFunction.ball(1.0, kind="phi-restricted", model=outward)
    cfg = SimConfig(dt=1e-2, t_end=t, seed=5, prune_radius=auto_prune_radius(outward, t, 1.0))
    run = run_replicates(outward, 0.0, cfg, 1000)
    u = u_series(run, TestFunction.ball(1.0)).column(t)
    m, se = mean_se(u)
    assert within_se(m, se, math.exp(-outward.lambda_c * t) * expectation_oracle(outward, B, 0.0, t))


# --------------------------------------------------------------------------
# quadrature oracles

def test_oracle_of_phi_is_eigen_growth(inward):
    for t in (0.5, 2.0):
        val = expectation_oracle(inward, inward.eigen.phi, 0.3, t)
        assert val == pytest.approx(math.exp(inward.lambda_c * t) * float(inward.phi([[0.3]])[0]),
                                    rel=1e-8)


def test_oracle_long_time_limit(inward):
    B = TestFunction.ball(1.0)
    t = 20.0
    val = math.exp(-inward.lambda_c * t) * expectation_oracle(inward, B, 0.3, t)
    assert val == pytest.approx(float(inward.phi([[0.3]])[0]) * g_phi_tilde(inward, B), rel=1e-6)


def test_outside_tail_vanishes_for_huge_radius(inward):
    assert outside_envelope_tail(inward, 0.0, 2.0, radius=50.0) < 1e-12
    full = outside_envelope_tail(inward, 0.0, 2.0, radius=0.0)
    # With a zero radius the tail is the whole spine mean of 1/phi.
    assert full == pytest.approx(expectation_oracle(inward, lambda y: np.ones(len(y)), 0.0, 2.0)
                                 * math.exp(-inward.lambda_c * 2.0)
                                 / float(inward.phi([[0.0]])[0]), rel=1e-6)
    assert expected_outside_mass(inward, 0.0, 8.0) < expected_outside_mass(inward, 0.0, 2.0)


def test_growth_classifier(inward, outward, compact):
    assert growth_classifier(inward) == "local-equals-global"
    assert growth_classifier(outward) == "global-exceeds-local"
    assert growth_classifier(compact) == "local-equals-global"
    bumped = replace(compact, eigen=replace(
        compact.eigen, phi_tilde=lambda y: np.maximum(1.0 - np.sum(y * y, axis=-1), 0.0)))
    assert growth_classifier(bumped) == "local-equals-global"


def test_growth_classifier_isotropic_3d():
    from spinebranch.models import make_inward_ou_quadratic
    assert growth_classifier(make_inward_ou_quadratic(dim=3)) == "local-equals-global"


# --------------------------------------------------------------------------
# spine flow hitting time

def test_ode_mixing_closed_form(inward):
    alpha = inward.eigen.spine_ou_rate
    assert remark9_ode_mixing(inward, math.e) == pytest.approx(1.0 / alpha, rel=1e-6)
    assert remark9_ode_mixing(inward, -math.e**2) == pytest.approx(2.0 / alpha, rel=1e-6)
    assert remark9_ode_mixing(inward, 0.5) == 0.0


def test_ode_mixing_vs_mixing_time(inward, compact):
    eps = inward.params["eps"]
    for t in (5.0, 20.0):
        assert float(inward.mixing_time(t)) / remark9_ode_mixing(inward, t, h=1e-3) == pytest.approx(1 + eps,
                                                                                          rel=1e-4)
    assert remark9_ode_mixing(compact, 20.0, h=1e-3) < float(compact.mixing_time(20.0))


def test_ode_mixing_no_hit(inward):
    assert remark9_ode_mixing(inward, 100.0, horizon=0.01) == math.inf


# --------------------------------------------------------------------------
# admissibility checks

def test_check_iii_star_decreasing(inward):
    B = TestFunction.ball(1.0)
    out = check_iii_star(inward, B, [2.0, 4.0, 8.0])
    devs = [d for _, d in out]
    assert devs[0] > devs[1] > devs[2]


def test_check_iii_star_longer_zeta_shrinks(inward):
    B = TestFunction.ball(1.0)
    base = check_iii_star(inward, B, [4.0])[0][1]
    longer = check_iii_star(inward, B, [4.0], zeta_scale=10.0)[0][1]
    assert longer < 0.1 * base


@pytest.mark.slow
def test_check_iii_star_monte_carlo(compact):
    B = TestFunction.ball(1.0)
    out = check_iii_star(compact, B, [2.0, 8.0], n_paths=40_000, max_paths=40_000,
                         x_per_t=lambda t: np.array([0.0, t]), return_se=True)
    (_, d2, se2), (_, d8, se8) = out
    assert d8 < d2
    assert se2 > 0 and se8 > 0


def test_check_iv_zero_envelope_fails_everything(inward):
    res = check_iv(inward, 0.0, 0.5, 4, 20, spread_override=lambda t: 0.0, dt=1e-2, seed=1)
    assert res.fraction == 0.0
    assert res.n_valid == 20 and res.burn_in == 2


def test_check_iv_envelope_tail(inward):
    res = check_iv(inward, 0.0, 1.0, 6, 20, dt=1e-2, seed=2)
    assert res.tail_sum < 1.0
    assert np.all(np.diff(res.expected_outside[3:]) < 0)
    assert 0.0 <= res.fraction <= 1.0


def test_auto_prune_radius(inward, outward):
    assert auto_prune_radius(inward, 5.0, 1.0) is None
    r = auto_prune_radius(outward, 5.0, 1.0)
    assert r > 1.0
    assert auto_prune_radius(outward, 10.0, 1.0) > r


def test_extinction_probe_empty_ball(outward_sub):
    probe = local_extinction_probe(outward_sub, None, [1.0, 2.0], 10)
    assert np.all(probe.fractions == 1.0)


def test_extinction_probe_subcritical_increases(outward_sub):
    B = TestFunction.ball(1.0)
    probe = local_extinction_probe(outward_sub, B, [1.0, 4.0], 400, seed=7)
    assert probe.fractions[1] >= probe.fractions[0]
    assert probe.prune_radius is not None and probe.n_capped == 0


# --------------------------------------------------------------------------
# calibrated tests

def test_sign_test_decrease():
    rng = np.random.default_rng(8)
    before = rng.normal(size=200) + 1.0
    k, n, p = sign_test_decrease(before, before - 0.5 + 0.1 * rng.normal(size=200))
    assert n == 200 and p < 1e-10
    assert sign_test_decrease(before, before) == (0, 0, 1.0)


def test_paired_increase_test():
    earlier = np.array([False] * 50 + [True] * 50)
    later = np.array([True] * 40 + [False] * 10 + [True] * 50)
    up, n, p = paired_increase_test(earlier, later)
    assert (up, n) == (40, 40) and p < 1e-10
    assert paired_increase_test(later, later)[2] == 1.0


def test_mean_and_se():
    m, se = mean_and_se([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(1.0 / math.sqrt(3))


def test_pairing_normalisation(inward, outward, compact):
    for model in (inward, outward, compact):
        assert phi_pairing(model) == pytest.approx(1.0, rel=1e-8)
