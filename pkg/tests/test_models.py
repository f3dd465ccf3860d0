import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinebranch.models import (as_points, check_adjoint_harmonicity, check_harmonicity,
                                compact_matching_function, fd_principal_eigenvalue,
                                harmonicity_grid, inward_ou_constants, make_compact_beta_bbm,
                                make_inward_ou_quadratic, make_outward_ou_constant,
                                model_from_config, model_to_config, phi_pairing, product_p_star,
                                solve_lambda_c_compact, spine_drift_consistency, validate_model)


def test_inward_constants(inward):
    c = inward_ou_constants(inward)
    assert c["gamma_minus"] == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    assert c["gamma_plus"] == pytest.approx(1 + 1 / math.sqrt(2), abs=1e-12)
    assert c["alpha"] == pytest.approx(math.sqrt(2), abs=1e-12)
    assert inward.lambda_c == pytest.approx(1 - 1 / math.sqrt(2) + 0.5, abs=1e-12)
    assert inward.phi([0.0])[0] == pytest.approx(0.5 ** 0.125, abs=1e-12)


def test_inward_normalisation_and_harmonicity(inward):
    assert abs(phi_pairing(inward) - 1.0) < 1e-6
    grid = harmonicity_grid(inward)
    assert check_harmonicity(inward, grid, dx=1e-3) < 1e-4
    assert check_adjoint_harmonicity(inward, grid, dx=1e-3) < 1e-4


def test_outward_normalisation_and_harmonicity(outward):
    assert outward.lambda_c == pytest.approx(0.5)
    assert abs(phi_pairing(outward) - 1.0) < 1e-6
    grid = harmonicity_grid(outward)
    assert check_harmonicity(outward, grid, dx=1e-3) < 1e-4
    assert np.all(outward.phi_tilde(grid) == 1.0)


def test_outward_strong_drift_needs_finer_step(outward_sub):
    # Sharper phi: the second-order stencil error scales with dx^2.
    grid = harmonicity_grid(outward_sub, dx=1e-4)
    assert outward_sub.lambda_c == pytest.approx(-1.0)
    assert check_harmonicity(outward_sub, grid, dx=1e-4) < 1e-4
    assert outward_sub.local_extinction_expected


def test_compact_eigenvalue_against_fd(compact):
    start = time.perf_counter()
    lam = solve_lambda_c_compact(1.0, 1.0)
    fd = fd_principal_eigenvalue(compact.breeding, length=20.0, n=4000)
    assert time.perf_counter() - start < 10
    assert abs(lam - fd) < 1e-3
    assert 0 < lam < 1


def test_compact_matching_and_eigenfunctions(compact):
    assert abs(float(compact_matching_function(compact.lambda_c, 1.0, 1.0))) < 1e-10
    assert abs(phi_pairing(compact) - 1.0) < 1e-8
    grid = harmonicity_grid(compact, low=-4, high=4)
    assert check_harmonicity(compact, grid, dx=1e-3) < 1e-4
    # phi is continuous at the edge of the breeding region.
    eps = 1e-9
    assert compact.phi([1 - eps])[0] == pytest.approx(compact.phi([1 + eps])[0], rel=1e-6)


def test_compact_weak_breeding_still_supercritical():
    # In one dimension any compact positive breeding yields a bound state.
    lam = solve_lambda_c_compact(1e-3, 0.1)
    assert 0 < lam < 1e-3
    # Weak-coupling limit: lambda ~ (integral of the breeding rate)^2 / 2.
    assert lam == pytest.approx(2 * (1e-3 * 0.1) ** 2, rel=1e-2)


def test_compact_rejects_bad_input():
    with pytest.raises(ValueError):
        solve_lambda_c_compact(-1.0, 1.0)


@pytest.mark.parametrize("factory,kwargs", [
    (make_inward_ou_quadratic, dict(mu=1.0, b_quad=1.0)),
    (make_inward_ou_quadratic, dict(sigma=-1.0)),
    (make_outward_ou_constant, dict(dim=2)),
    (make_outward_ou_constant, dict(mu=0.0)),
    (make_compact_beta_bbm, dict(big_m=0.0)),
])
def test_invalid_parameters(factory, kwargs):
    with pytest.raises(ValueError):
        factory(**kwargs)


def test_spine_drift_matches_h_transform(inward, outward, compact):
    for model in (inward, outward):
        assert spine_drift_consistency(model, np.linspace(-3, 3, 61)[:, None]) < 1e-6
    grid = harmonicity_grid(compact, low=-4, high=4, n=161)
    assert spine_drift_consistency(compact, grid) < 1e-5


def test_validate_model(inward, outward, compact):
    for model in (inward, outward, compact):
        info = validate_model(model)
        assert info["breeding_nonnegative"] and info["breeding_nontrivial"]
        assert info["diffusion_positive_definite"]
        assert info["zeta_of_spread_ok"]


def test_config_round_trip(inward, outward, compact):
    for model in (inward, outward, compact):
        again = model_from_config(model_to_config(model))
        assert again.kind == model.kind
        assert again.lambda_c == pytest.approx(model.lambda_c, rel=1e-14)
    with pytest.raises(ValueError):
        model_from_config({"kind": "nope"})


def test_product_p_threshold(inward, outward, compact):
    assert product_p_star(inward) == pytest.approx((2 + math.sqrt(2)) / (2 - math.sqrt(2)))
    assert product_p_star(outward) == math.inf
    assert product_p_star(compact) == math.inf


def test_multidimensional_inward():
    m = make_inward_ou_quadratic(dim=3)
    c = inward_ou_constants(m)
    assert m.lambda_c == pytest.approx(3 * c["gamma_minus"] + 0.5)
    x = np.random.default_rng(1).normal(size=(50, 3))
    assert check_harmonicity(m, x, dx=1e-3) < 1e-4
    assert np.allclose(m.phi(x), c["c_minus"] * np.exp(c["gamma_minus"] * (x**2).sum(1)))


def test_as_points_shapes():
    assert as_points(0.0, 1).shape == (1, 1)
    assert as_points([0.0, 1.0], 2).shape == (1, 2)
    assert as_points(np.zeros((4, 2)), 2).shape == (4, 2)


@settings(max_examples=15, deadline=None)
@given(sigma=st.floats(0.5, 2.0), ratio=st.floats(1.2, 4.0), b=st.floats(0.1, 2.0),
       beta0=st.floats(0.1, 2.0))
def test_inward_family_invariants(sigma, ratio, b, beta0):
    mu = ratio * sigma * math.sqrt(2 * b)
    m = make_inward_ou_quadratic(sigma, mu, b, beta0)
    assert abs(phi_pairing(m) - 1.0) < 1e-6
    grid = np.linspace(-1.5, 1.5, 31)[:, None]
    assert np.all(m.phi(grid) > 0) and np.all(m.phi_tilde(grid) > 0)
    scale = float(np.max(m.phi(grid)))
    assert check_harmonicity(m, grid, dx=1e-4) < 1e-4 * max(1.0, scale) * mu
