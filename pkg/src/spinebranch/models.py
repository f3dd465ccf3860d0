"""Branching-diffusion models and their principal eigen-structure.

A :class:`Model` bundles the motion coefficients (drift, diffusion matrix),
the breeding rate and the positive harmonic pair (phi, phi_tilde) of
``L + beta - lambda_c``.  All coefficient functions are vectorised: they take
an ``(n, dim)`` array of positions and return ``(n,)`` scalars, ``(n, dim)``
vectors or ``(n, dim, dim)`` matrices.

Three models are built in:

* :func:`make_inward_ou_quadratic` -- inward OU motion with breeding
  ``b |x|^2 + beta0``,
* :func:`make_outward_ou_constant` -- outward OU motion with constant breeding,
* :func:`make_compact_beta_bbm` -- Brownian motion with breeding
  ``M * 1{|x| <= h}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize

from ._quad import integrate_line

Array = np.ndarray

__all__ = [
    "DomainSpec",
    "EigenTriple",
    "Model",
    "make_inward_ou_quadratic",
    "make_outward_ou_constant",
    "make_compact_beta_bbm",
    "solve_lambda_c_compact",
    "compact_matching_function",
    "fd_principal_eigenvalue",
    "check_harmonicity",
    "check_adjoint_harmonicity",
    "harmonicity_grid",
    "phi_pairing",
    "spine_drift_consistency",
    "validate_model",
    "MODEL_KINDS",
    "model_from_config",
    "model_to_config",
]


def as_points(x, dim: int) -> Array:
    """Coerce ``x`` into an ``(n, dim)`` float array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim <= 1:
        arr = arr.reshape(-1, dim)
    if arr.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class DomainSpec:
    """Spatial domain; particles leaving a bounded domain are killed."""

    kind: str = "whole"  # "whole" | "interval" | "ball"
    low: float = -math.inf
    high: float = math.inf
    center: tuple = ()
    radius: float = math.inf

    def contains(self, points: Array) -> Array:
        points = np.asarray(points, dtype=float)
        if self.kind == "whole":
            return np.all(np.isfinite(points), axis=-1)
        if self.kind == "interval":
            x = points[..., 0]
            return (x > self.low) & (x < self.high)
        if self.kind == "ball":
            c = np.asarray(self.center, dtype=float)
            return np.linalg.norm(points - c, axis=-1) < self.radius
        raise ValueError(f"unknown domain kind {self.kind!r}")

    @property
    def bounded(self) -> bool:
        return self.kind != "whole"


@dataclass(frozen=True)
class EigenTriple:
    """Principal eigenvalue, harmonic phi, adjoint harmonic phi_tilde.

    ``spine_law(t, x)`` returns ``(mean, var)`` of the Gaussian spine
    transition when one exists in closed form; ``spine_density`` is then the
    corresponding density ``p(t, x, y)``.
    """

    lambda_c: float
    phi: Callable[[Array], Array]
    phi_tilde: Callable[[Array], Array]
    spine_drift: Callable[[Array], Array]
    spine_density: Optional[Callable] = None
    spine_law: Optional[Callable] = None
    spine_ou_rate: Optional[float] = None


@dataclass(frozen=True)
class Model:
    dim: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    breeding: Callable[[Array], Array]
    domain: DomainSpec
    eigen: EigenTriple
    spread_bound: Callable
    mixing_time: Callable
    beta_bounded: bool
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    # Fast paths: drift == -ou_rate * x and diffusion == noise_sigma**2 * I.
    ou_rate: Optional[float] = None
    noise_sigma: Optional[float] = None
    singular_points: tuple = ()
    beta_sup: float = math.inf

    @property
    def lambda_c(self) -> float:
        return self.eigen.lambda_c

    @property
    def local_extinction_expected(self) -> bool:
        """Local extinction holds iff lambda_c <= 0."""
        return self.eigen.lambda_c <= 0

    def phi(self, x) -> Array:
        return self.eigen.phi(as_points(x, self.dim))

    def phi_tilde(self, x) -> Array:
        return self.eigen.phi_tilde(as_points(x, self.dim))

    def beta(self, x) -> Array:
        return self.breeding(as_points(x, self.dim))


def _scalar_diffusion(sigma: float, dim: int):
    eye = np.eye(dim) * sigma**2

    def diffusion(x: Array) -> Array:
        return np.broadcast_to(eye, (len(x), dim, dim))

    return diffusion


def _ou_law(rate: float, sigma: float):
    """Gaussian transition (mean, var) of dY = -rate Y dt + sigma dW."""

    def law(t, x):
        x = np.asarray(x, dtype=float)
        if rate == 0.0:
            var = sigma**2 * t
        else:
            var = sigma**2 * (-np.expm1(-2.0 * rate * t)) / (2.0 * rate)
        return x * np.exp(-rate * t), var

    return law


def _gaussian_density(law, dim: int):
    def density(t, x, y):
        mean, var = law(t, np.asarray(x, dtype=float).reshape(dim))
        y = np.asarray(y, dtype=float).reshape(-1, dim)
        sq = np.sum((y - mean) ** 2, axis=-1)
        return (2.0 * np.pi * var) ** (-dim / 2) * np.exp(-sq / (2.0 * var))

    return density


def _log_or_zero(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(x > 1.0, np.log(np.maximum(x, 1.0)), 0.0)


def make_inward_ou_quadratic(
    sigma: float = 1.0,
    mu: float = 2.0,
    b_quad: float = 1.0,
    beta0: float = 0.5,
    dim: int = 1,
    *,
    eps: float = 0.1,
    spread_rate: Optional[float] = None,
) -> Model:
    """Inward OU motion ``1/2 sigma^2 Lap - mu x.grad`` with breeding ``b |x|^2 + beta0``.

    Requires ``mu > sigma * sqrt(2 b_quad)``; below that drift the quadratic
    breeding is not balanced and the eigen-structure used here does not exist.

    ``spread_rate`` is the rate ``lam > lambda_c`` in the envelope
    ``sqrt(lam t / gamma_plus)`` (default ``1.1 * lambda_c``).
    """
    if min(sigma, mu, beta0) <= 0 or b_quad < 0 or dim < 1:
        raise ValueError("sigma, mu, beta0 must be positive, b_quad >= 0, dim >= 1")
    if mu <= sigma * math.sqrt(2.0 * b_quad):
        raise ValueError(
            f"mu={mu} must exceed sigma*sqrt(2*b_quad)={sigma * math.sqrt(2 * b_quad):.6g}"
        )
    disc = math.sqrt(mu**2 - 2.0 * b_quad * sigma**2)
    gamma_minus = (mu - disc) / (2.0 * sigma**2)
    gamma_plus = (mu + disc) / (2.0 * sigma**2)
    alpha = disc
    # Each coordinate contributes sigma^2 gamma_minus to (L + beta) phi / phi.
    lambda_c = dim * sigma**2 * gamma_minus + beta0
    c_minus = (1.0 - 2.0 * b_quad * sigma**2 / mu**2) ** (dim / 8.0)
    c_plus = c_minus * (mu / (math.pi * sigma**2)) ** (dim / 2.0)
    lam = 1.1 * lambda_c if spread_rate is None else float(spread_rate)
    if lam <= lambda_c:
        raise ValueError("spread_rate must exceed lambda_c")

    def phi(x):
        return c_minus * np.exp(gamma_minus * np.sum(x * x, axis=-1))

    def phi_tilde(x):
        return c_plus * np.exp(-gamma_plus * np.sum(x * x, axis=-1))

    def breeding(x):
        return b_quad * np.sum(x * x, axis=-1) + beta0

    law = _ou_law(alpha, sigma)

    def spread_bound(t):
        return np.sqrt(lam * np.maximum(t, 0.0) / gamma_plus)

    def mixing_time(x):
        return (1.0 + eps) / alpha * _log_or_zero(x)

    eigen = EigenTriple(
        lambda_c=lambda_c,
        phi=phi,
        phi_tilde=phi_tilde,
        spine_drift=lambda x: -alpha * x,
        spine_density=_gaussian_density(law, dim),
        spine_law=law,
        spine_ou_rate=alpha,
    )
    return Model(
        dim=dim,
        drift=lambda x: -mu * x,
        diffusion=_scalar_diffusion(sigma, dim),
        breeding=breeding,
        domain=DomainSpec(),
        eigen=eigen,
        spread_bound=spread_bound,
        mixing_time=mixing_time,
        beta_bounded=b_quad == 0,
        kind="inward_ou_quadratic",
        params=dict(sigma=sigma, mu=mu, b_quad=b_quad, beta0=beta0, dim=dim,
                    eps=eps, spread_rate=lam),
        ou_rate=mu,
        noise_sigma=sigma,
        beta_sup=beta0 if b_quad == 0 else math.inf,
    )


def inward_ou_constants(model: Model) -> dict:
    """gamma_minus, gamma_plus, alpha, c_minus, c_plus of an inward-OU model."""
    p = model.params
    sigma, mu, b, d = p["sigma"], p["mu"], p["b_quad"], p["dim"]
    disc = math.sqrt(mu**2 - 2.0 * b * sigma**2)
    c_minus = (1.0 - 2.0 * b * sigma**2 / mu**2) ** (d / 8.0)
    return dict(
        gamma_minus=(mu - disc) / (2 * sigma**2),
        gamma_plus=(mu + disc) / (2 * sigma**2),
        alpha=disc,
        c_minus=c_minus,
        c_plus=c_minus * (mu / (math.pi * sigma**2)) ** (d / 2.0),
    )


def make_outward_ou_constant(
    sigma: float = 1.0,
    mu: float = 0.5,
    b_const: float = 1.0,
    dim: int = 1,
    *,
    eps: float = 0.1,
    delta: float = 0.1,
) -> Model:
    """Outward OU motion ``1/2 sigma^2 Lap + mu x.grad`` with constant breeding ``b``.

    ``lambda_c = b - mu`` may have either sign; ``lambda_c <= 0`` models are
    locally extinct.  Only ``dim == 1`` is supported.
    """
    if dim != 1:
        raise ValueError("outward OU model is only defined for dim == 1")
    if min(sigma, mu, b_const) <= 0:
        raise ValueError("sigma, mu, b_const must be positive")
    lambda_c = b_const - mu
    kappa = mu / sigma**2
    norm = math.sqrt(mu / (math.pi * sigma**2))

    def phi(x):
        return norm * np.exp(-kappa * np.sum(x * x, axis=-1))

    def phi_tilde(x):
        return np.ones(len(x))

    def spread_bound(t):
        return np.exp((1.0 + delta) * mu * np.asarray(t, dtype=float))

    def mixing_time(x):
        return (1.0 + eps) / mu * _log_or_zero(x)

    law = _ou_law(mu, sigma)
    eigen = EigenTriple(
        lambda_c=lambda_c,
        phi=phi,
        phi_tilde=phi_tilde,
        spine_drift=lambda x: -mu * x,
        spine_density=_gaussian_density(law, 1),
        spine_law=law,
        spine_ou_rate=mu,
    )
    return Model(
        dim=1,
        drift=lambda x: mu * x,
        diffusion=_scalar_diffusion(sigma, 1),
        breeding=lambda x: np.full(len(x), float(b_const)),
        domain=DomainSpec(),
        eigen=eigen,
        spread_bound=spread_bound,
        mixing_time=mixing_time,
        beta_bounded=True,
        kind="outward_ou_constant",
        params=dict(sigma=sigma, mu=mu, b_const=b_const, dim=1, eps=eps, delta=delta),
        ou_rate=-mu,
        noise_sigma=sigma,
        beta_sup=float(b_const),
    )


def compact_matching_function(lam, big_m: float, half_width: float):
    """Even-mode matching residual ``sqrt(M - l) tan(sqrt(2(M - l)) h) - sqrt(l)``."""
    lam = np.asarray(lam, dtype=float)
    k = np.sqrt(2.0 * (big_m - lam))
    return np.sqrt(big_m - lam) * np.tan(k * half_width) - np.sqrt(lam)


def solve_lambda_c_compact(big_m: float, half_width: float, tol: float = 1e-12) -> float:
    """Principal eigenvalue of ``1/2 d^2/dx^2 + M 1{|x|<=h}`` on the line.

    The ground state is ``cos(kx)`` inside with ``k h < pi/2``, which confines
    the root to ``(max(0, M - pi^2/(8 h^2)), M)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if big_m <= 0 or half_width <= 0:
        raise ValueError("big_m and half_width must be positive")
    lo = max(0.0, big_m - (math.pi / (2.0 * half_width)) ** 2 / 2.0)
    hi = big_m
    span = hi - lo
    a, b = lo + 1e-15 * max(1.0, span), hi - 1e-15 * max(1.0, big_m)
    fa = compact_matching_function(a, big_m, half_width)
    fb = compact_matching_function(b, big_m, half_width)
    if not (np.isfinite(fa) and np.isfinite(fb)) or fa * fb > 0:
        raise ValueError("no principal eigenvalue bracket")
    root = optimize.brentq(
        compact_matching_function, a, b, args=(big_m, half_width), xtol=tol, rtol=4 * np.finfo(float).eps
    )
    return float(root)


def fd_principal_eigenvalue(breeding: Callable[[Array], Array], length: float = 20.0,
                            n: int = 4000, diff: float = 1.0) -> float:
    """Top eigenvalue of the Dirichlet finite-difference ``diff/2 d^2/dx^2 + beta`` on ``[-length, length]``."""
    x = np.linspace(-length, length, n)
    h = x[1] - x[0]
    main = -diff / h**2 + breeding(x[:, None])
    off = np.full(n - 1, 0.5 * diff / h**2)
    vals = linalg.eigh_tridiagonal(main, off, eigvals_only=True, select="i",
                                   select_range=(n - 1, n - 1))
    return float(vals[0])


def make_compact_beta_bbm(big_m: float = 1.0, half_width: float = 1.0, *,
                          eps: float = 0.1) -> Model:
    """Brownian motion (``1/2 Lap``) with breeding ``M`` on ``[-h, h]`` and 0 outside."""
    if big_m <= 0 or half_width <= 0:
        raise ValueError("big_m and half_width must be positive")
    lambda_c = solve_lambda_c_compact(big_m, half_width)
    k = math.sqrt(2.0 * (big_m - lambda_c))
    s = math.sqrt(2.0 * lambda_c)
    h = half_width
    outer = math.cos(k * h) * math.exp(s * h)
    norm2 = h + math.sin(2 * k * h) / (2 * k) + math.cos(k * h) ** 2 / s

    def phi(x):
        r = np.abs(x[..., 0])
        inside = r <= h
        out = np.empty_like(r)
        out[inside] = np.cos(k * r[inside])
        out[~inside] = outer * np.exp(-s * r[~inside])
        return out

    def phi_tilde(x):
        return phi(x) / norm2

    def spine_drift(x):
        y = x[..., 0]
        r = np.abs(y)
        out = np.where(r <= h, -k * np.tan(k * np.clip(y, -h, h)), -s * np.sign(y))
        return out[..., None]

    def breeding(x):
        return np.where(np.abs(x[..., 0]) <= h, float(big_m), 0.0)

    def spread_bound(t):
        return math.sqrt(2.0 * big_m) * np.asarray(t, dtype=float)

    def mixing_time(t):
        return np.maximum(np.asarray(t, dtype=float), 0.0) * (1.0 + 2.0 * eps) / s

    eigen = EigenTriple(lambda_c=lambda_c, phi=phi, phi_tilde=phi_tilde, spine_drift=spine_drift)
    return Model(
        dim=1,
        drift=lambda x: np.zeros_like(x),
        diffusion=_scalar_diffusion(1.0, 1),
        breeding=breeding,
        domain=DomainSpec(),
        eigen=eigen,
        spread_bound=spread_bound,
        mixing_time=mixing_time,
        beta_bounded=True,
        kind="compact_beta_bbm",
        params=dict(big_m=big_m, half_width=half_width, eps=eps),
        ou_rate=0.0,
        noise_sigma=1.0,
        singular_points=(-h, h),
        beta_sup=float(big_m),
    )


# --------------------------------------------------------------------------
# diagnostics

def _d1(f, x, e, dx, order):
    if order == 2:
        return (f(x + e) - f(x - e)) / (2 * dx)
    return (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) / (12 * dx)


def _d2(f, x, e, dx, order):
    if order == 2:
        return (f(x + e) - 2 * f(x) + f(x - e)) / dx**2
    return (-f(x + 2 * e) + 16 * f(x + e) - 30 * f(x) + 16 * f(x - e) - f(x - 2 * e)) / (12 * dx**2)


def _fd_operator(model: Model, f: Callable[[Array], Array], x: Array, dx: float,
                 adjoint: bool = False, order: int = 2) -> Array:
    """Central-difference evaluation of ``L f`` (or the formal adjoint ``L* f``)."""
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    n, d = x.shape
    eye = np.eye(d) * dx
    a0 = model.diffusion(x)
    out = np.zeros(n)
    # 1/2 sum_ij d_i (a_ij d_j f), expanded with FD derivatives of a.
    for i in range(d):
        for j in range(d):
            if i == j:
                dij = _d2(f, x, eye[i], dx, order)
            else:
                dij = (f(x + eye[i] + eye[j]) - f(x + eye[i] - eye[j])
                       - f(x - eye[i] + eye[j]) + f(x - eye[i] - eye[j])) / (4 * dx**2)
            dj = _d1(f, x, eye[j], dx, order)
            da = _d1(lambda z: model.diffusion(z)[:, i, j], x, eye[i], dx, order)
            out += 0.5 * (a0[:, i, j] * dij + da * dj)
    b = model.drift
    for j in range(d):
        if adjoint:
            out -= _d1(lambda z: b(z)[:, j] * f(z), x, eye[j], dx, order)
        else:
            out += b(x)[:, j] * _d1(f, x, eye[j], dx, order)
    return out


def check_harmonicity(model: Model, grid, dx: float = 1e-3, order: int = 2) -> float:
    """Max over ``grid`` of ``|(L + beta - lambda_c) phi| / phi`` by central differences."""
    x = as_points(grid, model.dim)
    phi = model.eigen.phi
    res = _fd_operator(model, phi, x, dx, order=order) + (model.breeding(x) - model.lambda_c) * phi(x)
    return float(np.max(np.abs(res) / phi(x)))


def check_adjoint_harmonicity(model: Model, grid, dx: float = 1e-3, order: int = 4) -> float:
    """Same as :func:`check_harmonicity` for ``(L* + beta - lambda_c) phi_tilde``.

    Defaults to the fourth-order stencil: phi_tilde is a sharp Gaussian for
    the inward-OU model and the second-order truncation error dominates.
    """
    x = as_points(grid, model.dim)
    pt = model.eigen.phi_tilde
    res = _fd_operator(model, pt, x, dx, adjoint=True, order=order) + (model.breeding(x) - model.lambda_c) * pt(x)
    return float(np.max(np.abs(res) / pt(x)))


def harmonicity_grid(model: Model, low: float = -3.0, high: float = 3.0, n: int = 601,
                     dx: float = 1e-3) -> Array:
    """1-D grid that keeps ``2 dx`` away from the model's non-smooth points."""
    x = np.linspace(low, high, n)
    for s in model.singular_points:
        x = x[np.abs(x - s) >= 2 * dx]
    return x[:, None]


def phi_pairing(model: Model, f: Optional[Callable[[Array], Array]] = None) -> float:
    """Quadrature of ``f phi phi_tilde`` over the line (``f = 1`` gives the normalisation)."""
    if model.dim != 1:
        raise ValueError("quadrature pairings are implemented for dim == 1")

    def integrand(y):
        pts = y[:, None]
        val = model.eigen.phi(pts) * model.eigen.phi_tilde(pts)
        return val if f is None else val * f(pts)

    return integrate_line(integrand, breaks=model.singular_points)


def spine_drift_consistency(model: Model, grid, dx: float = 1e-5) -> float:
    """Max relative error between the spine drift and ``b + a grad(phi)/phi``."""
    x = as_points(grid, model.dim)
    d = model.dim
    eye = np.eye(d) * dx
    phi = model.eigen.phi
    grad = np.stack([(phi(x + eye[j]) - phi(x - eye[j])) / (2 * dx) for j in range(d)], axis=-1)
    expected = model.drift(x) + np.einsum("nij,nj->ni", model.diffusion(x), grad / phi(x)[:, None])
    got = model.eigen.spine_drift(x)
    scale = np.maximum(np.abs(expected), 1.0)
    return float(np.max(np.abs(got - expected) / scale))


def validate_model(model: Model, grid=None, t_grid=None) -> dict:
    """Check the structural invariants of a model on test grids.

    Returns a dict with the breeding/diffusion sign checks and a linear fit
    ``K t + C`` bounding ``mixing_time(spread_bound(t))``.
    """
    if grid is None:
        grid = np.linspace(-5, 5, 201)[:, None] if model.dim == 1 else np.random.default_rng(0).normal(size=(200, model.dim)) * 2
    if t_grid is None:
        t_grid = np.linspace(1.0, 100.0, 100)
    x = as_points(grid, model.dim)
    beta = model.breeding(x)
    eig = np.linalg.eigvalsh(model.diffusion(x))
    z = np.asarray(model.mixing_time(model.spread_bound(t_grid)), dtype=float)
    slope, intercept = np.polyfit(t_grid, z, 1)
    k = max(slope, 0.0)
    c = float(np.max(z - k * t_grid))
    return dict(
        breeding_nonnegative=bool(np.all(beta >= 0)),
        breeding_nontrivial=bool(np.any(beta > 0)),
        diffusion_positive_definite=bool(np.all(eig > 0)),
        zeta_of_spread_K=float(k),
        zeta_of_spread_C=c,
        zeta_of_spread_ok=bool(np.all(z <= k * t_grid + c + 1e-12)),
    )


# --------------------------------------------------------------------------
# configuration round-trip

MODEL_KINDS = {
    "inward_ou_quadratic": make_inward_ou_quadratic,
    "outward_ou_constant": make_outward_ou_constant,
    "compact_beta_bbm": make_compact_beta_bbm,
}


def model_from_config(cfg: dict) -> Model:
    """Build a model from ``{"kind": ..., "params": {...}, "eps": .., "delta": .., "spread_rate": ..}``."""
    kind = cfg.get("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
    params = dict(cfg.get("params", {}))
    for key in ("eps", "delta", "spread_rate"):
        if cfg.get(key) is not None:
            params[key] = cfg[key]
    if kind == "compact_beta_bbm":
        params.pop("delta", None)
        params.pop("spread_rate", None)
    elif kind == "outward_ou_constant":
        params.pop("spread_rate", None)
    else:
        params.pop("delta", None)
    return MODEL_KINDS[kind](**params)


def model_to_config(model: Model) -> dict:
    params = dict(model.params)
    out = {"kind": model.kind}
    for key in ("eps", "delta", "spread_rate"):
        if key in params:
            out[key] = params.pop(key)
    out["params"] = params
    return out


def product_p_star(model: Model) -> float:
    """Supremum of ``p`` with ``<phi^p, phi_tilde>`` and ``<beta phi^p, phi_tilde>`` finite."""
    if model.kind == "inward_ou_quadratic":
        c = inward_ou_constants(model)
        return c["gamma_plus"] / c["gamma_minus"] if c["gamma_minus"] > 0 else math.inf
    if model.kind in ("outward_ou_constant", "compact_beta_bbm"):
        return math.inf
    raise ValueError(f"no closed-form p threshold for model kind {model.kind!r}")
