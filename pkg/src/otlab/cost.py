"""Radial strictly convex transport costs and radial convex weight functions.

A cost h(z) = p(|z|) is represented by its radial profile p and derivative p'
on [0, R]; strict convexity along rays (p' strictly increasing, p'(0) = 0)
makes every d-dimensional question 1-dimensional: gradients point along z,
the conjugate gradient inverts p' by bisection, and smoothing by convolution
with a radial bump reduces to quadrature of the profile.

The radial convex weights H used by the inequality checks carry an explicit
zero threshold so that grad_H vanishes on (numerically) critical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, OTLabError, ParameterError, RangeError

__all__ = [
    "RadialCost",
    "HFunction",
    "SemiconcavityBound",
    "power_cost",
    "tabulated_cost",
    "cost_from_config",
    "power_h_function",
    "scale_h_function",
    "grad_h",
    "grad_h_star",
    "mollify",
    "semiconcavity_constant",
    "grad_H",
]

_BISECTION_ITERS = 80
_REL_SLACK = 1e-9


@dataclass(frozen=True)
class RadialCost:
    """Cost h(z) = profile(|z|) on the closed ball of the given radius.

    ``profile`` and ``dprofile`` must accept numpy arrays and be evaluable
    somewhat beyond ``radius`` (smoothing needs values on [0, R + eps]).
    """

    profile: Callable = field(repr=False)
    dprofile: Callable = field(repr=False)
    radius: float
    family: str = "custom"
    exponent: float | None = None

    def h(self, z) -> np.ndarray:
        """Evaluate the cost at one point (d,) or a batch (N, d)."""
        z = np.asarray(z, dtype=float)
        r = np.sqrt((np.atleast_2d(z) ** 2).sum(axis=-1))
        out = self.profile(r)
        return out if z.ndim > 1 else float(out[0])

    def grad_range(self) -> float:
        """Largest |grad h| attained on the ball: p'(R)."""
        return float(self.dprofile(np.asarray([self.radius]))[0])


@dataclass(frozen=True)
class HFunction:
    """Radial convex weight with profile derivative defined for r > 0.

    Gradient arguments with |z| <= delta0 map to zero; delta0 > 0 turns the
    measure-zero convention at critical points into a usable discrete rule.
    """

    profile: Callable = field(repr=False)
    dprofile: Callable = field(repr=False)
    delta0: float = 0.0
    label: str = "custom"

    def __post_init__(self):
        if self.delta0 < 0:
            raise ParameterError("delta0 must be nonnegative")


@dataclass(frozen=True)
class SemiconcavityBound:
    """Constant C such that z -> h(z) - C|z|^2 is concave on B(radius)."""

    constant: float
    radius: float

    def __post_init__(self):
        if not (np.isfinite(self.constant) and self.constant >= 0):
            raise ParameterError("semiconcavity constant must be finite and >= 0")


def _validate_monotone_derivative(cost: RadialCost, samples: int = 64) -> None:
    """Sampling check of strict convexity along rays and p'(0) = 0."""
    r = np.linspace(0.0, cost.radius, samples + 1)
    dp = np.asarray(cost.dprofile(r), dtype=float)
    if not np.all(np.isfinite(dp)):
        raise ParameterError("profile derivative is not finite on [0, R]")
    if not np.all(np.diff(dp) > 0):
        raise ParameterError("profile derivative is not strictly increasing on [0, R]")
    scale = max(dp[-1], 1e-300)
    if abs(dp[0]) > 1e-6 * scale:
        raise ParameterError("profile derivative must vanish at r = 0")


def power_cost(p: float, radius: float) -> RadialCost:
    """Cost |z|^p / p for an exponent p > 1."""
    if not p > 1:
        raise ParameterError(f"power-family exponent must exceed 1, got {p}")
    if not radius > 0:
        raise ParameterError("radius must be positive")

    def profile(r):
        return np.asarray(r, dtype=float) ** p / p

    def dprofile(r):
        return np.asarray(r, dtype=float) ** (p - 1.0)

    return RadialCost(profile, dprofile, float(radius), family="power", exponent=float(p))


def tabulated_cost(radii, values, radius: float | None = None) -> RadialCost:
    """Cost from sampled profile values, interpolated monotonically (PCHIP)."""
    from scipy.interpolate import PchipInterpolator

    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    if radii.ndim != 1 or radii.shape != values.shape or len(radii) < 4:
        raise ParameterError("tabulated cost needs matching 1-d arrays of length >= 4")
    if radii[0] != 0.0 or np.any(np.diff(radii) <= 0):
        raise ParameterError("tabulated radii must start at 0 and increase strictly")
    interp = PchipInterpolator(radii, values, extrapolate=True)
    deriv = interp.derivative()
    cost = RadialCost(
        lambda r: np.asarray(interp(r), dtype=float),
        lambda r: np.asarray(deriv(r), dtype=float),
        float(radius if radius is not None else radii[-1]),
        family="tabulated",
    )
    _validate_monotone_derivative(cost)
    return cost


def cost_from_config(config: dict, radius: float) -> RadialCost:
    """Build a cost from ``{"family": "power", "p": ...}`` or a tabulated spec."""
    if not isinstance(config, dict):
        raise ConfigError("cost spec must be a mapping")
    family = config.get("family")
    if family == "power":
        extra = set(config) - {"family", "p"}
        if extra:
            raise ConfigError(f"unknown cost keys: {sorted(extra)}")
        if "p" not in config:
            raise ConfigError("power cost spec needs key 'p'")
        try:
            return power_cost(float(config["p"]), radius)
        except ParameterError as exc:
            raise ConfigError(f"invalid cost field 'p': {exc}") from exc
    if family == "tabulated":
        extra = set(config) - {"family", "radii", "values"}
        if extra:
            raise ConfigError(f"unknown cost keys: {sorted(extra)}")
        try:
            return tabulated_cost(config["radii"], config["values"], radius)
        except (KeyError, ParameterError) as exc:
            raise ConfigError(f"invalid tabulated cost spec: {exc}") from exc
    raise ConfigError(f"unknown cost family: {family!r}")


def power_h_function(q: float, delta0: float = 0.0) -> HFunction:
    """Radial convex weight r^q / q for q > 1 with the zero-threshold rule."""
    if not q > 1:
        raise ParameterError(f"weight exponent must exceed 1, got {q}")

    def profile(r):
        return np.asarray(r, dtype=float) ** q / q

    def dprofile(r):
        return np.asarray(r, dtype=float) ** (q - 1.0)

    return HFunction(profile, dprofile, float(delta0), label=f"power[q={q}]")


def scale_h_function(hfun: HFunction, factor: float) -> HFunction:
    """Positive rescaling; the resulting gradient is scaled by the same factor."""
    if not factor > 0:
        raise ParameterError("scale factor must be positive")
    return HFunction(
        lambda r: factor * np.asarray(hfun.profile(r), dtype=float),
        lambda r: factor * np.asarray(hfun.dprofile(r), dtype=float),
        hfun.delta0,
        label=f"{hfun.label}*{factor}",
    )


def _radii(z: np.ndarray) -> np.ndarray:
    return np.sqrt((z**2).sum(axis=-1))


def grad_h(cost: RadialCost, z) -> np.ndarray:
    """Gradient of the cost: p'(|z|) z / |z|, and 0 at z = 0.

    Accepts one point of shape (d,) or a batch (N, d); raises outside the ball.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    r = _radii(pts)
    if np.any(r > cost.radius * (1.0 + _REL_SLACK)):
        raise DomainError(
            f"|z| = {r.max():.6g} exceeds the cost radius {cost.radius:.6g}"
        )
    out = np.zeros_like(pts)
    nz = r > 0
    if np.any(nz):
        scale = np.asarray(cost.dprofile(r[nz]), dtype=float) / r[nz]
        out[nz] = pts[nz] * scale[:, None]
    return out[0] if single else out


def _invert_dprofile(cost: RadialCost, w_norm: np.ndarray) -> np.ndarray:
    """Solve p'(r) = w for each w; closed form for the power family, else bisection.

    Bisection brackets r to absolute accuracy R * 2^-80, which is not enough
    where p'' blows up at 0 (exponents below 2 with w near 0), so the power
    family inverts its own formula r = w^(1/(p-1)) exactly at every scale.
    """
    if cost.family == "power" and cost.exponent is not None:
        return w_norm ** (1.0 / (cost.exponent - 1.0))
    lo = np.zeros_like(w_norm)
    hi = np.full_like(w_norm, cost.radius)
    for _ in range(_BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        below = np.asarray(cost.dprofile(mid), dtype=float) < w_norm
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def grad_h_star(cost: RadialCost, w) -> np.ndarray:
    """Gradient of the convex conjugate: the inverse of grad_h on the ball.

    Finds r with p'(r) = |w| by bisection and returns r w / |w|; arguments
    beyond p'(R) (the range of grad_h) raise.
    """
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    pts = np.atleast_2d(w)
    wn = _radii(pts)
    wmax = cost.grad_range()
    if np.any(wn > wmax * (1.0 + _REL_SLACK)):
        raise RangeError(
            f"|w| = {wn.max():.6g} exceeds the gradient range p'(R) = {wmax:.6g}"
        )
    wn_clipped = np.minimum(wn, wmax)
    out = np.zeros_like(pts)
    nz = wn > 0
    if np.any(nz):
        r = _invert_dprofile(cost, wn_clipped[nz])
        out[nz] = pts[nz] * (r / wn[nz])[:, None]
    return out[0] if single else out


def grad_H(hfun: HFunction, z) -> np.ndarray:
    """Gradient of the radial weight with the zero convention.

    Returns 0 where |z| <= delta0, else p_H'(|z|) z / |z|; always a
    nonnegative multiple of z.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    r = _radii(pts)
    out = np.zeros_like(pts)
    active = r > hfun.delta0
    if np.any(active):
        scale = np.asarray(hfun.dprofile(r[active]), dtype=float) / r[active]
        out[active] = pts[active] * scale[:, None]
    return out[0] if single else out


def _bump(u: np.ndarray, eps: float) -> np.ndarray:
    """Unnormalized smooth bump supported in (-eps, eps)."""
    t = np.asarray(u, dtype=float) / eps
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


def mollify(cost: RadialCost, epsilon: float, quadrature_order: int = 32, dim: int = 1) -> RadialCost:
    """Smooth the cost by convolution with a radial bump of support radius epsilon.

    The convolution is computed by fixed-order quadrature over the bump
    support: a Gauss-Legendre rule on [-eps, eps] in dimension 1, a tensor
    Gauss x uniform-angle rule in polar coordinates in dimension 2 (keeping
    the result radial to quadrature accuracy). The base profile is evaluated
    beyond R by its own formula, so the result is valid on all of [0, R].
    """
    if not (0 < epsilon < cost.radius / 4):
        raise ParameterError(
            f"epsilon must lie in (0, R/4) = (0, {cost.radius / 4:.6g}), got {epsilon}"
        )
    if quadrature_order < 4:
        raise ParameterError("quadrature_order must be at least 4")
    if dim not in (1, 2):
        raise ParameterError("mollification dimension must be 1 or 2")

    nodes, weights = np.polynomial.legendre.leggauss(quadrature_order)
    if dim == 1:
        u = nodes * epsilon
        w = weights * epsilon * _bump(u, epsilon)
        w = w / w.sum()  # normalize the mollifier mass numerically

        def profile(r):
            r = np.asarray(r, dtype=float)
            return (w * cost.profile(np.abs(r[..., None] - u))).sum(axis=-1)

        def dprofile(r):
            r = np.asarray(r, dtype=float)
            diff = r[..., None] - u
            return (w * np.sign(diff) * cost.dprofile(np.abs(diff))).sum(axis=-1)

    else:
        s = 0.5 * epsilon * (nodes + 1.0)  # radial nodes on [0, eps]
        ws = 0.5 * epsilon * weights * s * _bump(s, epsilon)
        m_ang = max(8, quadrature_order)
        theta = 2.0 * np.pi * np.arange(m_ang) / m_ang
        ct = np.cos(theta)
        w2 = (ws[:, None] * np.full(m_ang, 1.0 / m_ang)[None, :]).reshape(-1)
        w2 = w2 / w2.sum()
        sc = (s[:, None] * ct[None, :]).reshape(-1)  # s cos(theta) per node
        ss = np.repeat(s, m_ang)  # |u| per node

        def profile(r):
            r = np.asarray(r, dtype=float)
            m = np.sqrt(np.maximum(r[..., None] ** 2 - 2.0 * r[..., None] * sc + ss**2, 0.0))
            return (w2 * cost.profile(m)).sum(axis=-1)

        def dprofile(r):
            r = np.asarray(r, dtype=float)
            m = np.sqrt(np.maximum(r[..., None] ** 2 - 2.0 * r[..., None] * sc + ss**2, 0.0))
            radial = np.zeros_like(m)
            nz = m > 0
            dp = np.asarray(cost.dprofile(m), dtype=float)
            radial[nz] = dp[nz] * (r[..., None] - sc)[nz] / m[nz]
            return (w2 * radial).sum(axis=-1)

    smoothed = RadialCost(
        profile,
        dprofile,
        cost.radius,
        family=f"mollified({cost.family}, eps={epsilon:g})",
        exponent=cost.exponent,
    )
    _validate_monotone_derivative(smoothed)
    return smoothed


def semiconcavity_constant(cost: RadialCost, radius: float | None = None, samples: int = 128) -> SemiconcavityBound:
    """Bound the largest eigenvalue of the cost Hessian on the ball.

    For a radial cost those eigenvalues are p''(r) along the ray and p'(r)/r
    across it; p'' is estimated by central differences of p' at sampled radii
    and the maximum is returned with a 10% safety margin. Meaningful for
    costs that are twice differentiable away from kinks (smoothed costs).
    """
    rad = float(radius if radius is not None else cost.radius)
    if not rad > 0:
        raise ParameterError("radius must be positive")
    r = np.linspace(rad / samples, rad, samples)
    delta = rad / (4.0 * samples)
    second = (
        np.asarray(cost.dprofile(r + delta), dtype=float)
        - np.asarray(cost.dprofile(np.maximum(r - delta, 0.0)), dtype=float)
    ) / (2.0 * delta)
    tangential = np.asarray(cost.dprofile(r), dtype=float) / r
    candidates = np.concatenate([second, tangential])
    if not np.all(np.isfinite(candidates)):
        raise OTLabError("second differences of the cost are not finite")
    return SemiconcavityBound(1.1 * float(max(candidates.max(), 0.0)), rad)
