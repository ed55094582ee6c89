"""Gaussian noise propagation within one region.

Between switching lines the model is an Ornstein-Uhlenbeck process, so a
point source evolves into a Gaussian whose mean follows the deterministic
flow and whose covariance is D^2 theta(t), with

    theta_ij(t) = int_0^t  (e^{As})_{i2} (e^{As})_{j2} ds

because noise drives only the slow variable.  theta has closed forms built
from integrals of e^{as} against the trig or hyperbolic kernel of the
propagator; the implementations below avoid cancellation for small
exponents so the short-time limits are exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import math
import numpy as np

from .params import ModelParams
from .flow import RegionFlow

_SERIES_CUTOFF = 0.25


def _expm1z(z):
    """expm1 for real or complex arrays, accurate near zero."""
    z = np.asarray(z)
    if not np.iscomplexobj(z):
        return np.expm1(z)
    out = np.exp(z) - 1.0
    small = np.abs(z) < _SERIES_CUTOFF
    if np.any(small):
        zs = np.where(small, z, 0.0)
        term = zs.copy()
        acc = zs.copy()
        for k in range(2, 22):
            term = term * zs / k
            acc = acc + term
        out = np.where(small, acc, out)
    return out


def _i0(alpha, t):
    """int_0^t e^{alpha s} ds, stable for alpha -> 0, complex allowed."""
    t = np.asarray(t, dtype=float)
    if alpha == 0:
        return t.astype(complex) if np.iscomplexobj(np.asarray(alpha)) else t + 0.0
    return _expm1z(alpha * t) / alpha


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def _theta_small_t(rf: RegionFlow, t: np.ndarray) -> np.ndarray:
    """Direct quadrature of the covariance integrand for short horizons,
    where the closed forms lose digits to cancellation (theta11 ~ t^3/3
    is the difference of O(t) terms).  Exact to machine precision while
    the rates resolved by the 24-node rule stay below ~0.5/t."""
    # nodes mapped to [0, t]: s = t (x + 1) / 2
    s = 0.5 * t[..., None] * (_GL_NODES + 1.0)
    c, sk = rf._cs(s)
    ex = np.exp(rf.mu * s)
    e12 = -ex * sk
    e22 = ex * (c - rf.q * sk)
    w = 0.5 * t[..., None] * _GL_WEIGHTS
    out = np.empty(t.shape + (2, 2))
    out[..., 0, 0] = np.sum(w * e12 * e12, axis=-1)
    out[..., 0, 1] = np.sum(w * e12 * e22, axis=-1)
    out[..., 1, 0] = out[..., 0, 1]
    out[..., 1, 1] = np.sum(w * e22 * e22, axis=-1)
    return out


def theta(p: ModelParams, region: str, t) -> np.ndarray:
    """Unit-noise covariance integral; shape t.shape + (2, 2).

    The physical covariance is noise_d**2 * theta."""
    rf = RegionFlow(p, region)
    t = np.asarray(t, dtype=float)
    a = 2.0 * rf.mu
    q = rf.q
    # base moments P2 = int e^{as} s(s)^2, P1 = int e^{as} c s, P0 = int e^{as} c^2
    if rf.branch == "focus":
        om = rf.om
        iz = _i0(a, t)
        ib = _i0(a + 2j * om, t)
        p2 = (iz - ib.real) / (2.0 * om * om)
        p1 = ib.imag / (2.0 * om)
        p0 = 0.5 * (iz + ib.real)
    elif rf.branch == "node":
        nu = rf.om
        iz = _i0(a, t)
        ip = _i0(a + 2.0 * nu, t)
        im = _i0(a - 2.0 * nu, t)
        ch = 0.5 * (ip + im)
        p2 = (ch - iz) / (2.0 * nu * nu)
        p1 = (ip - im) / (4.0 * nu)
        p0 = 0.5 * (ch + iz)
    else:
        ex = np.exp(a * t)
        j0 = _i0(a, t)
        if a == 0:
            j1, j2 = 0.5 * t * t, t ** 3 / 3.0
        else:
            j1 = (t * ex - j0) / a
            j2 = (t * t * ex - 2.0 * j1) / a
        p2, p1, p0 = j2, j1, j0

    out = np.empty(t.shape + (2, 2))
    out[..., 0, 0] = p2
    out[..., 0, 1] = -(p1 - q * p2)
    out[..., 1, 0] = out[..., 0, 1]
    out[..., 1, 1] = p0 - 2.0 * q * p1 + q * q * p2

    rate = max(abs(a), 2.0 * rf.om if rf.branch != "degenerate" else 0.0, abs(q))
    small = rate * t < 0.5
    if np.any(small):
        ts = np.atleast_1d(t)[np.atleast_1d(small)]
        fixed = _theta_small_t(rf, ts)
        if out.ndim == 2:
            out = fixed[0]
        else:
            out[small] = fixed
    return out


def theta_deriv(p: ModelParams, region: str, t) -> np.ndarray:
    """d theta / dt, exactly the outer product of the propagator's second
    column; lets the Lyapunov identity be checked without differencing."""
    rf = RegionFlow(p, region)
    t = np.asarray(t, dtype=float)
    c, s = rf._cs(t)
    ex = np.exp(rf.mu * t)
    e12 = -ex * s
    e22 = ex * (c - rf.q * s)
    out = np.empty(t.shape + (2, 2))
    out[..., 0, 0] = e12 * e12
    out[..., 0, 1] = e12 * e22
    out[..., 1, 0] = out[..., 0, 1]
    out[..., 1, 1] = e22 * e22
    return out


def covariance(p: ModelParams, region: str, t, noise_d: float | None = None):
    d = p.noise_d if noise_d is None else noise_d
    return d * d * theta(p, region, t)


# ---------------------------------------------------------------------------
# Gaussian states


@dataclass
class Gaussian2:
    """Bivariate Gaussian state with guards for the degenerate short-time
    limit (the v-variance vanishes like t^3, so tiny propagation times
    produce numerically singular covariances)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(2)
        self.cov = np.asarray(self.cov, dtype=float).reshape(2, 2)

    @property
    def det(self) -> float:
        c = self.cov
        return c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]

    @property
    def degenerate(self) -> bool:
        c = self.cov
        scale = max(c[0, 0] * c[1, 1], c[0, 1] ** 2, 1e-300)
        return self.det <= 1e-12 * scale

    def pdf(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        d = self.det
        if d <= 0.0:
            raise ValueError("singular covariance; pdf undefined")
        c = self.cov
        dx = pts[:, 0] - self.mean[0]
        dy = pts[:, 1] - self.mean[1]
        quad = (c[1, 1] * dx * dx - 2.0 * c[0, 1] * dx * dy + c[0, 0] * dy * dy) / d
        return np.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(d))

    def marginal(self, axis: int) -> tuple[float, float]:
        return float(self.mean[axis]), float(self.cov[axis, axis])


def transition_density(
    p: ModelParams, region: str, t: float, x0, noise_d: float | None = None
) -> Gaussian2:
    """Gaussian law of the in-region process at time t from the point x0."""
    rf = RegionFlow(p, region)
    mean = rf.state(float(t), x0)
    return Gaussian2(mean, covariance(p, region, float(t), noise_d))


def conditional_on_line(g: Gaussian2, anchor, direction) -> tuple[float, float]:
    """Restrict a Gaussian to the line anchor + z * direction.

    Returns (z_mean, z_var) of the (unnormalized) restriction, i.e. the
    mode and curvature of the density along the line."""
    a = np.asarray(anchor, dtype=float)
    u = np.asarray(direction, dtype=float)
    c = g.cov
    det = g.det
    if det <= 0.0:
        raise ValueError("singular covariance; conditional undefined")
    quad_u = (c[1, 1] * u[0] ** 2 - 2.0 * c[0, 1] * u[0] * u[1] + c[0, 0] * u[1] ** 2) / det
    dm = g.mean - a
    cross = (c[1, 1] * u[0] * dm[0] - c[0, 1] * (u[0] * dm[1] + u[1] * dm[0])
             + c[0, 0] * u[1] * dm[1]) / det
    return float(cross / quad_u), float(1.0 / quad_u)


def nullcline_conditional(
    p: ModelParams, region: str, g: Gaussian2
) -> tuple[float, float]:
    """Mode and variance in v of a Gaussian restricted to the region's
    fast nullcline w = slope * v + intercept.

    The mode depends only on the mean and the covariance shape, not on
    the noise amplitude, and reduces to the mean's v when the mean sits
    on the nullcline."""
    eta = p.slope(region)
    return conditional_on_line(g, (0.0, p.intercept(region)), (1.0, eta))


def probability_current(
    p: ModelParams,
    g: Gaussian2,
    pts,
    include_diffusion: bool = False,
    noise_d: float | None = None,
) -> np.ndarray:
    """Probability current of the Gaussian state at the given points.

    J = (drift) * rho, minus (D^2/2) d(rho)/dw in the w component when
    include_diffusion is set.  The region is inferred per point from v."""
    from .params import eval_f_pwl

    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    rho = g.pdf(pts)
    v, w = pts[:, 0], pts[:, 1]
    jv = (eval_f_pwl(v, p) - w) * rho
    jw = p.epsilon * (p.alpha * v - p.sigma * w - p.lam) * rho
    if include_diffusion:
        d = p.noise_d if noise_d is None else noise_d
        c = g.cov
        det = g.det
        dx = v - g.mean[0]
        dy = w - g.mean[1]
        # d rho / dw = -[C^{-1}(x - m)]_w rho
        grad_w = (-c[0, 1] * dx + c[0, 0] * dy) / det
        jw = jw + 0.5 * d * d * grad_w * rho
    return np.stack([jv, jw], axis=-1)
