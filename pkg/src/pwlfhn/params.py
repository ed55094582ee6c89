"""Parameters and per-region linear structure of the piecewise-linear
FitzHugh-Nagumo model

    dv/dt = f(v) - w
    dw/dt = epsilon * (alpha * v - sigma * w - lam) + noise_d * xi(t)

f is continuous and linear on each of the four regions v <= 0,
0 < v <= v1, v1 < v <= 1 and v > 1.  Everything downstream (flows,
covariances, exit densities) reduces to the 2x2 Jacobian of one region,
so this module is the single place that knows the region bookkeeping.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

REGIONS = ("L", "R1", "R2", "R")

# relative threshold below which the eigenvalue discriminant is treated as zero
DEGENERATE_DISC_RTOL = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set.  The kink coordinates (v1, w1) are primary;
    the middle slopes eta1 = w1/v1 and eta2 = (1-w1)/(1-v1) are derived.

    Defaults give a repelling focus in the 0 < v <= v1 region and a
    strongly contracting left region.
    """

    epsilon: float = 0.04
    alpha: float = 4.0
    sigma: float = 1.0
    lam: float = 0.028
    noise_d: float = 0.0008
    eta_l: float = -2.0
    eta_r: float = -1.0
    v1: float = 0.1
    w1: float = 0.05

    @property
    def eta1(self) -> float:
        return self.w1 / self.v1

    @property
    def eta2(self) -> float:
        return (1.0 - self.w1) / (1.0 - self.v1)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    # -- per-region affine structure: f(v) = slope * v + intercept --

    def slope(self, region: str) -> float:
        return {
            "L": self.eta_l,
            "R1": self.eta1,
            "R2": self.eta2,
            "R": self.eta_r,
        }[region]

    def intercept(self, region: str) -> float:
        if region in ("L", "R1"):
            return 0.0
        if region == "R2":
            return self.w1 - self.eta2 * self.v1
        if region == "R":
            return 1.0 - self.eta_r
        raise KeyError(region)

    def region_of(self, v: float) -> str:
        """Half-open convention: v <= 0 -> L, 0 < v <= v1 -> R1,
        v1 < v <= 1 -> R2, v > 1 -> R."""
        if v <= 0.0:
            return "L"
        if v <= self.v1:
            return "R1"
        if v <= 1.0:
            return "R2"
        return "R"

    # -- linearization --

    def jacobian(self, region: str) -> np.ndarray:
        eta = self.slope(region)
        return np.array(
            [
                [eta, -1.0],
                [self.epsilon * self.alpha, -self.epsilon * self.sigma],
            ]
        )

    def discriminant(self, region: str) -> float:
        eta = self.slope(region)
        return (eta + self.epsilon * self.sigma) ** 2 - 4.0 * self.epsilon * self.alpha

    def branch(self, region: str) -> str:
        """'focus', 'node' or 'degenerate' according to the sign of the
        eigenvalue discriminant, with a relative dead band around zero."""
        eta = self.slope(region)
        disc = self.discriminant(region)
        tol = DEGENERATE_DISC_RTOL * max(1.0, (eta + self.epsilon * self.sigma) ** 2)
        if abs(disc) < tol:
            return "degenerate"
        return "focus" if disc < 0.0 else "node"

    def eigenvalues(self, region: str) -> tuple[complex, complex]:
        """Eigenvalues of the region Jacobian.  Real pairs are returned
        as (slow, fast), ordered by |Re|; complex pairs as (mu + i om,
        mu - i om)."""
        eta = self.slope(region)
        mu = 0.5 * (eta - self.epsilon * self.sigma)
        disc = self.discriminant(region)
        if self.branch(region) == "focus":
            om = 0.5 * math.sqrt(-disc)
            return complex(mu, om), complex(mu, -om)
        nu = 0.5 * math.sqrt(max(disc, 0.0))
        pair = sorted((mu + nu, mu - nu), key=abs)
        return complex(pair[0]), complex(pair[1])

    def omega(self, region: str) -> float:
        """Half square root of |discriminant|: the rotation rate for a
        focus, the eigenvalue half-spread for a node."""
        return 0.5 * math.sqrt(abs(self.discriminant(region)))

    # -- equilibria --

    def equilibrium(self, region: str) -> np.ndarray:
        """Intersection of the two nullclines of the region's affine
        system, whether or not it lies inside the region."""
        denom = self.alpha - self.sigma * self.slope(region)
        if denom == 0.0:
            raise ZeroDivisionError(f"alpha == sigma*eta in region {region}")
        v = (self.lam + self.sigma * self.intercept(region)) / denom
        return np.array([v, self.slope(region) * v + self.intercept(region)])

    def equilibrium_is_admissible(self, region: str) -> bool:
        v = self.equilibrium(region)[0]
        lo, hi = {
            "L": (-math.inf, 0.0),
            "R1": (0.0, self.v1),
            "R2": (self.v1, 1.0),
            "R": (1.0, math.inf),
        }[region]
        return lo < v <= hi if region != "L" else lo < v <= 0.0

    def global_equilibrium(self) -> tuple[str, np.ndarray]:
        """The unique admissible equilibrium (unique when every slope is
        below alpha/sigma)."""
        for region in REGIONS:
            if self.equilibrium_is_admissible(region):
                return region, self.equilibrium(region)
        raise RuntimeError("no admissible equilibrium found")

    def classify_amplitude(self, v_max: float) -> str:
        """Oscillation size class from the maximal v excursion."""
        if v_max <= self.v1:
            return "small"
        if v_max <= 1.0:
            return "medium"
        return "large"


def eval_f_pwl(v, p: ModelParams):
    """Piecewise-linear nonlinearity, vectorized in v."""
    v = np.asarray(v, dtype=float)
    out = np.where(
        v <= 0.0,
        p.eta_l * v,
        np.where(
            v <= p.v1,
            p.eta1 * v,
            np.where(v <= 1.0, p.eta2 * (v - p.v1) + p.w1, p.eta_r * (v - 1.0) + 1.0),
        ),
    )
    return out if out.ndim else float(out)


def eval_f_cubic(v):
    """Smooth cubic counterpart 3 v^2 - 2 v^3 (same corner values at 0 and 1)."""
    v = np.asarray(v, dtype=float)
    out = 3.0 * v**2 - 2.0 * v**3
    return out if out.ndim else float(out)


def hysteresis_band(p: ModelParams, noise_d: float | None = None) -> float:
    """Half-width of the detection band around the middle nullcline branch.

    The noisy w component wiggles across w = f(v) diffusively, so raw
    crossings of that curve have no well-defined count.  Crossing events
    are therefore detected on the shifted lines w = f(v) +/- band, a few
    stationary noise widths away, and the same shifted lines serve as the
    nullcline arcs of the sections.  The band is capped so that the arcs
    stay meaningful when the noise is large."""
    d = p.noise_d if noise_d is None else float(noise_d)
    band = min(p.w1 / 3.0,
               5.0 * d / math.sqrt(max(2.0 * p.epsilon * p.sigma, 1e-12)))
    return max(band, 1e-12)


def epsilon_crit(alpha: float, sigma: float, eta1: float) -> float:
    """Time-scale ratio at which the middle-region equilibrium switches
    between node and focus: the root of (eta1 + eps*sigma)^2 = 4*eps*alpha
    that continues the focus regime."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    rad = alpha * (alpha - sigma * eta1)
    if rad < 0.0:
        raise ValueError("alpha*(alpha - sigma*eta1) must be nonnegative")
    return (2.0 * alpha - sigma * eta1 - 2.0 * math.sqrt(rad)) / sigma**2


@dataclass
class ValidationReport:
    violations: list[str]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        lines = [f"violation: {m}" for m in self.violations]
        lines += [f"warning: {m}" for m in self.warnings]
        return "\n".join(lines) if lines else "ok"


def validate(p: ModelParams) -> ValidationReport:
    """Check positivity, corner ordering, slope signs, the left-region
    contraction bound and the middle-slope window.  Returns a report and
    never raises."""
    bad: list[str] = []
    warn: list[str] = []
    if not p.epsilon > 0.0:
        bad.append(f"epsilon must be positive, got {p.epsilon}")
    if not p.alpha > 0.0:
        bad.append(f"alpha must be positive, got {p.alpha}")
    if p.sigma < 0.0:
        bad.append(f"sigma must be nonnegative, got {p.sigma}")
    elif p.sigma == 0.0:
        warn.append("sigma == 0: recovery has no self-decay")
    if p.noise_d < 0.0:
        bad.append(f"noise_d must be nonnegative, got {p.noise_d}")
    if not 0.0 < p.v1 < 1.0:
        bad.append(f"v1 must lie in (0, 1), got {p.v1}")
    if not 0.0 < p.w1 < 1.0:
        bad.append(f"w1 must lie in (0, 1), got {p.w1}")
    if not p.eta_l < 0.0:
        bad.append(f"eta_l must be negative, got {p.eta_l}")
    if not p.eta_r < 0.0:
        bad.append(f"eta_r must be negative, got {p.eta_r}")
    if bad:
        return ValidationReport(bad, warn)

    es = p.epsilon * p.sigma
    contraction_bound = -es - 2.0 * math.sqrt(p.epsilon * p.alpha)
    if not p.eta_l < contraction_bound:
        bad.append(
            f"eta_l = {p.eta_l} must lie below {contraction_bound:.6g} "
            "(left region must be a strongly contracting node)"
        )
    if not es < p.eta1:
        bad.append(
            f"eta1 = {p.eta1:.6g} must exceed epsilon*sigma = {es:.6g} "
            "(middle equilibrium must repel)"
        )
    if p.sigma > 0.0:
        limit = p.alpha / p.sigma
        for region in REGIONS:
            if not p.slope(region) < limit:
                bad.append(
                    f"slope {p.slope(region):.6g} in {region} reaches alpha/sigma "
                    f"= {limit:.6g}; equilibrium no longer unique"
                )
    return ValidationReport(bad, warn)
