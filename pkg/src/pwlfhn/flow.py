"""Deterministic orbits of the piecewise-linear model.

Within one region the system is affine, so trajectories are available in
closed form from the 2x2 propagator.  Orbits across regions are stitched
from exact legs joined at switching-line crossing times found by a
bracketing scan plus Brent refinement; no time stepping is involved.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .params import ModelParams, epsilon_crit


class NonConvergenceError(RuntimeError):
    """An iteration or root search failed to converge."""


# ---------------------------------------------------------------------------
# closed-form region flow


class RegionFlow:
    """Solution operator x(t) = x* + e^{At} (x0 - x*) for one region.

    Precomputes the eigenstructure so that propagators evaluate cheaply
    both on numpy grids and in scalar root-finding loops.
    """

    def __init__(self, p: ModelParams, region: str):
        self.p = p
        self.region = region
        self.eta = p.slope(region)
        self.ea = p.epsilon * p.alpha
        self.es = p.epsilon * p.sigma
        self.mu = 0.5 * (self.eta - self.es)
        self.q = 0.5 * (self.eta + self.es)
        self.branch = p.branch(region)
        self.om = p.omega(region)
        self.xstar = p.equilibrium(region)

    # -- trig/hyperbolic kernel: c(t) and s(t) with e^{At} =
    #    e^{mu t} [[c + q s, -s], [ea s, c - q s]]

    def _cs(self, t):
        if self.branch == "focus":
            return np.cos(self.om * t), np.sin(self.om * t) / self.om
        if self.branch == "node":
            return np.cosh(self.om * t), np.sinh(self.om * t) / self.om
        return np.ones_like(np.asarray(t, dtype=float)), np.asarray(t, dtype=float)

    def _cs_scalar(self, t: float):
        if self.branch == "focus":
            return math.cos(self.om * t), math.sin(self.om * t) / self.om
        if self.branch == "node":
            x = self.om * t
            return math.cosh(x), math.sinh(x) / self.om
        return 1.0, t

    def propagator(self, t):
        """e^{At}, vectorized over t; shape t.shape + (2, 2)."""
        t = np.asarray(t, dtype=float)
        c, s = self._cs(t)
        ex = np.exp(self.mu * t)
        out = np.empty(t.shape + (2, 2))
        out[..., 0, 0] = ex * (c + self.q * s)
        out[..., 0, 1] = -ex * s
        out[..., 1, 0] = ex * self.ea * s
        out[..., 1, 1] = ex * (c - self.q * s)
        return out

    def state(self, t, x0):
        """x(t) for initial point x0; t may be an array."""
        t = np.asarray(t, dtype=float)
        d0 = np.asarray(x0, dtype=float) - self.xstar
        c, s = self._cs(t)
        ex = np.exp(self.mu * t)
        v = self.xstar[0] + ex * (c * d0[0] + s * (self.q * d0[0] - d0[1]))
        w = self.xstar[1] + ex * (c * d0[1] + s * (self.ea * d0[0] - self.q * d0[1]))
        return np.stack(np.broadcast_arrays(v, w), axis=-1)

    def velocity(self, x):
        x = np.asarray(x, dtype=float)
        v, w = x[..., 0], x[..., 1]
        p = self.p
        dv = self.eta * v + p.intercept(self.region) - w
        dw = p.epsilon * (p.alpha * v - p.sigma * w - p.lam)
        return np.stack(np.broadcast_arrays(dv, dw), axis=-1)

    def bind(self, x0) -> "BoundFlow":
        return BoundFlow(self, x0)


class BoundFlow:
    """Flow from a fixed initial point with a fast scalar path."""

    def __init__(self, rf: RegionFlow, x0):
        self.rf = rf
        self.x0 = (float(x0[0]), float(x0[1]))
        dv = self.x0[0] - rf.xstar[0]
        dw = self.x0[1] - rf.xstar[1]
        # v(t) = v* + e^{mu t} (c * av + s * bv), similarly w
        self.av = dv
        self.bv = rf.q * dv - dw
        self.aw = dw
        self.bw = rf.ea * dv - rf.q * dw

    def point(self, t: float) -> tuple[float, float]:
        rf = self.rf
        c, s = rf._cs_scalar(t)
        ex = math.exp(min(rf.mu * t, 700.0))
        return (
            rf.xstar[0] + ex * (c * self.av + s * self.bv),
            rf.xstar[1] + ex * (c * self.aw + s * self.bw),
        )

    def affine(self, t: float, a: float, b: float, c0: float) -> float:
        v, w = self.point(t)
        return a * v + b * w + c0

    def affine_grid(self, ts: np.ndarray, a: float, b: float, c0: float) -> np.ndarray:
        rf = self.rf
        with np.errstate(over="ignore", invalid="ignore"):
            c, s = rf._cs(ts)
            ex = np.exp(rf.mu * ts)
            v = rf.xstar[0] + ex * (c * self.av + s * self.bv)
            w = rf.xstar[1] + ex * (c * self.aw + s * self.bw)
            return a * v + b * w + c0


def flow(p: ModelParams, region: str, t, x0):
    """Exact in-region solution at time(s) t from x0."""
    return RegionFlow(p, region).state(t, x0)


# ---------------------------------------------------------------------------
# crossing times


def _scan_scales(rf: RegionFlow) -> tuple[float, float]:
    """(grid step, default horizon) for crossing searches in this region."""
    if rf.branch == "focus":
        step = math.pi / (4.0 * rf.om)
        if rf.mu > 0.0:
            step = min(step, 1.0 / rf.mu)
        horizon = 24.0 * math.pi / rf.om
    else:
        evs = rf.p.eigenvalues(rf.region)
        fast = max(abs(evs[0].real), abs(evs[1].real), 1e-9)
        slow = max(min(abs(evs[0].real), abs(evs[1].real)), 1e-9)
        step = 0.2 / fast
        horizon = 80.0 / slow
    return step, horizon


def crossing_time_affine(
    rf: RegionFlow,
    x0,
    coeffs,
    direction: str = "any",
    horizon: float | None = None,
    t_start: float = 0.0,
    time_sign: float = 1.0,
    all_roots: bool = False,
):
    """Smallest t > t_start with a*v(t) + b*w(t) + c = 0 along the region
    flow from x0, or None if no such crossing is found up to the horizon.

    direction filters on the sign change of the affine value ('up' means
    negative to positive).  time_sign=-1 searches the backward orbit; the
    returned time is still positive (the magnitude of the backward time).
    """
    a, b, c = coeffs
    bf = rf.bind(x0) if not isinstance(x0, BoundFlow) else x0
    step, default_h = _scan_scales(rf)
    hor = default_h if horizon is None else horizon

    ts = np.arange(t_start, hor + step, step)
    if ts.size < 2:
        ts = np.array([t_start, hor])
    g = bf.affine_grid(time_sign * ts, a, b, c)
    # a start exactly on the manifold: nudge off before scanning
    if abs(g[0]) < 1e-13 * max(1.0, abs(a) + abs(b)):
        t0 = t_start + 1e-7 * step
        g0 = bf.affine(time_sign * t0, a, b, c)
        ts = np.concatenate(([t0], ts[1:]))
        g = np.concatenate(([g0], g[1:]))

    bad = ~np.isfinite(g)
    if bad.any():
        cut = int(np.argmax(bad))
        ts, g = ts[:cut], g[:cut]

    roots = []
    sg = np.sign(g)
    flip = np.nonzero(sg[:-1] * sg[1:] < 0)[0]
    exact = np.nonzero(sg[1:] == 0)[0]
    idx = np.sort(np.concatenate((flip, exact)))
    for i in idx:
        lo, hi = ts[i], ts[i + 1]
        if direction == "up" and not (g[i] < 0 and g[i + 1] >= 0):
            continue
        if direction == "down" and not (g[i] > 0 and g[i + 1] <= 0):
            continue
        if g[i + 1] == 0.0:
            t_root = hi
        else:
            t_root = brentq(
                lambda t: bf.affine(time_sign * t, a, b, c), lo, hi,
                xtol=1e-14, rtol=8.9e-16,
            )
        if not all_roots:
            return t_root
        roots.append(t_root)
    return roots if all_roots else None


def crossing_time(
    p: ModelParams,
    region: str,
    x0,
    v_target: float,
    direction: str = "any",
    horizon: float | None = None,
):
    """First time the in-region orbit from x0 reaches v = v_target, or
    None if it never does within the search horizon."""
    rf = RegionFlow(p, region)
    return crossing_time_affine(rf, x0, (1.0, 0.0, -v_target), direction, horizon)


def nullcline_coeffs(p: ModelParams, region: str) -> tuple[float, float, float]:
    """Affine coefficients of w - f(v) restricted to the region, so the
    value is negative below the fast nullcline and positive above."""
    return (-p.slope(region), 1.0, -p.intercept(region))


# ---------------------------------------------------------------------------
# multi-region orbits


@dataclass
class Leg:
    region: str
    t0: float
    x0: tuple[float, float]
    duration: float


@dataclass
class Trajectory:
    params: ModelParams
    legs: list[Leg]
    events: list[tuple[float, str, tuple[float, float]]]
    status: str
    t_end: float
    x_end: tuple[float, float]
    v_max: float

    def sample(self, n_per_leg: int = 64):
        """Dense (t, v, w) arrays reconstructed exactly from the legs."""
        ts, vs, ws = [], [], []
        for leg in self.legs:
            rf = RegionFlow(self.params, leg.region)
            tl = np.linspace(0.0, leg.duration, n_per_leg)
            xs = rf.state(tl, leg.x0)
            ts.append(leg.t0 + tl)
            vs.append(xs[:, 0])
            ws.append(xs[:, 1])
        return np.concatenate(ts), np.concatenate(vs), np.concatenate(ws)


def _boundaries(p: ModelParams, region: str):
    """(v value, crossing direction, neighbour) for each exit of a region."""
    return {
        "L": ((0.0, "up", "R1"),),
        "R1": ((0.0, "down", "L"), (p.v1, "up", "R2")),
        "R2": ((p.v1, "down", "R1"), (1.0, "up", "R")),
        "R": ((1.0, "down", "R2"),),
    }[region]


def _region_for_start(p: ModelParams, x) -> str:
    v, w = float(x[0]), float(x[1])
    for vb, left, right in ((0.0, "L", "R1"), (p.v1, "R1", "R2"), (1.0, "R2", "R")):
        if v == vb:
            dv = (p.slope(left) * v + p.intercept(left)) - w
            if dv == 0.0:
                raise NonConvergenceError(f"start ({v}, {w}) is tangent to v = {vb}")
            return right if dv > 0 else left
    return p.region_of(v)


def _leg_v_max(rf: RegionFlow, x0, duration: float) -> float:
    """Max of v over one leg: endpoints plus any interior upward crossing
    of the region nullcline (where dv/dt changes sign from + to -)."""
    bf = rf.bind(x0)
    cands = [bf.point(0.0)[0], bf.point(duration)[0]]
    roots = crossing_time_affine(
        rf, bf, nullcline_coeffs(rf.p, rf.region), "up",
        horizon=duration, all_roots=True,
    )
    for t in roots:
        if 0.0 < t < duration:
            cands.append(bf.point(t)[0])
    return max(cands)


def integrate_orbit(
    p: ModelParams,
    x0,
    stop: tuple,
    max_legs: int = 200,
) -> Trajectory:
    """Follow the orbit through regions until a stop condition fires.

    stop is one of
        ('time', T)                 run for total time T
        ('vline', v, direction)     first crossing of v with direction
        ('region_exit',)            first switching-line crossing
    Returns a Trajectory whose status is 'stopped' when the condition
    fired, or 'trapped' when the orbit converged to a stable equilibrium
    without firing it.
    """
    x = (float(x0[0]), float(x0[1]))
    region = _region_for_start(p, x)
    t_glob = 0.0
    legs: list[Leg] = []
    events: list[tuple[float, str, tuple[float, float]]] = []
    v_max = x[0]

    for _ in range(max_legs):
        rf = RegionFlow(p, region)
        bf = rf.bind(x)
        hits = []
        for vb, direc, neigh in _boundaries(p, region):
            t = crossing_time_affine(rf, bf, (1.0, 0.0, -vb), direc)
            if t is not None:
                hits.append((t, vb, direc, neigh))
        t_bnd = min(h[0] for h in hits) if hits else math.inf

        if stop[0] == "vline":
            _, v_stop, d_stop = stop
            t_stop = crossing_time_affine(rf, bf, (1.0, 0.0, -v_stop), d_stop)
            # a stop crossing that coincides with a boundary crossing (the
            # common case: the stop line is a switching line) must win
            if t_stop is not None and t_stop <= t_bnd + 1e-12 * (1.0 + t_bnd):
                legs.append(Leg(region, t_glob, x, t_stop))
                v_max = max(v_max, _leg_v_max(rf, x, t_stop))
                xe = (v_stop, float(bf.point(t_stop)[1]))
                t_glob += t_stop
                events.append((t_glob, f"v={v_stop}:{d_stop}", xe))
                return Trajectory(p, legs, events, "stopped", t_glob, xe, v_max)

        if stop[0] == "time" and t_glob + t_bnd >= stop[1]:
            dur = stop[1] - t_glob
            legs.append(Leg(region, t_glob, x, dur))
            v_max = max(v_max, _leg_v_max(rf, x, dur))
            xe = tuple(map(float, bf.point(dur)))
            return Trajectory(p, legs, events, "stopped", stop[1], xe, v_max)
        if not hits:
            return Trajectory(p, legs, events, "trapped", t_glob, x, v_max)

        t_leg, vb, direc, neigh = min(hits, key=lambda h: h[0])
        legs.append(Leg(region, t_glob, x, t_leg))
        v_max = max(v_max, _leg_v_max(rf, x, t_leg))
        xe = bf.point(t_leg)
        xe = (vb, float(xe[1]))  # pin the crossing coordinate exactly
        t_glob += t_leg
        events.append((t_glob, f"v={vb}:{direc}", xe))
        if stop[0] == "region_exit":
            return Trajectory(p, legs, events, "stopped", t_glob, xe, v_max)
        x, region = xe, neigh
    raise NonConvergenceError("orbit exceeded the leg budget")


# ---------------------------------------------------------------------------
# periodic orbit via the first-return map on {v = 0, dv/dt > 0}


@dataclass
class PeriodicOrbit:
    w0: float
    v_max: float
    period: float
    size_class: str
    n_iterations: int


def sigma1_return(p: ModelParams, w0: float) -> tuple[float, float, float]:
    """One revolution from (0, w0) with w0 < 0 back to the next upward
    crossing of v = 0.  Returns (w_return, v_max, period)."""
    traj = integrate_orbit(p, (0.0, w0), ("vline", 0.0, "up"))
    if traj.status != "stopped" or abs(traj.x_end[0]) > 1e-9:
        raise NonConvergenceError(f"return map failed from w0 = {w0}")
    return traj.x_end[1], traj.v_max, traj.t_end


def periodic_orbit(
    p: ModelParams, tol: float = 1e-12, max_iter: int = 400
) -> PeriodicOrbit:
    """Attracting periodic orbit for lam > 0, located as the fixed point
    of the upward first-return map on v = 0 (iteration to |dw| < tol,
    then one secant polish on the return residual)."""
    if p.lam <= 0.0:
        raise ValueError("periodic orbit requires lam > 0")
    w = w_l_hat(p)
    if not w < 0.0:
        w = -1e-4 * max(p.lam, 1e-6)
    hist: list[tuple[float, float]] = []  # (w, residual)
    for it in range(1, max_iter + 1):
        w_next, _, _ = sigma1_return(p, w)
        res = w_next - w
        hist.append((w, res))
        if abs(res) < tol:
            if len(hist) >= 2:
                (wa, ra), (wb, rb) = hist[-2], hist[-1]
                if ra != rb:
                    w_sec = wb - rb * (wb - wa) / (rb - ra)
                    if w_sec < 0.0:
                        w = w_sec
            w_ret, v_max, period = sigma1_return(p, w)
            return PeriodicOrbit(w, v_max, period, p.classify_amplitude(v_max), it)
        w = w_next
    raise NonConvergenceError("return map did not converge; lam may be outside "
                              "the oscillatory range")


# ---------------------------------------------------------------------------
# bifurcation values


def w_l_hat(p: ModelParams) -> float:
    """w at which the slow eigenline of the left region meets v = 0; the
    funnel value through which left excursions re-enter the middle region."""
    rho_slow = p.eigenvalues("L")[0].real
    return p.lam * rho_slow / (p.alpha - p.sigma * p.eta_l)


def lambda_v1_approx(p: ModelParams) -> float:
    """Half-turn amplification estimate of the forcing level at which the
    small orbit first reaches the kink at v1."""
    if p.branch("R1") != "focus":
        return math.nan
    om = p.omega("R1")
    grow = math.exp((p.eta1 - p.epsilon * p.sigma) * math.pi / (2.0 * om))
    return (p.alpha * p.v1 - p.sigma * p.w1) / (1.0 + grow)


def lambda_v1(p: ModelParams, tol: float = 1e-10) -> float:
    """Forcing level at which the periodic orbit's maximal excursion
    equals v1, by bisection on v_max(lam) - v1.

    Below the root v_max grows exactly linearly in lam (the orbit only
    visits the two slope pieces through the origin), which gives a sharp
    initial bracket; bisection then certifies it.
    """
    ec = epsilon_crit(p.alpha, p.sigma, p.eta1)
    if p.epsilon <= ec:
        raise ValueError(f"epsilon = {p.epsilon} must exceed {ec:.6g} for small orbits")

    def gap(lam: float) -> float:
        return periodic_orbit(p.replace(lam=lam)).v_max - p.v1

    hi = p.alpha * p.v1 - p.sigma * p.w1
    for _ in range(60):
        if gap(hi) > 0.0:
            break
        hi *= 2.0
    else:
        raise NonConvergenceError("no upper bracket for lambda_v1")

    lo = hi
    for _ in range(80):
        lo *= 0.5
        g_lo = gap(lo)
        if g_lo < 0.0:
            break
    else:
        raise NonConvergenceError("no lower bracket for lambda_v1")

    # linear-scaling estimate tightens the bracket before bisection
    est = lo * p.v1 / (g_lo + p.v1)
    a, b = est * (1.0 - 1e-6), est * (1.0 + 1e-6)
    if lo < a < b < hi and gap(a) < 0.0 < gap(b):
        lo, hi = a, b
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _grazing_gap(p: ModelParams, lam: float) -> float:
    """Signed gap between the funnel orbit and the upper-right corner.

    Follows the deterministic orbit from (0, w_l_hat) rightward.  If it
    turns on a fast nullcline at v_turn < 1 the gap is v_turn - 1 < 0;
    if it reaches v = 1 at height w the gap is 1 - w >= 0.  The gap is
    continuous and crosses zero when the orbit passes through (1, 1).
    """
    pl = p.replace(lam=lam)
    x = (0.0, w_l_hat(pl))
    for region, v_exit in (("R1", pl.v1), ("R2", 1.0)):
        rf = RegionFlow(pl, region)
        bf = rf.bind(x)
        t_y = crossing_time_affine(rf, bf, nullcline_coeffs(pl, region), "up")
        t_v = crossing_time_affine(rf, bf, (1.0, 0.0, -v_exit), "up")
        if t_v is None or (t_y is not None and t_y < t_v):
            if t_y is None:
                raise NonConvergenceError("funnel orbit neither turns nor exits")
            return bf.point(t_y)[0] - 1.0
        x = (v_exit, bf.point(t_v)[1])
    return 1.0 - x[1]


def lambda_1(p: ModelParams, tol: float = 1e-10) -> float:
    """Forcing level at which the orbit through the funnel point grazes
    the upper-right corner (1, 1): the small/medium-to-large boundary."""
    lo, g_lo = None, None
    lam = p.alpha * p.v1 - p.sigma * p.w1
    for _ in range(80):
        g = _grazing_gap(p, lam)
        if g < 0.0:
            lo, g_lo = lam, g
            break
        lam *= 0.5
    else:
        raise ValueError("no lower bracket: orbit is large for every lam probed")
    hi = lam
    for _ in range(60):
        hi *= 2.0
        if _grazing_gap(p, hi) > 0.0:
            break
    else:
        raise NonConvergenceError("no upper bracket for lambda_1")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _grazing_gap(p, mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def funnel_entry_crossing(p: ModelParams) -> tuple[float, float]:
    """(w, t) where the orbit from (0, w_l_hat) crosses v = v1.

    Requires lam large enough that the orbit does reach v1."""
    rf = RegionFlow(p, "R1")
    bf = rf.bind((0.0, w_l_hat(p)))
    t_y = crossing_time_affine(rf, bf, nullcline_coeffs(p, "R1"), "up")
    t_v = crossing_time_affine(rf, bf, (1.0, 0.0, -p.v1), "up")
    if t_v is None or (t_y is not None and t_y < t_v):
        raise ValueError("funnel orbit turns back before reaching v1")
    return bf.point(t_v)[1], t_v


def backward_corner_crossing(p: ModelParams) -> tuple[float, float]:
    """(w_hat2, backward time): where the backward orbit from the corner
    (1, 1) meets v = v1.  Entries below w_hat2 on that line escape past
    v = 1; entries above turn back."""
    rf = RegionFlow(p, "R2")
    bf = rf.bind((1.0, 1.0))
    tau = crossing_time_affine(rf, bf, (1.0, 0.0, -p.v1), "any", time_sign=-1.0)
    if tau is None:
        raise NonConvergenceError("backward orbit from the corner missed v1")
    return bf.point(-tau)[1], tau


# ---------------------------------------------------------------------------
# diagram scans


@dataclass
class BifurcationRow:
    lam: float
    v_eq: float
    v_max: float
    period: float
    size_class: str
    status: str


def bifurcation_diagram(p: ModelParams, lambdas) -> list[BifurcationRow]:
    """Equilibrium position and orbit amplitude over a forcing grid.
    Rows with lam <= 0 carry the stable equilibrium only."""
    rows = []
    for lam in np.asarray(lambdas, dtype=float):
        pl = p.replace(lam=float(lam))
        _, eq = pl.global_equilibrium()
        if lam <= 0.0:
            rows.append(BifurcationRow(float(lam), eq[0], math.nan, math.nan,
                                       "none", "stable-equilibrium"))
            continue
        try:
            orb = periodic_orbit(pl)
            rows.append(BifurcationRow(float(lam), eq[0], orb.v_max, orb.period,
                                       orb.size_class, "ok"))
        except NonConvergenceError as exc:
            rows.append(BifurcationRow(float(lam), eq[0], math.nan, math.nan,
                                       "none", f"failed: {exc}"))
    return rows


@dataclass
class TwoParamRow:
    epsilon: float
    lambda_v1: float
    lambda_1: float
    lambda_v1_approx: float
    status: str


def two_param_diagram(p: ModelParams, epsilons) -> list[TwoParamRow]:
    """lambda_v1 and lambda_1 over a time-scale grid.  Below the focus
    threshold no small orbits exist and both canard values are reported
    as NaN (the large regime starts at lam = 0 there)."""
    ec = epsilon_crit(p.alpha, p.sigma, p.eta1)
    rows = []
    for eps in np.asarray(epsilons, dtype=float):
        pe = p.replace(epsilon=float(eps))
        if eps <= ec:
            # no small orbits here; the grazing construction may still
            # have a root, so report lambda_1 alone when it does
            try:
                l1 = lambda_1(pe)
            except (ValueError, NonConvergenceError):
                l1 = math.nan
            rows.append(TwoParamRow(float(eps), math.nan, l1, math.nan,
                                    "below-focus-threshold"))
            continue
        try:
            rows.append(TwoParamRow(float(eps), lambda_v1(pe), lambda_1(pe),
                                    lambda_v1_approx(pe), "ok"))
        except (ValueError, NonConvergenceError) as exc:
            rows.append(TwoParamRow(float(eps), math.nan, math.nan, math.nan,
                                    f"failed: {exc}"))
    return rows
