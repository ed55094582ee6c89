"""Direct grid solve of the absorbed transfer problem in the middle region.

At low noise the section-to-section maps are built from Gaussian sweep
currents (exitdist).  Once the slow-variable noise scale becomes
comparable to the corner height w1, the clouds stop being Gaussian near
the corner: mass leaks past it, recirculates through the left branch and
re-enters, and the moment-closure first-passage correction breaks down.
For those legs this module integrates the planar forward Kolmogorov
equation on a rectangle instead.  The state is (v, y) with y = w - eta1*v,
so both displaced detection lines are horizontal grid edges and the
commit sinks align exactly with cell boundaries in every column (in the
raw variables the lines cut through cells and the absorbed mass clumps
at the staircase steps of the mask).  The fast variable carries no
noise, so its substep is an exact conservative remap along precomputed
characteristics; the sheared slow variable, which keeps the full noise
amplitude, gets an implicit finite-volume step with exponentially
fitted (Scharfetter-Gummel) face fluxes, which stays positive and
conservative on the stretched grid.  Section arcs are read out as
absorbed mass: outflow through the fast-variable edges for the v-line
components, and whole-row sinks beyond the detection edges for the
commit components.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .covariance import theta
from .flow import RegionFlow
from .params import ModelParams, eval_f_pwl, hysteresis_band
from .sections import SectionDensity, SectionGrid, _trapz_weights


def use_grid_solver(p: ModelParams, noise_d: float, threshold: float = 1.0) -> bool:
    """Whether the middle-region legs need the grid solver at this noise.

    The deciding ratio is the slow-variable spread accumulated over half a
    rotation of the middle-region focus against the corner height w1; the
    Gaussian sweep construction stays accurate up to spreads of order w1
    (checked against ensemble simulations) and degrades severely a few
    times beyond that, so the default threshold sits at 1.
    """
    if noise_d <= 0.0:
        return False
    rf = RegionFlow(p, "R1")
    if rf.branch != "focus" or rf.om <= 0.0:
        return False
    half_turn = math.pi / rf.om
    spread = noise_d * math.sqrt(max(theta(p, "R1", half_turn)[1, 1], 0.0))
    return spread / p.w1 > threshold


def _edges_from_segments(segments):
    """Ascending edge array from contiguous (lo, hi, step) pieces."""
    parts = [np.array([segments[0][0]])]
    for lo, hi, dw in segments:
        if hi <= lo + 1e-15:
            continue
        n = max(int(round((hi - lo) / dw)), 1)
        parts.append(np.linspace(lo, hi, n + 1)[1:])
    return np.concatenate(parts)


def _backward_edge_positions(p, v_edges, y_centers, dt, shear, n_sub=8):
    """Start points whose forward flow over dt lands on each v edge.

    Integrates dv/ds = -(f(v) - shear*v - y) with RK4 for every
    (y row, v edge) pair; the sheared slow coordinate y = w - shear*v
    is frozen within the fast substep.
    """
    def vel(v):
        return -(eval_f_pwl(v, p) - shear * v - y)

    v = np.broadcast_to(v_edges, (y_centers.size, v_edges.size)).copy()
    y = y_centers[:, None]
    h = dt / n_sub
    for _ in range(n_sub):
        k1 = vel(v)
        k2 = vel(v + 0.5 * h * k1)
        k3 = vel(v + 0.5 * h * k2)
        k4 = vel(v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return v


def _bernoulli(x):
    """x / (exp(x) - 1), the exponential-fitting face weight."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-8
    out[small] = 1.0 - 0.5 * x[small]
    xs = np.clip(x[~small], -700.0, 700.0)
    out[~small] = xs / np.expm1(xs)
    return out


def _w_step_factors(p, v_centers, y_centers, h_y, dt, d, shear):
    """Prefactored tridiagonal solves of the implicit slow-variable step.

    The drift is that of y = w - shear*v, which inherits the full noise
    amplitude since the fast variable is deterministic.  Returns (mult,
    binv, upr), each (nv, ny): the forward elimination multipliers,
    inverted pivots, and upper coefficients of I - dt*L for every
    column, with zero-flux outer faces.
    """
    kdiff = 0.5 * d * d
    nv = v_centers.size
    ny = y_centers.size
    dlt = np.diff(y_centers)
    yf = 0.5 * (y_centers[:-1] + y_centers[1:])
    fv = eval_f_pwl(v_centers, p)
    diag = np.ones((nv, ny))
    upr = np.zeros((nv, ny))
    low = np.zeros((nv, ny))
    for i in range(nv):
        vi = v_centers[i]
        a = p.epsilon * (p.alpha * vi - p.sigma * (yf + shear * vi) - p.lam) \
            - shear * (fv[i] - shear * vi - yf)
        pe = a * dlt / kdiff
        g_lo = (kdiff / dlt) * _bernoulli(-pe) / h_y[:-1]
        g_hi = (kdiff / dlt) * _bernoulli(pe) / h_y[1:]
        diag[i, :-1] += dt * g_lo
        diag[i, 1:] += dt * g_hi
        upr[i, :-1] = -dt * g_hi
        low[i, 1:] = -dt * g_lo
    mult = np.zeros((nv, ny))
    binv = np.empty((nv, ny))
    piv = diag[:, 0].copy()
    binv[:, 0] = 1.0 / piv
    for r in range(1, ny):
        mult[:, r] = low[:, r] * binv[:, r - 1]
        piv = diag[:, r] - mult[:, r] * upr[:, r - 1]
        binv[:, r] = 1.0 / piv
    return mult, binv, upr


@njit(cache=True, parallel=True, fastmath=True)
def _march(mass, u_back, mult, binv, upr, absorb, max_steps, check_every,
           stop_frac, null_acc, left_acc, right_acc, ws_m, ws_v, ws_y):
    nw, nv = mass.shape
    m0 = 0.0
    for r in range(nw):
        for i in range(nv):
            m0 += mass[r, i]
    if m0 <= 0.0:
        return 0, 0.0
    done = 0
    for step in range(max_steps):
        # fast-variable remap: new cell mass is the old cumulative mass
        # between the backward images of the cell edges
        for r in prange(nw):
            cum = ws_m[r]
            cum[0] = 0.0
            for i in range(nv):
                cum[i + 1] = cum[i] + mass[r, i]
            tot = cum[nv]
            mv = ws_v[r]
            for e in range(nv + 1):
                u = u_back[r, e]
                if u <= 0.0:
                    mv[e] = 0.0
                elif u >= nv:
                    mv[e] = tot
                else:
                    k = int(u)
                    mv[e] = cum[k] + (u - k) * mass[r, k]
            for i in range(nv):
                dm = mv[i + 1] - mv[i]
                mass[r, i] = dm if dm > 0.0 else 0.0
            left_acc[r] += mv[0]
            right_acc[r] += tot - mv[nv]
        # slow-variable implicit step per column, draining the committed
        # band before and after so first touches are not stepped over
        for i in prange(nv):
            grabbed = 0.0
            for r in range(nw):
                a = absorb[r, i]
                if a > 0.0:
                    g = a * mass[r, i]
                    grabbed += g
                    mass[r, i] -= g
            y = ws_y[i]
            y[0] = mass[0, i]
            for r in range(1, nw):
                y[r] = mass[r, i] - mult[i, r] * y[r - 1]
            x = y[nw - 1] * binv[i, nw - 1]
            mass[nw - 1, i] = x
            for r in range(nw - 2, -1, -1):
                x = (y[r] - upr[i, r] * x) * binv[i, r]
                mass[r, i] = x
            for r in range(nw):
                a = absorb[r, i]
                if a > 0.0:
                    g = a * mass[r, i]
                    grabbed += g
                    mass[r, i] -= g
            null_acc[i] += grabbed
        done = step + 1
        if done % check_every == 0:
            live = 0.0
            for r in range(nw):
                for i in range(nv):
                    live += mass[r, i]
            if live < stop_frac * m0:
                break
    live = 0.0
    for r in range(nw):
        for i in range(nv):
            live += mass[r, i]
    return done, live / m0


@dataclass
class PdeLeg:
    """Middle-region transfer operator backed by the grid solver.

    Duck-typed against LegKernel: apply maps a source SectionDensity to
    an (unnormalized) target SectionDensity whose mass is the captured
    fraction.
    """
    p: ModelParams
    leg: str
    source: SectionGrid
    target: SectionGrid
    d: float
    dt: float
    shear: float
    v_edges: np.ndarray
    v_centers: np.ndarray
    y_edges: np.ndarray
    y_centers: np.ndarray
    h_y: np.ndarray
    u_back: np.ndarray
    mult: np.ndarray
    binv: np.ndarray
    upr: np.ndarray
    absorb: np.ndarray
    max_steps: int
    stop_frac: float
    info: dict = field(default_factory=dict)

    def _deposit(self, mass, xy, node_mass):
        if xy.shape[0] == 0:
            return
        vc, yc = self.v_centers, self.y_centers
        v = np.clip(xy[:, 0], vc[0], vc[-1])
        y = np.clip(xy[:, 1] - self.shear * xy[:, 0], yc[0], yc[-1])
        iv = np.clip(np.searchsorted(vc, v) - 1, 0, vc.size - 2)
        fv = np.clip((v - vc[iv]) / (vc[iv + 1] - vc[iv]), 0.0, 1.0)
        iy = np.clip(np.searchsorted(yc, y) - 1, 0, yc.size - 2)
        fy = np.clip((y - yc[iy]) / (yc[iy + 1] - yc[iy]), 0.0, 1.0)
        np.add.at(mass, (iy, iv), node_mass * (1 - fy) * (1 - fv))
        np.add.at(mass, (iy, iv + 1), node_mass * (1 - fy) * fv)
        np.add.at(mass, (iy + 1, iv), node_mass * fy * (1 - fv))
        np.add.at(mass, (iy + 1, iv + 1), node_mass * fy * fv)

    def apply(self, dens: SectionDensity) -> SectionDensity:
        if dens.grid.ray_w.shape != self.source.ray_w.shape or not np.array_equal(
                dens.grid.ray_w, self.source.ray_w):
            raise ValueError("density grid does not match the kernel source grid")
        nw, nv = self.y_centers.size, self.v_centers.size
        mass = np.zeros((nw, nv))
        if self.source.ray_w.size:
            self._deposit(mass, self.source.ray_xy(),
                          _trapz_weights(self.source.ray_w) * dens.ray)
        if self.source.null_v.size:
            self._deposit(mass, self.source.null_xy(),
                          _trapz_weights(self.source.null_v) * dens.null)
        m0 = float(mass.sum())
        if m0 <= 0.0:
            return SectionDensity(self.target,
                                  np.zeros(self.target.ray_w.size),
                                  np.zeros(self.target.null_v.size))
        null_acc = np.zeros(nv)
        left_acc = np.zeros(nw)
        right_acc = np.zeros(nw)
        ws_m = np.empty((nw, nv + 1))
        ws_v = np.empty((nw, nv + 1))
        ws_y = np.empty((nv, nw))
        steps, surv = _march(mass, self.u_back, self.mult, self.binv,
                             self.upr, self.absorb, self.max_steps, 25,
                             self.stop_frac, null_acc, left_acc, right_acc,
                             ws_m, ws_v, ws_y)
        if surv > 0.02:
            warnings.warn(f"grid transfer solve for leg {self.leg} left "
                          f"{surv:.3f} of the mass unabsorbed", stacklevel=2)
        if self.leg == "12":
            ray_acc, lost = right_acc, float(left_acc.sum())
            ray_v = self.p.v1
        else:
            ray_acc, lost = left_acc, float(right_acc.sum())
            ray_v = 0.0
        self.info.update({"steps": steps, "survival": surv,
                          "lost": lost / m0,
                          "p_ray": float(ray_acc.sum()) / m0,
                          "p_null": float(null_acc.sum()) / m0})
        w_nodes = self.y_centers + self.shear * ray_v
        ray = np.interp(self.target.ray_w, w_nodes, ray_acc / self.h_y,
                        left=0.0, right=0.0) if self.target.ray_w.size else np.empty(0)
        dv = self.v_edges[1] - self.v_edges[0]
        null = np.interp(self.target.null_v, self.v_centers, null_acc / dv,
                         left=0.0, right=0.0) if self.target.null_v.size else np.empty(0)
        out = SectionDensity(self.target, ray, null)
        # match the component masses of the grid solve exactly; the node
        # interpolation above only fixes the shapes
        mr, mn = out.component_masses()
        if mr > 0.0:
            ray = ray * (float(ray_acc.sum()) / m0 / mr)
        if mn > 0.0:
            null = null * (float(null_acc.sum()) / m0 / mn)
        return SectionDensity(self.target, ray, null)


def build_pde_leg(
    p: ModelParams,
    leg: str,
    source: SectionGrid,
    target: SectionGrid,
    noise_d: float | None = None,
    dt: float = 0.04,
    t_cap: float = 150.0,
    stop_frac: float = 1e-3,
    n_v: int = 400,
    n_band: int = 6,
) -> PdeLeg:
    """Grid-solver transfer operator for leg "12" or "34".

    The rectangle covers the middle region plus whatever margin of the
    neighbouring branches the recirculating mass visits; resolution is
    anchored on the commit band half-width and the stationary slow spread.
    """
    if leg not in ("12", "34"):
        raise ValueError("the grid solver covers the middle-region legs only")
    d = p.noise_d if noise_d is None else float(noise_d)
    if d <= 0.0:
        raise ValueError("the grid solver needs a positive noise level")
    band = hysteresis_band(p, d)
    # the funnel leg runs in sheared coordinates so both detection lines
    # are grid-aligned where the mass lingers; the return leg keeps the
    # raw slow variable, because its v-sweep is fast and the shear term
    # would turn it into a violent slow-coordinate advection
    shear = p.eta1 if leg == "12" else 0.0
    vstar = RegionFlow(p, "R1").xstar[0]
    sig_st = d / math.sqrt(max(2.0 * p.epsilon * p.sigma, 1e-300))
    dy_fine = float(np.clip(band / n_band, 2.5e-4 * (p.w1 / 0.05 + 1.0) / 2.0,
                            sig_st / 10.0 if sig_st > 0 else band / n_band))
    dy_fine = max(dy_fine, 1e-5)
    dy_coarse = max(sig_st / 8.0, dy_fine)
    pad = max(2.0 * band, 0.1 * p.w1)
    fine_lo = -band - pad
    fine_hi = (p.eta1 - shear) * p.v1 + band + pad

    if leg == "12":
        # the top of the rectangle allows for recirculating mass that
        # pokes across v=0 and rides up the left branch before coming
        # back through the funnel
        src_lo = source.ray_w[0] if source.ray_w.size else -band
        dst_lo = (target.ray_w[0] - shear * p.v1) if target.ray_w.size else -band
        y_lo = min(src_lo - 3.0 * sig_st, dst_lo - 2.0 * dy_coarse,
                   fine_lo - 2.0 * dy_coarse)
        # the transit corridor slides down in y on the way to the far
        # ray, so the fine window has to reach the bottom of the target
        # range, not just the detection edges
        fine_lo = min(fine_lo, dst_lo - 2.0 * dy_fine)
        w_top = max(p.w1, band) + 4.5 * sig_st
        v_lo_goal = w_top / p.eta_l - 0.2 * p.v1 if p.eta_l < 0 else -0.5 * p.v1
        y_hi = w_top - shear * v_lo_goal
        segs = [(y_lo, fine_lo, dy_coarse), (fine_lo, fine_hi, dy_fine),
                (fine_hi, y_hi, dy_coarse)]
    else:
        src_hi = (source.ray_w[-1] - shear * p.v1) if source.ray_w.size else band
        dst_hi = target.ray_w[-1] if target.ray_w.size else band
        y_lo = fine_lo - 3.0 * sig_st
        y_hi = max(src_hi, dst_hi, fine_hi) + 2.5 * sig_st
        dy_high = max(sig_st / 6.0, (y_hi - fine_hi) / 260.0)
        mid_hi = min(fine_hi + 4.0 * sig_st, y_hi)
        segs = [(y_lo, fine_lo, dy_coarse), (fine_lo, fine_hi, dy_fine),
                (fine_hi, mid_hi, dy_coarse), (mid_hi, y_hi, dy_high)]
        v_lo_goal = 0.0

    y_edges = _edges_from_segments(segs)
    y_centers = 0.5 * (y_edges[:-1] + y_edges[1:])
    h_y = np.diff(y_edges)

    dv = p.v1 / n_v
    n_left = max(int(math.ceil((0.0 - v_lo_goal) / dv)), 0)
    v_edges = p.v1 - dv * np.arange(n_v + n_left, -1, -1)
    v_centers = 0.5 * (v_edges[:-1] + v_edges[1:])

    u_raw = _backward_edge_positions(p, v_edges, y_centers, dt, shear)
    u_back = np.clip((u_raw - v_edges[0]) / dv, -1.0, v_centers.size + 1.0)

    mult, binv, upr = _w_step_factors(p, v_centers, y_centers, h_y, dt, d,
                                      shear)

    # commit sinks: every cell absorbs the share of its slow extent that
    # lies beyond the detection line.  In sheared coordinates the line is
    # a horizontal edge and the shares are exactly 0 or 1; in the raw
    # frame the line crosses the cells and the fractions keep the
    # effective absorbing height continuous across columns instead of
    # stair-stepping by whole cells
    line = (p.eta1 - shear) * v_centers[None, :]
    lo = y_edges[:-1, None]
    hi = y_edges[1:, None]
    if leg == "12":
        absorb = np.clip((hi - (line + band)) / (hi - lo), 0.0, 1.0)
        absorb = absorb * (v_centers[None, :] > vstar)
    else:
        absorb = np.clip(((line - band) - lo) / (hi - lo), 0.0, 1.0)
        absorb = absorb * ((v_centers[None, :] < vstar)
                           & (v_centers[None, :] >= 0.0))

    info = {"n_v": v_centers.size, "n_y": y_centers.size, "dt": dt,
            "band": band, "cells": int(v_centers.size * y_centers.size)}
    return PdeLeg(p, leg, source, target, d, dt, shear, v_edges, v_centers,
                  y_edges, y_centers, h_y, u_back, mult, binv, upr,
                  np.ascontiguousarray(absorb), int(round(t_cap / dt)),
                  stop_frac, info)
