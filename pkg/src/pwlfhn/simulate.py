"""Euler-Maruyama simulation oracle.

Long single-trajectory runs with event detection (switching-line and
nullcline crossings, oscillation cycles), ensemble first-exit samplers,
and the 1-D reduced return-probability experiment.  Everything here is
deliberately independent of the analytic machinery so the two sides can
cross-validate each other.

Noise enters the w equation only, so v paths are differentiable and
switching-line crossings need no debouncing; nullcline crossings do (the
noisy w wiggles across the curve), handled by a hysteresis band around
w - f(v) sized from the stationary w-fluctuation scale.

Event stream rows are (t, code, a, b) with codes
    0/1  v=0 crossing up/down          a = interpolated w
    2/3  v=v1 crossing up/down         a = interpolated w
    4/5  v=1 crossing up/down          a = interpolated w
    6/7  nullcline crossing up/down    a = interpolated v, b = w
    8    cycle marker                  a = cycle's max v, b = cycle start time
A cycle ends at each passage through the S1 set: an upward v=0 crossing
with w < 0, or a debounced downward nullcline crossing left of the
middle equilibrium.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy.optimize import brentq

from .params import ModelParams, hysteresis_band
from .sections import SectionDensity, SectionGrid, histogram_on_grid

MODEL_IDS = {"pwl": 0, "cubic": 1, "pwl2": 2}

# cons vector layout shared by the kernels
_C_DT, _C_ETAL, _C_ETA1, _C_ETA2, _C_ETAR, _C_V1, _C_W1 = range(7)
_C_EPS, _C_ALPHA, _C_SIGMA, _C_LAM, _C_BAND, _C_VSTAR, _C_MODEL = range(7, 14)

# state vector layout for the chunked single-path kernel
_S_V, _S_W, _S_YST, _S_LCV, _S_LCW, _S_LCT, _S_HASLC = range(7)
_S_VMAX, _S_CYC0, _S_BLOWN, _S_OVERFLOW, _S_DONE, _S_PASSED2 = range(7, 13)
_STATE_LEN = 13


@njit(cache=True, inline="always")
def _f_model(v, cons):
    model = cons[_C_MODEL]
    if model == 1.0:
        return 3.0 * v * v - 2.0 * v * v * v
    if v <= 0.0:
        return cons[_C_ETAL] * v
    if model == 2.0 or v <= cons[_C_V1]:
        return cons[_C_ETA1] * v
    if v <= 1.0:
        return cons[_C_ETA2] * (v - cons[_C_V1]) + cons[_C_W1]
    return cons[_C_ETAR] * (v - 1.0) + 1.0


@njit(cache=True)
def _em_chunk(state, cons, noise, events, n_ev, rec, stride, step0):
    """Advance the path by len(noise) steps, appending events.

    Returns the updated event count.  On buffer overflow the kernel
    stops before the offending step and records progress in the state
    vector so the caller can grow the buffer and resume."""
    dt = cons[_C_DT]
    eps = cons[_C_EPS]
    alpha = cons[_C_ALPHA]
    sigma = cons[_C_SIGMA]
    lam = cons[_C_LAM]
    band = cons[_C_BAND]
    vstar = cons[_C_VSTAR]
    v1 = cons[_C_V1]

    v = state[_S_V]
    w = state[_S_W]
    y_state = state[_S_YST]
    vmax = state[_S_VMAX]
    cap = events.shape[0]
    n = noise.shape[0]
    state[_S_OVERFLOW] = 0.0

    for i in range(n):
        if n_ev + 8 > cap:
            state[_S_OVERFLOW] = 1.0
            break
        s_glob = step0 + i
        if stride > 0 and s_glob % stride == 0:
            r = s_glob // stride
            if r < rec.shape[0]:
                rec[r, 0] = v
                rec[r, 1] = w
        t = s_glob * dt
        y = w - _f_model(v, cons)
        v2 = v + dt * (-y)
        w2 = w + dt * (eps * (alpha * v - sigma * w - lam)) + noise[i]
        if not (math.isfinite(v2) and math.isfinite(w2)):
            state[_S_BLOWN] = 1.0
            state[_S_DONE] = i
            state[_S_V] = v
            state[_S_W] = w
            state[_S_YST] = y_state
            state[_S_VMAX] = vmax
            return n_ev

        # switching-line crossings (v is noiseless: no debounce needed)
        for j in range(3):
            c = 0.0
            if j == 1:
                c = v1
            elif j == 2:
                c = 1.0
            if (v < c) != (v2 < c):
                frac = (c - v) / (v2 - v)
                tc = t + frac * dt
                wc = w + frac * (w2 - w)
                up = v < c
                events[n_ev, 0] = tc
                events[n_ev, 1] = 2.0 * j + (0.0 if up else 1.0)
                events[n_ev, 2] = wc
                events[n_ev, 3] = c
                n_ev += 1
                if j == 1 and up:
                    state[_S_PASSED2] = 1.0
                # a cycle closes on arrival at S1, but only once the
                # revolution actually visited S2 (noise dithering across
                # v=0 near the corner must not spawn phantom cycles)
                if j == 0 and up and wc < 0.0:
                    # an arrival below the left corner starts a fresh pass
                    # through the middle region, so the commit detector is
                    # re-armed here; without this a returning excursion
                    # (whose sweep ends above the band) would silently
                    # swallow the next pass's first nullcline commit
                    y_state = -1.0
                    if state[_S_PASSED2] > 0.0:
                        events[n_ev, 0] = tc
                        events[n_ev, 1] = 8.0
                        events[n_ev, 2] = vmax
                        events[n_ev, 3] = state[_S_CYC0]
                        n_ev += 1
                        state[_S_CYC0] = tc
                        state[_S_PASSED2] = 0.0
                        vmax = v2

        # nullcline crossings are detected on the shifted lines y = +/-band
        # (w wiggles across y = 0 diffusively, so the raw line has no
        # well-defined crossing count); the recorded point is the first
        # touch of the shifted line
        y2 = w2 - _f_model(v2, cons)
        if y_state < 0.0 and y2 > band:
            frac = (band - y) / (y2 - y)
            if frac < 0.0:
                frac = 0.0
            vc = v + frac * (v2 - v)
            tc = t + frac * dt
            events[n_ev, 0] = tc
            events[n_ev, 1] = 6.0
            events[n_ev, 2] = vc
            events[n_ev, 3] = w + frac * (w2 - w)
            n_ev += 1
            if vc > vstar:
                state[_S_PASSED2] = 1.0
            y_state = 1.0
        elif y_state > 0.0 and y2 < -band:
            frac = (-band - y) / (y2 - y)
            if frac < 0.0:
                frac = 0.0
            vc = v + frac * (v2 - v)
            tc = t + frac * dt
            events[n_ev, 0] = tc
            events[n_ev, 1] = 7.0
            events[n_ev, 2] = vc
            events[n_ev, 3] = w + frac * (w2 - w)
            n_ev += 1
            if 0.0 <= vc < vstar and state[_S_PASSED2] > 0.0:
                events[n_ev, 0] = tc
                events[n_ev, 1] = 8.0
                events[n_ev, 2] = vmax
                events[n_ev, 3] = state[_S_CYC0]
                n_ev += 1
                state[_S_CYC0] = tc
                state[_S_PASSED2] = 0.0
                vmax = v2
            y_state = -1.0

        v = v2
        w = w2
        if v > vmax:
            vmax = v
        state[_S_DONE] = i + 1

    state[_S_V] = v
    state[_S_W] = w
    state[_S_YST] = y_state
    state[_S_VMAX] = vmax
    return n_ev


@dataclass
class SimConfig:
    """Settings for a single long stochastic run."""

    t_end: float = 2.0e5
    dt: float = 1.0e-3
    seed: int = 1
    burn_in: float = 1000.0
    model: str = "pwl"
    record_stride: int = 1000

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if not self.t_end > self.burn_in >= 0.0:
            raise ValueError("need t_end > burn_in >= 0")
        if self.model not in MODEL_IDS:
            raise ValueError(f"unknown model {self.model!r}")


@dataclass
class SimResult:
    params: ModelParams
    config: SimConfig
    ts: np.ndarray
    vs: np.ndarray
    ws: np.ndarray
    events: np.ndarray
    cycles: np.ndarray  # rows (t_start, t_end, v_max), burn-in removed
    v_star: float

    def cycle_classes(self) -> np.ndarray:
        """0=small, 1=medium, 2=large per cycle."""
        return np.digitize(self.cycles[:, 2], [self.params.v1, 1.0])


def _model_v_star(p: ModelParams, model: str) -> float:
    """v-coordinate of the middle equilibrium used as the cycle-marker
    window edge; for the cubic model it solves f(v) = (alpha v - lam)/sigma."""
    if model in ("pwl", "pwl2"):
        return min(max(p.lam / (p.alpha - p.sigma * p.eta1), 0.0), p.v1)
    g = lambda v: p.sigma * (3.0 * v * v - 2.0 * v ** 3) - (p.alpha * v - p.lam)
    # smallest root: bracket from 0 (g(0) = lam > 0) rightward
    hi = 0.05
    while g(hi) > 0.0 and hi < 1.0:
        hi *= 1.5
    return brentq(g, 0.0, hi) if g(hi) <= 0.0 else p.v1


def _cons_vector(p: ModelParams, dt: float, model: str) -> np.ndarray:
    band = hysteresis_band(p)
    cons = np.zeros(14)
    cons[_C_DT] = dt
    cons[_C_ETAL] = p.eta_l
    cons[_C_ETA1] = p.eta1
    cons[_C_ETA2] = p.eta2
    cons[_C_ETAR] = p.eta_r
    cons[_C_V1] = p.v1
    cons[_C_W1] = p.w1
    cons[_C_EPS] = p.epsilon
    cons[_C_ALPHA] = p.alpha
    cons[_C_SIGMA] = p.sigma
    cons[_C_LAM] = p.lam
    cons[_C_BAND] = band
    cons[_C_VSTAR] = _model_v_star(p, model)
    cons[_C_MODEL] = float(MODEL_IDS[model])
    return cons


def simulate(p: ModelParams, cfg: SimConfig, x0=None) -> SimResult:
    """Run one Euler-Maruyama path and return the decimated trajectory,
    the event stream, and the burn-in-filtered cycle records.

    The noise stream depends only on (seed, dt, t_end), never on internal
    chunking, so runs are reproducible bit for bit."""
    cons = _cons_vector(p, cfg.dt, cfg.model)
    n_steps = int(round(cfg.t_end / cfg.dt))
    if x0 is None:
        x0 = (0.0, -0.01)
    state = np.zeros(_STATE_LEN)
    state[_S_V], state[_S_W] = float(x0[0]), float(x0[1])
    y0 = state[_S_W] - float(_f_model(state[_S_V], cons))
    state[_S_YST] = -1.0 if y0 < 0.0 else 1.0
    state[_S_VMAX] = state[_S_V]

    stride = max(int(cfg.record_stride), 1)
    rec = np.full((n_steps // stride + 1, 2), np.nan)
    cap = int(40.0 * (cfg.t_end / 20.0 + 100.0))
    events = np.empty((cap, 4))
    n_ev = 0

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    scale = p.noise_d * math.sqrt(cfg.dt)
    chunk = 2_000_000
    step0 = 0
    while step0 < n_steps:
        m = min(chunk, n_steps - step0)
        noise = rng.standard_normal(m) * scale
        off = 0
        while True:
            n_ev = _em_chunk(state, cons, noise[off:], events, n_ev, rec,
                             stride, step0 + off)
            if state[_S_BLOWN] > 0.0:
                raise RuntimeError("simulation blew up to non-finite state "
                                   f"near t = {(step0 + off + state[_S_DONE]) * cfg.dt:.3f}")
            if state[_S_OVERFLOW] > 0.0:
                off += int(state[_S_DONE])
                grown = np.empty((2 * events.shape[0], 4))
                grown[:n_ev] = events[:n_ev]
                events = grown
                continue
            break
        step0 += m

    if n_steps % stride == 0:
        # the kernel samples at the start of each step, so the state after
        # the final step still needs recording
        rec[n_steps // stride, 0] = state[_S_V]
        rec[n_steps // stride, 1] = state[_S_W]

    events = events[:n_ev]
    markers = events[events[:, 1] == 8.0]
    cycles = np.empty((0, 3))
    if markers.shape[0] > 1:
        # each marker row closes the cycle started at its b payload; the
        # first row closes the partial startup cycle and is dropped
        cycles = np.column_stack([markers[1:, 3], markers[1:, 0], markers[1:, 2]])
        cycles = cycles[cycles[:, 0] >= cfg.burn_in]
    ts = np.arange(rec.shape[0]) * (stride * cfg.dt)
    return SimResult(p, cfg, ts, rec[:, 0], rec[:, 1], events, cycles,
                     float(cons[_C_VSTAR]))


def count_oscillations(result: SimResult):
    """Cycle records and size-class fractions.

    Returns (records, fractions, counts) where fractions and counts are
    (small, medium, large) triples."""
    n = result.cycles.shape[0]
    if n < 100:
        warnings.warn(f"only {n} cycles after burn-in; fractions are "
                      "statistically weak", stacklevel=2)
    cls = result.cycle_classes()
    counts = np.bincount(cls, minlength=3)
    frac = counts / max(n, 1)
    return result.cycles, tuple(frac), tuple(int(c) for c in counts)


def _section_event_masks(result: SimResult, sid: str):
    ev = result.events
    code = ev[:, 1]
    a = ev[:, 2]
    p = result.params
    vs = result.v_star
    if sid == "S1":
        ray_m = (code == 0.0) & (a < 0.0)
        null_m = (code == 7.0) & (a >= 0.0) & (a < vs)
    elif sid == "S2":
        ray_m = (code == 2.0) & (a < p.w1)
        null_m = (code == 6.0) & (a > vs) & (a <= p.v1)
    elif sid == "S3":
        ray_m = (code == 3.0) & (a > p.w1)
        null_m = (code == 6.0) & (a > vs) & (a <= p.v1)
    elif sid == "S4":
        ray_m = (code == 1.0) & (a > 0.0)
        null_m = (code == 7.0) & (a >= 0.0) & (a < vs)
    else:
        raise ValueError(f"unknown section {sid!r}")
    return ray_m, null_m


def section_crossings(result: SimResult, sid: str, first_per_cycle: bool = True):
    """Empirical crossing coordinates on one section, after burn-in.

    Returns (ray_w_samples, null_v_samples) in the natural coordinates
    used by SectionDensity.  By default one passage per oscillation cycle
    is kept, selected in leg order: the cycle's S2 crossing is the first
    after the cycle opens, its S3 crossing the first at or after that,
    and so on.  This matches the once-per-revolution section maps; a
    growing subthreshold oscillation can clip a section early in the
    cycle (and noise can recross one), so plain first-in-cycle or raw
    counting would mix passages from different legs."""
    ev = result.events
    code = ev[:, 1]
    a = ev[:, 2]
    ray_m, null_m = _section_event_masks(result, sid)

    keep = ray_m | null_m
    times = ev[keep, 0]
    coords = a[keep]
    is_ray = ray_m[keep]

    mk = code == 8.0
    closes = ev[mk, 0]
    opens = ev[mk, 3]
    if not first_per_cycle or closes.size < 2:
        ok = times >= result.config.burn_in
        return coords[ok & is_ray], coords[ok & ~is_ray]

    good = opens >= result.config.burn_in
    refs = opens
    chain = {"S1": (), "S2": (), "S3": ("S2",), "S4": ("S2", "S3")}[sid]
    for up in chain:
        rm, nm = _section_event_masks(result, up)
        t_up = ev[rm | nm, 0]
        i = np.searchsorted(t_up, refs, side="left")
        has = i < t_up.size
        good &= has
        refs = t_up[np.clip(i, 0, max(t_up.size - 1, 0))] if t_up.size else refs
    i = np.searchsorted(times, refs, side="left")
    has = i < times.size
    idx = np.clip(i, 0, max(times.size - 1, 0))
    good &= has & (times[idx] <= closes) if times.size else False
    sel = idx[good]
    return coords[sel][is_ray[sel]], coords[sel][~is_ray[sel]]


def section_histogram(result: SimResult, grid: SectionGrid) -> SectionDensity:
    """Normalized histogram of a run's crossings on a section grid."""
    ray, null = section_crossings(result, grid.sid)
    return histogram_on_grid(grid, ray, null)


# ---------------------------------------------------------------------------
# ensemble first-exit sampler (point source in the middle region)


@njit(cache=True, parallel=True)
def _first_exit_kernel(v0, w0, seeds, cons, noise_scale, check_ray, max_steps,
                       comp_out, coord_out, t_out):
    dt = cons[_C_DT]
    eps = cons[_C_EPS]
    alpha = cons[_C_ALPHA]
    sigma = cons[_C_SIGMA]
    lam = cons[_C_LAM]
    band = cons[_C_BAND]
    vstar = cons[_C_VSTAR]
    v1 = cons[_C_V1]
    n = seeds.shape[0]
    for k in prange(n):
        np.random.seed(seeds[k])
        v = v0
        w = w0
        y = w - _f_model(v, cons)
        y_state = -1.0 if y < 0.0 else 1.0
        comp = -1.0
        coord = 0.0
        te = 0.0
        for i in range(max_steps):
            t = i * dt
            y = w - _f_model(v, cons)
            v2 = v + dt * (-y)
            w2 = w + dt * (eps * (alpha * v - sigma * w - lam)) \
                + np.random.normal() * noise_scale
            if check_ray > 0.0 and (v < v1) != (v2 < v1) and v < v1:
                frac = (v1 - v) / (v2 - v)
                comp = 0.0
                coord = w + frac * (w2 - w)
                te = t + frac * dt
                break
            y2 = w2 - _f_model(v2, cons)
            if y_state < 0.0 and y2 > band:
                frac = (band - y) / (y2 - y)
                if frac < 0.0:
                    frac = 0.0
                vc = v + frac * (v2 - v)
                y_state = 1.0
                if vc > vstar:
                    comp = 1.0
                    coord = vc
                    te = t + frac * dt
                    break
            elif y_state > 0.0 and y2 < -band:
                y_state = -1.0
            v = v2
            w = w2
        comp_out[k] = comp
        coord_out[k] = coord
        t_out[k] = te


def first_exit_ensemble(
    p: ModelParams,
    x0,
    n_paths: int = 100_000,
    dt: float = 1.0e-3,
    seed: int = 1,
    model: str = "pwl",
    t_max: float = 300.0,
):
    """Sample the first exit through the S2 set from a point source.

    Returns (component, coordinate, time) arrays: component 0 = crossed
    v=v1 (coordinate is w there), 1 = turned back through the nullcline
    right of the equilibrium (coordinate is v), -1 = no exit within
    t_max.  The two-piece model has no kink at v1, so only the nullcline
    component is live there."""
    cons = _cons_vector(p, dt, model)
    seeds = np.random.SeedSequence(seed).generate_state(n_paths).astype(np.int64)
    comp = np.empty(n_paths)
    coord = np.empty(n_paths)
    te = np.empty(n_paths)
    check_ray = 0.0 if model == "pwl2" else 1.0
    noise_scale = p.noise_d * math.sqrt(dt)
    _first_exit_kernel(float(x0[0]), float(x0[1]), seeds, cons, noise_scale,
                       check_ray, int(round(t_max / dt)), comp, coord, te)
    return comp.astype(np.int64), coord, te


# ---------------------------------------------------------------------------
# empirical MMO scan


def mc_mmo_scan(p: ModelParams, lambdas, ds, cfg: SimConfig):
    """Cycle-class fractions over a (lambda, D) grid from independent
    runs.  Returns rows (lam, D, p_small, p_medium, p_large, n_cycles)."""
    rows = []
    for D in np.asarray(ds, dtype=float):
        for lam in np.asarray(lambdas, dtype=float):
            pl = p.replace(lam=float(lam), noise_d=float(D))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = simulate(pl, cfg)
                _, frac, counts = count_oscillations(res)
            rows.append((float(lam), float(D)) + tuple(frac) + (int(sum(counts)),))
    return rows


# ---------------------------------------------------------------------------
# 1-D reduced return-probability experiment


@njit(cache=True, parallel=True)
def _return_prob_kernel(seeds, c, d, delta, dt, y_esc, max_steps):
    sq_dt = math.sqrt(dt)
    sq_delta = math.sqrt(delta)
    hits = 0
    for k in prange(seeds.shape[0]):
        np.random.seed(seeds[k])
        y = c * delta + d * sq_delta * np.random.normal()
        if y <= 0.0:
            hits += 1
            continue
        hit = 0
        for i in range(max_steps):
            y2 = y + c * dt + d * sq_dt * np.random.normal()
            if y2 <= 0.0:
                hit = 1
                break
            # Brownian-bridge crossing probability between endpoints,
            # exact for constant drift
            if np.random.random() < math.exp(-2.0 * y * y2 / (d * d * dt)):
                hit = 1
                break
            y = y2
            if y > y_esc:
                break
        hits += hit
    return hits


def mc_return_probability(
    c: float,
    delta: float,
    d: float,
    n_paths: int = 1_000_000,
    dt: float = 1.0e-3,
    seed: int = 7,
    residual: float = 1.0e-9,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the probability that dy = c dt + D dW
    started at 0 is at or returns below zero after time delta.

    The state at delta is sampled exactly; afterwards paths step with a
    bridge-corrected crossing test until they hit zero or clear the
    escape level where the residual hitting probability is below the
    given bound.  Returns (estimate, standard error)."""
    y_esc = d * d / (2.0 * c) * math.log(1.0 / residual)
    seeds = np.random.SeedSequence(seed).generate_state(n_paths).astype(np.int64)
    max_steps = int(round((y_esc / c * 20.0 + 10.0 * delta) / dt))
    hits = _return_prob_kernel(seeds, float(c), float(d), float(delta),
                               float(dt), float(y_esc), max_steps)
    phat = hits / n_paths
    se = math.sqrt(max(phat * (1.0 - phat), 1e-300) / n_paths)
    return float(phat), float(se)
