"""Cross-sections of the oscillation cycle and densities on them.

Each section is a two-component polyline: a ray on a switching line plus
a segment of the middle-region fast nullcline, joined at a corner.

    S1: {v=0, w<0}            + {w=eta1*v, 0 <= v < v*}
    S2: {v=v1, w<w1}          + {w=eta1*v, v* < v <= v1}
    S3: {v=v1, w>w1}          + the same segment as S2
    S4: {v=0, w>0}            + the same segment as S1

where v* is the v-coordinate of the middle-region equilibrium.  The
nullcline segments are shared pairwise because an orbit that turns back
on the nullcline sits on both the outgoing and the returning section at
the same point.

Arc-length coordinates run negative-to-positive through the corner:
on S1/S2 the ray is the negative side and the nullcline positive, on
S3/S4 the reverse, so the chain S1 -> S2 -> S3 -> S4 keeps a consistent
orientation around the cycle.  Densities are stored per unit natural
coordinate (w on rays, v on nullcline segments).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import ModelParams, hysteresis_band

SECTION_IDS = ("S1", "S2", "S3", "S4")


def v_star(p: ModelParams) -> float:
    """v-coordinate of the middle-region equilibrium (clamped to the
    region so the section segments stay inside it)."""
    v = p.lam / (p.alpha - p.sigma * p.eta1)
    return min(max(v, 0.0), p.v1)


def arc_scale(p: ModelParams) -> float:
    """Arc length per unit v along the middle nullcline."""
    return math.sqrt(1.0 + p.eta1 ** 2)


@dataclass(frozen=True)
class SectionShape:
    """Geometry of one section for a fixed parameter set."""

    sid: str
    v_line: float        # the ray lives on v = v_line
    corner_w: float      # w where the ray meets the nullcline corner
    ray_side: float      # ray occupies w on this side of corner_w (+1/-1)
    ray_arc_sign: float  # arc = ray_arc_sign * (w - corner_w)
    null_lo: float       # nullcline segment v-range
    null_hi: float
    null_arc_ref: float  # arc = null_arc_sign * scale * (v - null_arc_ref)
    null_arc_sign: float
    eta1: float
    scale: float
    null_off: float      # w-offset of the detection line above the branch

    def ray_points(self, w):
        w = np.asarray(w, dtype=float)
        return np.stack(np.broadcast_arrays(np.full_like(w, self.v_line), w), axis=-1)

    def null_points(self, v):
        v = np.asarray(v, dtype=float)
        return np.stack(np.broadcast_arrays(v, self.eta1 * v + self.null_off),
                        axis=-1)

    def ray_arc(self, w):
        return self.ray_arc_sign * (np.asarray(w, dtype=float) - self.corner_w)

    def null_arc(self, v):
        return self.null_arc_sign * self.scale * (np.asarray(v, dtype=float)
                                                  - self.null_arc_ref)


def section_shape(p: ModelParams, sid: str) -> SectionShape:
    vs = v_star(p)
    sc = arc_scale(p)
    # nullcline crossings are detected on the lines shifted by the
    # hysteresis band: upward commits (S2, S3) above the branch,
    # downward commits (S1, S4) below it
    band = hysteresis_band(p)
    if sid == "S1":
        return SectionShape("S1", 0.0, 0.0, -1.0, 1.0, 0.0, vs, 0.0, 1.0,
                            p.eta1, sc, -band)
    if sid == "S2":
        return SectionShape("S2", p.v1, p.w1, -1.0, 1.0, vs, p.v1, p.v1, -1.0,
                            p.eta1, sc, band)
    if sid == "S3":
        return SectionShape("S3", p.v1, p.w1, 1.0, 1.0, vs, p.v1, p.v1, 1.0,
                            p.eta1, sc, band)
    if sid == "S4":
        return SectionShape("S4", 0.0, 0.0, 1.0, 1.0, 0.0, vs, 0.0, -1.0,
                            p.eta1, sc, -band)
    raise ValueError(f"unknown section {sid!r}")


@dataclass(frozen=True)
class SectionGrid:
    """Fixed node sets for one section: equally spaced in the natural
    coordinate within each component."""

    shape: SectionShape
    ray_w: np.ndarray    # ascending w nodes on the ray
    null_v: np.ndarray   # ascending v nodes on the segment (may be empty)

    @property
    def sid(self) -> str:
        return self.shape.sid

    def ray_xy(self) -> np.ndarray:
        return self.shape.ray_points(self.ray_w)

    def null_xy(self) -> np.ndarray:
        return self.shape.null_points(self.null_v)


def make_grid(
    p: ModelParams,
    sid: str,
    ray_extent: tuple[float, float],
    n_ray: int = 200,
    n_null: int = 200,
    null_extent: tuple[float, float] | None = None,
) -> SectionGrid:
    """Build a grid whose ray spans the given w-interval; the nullcline
    segment spans its full geometric range unless null_extent overrides
    it (used for reduced models whose branch continues past v1)."""
    shape = section_shape(p, sid)
    lo, hi = float(min(ray_extent)), float(max(ray_extent))
    ray_w = np.linspace(lo, hi, n_ray) if n_ray > 0 else np.empty(0)
    if n_null <= 0:
        null_v = np.empty(0)
    elif null_extent is not None:
        null_v = np.linspace(float(null_extent[0]), float(null_extent[1]), n_null)
    elif shape.null_hi > shape.null_lo + 1e-15:
        span = shape.null_hi - shape.null_lo
        # keep nodes strictly inside the open end at the equilibrium,
        # where the density vanishes anyway
        pad = span * 0.5 / n_null
        if sid in ("S1", "S4"):
            null_v = np.linspace(shape.null_lo, shape.null_hi - pad, n_null)
        else:
            null_v = np.linspace(shape.null_lo + pad, shape.null_hi, n_null)
    else:
        null_v = np.empty(0)
    return SectionGrid(shape, ray_w, null_v)


def _trapz_weights(x: np.ndarray) -> np.ndarray:
    if x.size == 0:
        return np.empty(0)
    if x.size == 1:
        return np.ones(1)
    w = np.empty_like(x)
    w[1:-1] = 0.5 * (x[2:] - x[:-2])
    w[0] = 0.5 * (x[1] - x[0])
    w[-1] = 0.5 * (x[-1] - x[-2])
    return w


@dataclass
class SectionDensity:
    """Density values on a section grid, per unit natural coordinate."""

    grid: SectionGrid
    ray: np.ndarray
    null: np.ndarray

    def __post_init__(self):
        self.ray = np.asarray(self.ray, dtype=float)
        self.null = np.asarray(self.null, dtype=float)

    @property
    def sid(self) -> str:
        return self.grid.sid

    def component_masses(self) -> tuple[float, float]:
        mr = float(np.dot(_trapz_weights(self.grid.ray_w), self.ray))
        mn = float(np.dot(_trapz_weights(self.grid.null_v), self.null))
        return mr, mn

    def mass(self) -> float:
        mr, mn = self.component_masses()
        return mr + mn

    def normalized(self) -> "SectionDensity":
        m = self.mass()
        if m <= 0.0:
            raise ValueError(f"cannot normalize zero-mass density on {self.sid}")
        return SectionDensity(self.grid, self.ray / m, self.null / m)

    def l1_gap(self, other: "SectionDensity") -> float:
        if other.grid is not self.grid and (
            other.grid.ray_w.shape != self.grid.ray_w.shape
            or not np.array_equal(other.grid.ray_w, self.grid.ray_w)
            or not np.array_equal(other.grid.null_v, self.grid.null_v)
        ):
            raise ValueError("L1 gap requires matching grids")
        gr = np.dot(_trapz_weights(self.grid.ray_w), np.abs(self.ray - other.ray))
        gn = np.dot(_trapz_weights(self.grid.null_v), np.abs(self.null - other.null))
        return float(gr + gn)

    def rows(self):
        """(arc, v, w, density-per-arc) tuples over both components in
        ascending arc order, for CSV output."""
        sh = self.grid.shape
        out = []
        ray_arc = sh.ray_arc(self.grid.ray_w)
        null_arc = sh.null_arc(self.grid.null_v)
        for s, w, d in zip(ray_arc, self.grid.ray_w, self.ray):
            out.append((float(s), sh.v_line, float(w), float(d)))
        for s, v, d in zip(null_arc, self.grid.null_v, self.null / sh.scale):
            out.append((float(s), float(v), float(sh.eta1 * v + sh.null_off),
                        float(d)))
        out.sort(key=lambda r: r[0])
        return out


def histogram_on_grid(
    grid: SectionGrid, ray_w_samples: np.ndarray, null_v_samples: np.ndarray
) -> SectionDensity:
    """Bin empirical crossing coordinates onto a section grid and return
    the normalized density (per unit natural coordinate, matching
    SectionDensity conventions).  Samples outside the grid are clipped
    into the end bins."""
    def binned(nodes: np.ndarray, samples: np.ndarray) -> np.ndarray:
        if nodes.size == 0:
            return np.empty(0)
        if nodes.size == 1:
            return np.array([float(samples.size)])
        edges = np.empty(nodes.size + 1)
        edges[1:-1] = 0.5 * (nodes[1:] + nodes[:-1])
        edges[0], edges[-1] = nodes[0], nodes[-1]
        counts, _ = np.histogram(np.clip(samples, nodes[0], nodes[-1]), bins=edges)
        return counts / np.maximum(_trapz_weights(nodes), 1e-300)

    n_total = ray_w_samples.size + null_v_samples.size
    if n_total == 0:
        raise ValueError("no crossings recorded on this section")
    dens = SectionDensity(
        grid,
        binned(grid.ray_w, np.asarray(ray_w_samples, dtype=float)),
        binned(grid.null_v, np.asarray(null_v_samples, dtype=float)),
    )
    return dens.normalized()
