"""Periodic box grid, regions, node classification and smooth compactly
supported fields.

Scalar fields are arrays of shape ``(N, N, N)``; vector fields are arrays of
shape ``(3, N, N, N)``.  Everything here is plain numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised when a grid or region violates a geometric precondition."""


@dataclass(frozen=True)
class BoxGrid:
    L: float
    N: int

    def __post_init__(self):
        if not (self.L > 0):
            raise GeometryError(f"half width must be positive, got {self.L}")
        if int(self.N) != self.N or self.N < 8 or self.N % 2:
            raise GeometryError(f"resolution must be an even integer >= 8, got {self.N}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def shape(self) -> tuple:
        return (self.N, self.N, self.N)

    @property
    def num_nodes(self) -> int:
        return self.N ** 3

    @property
    def cell_volume(self) -> float:
        return self.h ** 3

    @property
    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.N)

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape ``(3, N, N, N)``."""
        return np.stack(np.meshgrid(self.axis, self.axis, self.axis, indexing="ij"))

    def wavenumbers(self) -> np.ndarray:
        """Dual wavenumbers along one axis, (pi/L) * {-N/2, ..., N/2-1} (sorted)."""
        return (np.pi / self.L) * np.arange(-self.N // 2, self.N // 2)


def build_grid(L: float, N: int) -> BoxGrid:
    return BoxGrid(float(L), int(N))


@dataclass(frozen=True)
class Region:
    """Open ball, open axis-aligned box, or open cubic frame.

    A frame is the set ``inner < max_i |x_i - c_i| < outer``: the layer between
    two concentric cubes, used to surround a domain with exterior data.
    """

    shape: str
    center: tuple
    radius: float = 0.0
    half_extents: tuple = (0.0, 0.0, 0.0)
    inner: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "half_extents", tuple(float(e) for e in self.half_extents))
        if len(self.center) != 3:
            raise GeometryError("region center must have 3 coordinates")
        if self.shape == "ball":
            if not self.radius > 0:
                raise GeometryError(f"ball radius must be positive, got {self.radius}")
        elif self.shape == "box":
            if len(self.half_extents) != 3 or min(self.half_extents) <= 0:
                raise GeometryError(f"box half extents must be positive, got {self.half_extents}")
        elif self.shape == "frame":
            if not 0 < self.inner < self.radius:
                raise GeometryError(f"frame needs 0 < inner < outer, got {self.inner}, {self.radius}")
        else:
            raise GeometryError(f"unknown region shape {self.shape!r}")

    @classmethod
    def ball(cls, center: Sequence[float], radius: float) -> "Region":
        return cls("ball", tuple(center), radius=float(radius))

    @classmethod
    def box(cls, center: Sequence[float], half_extents: Sequence[float]) -> "Region":
        return cls("box", tuple(center), half_extents=tuple(half_extents))

    @classmethod
    def frame(cls, center: Sequence[float], inner: float, outer: float) -> "Region":
        return cls("frame", tuple(center), radius=float(outer), inner=float(inner))

    def contains(self, x: np.ndarray, closed: bool = False) -> np.ndarray:
        """Membership predicate for points ``x`` of shape ``(3, ...)``."""
        c = np.asarray(self.center).reshape((3,) + (1,) * (x.ndim - 1))
        d = x - c
        if self.shape == "frame":
            sup = np.max(np.abs(d), axis=0)
            if closed:
                return (sup >= self.inner) & (sup <= self.radius)
            return (sup > self.inner) & (sup < self.radius)
        if self.shape == "ball":
            r2 = np.sum(d * d, axis=0)
            return r2 <= self.radius ** 2 if closed else r2 < self.radius ** 2
        e = np.asarray(self.half_extents).reshape(c.shape)
        inside = np.abs(d) <= e if closed else np.abs(d) < e
        return np.all(inside, axis=0)

    def bounding_box(self) -> tuple:
        c = np.asarray(self.center)
        ext = np.asarray(self.half_extents) if self.shape == "box" else np.full(3, self.radius)
        return c - ext, c + ext

    def distance_to_boundary(self, p: Sequence[float]) -> float:
        """Distance from an interior point to the region boundary (negative if outside)."""
        d = np.asarray(p, dtype=float) - np.asarray(self.center)
        if self.shape == "ball":
            return self.radius - float(np.linalg.norm(d))
        if self.shape == "frame":
            outside_inner = float(np.linalg.norm(np.maximum(np.abs(d) - self.inner, 0.0)))
            if outside_inner == 0.0:
                return -float(np.min(self.inner - np.abs(d)))
            return min(outside_inner, float(np.min(self.radius - np.abs(d))))
        return float(np.min(np.asarray(self.half_extents) - np.abs(d)))

    def contains_region(self, other: "Region") -> bool:
        """True when ``other`` lies strictly inside ``self``."""
        if other.shape == "ball":
            return self.distance_to_boundary(other.center) > other.radius
        lo, hi = other.bounding_box()
        if self.shape == "frame":
            if other.shape == "frame":
                return False
            c = np.asarray(self.center)
            in_outer = bool(np.all(lo > c - self.radius) and np.all(hi < c + self.radius))
            separated = bool(np.any(hi <= c - self.inner) or np.any(lo >= c + self.inner))
            return in_outer and separated
        corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(3, -1)
        if self.shape == "ball":
            return bool(np.all(self.contains(corners)))
        slo, shi = self.bounding_box()
        return bool(np.all(lo > slo) and np.all(hi < shi))

    def to_dict(self) -> dict:
        if self.shape == "ball":
            return {"shape": "ball", "center": list(self.center), "radius": self.radius}
        if self.shape == "frame":
            return {"shape": "frame", "center": list(self.center), "inner": self.inner, "outer": self.radius}
        return {"shape": "box", "center": list(self.center), "half_extents": list(self.half_extents)}

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        if d.get("shape") == "ball":
            return cls.ball(d["center"], d["radius"])
        if d.get("shape") == "box":
            return cls.box(d["center"], d["half_extents"])
        if d.get("shape") == "frame":
            return cls.frame(d["center"], d["inner"], d["outer"])
        raise GeometryError(f"unknown region spec {d!r}")


def _inside_box(grid: BoxGrid, region: Region) -> bool:
    lo, hi = region.bounding_box()
    return bool(np.all(lo >= -grid.L) and np.all(hi <= grid.L))


@dataclass(frozen=True)
class NodePartition:
    """Boolean node masks over the grid; ``free`` is where unknowns live."""

    grid: BoxGrid
    omega: np.ndarray
    obstacle: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    margin: float = field(default=np.inf)

    @property
    def exterior(self) -> np.ndarray:
        return ~self.omega

    @property
    def free(self) -> np.ndarray:
        return self.omega & ~self.obstacle

    @property
    def has_obstacle(self) -> bool:
        return bool(self.obstacle.any())

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(getattr(self, name))

    def without_obstacle(self) -> "NodePartition":
        return NodePartition(self.grid, self.omega, np.zeros_like(self.omega), self.w1, self.w2, self.margin)

    def with_obstacle_mask(self, obstacle: np.ndarray) -> "NodePartition":
        if np.any(obstacle & ~self.omega):
            raise GeometryError("obstacle nodes must lie in omega")
        return NodePartition(self.grid, self.omega, obstacle.copy(), self.w1, self.w2, self.margin)


def _min_node_distance(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    pa = x[:, a].T
    pb = x[:, b].T
    if len(pa) == 0 or len(pb) == 0:
        return np.inf
    best = np.inf
    for chunk in np.array_split(pa, max(1, len(pa) // 256 + 1)):
        d2 = np.sum((chunk[:, None, :] - pb[None, :, :]) ** 2, axis=-1)
        best = min(best, float(d2.min()))
    return float(np.sqrt(best))


def obstacle_mask(grid: BoxGrid, omega: Region, obstacle: Region) -> np.ndarray:
    if not omega.contains_region(obstacle):
        raise GeometryError("obstacle must lie strictly inside omega")
    x = grid.coordinates()
    mask = obstacle.contains(x) & omega.contains(x)
    if not mask.any():
        raise GeometryError("obstacle contains no grid node")
    return mask


def classify_nodes(grid: BoxGrid, omega: Region, obstacle: Optional[Region],
                   w1: Region, w2: Region) -> NodePartition:
    for name, reg in (("omega", omega), ("w1", w1), ("w2", w2)):
        if not _inside_box(grid, reg):
            raise GeometryError(f"region {name} escapes the box [-{grid.L}, {grid.L}]^3")
    x = grid.coordinates()
    om = omega.contains(x)
    if not om.any():
        raise GeometryError("omega contains no grid node")
    om_closed = omega.contains(x, closed=True)
    obs = np.zeros_like(om) if obstacle is None else obstacle_mask(grid, omega, obstacle)

    masks = {}
    margin = np.inf
    for name, reg in (("w1", w1), ("w2", w2)):
        m = reg.contains(x)
        if not m.any():
            raise GeometryError(f"{name} contains no grid node")
        if np.any(m & om_closed):
            raise GeometryError(f"{name} overlaps the closure of omega")
        dist = _min_node_distance(x, m, om)
        if dist < 2 * grid.h - 1e-12:
            raise GeometryError(
                f"{name} lies {dist:.4g} from omega nodes; need at least 2h = {2 * grid.h:.4g}")
        margin = min(margin, dist)
        masks[name] = m
    return NodePartition(grid, om, obs, masks["w1"], masks["w2"], margin)


def mollifier(r2: np.ndarray) -> np.ndarray:
    """exp(-1/(1 - r2)) for r2 < 1, else 0 (r2 is the squared scaled radius)."""
    out = np.zeros_like(r2, dtype=float)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def scalar_bump(grid: BoxGrid, center: Sequence[float], radii, amplitude: float = 1.0) -> np.ndarray:
    """Anisotropic mollifier bump with per-axis radii (a scalar radius is isotropic)."""
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (3,))
    c = np.asarray(center, dtype=float)
    lo, hi = c - radii, c + radii
    if np.any(lo < -grid.L) or np.any(hi > grid.L):
        raise GeometryError("bump support exits the grid box")
    x = grid.coordinates()
    r2 = np.sum(((x - c.reshape(3, 1, 1, 1)) / radii.reshape(3, 1, 1, 1)) ** 2, axis=0)
    return amplitude * mollifier(r2)


def make_bump(center: Sequence[float], radius: float, amplitude: Sequence[float], grid: BoxGrid,
              region: Optional[Region] = None) -> np.ndarray:
    """Vector bump: component i is ``amplitude[i] * exp(-1/(1-|x-c|^2/r^2))``."""
    if region is not None and not region.contains_region(Region.ball(center, radius)):
        raise GeometryError("bump ball is not inside its declared region")
    profile = scalar_bump(grid, center, radius)
    amp = np.asarray(amplitude, dtype=float).reshape(3, 1, 1, 1)
    return amp * profile[None]


def smooth_step(t: np.ndarray) -> np.ndarray:
    """C-infinity transition: 1 for t <= 0, 0 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    a = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    b = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
    return a / (a + b)


def distance_to_region(x: np.ndarray, region: Region) -> np.ndarray:
    """Euclidean distance from points to a closed region (0 inside)."""
    c = np.asarray(region.center).reshape((3,) + (1,) * (x.ndim - 1))
    d = x - c
    if region.shape == "ball":
        return np.maximum(np.sqrt(np.sum(d * d, axis=0)) - region.radius, 0.0)
    if region.shape != "box":
        raise GeometryError("distance is only defined for ball and box regions")
    e = np.asarray(region.half_extents).reshape(c.shape)
    return np.sqrt(np.sum(np.maximum(np.abs(d) - e, 0.0) ** 2, axis=0))


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    """Grow a node mask by ``steps`` nearest-neighbour moves along the axes (periodic)."""
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        for ax in range(3):
            grown |= np.roll(out, 1, axis=ax) | np.roll(out, -1, axis=ax)
        out = grown
    return out


def make_cutoff(psi_support: Region, omega: Region, grid: BoxGrid, fill: float = 0.9) -> np.ndarray:
    """Cutoff equal to 1 on every node within two axis steps of the ``psi_support``
    nodes, decaying smoothly to 0 at the last omega nodes and vanishing outside.

    Centered differences of a field supported in ``psi_support`` reach one node
    further; the two-step plateau makes differences of the cutoff vanish exactly
    there, so products like ``D(x_j chi) * D(psi)`` reduce to ``D(psi)``.
    """
    x = grid.coordinates()
    om = omega.contains(x)
    core = psi_support.contains(x)
    if not core.any():
        raise GeometryError("psi support contains no grid node")
    plateau = _dilate(core, 2)
    if np.any(plateau & ~om):
        raise GeometryError("psi support is within two grid steps of the omega boundary")
    pts = x[:, plateau].T
    d = np.full(grid.shape, np.inf)
    for chunk in np.array_split(np.arange(len(pts)), max(1, len(pts) // 256)):
        diff = x[..., None] - pts[chunk].T.reshape(3, 1, 1, 1, -1)
        d = np.minimum(d, np.sqrt(np.sum(diff * diff, axis=0)).min(axis=-1))
    outside = d[~om]
    room = float(outside.min()) if outside.size else np.inf
    span = max(fill * room, 1e-12) if np.isfinite(room) else 1.0
    chi = smooth_step(d / span)
    chi[plateau] = 1.0
    chi[~om] = 0.0
    return chi


def make_cutoff_coordinate(j: int, psi_support: Region, omega: Region, grid: BoxGrid,
                           fill: float = 0.9) -> np.ndarray:
    """Field equal to ``x_j`` on ``psi_support``, compactly supported in omega."""
    if j not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {j}")
    chi = make_cutoff(psi_support, omega, grid, fill)
    return grid.coordinates()[j] * chi


def smoothed_indicator(mask: np.ndarray) -> np.ndarray:
    """Indicator averaged over the 3-node stencil along each axis (periodic)."""
    out = mask.astype(float)
    for ax in range(3):
        out = (np.roll(out, 1, axis=ax) + out + np.roll(out, -1, axis=ax)) / 3.0
    return out
