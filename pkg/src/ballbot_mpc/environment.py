"""Signed-distance environment built from vertical wall surfaces.

Walls are vertical planes (optionally clipped to a finite horizontal span)
described by an anchor point and an inward unit normal; the free workspace
is on the normal's side.  The environment exposes the pointwise minimum of
the member distances, its gradient, and the surface frame used to express
contact forces: normal, horizontal tangent, and vertical.

All evaluation paths are plain functions of arrays so they can be traced
and differentiated inside the planner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

_FAR = 1e9
_SAFE_EPS = 1e-18


@dataclass
class WallSurface:
    """One vertical wall.

    Attributes:
        wall_id: short unique label used in logs and schedules.
        point: any point on the wall face (world frame, m).
        inward_normal: horizontal unit normal pointing into free space.
        extent: optional (lo, hi) span along the wall tangent
            ``z_hat x normal`` measured from ``point``; None is infinite.
    """

    wall_id: str
    point: np.ndarray
    inward_normal: np.ndarray
    extent: tuple | None = None

    def __post_init__(self) -> None:
        self.point = np.asarray(self.point, dtype=float)
        self.inward_normal = np.asarray(self.inward_normal, dtype=float)

    def validate(self) -> None:
        if self.point.shape != (3,):
            raise ValueError(f"wall {self.wall_id}: point must be a 3-vector")
        n = self.inward_normal
        if n.shape != (3,):
            raise ValueError(f"wall {self.wall_id}: normal must be a 3-vector")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"wall {self.wall_id}: normal must be unit length")
        if abs(n[2]) > 1e-9:
            raise ValueError(f"wall {self.wall_id}: normal must be horizontal")
        if self.extent is not None:
            lo, hi = self.extent
            if not lo < hi:
                raise ValueError(f"wall {self.wall_id}: extent must satisfy "
                                 f"lo < hi")

    def tangent(self) -> np.ndarray:
        """Horizontal span direction z_hat x normal."""
        return np.cross([0.0, 0.0, 1.0], self.inward_normal)


def _wall_distances(p, points, normals, extents):
    """Distances from p to every wall (vectorised, trace friendly)."""
    q = p[None, :] - points
    off = jnp.sum(q * normals, axis=1)
    tangents = jnp.cross(jnp.array([0.0, 0.0, 1.0])[None, :], normals)
    along = jnp.sum(q * tangents, axis=1)
    mid = 0.5 * (extents[:, 0] + extents[:, 1])
    half = 0.5 * (extents[:, 1] - extents[:, 0])
    over = jnp.abs(along - mid) - half
    out_n = jnp.maximum(off, 0.0)
    out_t = jnp.maximum(over, 0.0)
    outside = jnp.sqrt(out_n ** 2 + out_t ** 2 + _SAFE_EPS)
    inside = jnp.minimum(jnp.maximum(off, over), 0.0)
    return outside + inside


def _combined_distance(p, points, normals, extents, smoothing):
    d = _wall_distances(p, points, normals, extents)
    if smoothing > 0.0:
        return -smoothing * jax.scipy.special.logsumexp(-d / smoothing)
    return jnp.min(d)


@dataclass
class SdfEnvironment:
    """A collection of walls queried through one signed-distance field."""

    walls: list = field(default_factory=list)
    smoothing_radius: float = 0.0

    def __post_init__(self) -> None:
        # Plain numpy constants, built eagerly: traced code may query the
        # field, and anything cached mid-trace would leak tracers.
        if self.walls:
            self._points = np.stack([w.point for w in self.walls])
            self._normals = np.stack([w.inward_normal for w in self.walls])
            self._extents = np.stack([
                np.array(w.extent, dtype=float) if w.extent is not None
                else np.array([-_FAR, _FAR]) for w in self.walls])
        else:
            self._points = np.zeros((0, 3))
            self._normals = np.zeros((0, 3))
            self._extents = np.zeros((0, 2))

    def validate(self) -> None:
        ids = [w.wall_id for w in self.walls]
        if len(set(ids)) != len(ids):
            raise ValueError("wall ids must be unique")
        for w in self.walls:
            w.validate()
        if self.smoothing_radius < 0.0:
            raise ValueError("smoothing_radius must be >= 0")

    # Array form used by traced code -------------------------------------

    def arrays(self):
        """(points, normals, extents) as numpy constants."""
        return self._points, self._normals, self._extents

    # Queries --------------------------------------------------------------

    def sdf(self, p):
        """Smallest signed distance from p to any wall (+inf-like if none)."""
        if not self.walls:
            return jnp.asarray(_FAR)
        points, normals, extents = self.arrays()
        return _combined_distance(jnp.asarray(p), points, normals, extents,
                                  self.smoothing_radius)

    def sdf_gradient(self, p):
        """Gradient of the combined distance; unit normal on a wall face."""
        if not self.walls:
            return jnp.array([1.0, 0.0, 0.0])
        points, normals, extents = self.arrays()
        fn = lambda q: _combined_distance(q, points, normals, extents,
                                          self.smoothing_radius)
        return jax.grad(fn)(jnp.asarray(p))

    def contact_frame(self, p):
        """Surface frame (normal, horizontal tangent, vertical) at p."""
        e_n = self.sdf_gradient(p)
        e_n = e_n / jnp.sqrt(jnp.sum(e_n ** 2) + _SAFE_EPS)
        e_t = jnp.cross(e_n, jnp.array([0.0, 0.0, 1.0]))
        e_z = jnp.array([0.0, 0.0, 1.0])
        return e_n, e_t, e_z

    def wall_distances(self, p):
        """Per-wall distances, same order as ``walls``."""
        points, normals, extents = self.arrays()
        return _wall_distances(jnp.asarray(p), points, normals, extents)

    def nearest_wall_id(self, p) -> str:
        """Label of the closest wall; raises if the environment is empty."""
        if not self.walls:
            raise ValueError("environment has no walls")
        d = np.asarray(self.wall_distances(p))
        return self.walls[int(np.argmin(d))].wall_id
