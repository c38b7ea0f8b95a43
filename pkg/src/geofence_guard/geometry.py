"""Planar geofence geometry: simple polygons with a signed distance field.

The safe region is the closed set bounded by a simple polygon.  Every
query follows one sign convention:

    sdf(p) > 0   strictly inside the fence
    sdf(p) = 0   on the boundary
    sdf(p) < 0   outside

so the safe set is exactly {p : sdf(p) >= 0} and the inward unit normal
is the gradient of the signed distance wherever that gradient exists.
The gradient is undefined only on the measure-zero loci where two
boundary features are equidistant; callers are expected to fall back to
finite differences there (see ``sdf_gradient_fd``).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "PolygonError",
    "DegenerateGradient",
    "Polygon",
    "sdf_gradient_fd",
    "load_polygon",
    "save_polygon",
]

# Two consecutive vertices closer than this are considered coincident.
_DUP_TOL = 1e-9
# Two equidistant nearest features within this tolerance make the
# gradient degenerate.
_FEATURE_TOL = 1e-9
# Unsigned distance below this counts as "on the boundary".
_BOUNDARY_TOL = 1e-12


class PolygonError(ValueError):
    """Raised when vertex data does not describe a valid simple polygon."""


class DegenerateGradient(ArithmeticError):
    """Raised by inward_normal where two boundary features are equidistant."""


def _orient(ax, ay, bx, by, cx, cy):
    """Sign of the cross product (b-a) x (c-a)."""
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _segments_intersect(p1, p2, p3, p4):
    """True if closed segments p1p2 and p3p4 share any point."""
    d1 = _orient(*p3, *p4, *p1)
    d2 = _orient(*p3, *p4, *p2)
    d3 = _orient(*p1, *p2, *p3)
    d4 = _orient(*p1, *p2, *p4)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True

    def on_seg(ax, ay, bx, by, cx, cy):
        return min(ax, bx) <= cx <= max(ax, bx) and min(ay, by) <= cy <= max(ay, by)

    if d1 == 0 and on_seg(*p3, *p4, *p1):
        return True
    if d2 == 0 and on_seg(*p3, *p4, *p2):
        return True
    if d3 == 0 and on_seg(*p1, *p2, *p3):
        return True
    if d4 == 0 and on_seg(*p1, *p2, *p4):
        return True
    return False


class Polygon:
    """Simple polygon, closed implicitly (last vertex connects to first).

    Vertices are kept in construction order; orientation (clockwise or
    counter-clockwise) does not matter because the inside test is an
    even-odd ray crossing count.  Instances are immutable after
    construction and safe for concurrent reads.
    """

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise PolygonError("vertices must be an (n, 2) array")
        if v.shape[0] < 3:
            raise PolygonError("polygon needs at least 3 vertices")
        if not np.all(np.isfinite(v)):
            raise PolygonError("vertices must be finite")
        nxt = np.roll(v, -1, axis=0)
        if np.any(np.hypot(*(nxt - v).T) < _DUP_TOL):
            raise PolygonError("consecutive vertices coincide")
        self._v = v
        self._v.setflags(write=False)
        self._a = v
        self._b = nxt
        self._e = nxt - v
        self._ee = np.einsum("ij,ij->i", self._e, self._e)
        # plain-float copies for the scalar fast path used by the
        # control loop (numpy scalar overhead dominates there)
        self._edges_py = [
            (float(ax), float(ay), float(ex), float(ey), float(ee))
            for (ax, ay), (ex, ey), ee in zip(v, self._e, self._ee)
        ]
        self._check_simple()

    def _check_simple(self):
        n = len(self._v)
        segs = [(tuple(self._a[i]), tuple(self._b[i])) for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if j == i or (j == i + 1) or (i == 0 and j == n - 1):
                    continue  # adjacent edges legitimately share a vertex
                if _segments_intersect(segs[i][0], segs[i][1], segs[j][0], segs[j][1]):
                    raise PolygonError("polygon is self-intersecting")

    @property
    def vertices(self) -> np.ndarray:
        return self._v

    def __len__(self):
        return len(self._v)

    # -- inside test ---------------------------------------------------

    def contains(self, p) -> bool:
        """Even-odd inside test; points exactly on an edge count as inside."""
        x, y = float(p[0]), float(p[1])
        if self._boundary_distance(x, y) <= _BOUNDARY_TOL:
            return True
        return self._crossings_odd(x, y)

    def _crossings_odd(self, x: float, y: float) -> bool:
        inside = False
        for (ax, ay), (bx, by) in zip(self._a, self._b):
            if (ay > y) != (by > y):
                x_cross = ax + (y - ay) * (bx - ax) / (by - ay)
                if x < x_cross:
                    inside = not inside
        return inside

    # -- distance ------------------------------------------------------

    def _boundary_distance(self, x: float, y: float) -> float:
        """Unsigned min distance to the boundary, scalar fast path."""
        best = math.inf
        for ax, ay, ex, ey, ee in self._edges_py:
            t = ((x - ax) * ex + (y - ay) * ey) / ee
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            dx = x - (ax + t * ex)
            dy = y - (ay + t * ey)
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
        return math.sqrt(best)

    def signed_distance(self, p) -> float:
        """Signed distance, positive inside, negative outside, 0 on boundary."""
        x, y = float(p[0]), float(p[1])
        d = self._boundary_distance(x, y)
        if d <= _BOUNDARY_TOL:
            return 0.0
        return d if self._crossings_odd(x, y) else -d

    def signed_distance_batch(self, points) -> np.ndarray:
        """Vectorized signed distance for an (n, 2) array of points."""
        pts = np.asarray(points, dtype=float)
        d = self._boundary_distance_batch(pts)
        inside = self._crossings_odd_batch(pts)
        sdf = np.where(inside, d, -d)
        sdf[d <= _BOUNDARY_TOL] = 0.0
        return sdf

    def _boundary_distance_batch(self, pts: np.ndarray) -> np.ndarray:
        rel = pts[:, None, :] - self._a[None, :, :]  # (n, edges, 2)
        t = np.einsum("nij,ij->ni", rel, self._e) / self._ee
        np.clip(t, 0.0, 1.0, out=t)
        foot = rel - t[:, :, None] * self._e[None, :, :]
        d2 = np.einsum("nij,nij->ni", foot, foot)
        return np.sqrt(d2.min(axis=1))

    def _crossings_odd_batch(self, pts: np.ndarray) -> np.ndarray:
        x = pts[:, 0][:, None]
        y = pts[:, 1][:, None]
        ay = self._a[:, 1][None, :]
        by = self._b[:, 1][None, :]
        straddles = (ay > y) != (by > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = self._a[:, 0][None, :] + (y - ay) * (
                self._e[:, 0][None, :] / np.where(self._e[:, 1] == 0, np.nan, self._e[:, 1])
            )
        hits = straddles & (x < x_cross)
        return hits.sum(axis=1) % 2 == 1

    # -- gradient ------------------------------------------------------

    def inward_normal(self, p) -> np.ndarray:
        """Unit gradient of the signed distance at p.

        Computed analytically from the nearest boundary feature: for an
        edge-interior feature the gradient is perpendicular to the edge,
        for a vertex feature it lies along the point-to-vertex axis; the
        sign comes from the inside test in both cases.  Raises
        DegenerateGradient when two distinct features tie within 1e-9 m
        (callers fall back to ``sdf_gradient_fd``).
        """
        x, y = float(p[0]), float(p[1])
        n = len(self._v)
        feats = []  # (distance, feature id, foot point)
        for i, (ax, ay, ex, ey, ee) in enumerate(self._edges_py):
            t = ((x - ax) * ex + (y - ay) * ey) / ee
            if t <= 0.0:
                fid, qx, qy = ("v", i), ax, ay
            elif t >= 1.0:
                fid, qx, qy = ("v", (i + 1) % n), ax + ex, ay + ey
            else:
                fid, qx, qy = ("e", i), ax + t * ex, ay + t * ey
            feats.append((math.hypot(x - qx, y - qy), fid, qx, qy))
        feats.sort(key=lambda f: f[0])
        d_best, fid_best, qx, qy = feats[0]
        for d, fid, _, _ in feats[1:]:
            if fid == fid_best:
                continue
            if d - d_best < _FEATURE_TOL:
                raise DegenerateGradient(
                    f"two boundary features equidistant at d={d_best:.3g}"
                )
            break

        rx, ry = x - qx, y - qy
        rn = math.hypot(rx, ry)
        if rn > _FEATURE_TOL:
            direction = np.array([rx / rn, ry / rn])
            return direction if self._crossings_odd(x, y) else -direction
        # p sits on the feature itself; only meaningful for edge features
        if fid_best[0] == "v":
            raise DegenerateGradient("query point coincides with a vertex")
        ax, ay, ex, ey, _ = self._edges_py[fid_best[1]]
        en = math.hypot(ex, ey)
        nx, ny = -ey / en, ex / en
        probe = 1e-7
        if self._crossings_odd(x + probe * nx, y + probe * ny):
            return np.array([nx, ny])
        return np.array([-nx, -ny])


def sdf_gradient_fd(poly: Polygon, p, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of the signed distance.

    Fallback for the equidistant loci where the analytic normal is
    undefined.  Not normalized to unit length on purpose: near a locus
    the true gradient is a subgradient and its FD estimate shrinks.
    """
    x, y = float(p[0]), float(p[1])
    gx = (poly.signed_distance((x + step, y)) - poly.signed_distance((x - step, y))) / (2 * step)
    gy = (poly.signed_distance((x, y + step)) - poly.signed_distance((x, y - step))) / (2 * step)
    return np.array([gx, gy])


def load_polygon(path) -> Polygon:
    """Read a polygon file: one "x y" vertex per line, '#' comments, meters."""
    verts = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 2:
                raise PolygonError(f"{path}:{lineno}: expected 'x y', got {body!r}")
            try:
                verts.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise PolygonError(f"{path}:{lineno}: {exc}") from exc
    return Polygon(verts)


def save_polygon(poly: Polygon, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# polygon fence, one 'x y' vertex per line, meters\n")
        for x, y in poly.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
