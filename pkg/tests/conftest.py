"""Shared fixtures and independent geometry oracles for the test suite.

The oracles here are deliberately written as straight-line loops with
their own branch logic, separate from the library implementations they
check.
"""

import math

import numpy as np
import pytest

from geofence_guard.geometry import Polygon


# -- independent oracles ----------------------------------------------


def oracle_segment_distance(px, py, ax, ay, bx, by):
    """Point-to-segment distance via explicit endpoint/foot cases."""
    vx, vy = bx - ax, by - ay
    wx, wy = px - ax, py - ay
    c1 = vx * wx + vy * wy
    if c1 <= 0:
        return math.hypot(px - ax, py - ay)
    c2 = vx * vx + vy * vy
    if c1 >= c2:
        return math.hypot(px - bx, py - by)
    t = c1 / c2
    return math.hypot(px - (ax + t * vx), py - (ay + t * vy))


def oracle_min_edge_distance(vertices, p):
    """Brute-force min point-to-segment distance over all edges."""
    n = len(vertices)
    best = math.inf
    for i in range(n):
        ax, ay = vertices[i]
        bx, by = vertices[(i + 1) % n]
        d = oracle_segment_distance(p[0], p[1], ax, ay, bx, by)
        if d < best:
            best = d
    return best


def oracle_even_odd_inside(vertices, p):
    """Independent even-odd ray crossing test (ray toward +x)."""
    x, y = p
    n = len(vertices)
    crossings = 0
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if (y1 <= y) and (y2 > y) or (y2 <= y) and (y1 > y):
            t = (y - y1) / (y2 - y1)
            if x1 + t * (x2 - x1) > x:
                crossings += 1
    return crossings % 2 == 1


def oracle_winding_inside(vertices, p):
    """Angle-summation winding test; valid away from the boundary."""
    total = 0.0
    n = len(vertices)
    for i in range(n):
        ax, ay = vertices[i][0] - p[0], vertices[i][1] - p[1]
        bx, by = vertices[(i + 1) % n][0] - p[0], vertices[(i + 1) % n][1] - p[1]
        total += math.atan2(ax * by - ay * bx, ax * bx + ay * by)
    return abs(total) > math.pi


def oracle_signed_distance(vertices, p):
    d = oracle_min_edge_distance(vertices, p)
    return d if oracle_even_odd_inside(vertices, p) else -d


# -- random simple polygons -------------------------------------------


def make_star_polygon(rng, n_vertices=None, r_lo=1.0, r_hi=3.0, center=(0.0, 0.0)):
    """Random star-shaped (hence simple) polygon around a center."""
    n = n_vertices or int(rng.integers(4, 12))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    # keep consecutive angles apart so no two vertices nearly coincide
    while np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))) < 0.05:
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    radii = rng.uniform(r_lo, r_hi, size=n)
    verts = np.stack(
        [center[0] + radii * np.cos(angles), center[1] + radii * np.sin(angles)], axis=1
    )
    return Polygon(verts)


def make_convex_polygon(rng, n_vertices=5, radius=2.0, center=(0.0, 0.0)):
    """Random convex polygon: jittered angles on a circle (inscribed)."""
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n_vertices))
    while np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))) < 0.1:
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=n_vertices))
    verts = np.stack(
        [center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)], axis=1
    )
    return Polygon(verts)


# -- fixtures ----------------------------------------------------------


@pytest.fixture
def unit_square():
    return Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])


@pytest.fixture
def l_hexagon():
    return Polygon([(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)])
