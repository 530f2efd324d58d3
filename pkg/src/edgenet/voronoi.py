"""Voronoi face-neighbor queries via convex cell clipping.

The cell of a center point (placed at the origin) starts as an axis-aligned
box and is cut by the perpendicular bisector half-space of each candidate
displacement, nearest first. Clipping stops once the next candidate is more
than twice as far as the current farthest cell vertex: its bisector can no
longer reach the cell. Candidates whose plane retains a face of positive area
are the face-sharing neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError

PLANE_EPS = 1e-9
POINT_MERGE_TOL = 1e-7
# Exact lattice degeneracies produce tangent planes; anything below this area
# is treated as a non-contact.
MIN_FACE_AREA = 1e-10


def _box_faces(lo: np.ndarray, hi: np.ndarray) -> list[tuple[int, np.ndarray]]:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    c = {
        (0, 0, 0): (x0, y0, z0), (0, 0, 1): (x0, y0, z1),
        (0, 1, 0): (x0, y1, z0), (0, 1, 1): (x0, y1, z1),
        (1, 0, 0): (x1, y0, z0), (1, 0, 1): (x1, y0, z1),
        (1, 1, 0): (x1, y1, z0), (1, 1, 1): (x1, y1, z1),
    }
    quads = [
        [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],  # x = lo
        [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],  # x = hi
        [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],  # y = lo
        [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],  # y = hi
        [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],  # z = lo
        [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],  # z = hi
    ]
    return [
        (-(i + 1), np.array([c[q] for q in quad], dtype=np.float64))
        for i, quad in enumerate(quads)
    ]


def _polygon_area(loop: np.ndarray) -> float:
    total = np.zeros(3)
    for i in range(len(loop)):
        total += np.cross(loop[i], loop[(i + 1) % len(loop)])
    return 0.5 * float(np.linalg.norm(total))


def _dedupe_points(points: list[np.ndarray], tol: float) -> list[np.ndarray]:
    kept: list[np.ndarray] = []
    for p in points:
        if all(np.linalg.norm(p - q) > tol for q in kept):
            kept.append(p)
    return kept


def _order_in_plane(points: list[np.ndarray], normal: np.ndarray) -> np.ndarray:
    pts = np.array(points)
    center = pts.mean(axis=0)
    seed = np.array([1.0, 0.0, 0.0])
    if abs(normal[0]) > 0.9:
        seed = np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, seed)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    rel = pts - center
    angles = np.arctan2(rel @ v, rel @ u)
    return pts[np.argsort(angles, kind="stable")]


def _clip_by_plane(faces, normal, cval, plane_id, eps=PLANE_EPS):
    """Cut the polyhedron with the half-space normal . x <= cval."""
    dists = [loop @ normal - cval for _, loop in faces]
    if max(d.max() for d in dists) <= eps:
        return faces, False
    new_faces: list[tuple[int, np.ndarray]] = []
    section: list[np.ndarray] = []
    for (pid, loop), d in zip(faces, dists):
        if d.max() <= eps:
            new_faces.append((pid, loop))
            for i in np.flatnonzero(d >= -eps):
                section.append(loop[i])
            continue
        if d.min() >= -eps:
            for i in np.flatnonzero(d <= eps):
                section.append(loop[i])
            continue
        kept_pts: list[np.ndarray] = []
        m = len(loop)
        for i in range(m):
            a, da = loop[i], d[i]
            db = d[(i + 1) % m]
            if da <= eps:
                kept_pts.append(a)
                if da >= -eps:
                    section.append(a)
            if (da < -eps and db > eps) or (da > eps and db < -eps):
                b = loop[(i + 1) % m]
                t = da / (da - db)
                x = a + t * (b - a)
                kept_pts.append(x)
                section.append(x)
        if len(kept_pts) >= 3:
            new_faces.append((pid, np.array(kept_pts)))
    cut_pts = _dedupe_points(section, POINT_MERGE_TOL)
    if len(cut_pts) >= 3:
        new_faces.append((plane_id, _order_in_plane(cut_pts, normal)))
    return new_faces, True


def _max_vertex_norm(faces) -> float:
    return max(float(np.linalg.norm(loop, axis=1).max()) for _, loop in faces)


@dataclass
class ClippedCell:
    """Result of clipping one center's cell against candidate bisectors."""

    neighbor_indices: list[int]
    unbounded: bool
    circumradius: float
    face_areas: dict[int, float]


def clip_cell(
    displacements: np.ndarray, box_lo: np.ndarray, box_hi: np.ndarray
) -> ClippedCell:
    """Clip the origin-centered cell by candidate bisectors, nearest first.

    ``displacements`` are candidate positions relative to the center. The box
    must contain the true cell; surviving box faces mark it as unbounded.
    """
    disp = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    dist = np.linalg.norm(disp, axis=1)
    if np.any(dist <= PLANE_EPS):
        raise GraphError("voronoi candidate coincides with the center atom")
    faces = _box_faces(np.asarray(box_lo, float), np.asarray(box_hi, float))
    rmax = _max_vertex_norm(faces)
    for j in np.argsort(dist, kind="stable"):
        d = dist[j]
        if d > 2.0 * rmax + PLANE_EPS:
            break
        faces, cut = _clip_by_plane(faces, disp[j] / d, 0.5 * d, int(j))
        if cut:
            rmax = _max_vertex_norm(faces)
    areas: dict[int, float] = {}
    for pid, loop in faces:
        areas[pid] = areas.get(pid, 0.0) + _polygon_area(loop)
    neighbors = sorted(pid for pid, a in areas.items() if pid >= 0 and a > MIN_FACE_AREA)
    unbounded = any(pid < 0 and a > MIN_FACE_AREA for pid, a in areas.items())
    return ClippedCell(neighbors, unbounded, rmax, areas)


def voronoi_neighbors(center, candidates, box=None):
    """Select the face-sharing subset of ``candidates`` around one atom.

    ``candidates`` is a sequence of ``(atom, offset, displacement)`` with
    displacements relative to the center atom; the set must be complete out to
    a radius that bounds the cell. Returns the selected candidates and a flag
    set when the cell is unbounded (possible only for non-periodic hull
    atoms; callers handle those through the bounding-box fallback).
    """
    cand = list(candidates)
    if not cand:
        raise GraphError(f"atom {center}: no voronoi candidates")
    disp = np.array([np.asarray(c[2], dtype=np.float64) for c in cand])
    if box is None:
        half = 1.05 * float(np.linalg.norm(disp, axis=1).max())
        lo, hi = np.full(3, -half), np.full(3, half)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    cell = clip_cell(disp, lo, hi)
    return [cand[i] for i in cell.neighbor_indices], cell.unbounded


def points_collinear(positions: np.ndarray, tol: float = 1e-9) -> bool:
    centered = positions - positions.mean(axis=0)
    if len(positions) < 3:
        return True
    s = np.linalg.svd(centered, compute_uv=False)
    return bool(s[1] <= tol * max(1.0, s[0]))
