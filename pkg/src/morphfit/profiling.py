"""Face profiling: turn a fitted image into a depth mesh, rotate it out of plane,
re-settle the background by least squares and warp the pixels.

Anchors come in three kinds. Face anchors are visible model vertices,
contour anchors are the convex-hull vertices of the visible face, and
background anchors sit on a regular grid outside that hull with the depth
of the nearest contour anchor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve
from scipy.spatial import ConvexHull, Delaunay

from .errors import InvalidArgument
from .evaluation import yaw_of
from .features import bilinear_sample
from .model import ParamVector, as_params, compose_rotation, project_3d, rotation_from_euler
from .render import compute_visibility, zbuffer

log = logging.getLogger(__name__)

FACE, CONTOUR, BACKGROUND = 0, 1, 2


@dataclass
class ImageMesh:
    points: np.ndarray  # (N, 3) x, y (pixels), depth
    kind: np.ndarray  # (N,) FACE / CONTOUR / BACKGROUND
    triangles: np.ndarray  # (T, 3)
    edges: np.ndarray  # (E, 2), a < b
    axis: np.ndarray  # (3,) point on the vertical rotation axis

    def __post_init__(self):
        if not np.any(self.kind == CONTOUR):
            raise InvalidArgument("image mesh has no contour anchors")


@dataclass
class ProfiledImage:
    image: np.ndarray
    anchors: np.ndarray  # adjusted (N, 2)
    yaw_delta: float
    params: ParamVector


def _edges(triangles):
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _inside_convex(poly, pts):
    """Points strictly inside a counter-clockwise convex polygon (math orientation)."""
    inside = np.ones(len(pts), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross > 0
    return inside


def background_grid(width, height, step):
    xs = np.arange(0, width + 1e-9, step, dtype=np.float64)
    ys = np.arange(0, height + 1e-9, step, dtype=np.float64)
    if xs[-1] < width:
        xs = np.append(xs, width)
    if ys[-1] < height:
        ys = np.append(ys, height)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def mesh_image(image, model, pg, grid_step: float = 20.0, face_stride: int = 3) -> ImageMesh:
    """Depth mesh of ``image`` given its ground-truth parameters ``pg``."""
    H, W = np.asarray(image).shape[:2]
    v3 = project_3d(model, pg).reshape(-1, 3)
    visible = np.flatnonzero(compute_visibility(v3, model.triangles))
    if visible.size < 3:
        raise InvalidArgument("fewer than three visible vertices")
    hull = ConvexHull(v3[visible, :2])
    contour_idx = visible[hull.vertices]
    # landmark vertices always become anchors so they move exactly with the face
    lm_visible = np.intersect1d(model.landmark_indices, visible)
    interior = np.setdiff1d(np.union1d(visible[::face_stride], lm_visible), contour_idx)
    poly = v3[contour_idx, :2]
    # ConvexHull returns counter-clockwise order in (x, y)
    interior = interior[_inside_convex(poly, v3[interior, :2])]

    grid = background_grid(W, H, grid_step)
    bg = grid[~_inside_convex(poly, grid) & ~_on_hull(poly, grid)]
    if len(bg) == 0:
        log.warning("face hull covers the whole image; no background anchors")
    contour = v3[contour_idx]
    nearest = np.argmin(((bg[:, None, :] - contour[None, :, :2]) ** 2).sum(-1), axis=1) \
        if len(bg) else np.zeros(0, dtype=int)
    bg3 = np.column_stack([bg, contour[nearest, 2]]) if len(bg) else np.zeros((0, 3))

    points = np.vstack([v3[interior], contour, bg3])
    kind = np.concatenate([np.full(len(interior), FACE), np.full(len(contour), CONTOUR),
                           np.full(len(bg3), BACKGROUND)])
    points, keep = _dedupe(points)
    kind = kind[keep]
    tri = Delaunay(points[:, :2]).simplices.astype(np.int64)
    axis = v3.mean(axis=0)
    return ImageMesh(points, kind, tri, _edges(tri), axis)


def _on_hull(poly, pts, tol=1e-9):
    on = np.zeros(len(pts), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        ab = b - a
        ap = pts - a
        cross = ab[0] * ap[:, 1] - ab[1] * ap[:, 0]
        t = (ap @ ab) / max(ab @ ab, 1e-300)
        on |= (np.abs(cross) <= tol * max(np.linalg.norm(ab), 1.0)) & (t >= 0) & (t <= 1)
    return on


def _dedupe(points):
    _, keep = np.unique(np.round(points[:, :2], 9), axis=0, return_index=True)
    keep = np.sort(keep)
    return points[keep], keep


def yaw_rotation(yaw_delta_deg: float) -> np.ndarray:
    return rotation_from_euler(0.0, np.deg2rad(yaw_delta_deg), 0.0)


def rotate_mesh(mesh: ImageMesh, yaw_delta: float) -> np.ndarray:
    """Anchor positions (N, 3) after a yaw rotation about the mesh's vertical axis."""
    if yaw_delta == 0:
        return mesh.points.copy()
    R = yaw_rotation(yaw_delta)
    return (mesh.points - mesh.axis) @ R.T + mesh.axis


def adjust_anchors(mesh: ImageMesh, profiled, pinned=None) -> np.ndarray:
    """Least-squares anchor positions that keep every edge's source offset.

    ``pinned`` anchors (default: face and contour anchors) stay at their
    profiled positions; the rest solve, per axis, the edge equations
    ``a - b = src_a - src_b``. A free component with no path to a pinned
    anchor is held at its profiled position.
    """
    src = mesh.points[:, :2]
    pro = np.asarray(profiled, dtype=np.float64)[:, :2]
    n = len(src)
    if pinned is None:
        pinned = mesh.kind != BACKGROUND
    pinned = np.asarray(pinned, dtype=bool).copy()
    if not pinned.any():
        raise InvalidArgument("no pinned anchors")

    # free components with no pinned neighbour are underdetermined
    free = ~pinned
    e = mesh.edges
    ff = e[free[e[:, 0]] & free[e[:, 1]]]
    adj = sparse.coo_matrix((np.ones(len(ff)), (ff[:, 0], ff[:, 1])), shape=(n, n))
    _, label = csgraph.connected_components(adj, directed=False)
    touched = np.zeros(n, dtype=bool)
    mixed = e[pinned[e[:, 0]] != pinned[e[:, 1]]]
    touched[mixed[~pinned[mixed[:, 0]], 0]] = True
    touched[mixed[~pinned[mixed[:, 1]], 1]] = True
    anchored_labels = np.unique(label[touched & free])
    orphan = free & ~np.isin(label, anchored_labels)
    if orphan.any():
        log.warning("%d anchors have no path to a pinned anchor; held at profiled positions",
                    int(orphan.sum()))
        pinned |= orphan
        free = ~pinned

    # displacement form: delta = adjusted - src; exact zero rhs gives exact src
    delta = np.zeros((n, 2))
    delta[pinned] = pro[pinned] - src[pinned]
    if not free.any():
        return src + delta
    col = -np.ones(n, dtype=np.int64)
    col[free] = np.arange(int(free.sum()))
    rows, cols, vals = [], [], []
    rhs = np.zeros((len(e), 2))
    for k, (a, b) in enumerate(e):
        for node, sign in ((a, 1.0), (b, -1.0)):
            if free[node]:
                rows.append(k)
                cols.append(col[node])
                vals.append(sign)
            else:
                rhs[k] -= sign * delta[node]
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(len(e), int(free.sum())))
    N = (A.T @ A).tocsc()
    sol = spsolve(N, A.T @ rhs)
    delta[free] = np.asarray(sol).reshape(-1, 2)
    return src + delta


def edge_residual(mesh: ImageMesh, positions) -> float:
    """Sum of squared violations of the edge-offset equations."""
    src = mesh.points[:, :2]
    pos = np.asarray(positions)[:, :2]
    a, b = mesh.edges[:, 0], mesh.edges[:, 1]
    r = (pos[a] - pos[b]) - (src[a] - src[b])
    return float((r ** 2).sum())


def warp_image(image, src_anchors, dst_anchors, triangulation):
    """Piecewise-affine warp; each destination triangle samples its source triangle.

    ``dst_anchors`` may carry a third depth column to resolve overlapping
    destination triangles (larger depth wins). Uncovered pixels are black.
    """
    img = np.asarray(image)
    H, W = img.shape[:2]
    dst = np.asarray(dst_anchors, dtype=np.float64)
    if dst.shape[1] == 2:
        dst = np.column_stack([dst, np.zeros(len(dst))])
    src = np.asarray(src_anchors, dtype=np.float64)[:, :2]
    tris = np.asarray(triangulation, dtype=np.int64)
    tri_id, bary, _ = zbuffer(dst, tris, W, H)
    out = np.zeros(img.shape, dtype=np.float64)
    hit = tri_id >= 0
    if hit.any():
        corner = tris[tri_id[hit]]
        w = bary[hit]
        sp = (w[:, 0:1] * src[corner[:, 0]] + w[:, 1:2] * src[corner[:, 1]]
              + w[:, 2:3] * src[corner[:, 2]])
        out[hit] = bilinear_sample(img.astype(np.float64), sp[:, 0], sp[:, 1])
    if img.dtype == np.uint8:
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    return out


def warp_source_positions(src_anchors, dst_anchors, triangulation, width, height):
    """Per-pixel source position of the warp, NaN where uncovered; (H, W, 2)."""
    dst = np.asarray(dst_anchors, dtype=np.float64)
    if dst.shape[1] == 2:
        dst = np.column_stack([dst, np.zeros(len(dst))])
    src = np.asarray(src_anchors, dtype=np.float64)[:, :2]
    tris = np.asarray(triangulation, dtype=np.int64)
    tri_id, bary, _ = zbuffer(dst, tris, width, height)
    out = np.full((height, width, 2), np.nan)
    hit = tri_id >= 0
    corner = tris[tri_id[hit]]
    w = bary[hit]
    out[hit] = (w[:, 0:1] * src[corner[:, 0]] + w[:, 1:2] * src[corner[:, 1]]
                + w[:, 2:3] * src[corner[:, 2]])
    return out


def rotate_params_yaw(model, pg, yaw_delta, axis) -> ParamVector:
    """Ground truth after the same out-of-plane rotation as the mesh."""
    pg = as_params(model, pg)
    R = yaw_rotation(yaw_delta)
    c = np.asarray(axis, dtype=np.float64)
    t3 = np.array([pg.t2d[0], pg.t2d[1], 0.0])
    t_new = (R @ (t3 - c) + c)[:2]
    return ParamVector(compose_rotation(pg.q, R), t_new, pg.alpha_id.copy(),
                       pg.alpha_exp.copy())


def profile_step(image, mesh: ImageMesh, model, pg, yaw_delta) -> ProfiledImage:
    rotated = rotate_mesh(mesh, yaw_delta)
    adjusted = adjust_anchors(mesh, rotated)
    dst = np.column_stack([adjusted, rotated[:, 2]])
    out = warp_image(image, mesh.points[:, :2], dst, mesh.triangles)
    return ProfiledImage(out, adjusted, float(yaw_delta),
                         rotate_params_yaw(model, pg, yaw_delta, mesh.axis))


def yaw_deltas(initial_yaw, step=5.0, limit=90.0):
    """Cumulative deltas that push |yaw| outward in ``step`` increments up to ``limit``."""
    if step <= 0:
        raise InvalidArgument("step must be positive")
    sign = 1.0 if initial_yaw >= 0 else -1.0
    out = []
    k = 1
    while abs(initial_yaw + sign * k * step) <= limit + 1e-9:
        out.append(sign * k * step)
        k += 1
    return out


def profile_sequence(image, model, pg, step=5.0, limit=90.0, grid_step=20.0):
    """Synthesise larger-yaw views of ``image`` until |yaw| reaches ``limit``."""
    pg = as_params(model, pg)
    yaw0 = yaw_of(pg.q)
    if abs(yaw0) > limit:
        raise InvalidArgument(f"initial yaw {yaw0:.1f} already beyond {limit}")
    mesh = mesh_image(image, model, pg, grid_step)
    return [profile_step(image, mesh, model, pg, d) for d in yaw_deltas(yaw0, step, limit)]
