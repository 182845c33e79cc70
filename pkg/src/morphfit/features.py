"""Pose adaptive features: cylindrical surface anchors, patch maps and PAC.

Pixel (i, j) has its centre at image coordinate (j + 0.5, i + 0.5); a
continuous position (x, y) therefore falls in pixel (floor(y), floor(x)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateModel, InvalidArgument
from .model import MorphableModel, construct_shape, project, project_3d
from .render import compute_visibility

GRID = 64
DEFAULT_PATCH = 5


@dataclass(frozen=True, eq=False)
class AnchorSet:
    triangle: np.ndarray  # (G, G) index into model.triangles
    bary: np.ndarray  # (G, G, 3)
    azimuth: np.ndarray  # (G,) column azimuths, radians
    height: np.ndarray  # (G,) row heights, model units

    @property
    def shape(self):
        return self.triangle.shape

    def positions_3d(self, model: MorphableModel, shape=None) -> np.ndarray:
        """Anchor points on a given 3n shape (default: mean shape), (G, G, 3)."""
        v = (model.mean_shape if shape is None else np.asarray(shape)).reshape(-1, 3)
        corners = model.triangles[self.triangle]  # (G, G, 3)
        return np.einsum("abk,abkd->abd", self.bary, v[corners])


def cylindrical_coordinates(model: MorphableModel):
    """(azimuth, height) per vertex; axis = model y through the mean-shape centroid."""
    v = model.vertices
    c = v.mean(axis=0)
    return np.arctan2(v[:, 0] - c[0], v[:, 2] - c[2]), v[:, 1].copy()


def _closest_on_triangles(p, a, b, c):
    """Closest point of 2D point ``p`` on each triangle (a, b, c arrays (T, 2)).

    Returns (squared distance, barycentric weights (T, 3)).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    t = len(a)
    w = np.zeros((t, 3))
    done = np.zeros(t, dtype=bool)

    def assign(mask, weights):
        mask = mask & ~done
        w[mask] = weights[mask] if weights.ndim == 2 else weights
        done[:] |= mask

    one = np.ones(t)
    zero = np.zeros(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), np.stack([one, zero, zero], 1))
        assign((d3 >= 0) & (d4 <= d3), np.stack([zero, one, zero], 1))
        assign((d6 >= 0) & (d5 <= d6), np.stack([zero, zero, one], 1))
        s = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - s, s, zero], 1))
        s = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - s, zero, s], 1))
        s = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([zero, 1 - s, s], 1))
        denom = va + vb + vc
        assign(np.ones(t, dtype=bool), np.stack([va / denom, vb / denom, vc / denom], 1))
    bad = ~np.all(np.isfinite(w), axis=1)
    w[bad] = [1.0, 0.0, 0.0]
    q = w[:, :1] * a + w[:, 1:2] * b + w[:, 2:] * c
    dist = np.einsum("ij,ij->i", q - p, q - p)
    dist[bad] = np.inf
    return dist, w


def sample_anchors(model: MorphableModel, grid: int = GRID) -> AnchorSet:
    """Place a grid x grid anchor lattice at constant azimuth and height steps.

    The lattice spans the azimuth and height ranges of the vertices visible
    in the frontal pose; each lattice point attaches to the closest surface
    point in the (arc length, height) parameter plane.
    """
    az, h = cylindrical_coordinates(model)
    v = model.vertices
    radius = np.hypot(v[:, 0] - v[:, 0].mean(), v[:, 2] - v[:, 2].mean())
    if radius.max() == 0 or np.ptp(az) == 0 or np.ptp(h) == 0:
        raise DegenerateModel("vertices do not spread around the cylinder axis")
    visible = compute_visibility(model.mean_shape, model.triangles)
    if not visible.any():
        visible = np.ones_like(visible)
    azimuth = np.linspace(az[visible].min(), az[visible].max(), grid)
    height = np.linspace(h[visible].min(), h[visible].max(), grid)

    # arc length keeps both plane axes in model units
    r = float(np.median(radius))
    plane = np.stack([az * r, h], axis=1)
    tris = model.triangles
    a, b, c = plane[tris[:, 0]], plane[tris[:, 1]], plane[tris[:, 2]]
    tri_idx = np.zeros((grid, grid), dtype=np.int64)
    bary = np.zeros((grid, grid, 3))
    for i, hv in enumerate(height):
        for j, av in enumerate(azimuth):
            dist, w = _closest_on_triangles(np.array([av * r, hv]), a, b, c)
            k = int(np.argmin(dist))
            tri_idx[i, j] = k
            bary[i, j] = np.clip(w[k], 0.0, 1.0) / np.clip(w[k], 0.0, 1.0).sum()
    return AnchorSet(tri_idx, bary, azimuth, height)


def project_anchors(anchors: AnchorSet, model: MorphableModel, p):
    """Projected anchor positions (G, G, 2) and per-anchor visibility (G, G).

    An anchor is visible when at least two of its three attachment vertices
    are visible.
    """
    v2 = project(model, p).reshape(-1, 2)
    corners = model.triangles[anchors.triangle]
    pos = np.einsum("abk,abkd->abd", anchors.bary, v2[corners])
    vis_v = compute_visibility(project_3d(model, p), model.triangles)
    visible = vis_v[corners].sum(axis=-1) >= 2
    return pos, visible


def build_patch_map(image, anchor_positions, d: int = DEFAULT_PATCH) -> np.ndarray:
    """Concatenate d x d crops at each anchor into a (G*d, G*d, c) map.

    Crops centre on the pixel containing the anchor; pixels outside the
    image read as 0.
    """
    if d < 1 or d % 2 == 0:
        raise InvalidArgument(f"patch side must be odd, got {d}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    pos = np.asarray(anchor_positions, dtype=np.float64)
    gh, gw = pos.shape[:2]
    H, W, C = image.shape
    r = d // 2
    padded = np.zeros((H + 2 * r, W + 2 * r, C))
    padded[r:r + H, r:r + W] = image
    col = np.floor(pos[..., 0]).astype(np.int64)
    row = np.floor(pos[..., 1]).astype(np.int64)
    # anchors far outside: point them at an all-zero padded location
    outside = (row < -r) | (row >= H + r) | (col < -r) | (col >= W + r)
    offs = np.arange(-r, r + 1)
    rr = row[:, :, None, None] + offs[None, None, :, None] + r
    cc = col[:, :, None, None] + offs[None, None, None, :] + r
    rr, cc = np.broadcast_arrays(rr, cc)
    valid = (rr >= 0) & (rr < H + 2 * r) & (cc >= 0) & (cc < W + 2 * r) & ~outside[..., None, None]
    blocks = np.zeros((gh, gw, d, d, C))
    blocks[valid] = padded[rr[valid], cc[valid]]
    return blocks.transpose(0, 2, 1, 3, 4).reshape(gh * d, gw * d, C)


def pac(patch_map, filters, visibility, bias=None) -> np.ndarray:
    """Stride-d, d x d convolution of the patch map; occluded responses halved.

    ``filters`` has shape (f, d, d, c). Returns (G, G, f).
    """
    pm = np.asarray(patch_map, dtype=np.float64)
    if pm.ndim == 2:
        pm = pm[:, :, None]
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim == 3:
        filters = filters[..., None]
    f, d, d2, c = filters.shape
    vis = np.asarray(visibility, dtype=bool)
    gh, gw = vis.shape
    if d != d2 or pm.shape != (gh * d, gw * d, c):
        raise InvalidArgument(
            f"patch map {pm.shape} does not match filters {filters.shape} and grid {vis.shape}")
    blocks = pm.reshape(gh, d, gw, d, c).transpose(0, 2, 1, 3, 4).reshape(gh, gw, -1)
    resp = blocks @ filters.reshape(f, -1).T
    if bias is not None:
        resp = resp + np.asarray(bias, dtype=np.float64)
    resp[~vis] /= 2.0
    return resp


def paf(image, anchors: AnchorSet, model: MorphableModel, p, filters, bias=None) -> np.ndarray:
    """Pose adaptive feature for one image and parameter."""
    pos, vis = project_anchors(anchors, model, p)
    d = np.asarray(filters).shape[1]
    return pac(build_patch_map(image, pos, d), filters, vis, bias)


def bilinear_sample(image, x, y) -> np.ndarray:
    """Sample ``image`` at continuous positions; neighbours outside read as 0."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    H, W, C = image.shape
    u = np.asarray(x, dtype=np.float64) - 0.5
    v = np.asarray(y, dtype=np.float64) - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = (u - j0)[..., None]
    fv = (v - i0)[..., None]
    out = np.zeros(u.shape + (C,))
    for di, wi in ((0, 1 - fv), (1, fv)):
        for dj, wj in ((0, 1 - fu), (1, fu)):
            ii, jj = i0 + di, j0 + dj
            ok = (ii >= 0) & (ii < H) & (jj >= 0) & (jj < W)
            val = np.zeros(u.shape + (C,))
            val[ok] = image[ii[ok], jj[ok]]
            out += wi * wj * val
    return out[..., 0] if squeeze else out


def texture_map(image, anchor_positions) -> np.ndarray:
    """Bilinear image samples at each anchor, (G, G, c)."""
    pos = np.asarray(anchor_positions, dtype=np.float64)
    return bilinear_sample(image, pos[..., 0], pos[..., 1])


def anchor_surface_points(anchors: AnchorSet, model: MorphableModel, p) -> np.ndarray:
    """3D anchor points on the posed-but-unrotated shape of ``p``."""
    return anchors.positions_3d(model, construct_shape(model, p))
