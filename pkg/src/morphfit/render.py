"""Z-buffer rasterisation, PNCC / PIndex rendering and vertex visibility.

Rules that make the output reproducible bit-for-bit:

* a pixel (i, j) is covered when its centre (j + 0.5, i + 0.5) is inside the
  triangle; centres exactly on an edge belong to the triangle for which that
  edge, oriented counter-clockwise in raster coordinates, points down
  (dy > 0) or, when horizontal, points left;
* depth is the barycentric interpolation of vertex z, and larger z wins;
* on equal depth the triangle with the lower index wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .model import MorphableModel, project_3d

BACKGROUND_DEPTH = -np.inf


@dataclass
class RasterImage:
    """k-channel render plus the buffers that produced it."""

    color: np.ndarray  # (H, W, k)
    depth: np.ndarray  # (H, W), BACKGROUND_DEPTH where empty
    triangle: np.ndarray  # (H, W) winning triangle index, -1 where empty
    bary: np.ndarray  # (H, W, 3) barycentric weights in triangle column order

    @property
    def height(self):
        return self.color.shape[0]

    @property
    def width(self):
        return self.color.shape[1]

    @property
    def mask(self):
        return self.triangle >= 0


PnccImage = RasterImage


@numba.njit(cache=True, nogil=True)
def _owns(dx, dy):
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


@numba.njit(cache=True, nogil=True)
def _zbuffer(xy, z, tris, width, height, tri_id, bary, depth):
    for t in range(tris.shape[0]):
        ia, ib, ic = tris[t, 0], tris[t, 1], tris[t, 2]
        ax, ay = xy[ia, 0], xy[ia, 1]
        bx, by = xy[ib, 0], xy[ib, 1]
        cx, cy = xy[ic, 0], xy[ic, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if not np.isfinite(area) or area == 0.0:
            continue
        # slot[k] = triangle column that plays role k after orientation fix
        s0, s1, s2 = 0, 1, 2
        if area < 0.0:
            bx, by, cx, cy = cx, cy, bx, by
            ib, ic = ic, ib
            s1, s2 = 2, 1
            area = -area
        za, zb, zc = z[ia], z[ib], z[ic]
        own0 = _owns(cx - bx, cy - by)
        own1 = _owns(ax - cx, ay - cy)
        own2 = _owns(bx - ax, by - ay)

        x0 = max(0, int(np.ceil(min(ax, bx, cx) - 0.5)))
        x1 = min(width - 1, int(np.floor(max(ax, bx, cx) - 0.5)))
        y0 = max(0, int(np.ceil(min(ay, by, cy) - 0.5)))
        y1 = min(height - 1, int(np.floor(max(ay, by, cy) - 0.5)))
        for i in range(y0, y1 + 1):
            py = i + 0.5
            for j in range(x0, x1 + 1):
                px = j + 0.5
                w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not own0) or (w1 == 0.0 and not own1) \
                        or (w2 == 0.0 and not own2):
                    continue
                l0 = w0 / area
                l1 = w1 / area
                l2 = w2 / area
                # anchored at za so constant-depth triangles interpolate exactly
                zz = za + l1 * (zb - za) + l2 * (zc - za)
                if zz > depth[i, j]:
                    depth[i, j] = zz
                    tri_id[i, j] = t
                    bary[i, j, s0] = l0
                    bary[i, j, s1] = l1
                    bary[i, j, s2] = l2


def zbuffer(vertices3d, triangles, width: int, height: int):
    """Run the depth test only. Returns (triangle ids, barycentrics, depth)."""
    v = np.asarray(vertices3d, dtype=np.float64).reshape(-1, 3)
    tris = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64).reshape(-1, 3))
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), BACKGROUND_DEPTH)
    if len(tris):
        _zbuffer(np.ascontiguousarray(v[:, :2]), np.ascontiguousarray(v[:, 2]), tris,
                 int(width), int(height), tri_id, bary, depth)
    return tri_id, bary, depth


def rasterize(vertices3d, triangles, colors, width: int, height: int) -> RasterImage:
    """Render a mesh with per-vertex k-channel attributes.

    Covered pixels hold the barycentric interpolation of ``colors`` over the
    front-most triangle; background pixels are 0.
    """
    if width < 1 or height < 1:
        raise ValueError("image size must be positive")
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64)
    if colors.ndim == 1:
        colors = colors[:, None]
    tri_id, bary, depth = zbuffer(vertices3d, tris, width, height)
    out = np.zeros((height, width, colors.shape[1]))
    hit = tri_id >= 0
    if hit.any():
        corner = tris[tri_id[hit]]  # (m, 3)
        w = bary[hit]
        out[hit] = (w[:, 0:1] * colors[corner[:, 0]] + w[:, 1:2] * colors[corner[:, 1]]
                    + w[:, 2:3] * colors[corner[:, 2]])
    return RasterImage(out, depth, tri_id, bary)


def render_pncc(model: MorphableModel, p, ncc, width: int = 200, height: int = 200,
                scale: float = 1.0) -> RasterImage:
    """Z-buffer render of the posed face coloured by NCC.

    ``scale`` shrinks image-plane coordinates, which renders the same view
    at a lower resolution.
    """
    v = project_3d(model, p).reshape(-1, 3)
    if scale != 1.0:
        v = v.copy()
        v[:, :2] *= scale
    return rasterize(v, model.triangles, ncc, width, height)


def render_pindex(model: MorphableModel, p, width: int = 200, height: int = 200) -> np.ndarray:
    """1-channel vertex-index render, values (index + 1) / n, background 0."""
    v = project_3d(model, p).reshape(-1, 3)
    tris = model.triangles
    tri_id, bary, _ = zbuffer(v, tris, width, height)
    out = np.zeros((height, width))
    hit = tri_id >= 0
    if hit.any():
        nearest = tris[tri_id[hit], np.argmax(bary[hit], axis=1)]
        out[hit] = (nearest + 1) / model.n_vertices
    return out


def face_normals(vertices3d, triangles) -> np.ndarray:
    v = np.asarray(vertices3d, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    return np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])


def vertex_normals(vertices3d, triangles) -> np.ndarray:
    """Unit normals: normalised sum of incident unit face normals (0 if isolated)."""
    v = np.asarray(vertices3d, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    fn = face_normals(v, t)
    norm = np.linalg.norm(fn, axis=1, keepdims=True)
    fn = np.divide(fn, norm, out=np.zeros_like(fn), where=norm > 0)
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, t[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


def compute_visibility(vertices3d, triangles) -> np.ndarray:
    """True where the vertex normal faces the camera (positive z)."""
    return vertex_normals(vertices3d, triangles)[:, 2] > 0


# --- export ---------------------------------------------------------------

def to_uint8(image) -> np.ndarray:
    return np.round(255.0 * np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def save_png(image, path) -> None:
    """Write a [0, 1] float image (or uint8 image) as 8-bit PNG."""
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def save_raw(image, path) -> None:
    """Lossless dump: uint32 H, W, C little-endian, then float64 samples (row-major)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    with open(path, "wb") as fh:
        fh.write(np.array(arr.shape, dtype="<u4").tobytes())
        fh.write(arr.astype("<f8").tobytes())


def load_raw(path) -> np.ndarray:
    data = open(path, "rb").read()
    h, w, c = np.frombuffer(data[:12], "<u4")
    return np.frombuffer(data[12:], "<f8").reshape(h, w, c).copy()
