"""Procedural toy morphable model and synthetic benchmark data.

The toy face is the front half of an ellipsoid with a nose bump, open at
the back so that large yaw angles self-occlude. Identity and expression
bases are smooth random displacement fields, orthonormalised jointly and
scaled by geometrically decaying singular values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import (N_LANDMARKS, MorphableModel, ParamVector, compute_ncc, pack, project,
                    project_3d, rotation_from_euler, quaternion_from_rotation, unpack)
from .render import rasterize, vertex_normals


@dataclass
class SynthConfig:
    n_vertices: int = 1024
    d_id: int = 10
    d_exp: int = 5
    image_size: int = 120
    n_samples: int = 100
    yaw_range: tuple = (-90.0, 90.0)
    pitch_range: tuple = (-20.0, 20.0)
    roll_range: tuple = (-20.0, 20.0)
    coef_std: float = 1.0
    # face height as a fraction of the image side
    face_fraction: float = 0.55
    scale_jitter: float = 0.1
    shift_jitter: float = 0.04
    seed: int = 0

    def __post_init__(self):
        for name in ("n_vertices", "d_id", "d_exp", "image_size", "n_samples"):
            if getattr(self, name) < 0 or (name != "n_samples" and getattr(self, name) <= 0):
                raise ValueError(f"{name} must be positive")


# Half-axes of the toy head in model units.
_AX, _AY, _AZ = 42.0, 55.0, 35.0
_PHI_MAX = np.pi / 2


def _surface(u, v):
    """Map parameters (u azimuth in [-1, 1], v height in [-1, 1], down positive) to 3D."""
    phi = u * _PHI_MAX
    rho = np.sqrt(1.0 - (0.8 * v) ** 2)
    nose = 13.0 * np.exp(-((phi / 0.2) ** 2) - ((v - 0.05) / 0.2) ** 2)
    chin = 4.0 * np.exp(-((phi / 0.35) ** 2) - ((v - 0.85) / 0.12) ** 2)
    x = _AX * np.sin(phi) * rho
    y = _AY * v
    z = (_AZ * rho + nose + chin) * np.cos(phi)
    return np.stack([x, y, z], axis=-1)


def _grid_shape(n_vertices):
    side = max(3, int(round(np.sqrt(n_vertices))))
    return side, max(3, int(round(n_vertices / side)))


def _landmark_params():
    """68 (azimuth in degrees, height) loci in the usual 68-point layout."""
    pts = []
    s = np.linspace(-np.pi / 2, np.pi / 2, 17)
    pts += list(zip(72.0 * np.sin(s), 0.12 + 0.72 * np.cos(s)))  # jaw 0-16
    for side in (-1, 1):  # brows 17-26
        a = np.linspace(-45, -10, 5) if side < 0 else np.linspace(10, 45, 5)
        pts += [(x, -0.36 - 0.06 * np.cos((abs(x) - 27.5) / 17.5 * np.pi / 2)) for x in a]
    pts += [(0.0, v) for v in np.linspace(-0.22, 0.08, 4)]  # nose bridge 27-30
    pts += [(x, 0.2 - 0.03 * np.cos(x / 14 * np.pi / 2)) for x in np.linspace(-14, 14, 5)]
    ang = np.deg2rad([180, 120, 60, 0, -60, -120])  # eyes 36-47
    for cx in (-27.0, 27.0):
        pts += [(cx + 11 * np.cos(a), -0.15 - 0.06 * np.sin(a)) for a in ang]
    ang = np.deg2rad(np.linspace(180, -150, 12))  # outer mouth 48-59
    pts += [(24 * np.cos(a), 0.5 - 0.11 * np.sin(a)) for a in ang]
    ang = np.deg2rad(np.linspace(180, -135, 8))  # inner mouth 60-67
    pts += [(14 * np.cos(a), 0.5 - 0.05 * np.sin(a)) for a in ang]
    assert len(pts) == N_LANDMARKS
    return np.array(pts)


def _smooth_fields(u, v, orders, window=None):
    """3n x m matrix of separable cosine displacement fields."""
    n = u.size
    cols = []
    for a in range(orders):
        for b in range(orders):
            f = np.cos(np.pi * a * (u + 1) / 2) * np.cos(np.pi * b * (v + 1) / 2)
            if window is not None:
                f = f * window
            for axis in range(3):
                col = np.zeros((n, 3))
                col[:, axis] = f
                cols.append(col.reshape(-1))
    return np.array(cols).T


def generate_model(config: SynthConfig | None = None) -> MorphableModel:
    config = config or SynthConfig()
    rng = np.random.default_rng(config.seed)
    n_u, n_v = _grid_shape(config.n_vertices)
    uu, vv = np.meshgrid(np.linspace(-1, 1, n_u), np.linspace(-1, 1, n_v))
    u, v = uu.reshape(-1), vv.reshape(-1)
    verts = _surface(u, v)

    tris = []
    for i in range(n_v - 1):
        for j in range(n_u - 1):
            a, b = i * n_u + j, i * n_u + j + 1
            c, d = a + n_u, b + n_u
            tris += [(a, c, b), (b, c, d)]
    tris = np.array(tris, dtype=np.int64)
    # orient so the frontal face points to +z (towards the camera)
    centre = tris[len(tris) // 2]
    e1, e2 = verts[centre[1]] - verts[centre[0]], verts[centre[2]] - verts[centre[0]]
    if np.cross(e1, e2)[2] < 0:
        tris = tris[:, [0, 2, 1]]

    n3 = verts.size
    d_id, d_exp = config.d_id, config.d_exp
    raw_id = _smooth_fields(u, v, 4)
    mouth = np.exp(-((u * 90 / 30) ** 2) - ((v - 0.5) / 0.25) ** 2)
    raw_exp = _smooth_fields(u, v, 3, window=mouth)
    mixed = np.hstack([raw_id @ rng.normal(size=(raw_id.shape[1], d_id)),
                       raw_exp @ rng.normal(size=(raw_exp.shape[1], d_exp))])
    if mixed.shape[1] > n3:
        raise ValueError("more basis columns than coordinates")
    basis, _ = np.linalg.qr(mixed)
    sigma_id = 4.0 * np.sqrt(n3) * 0.75 ** np.arange(d_id)
    sigma_exp = 3.0 * np.sqrt(n3) * 0.75 ** np.arange(d_exp)
    basis_id = basis[:, :d_id] * sigma_id
    basis_exp = basis[:, d_id:] * sigma_exp

    lm_params = _landmark_params()
    pu = lm_params[:, 0] / 90.0
    pv = lm_params[:, 1]
    landmarks = []
    taken = set()
    for a, b in zip(pu, pv):
        order = np.argsort((u - a) ** 2 + (v - b) ** 2, kind="stable")
        idx = next(int(k) for k in order if int(k) not in taken)
        taken.add(idx)
        landmarks.append(idx)
    return MorphableModel(verts.reshape(-1), basis_id, basis_exp, tris, np.array(landmarks))


# --- samples ---------------------------------------------------------------

def _background(rng, size):
    coarse = rng.uniform(0.1, 0.9, size=(6, 6, 3))
    grid = np.linspace(0, 5, size)
    i0 = np.minimum(grid.astype(int), 4)
    f = (grid - i0)[:, None]
    rows = coarse[i0] * (1 - f[:, :, None]) + coarse[i0 + 1] * f[:, :, None]
    img = rows[:, i0] * (1 - f[None, :, :]) + rows[:, i0 + 1] * f[None, :, :]
    img = img + rng.normal(0, 0.04, size=img.shape)
    return np.clip(img, 0, 1)


def sample_params(model: MorphableModel, config: SynthConfig, rng) -> ParamVector:
    d = np.deg2rad
    pitch = d(rng.uniform(*config.pitch_range))
    yaw = d(rng.uniform(*config.yaw_range))
    roll = d(rng.uniform(*config.roll_range))
    extent = np.ptp(model.vertices[:, 1])
    f = config.face_fraction * config.image_size / extent
    f *= 1.0 + config.scale_jitter * rng.uniform(-1, 1)
    q = quaternion_from_rotation(rotation_from_euler(pitch, yaw, roll)) * np.sqrt(f)
    p = ParamVector(q, [0.0, 0.0], rng.normal(0, config.coef_std, model.d_id),
                    rng.normal(0, config.coef_std, model.d_exp))
    centroid = project(model, p).reshape(-1, 2).mean(axis=0)
    target = config.image_size / 2 + config.shift_jitter * config.image_size * rng.normal(size=2)
    p.t2d = target - centroid
    return p


def render_face(model: MorphableModel, p, background, ncc=None) -> np.ndarray:
    """Render the face with NCC-derived shading over ``background``; uint8 output."""
    ncc = compute_ncc(model) if ncc is None else ncc
    v3 = project_3d(model, p).reshape(-1, 3)
    shade = 0.55 + 0.45 * np.clip(vertex_normals(v3, model.triangles)[:, 2], 0, 1)
    colors = (0.15 + 0.7 * ncc) * shade[:, None]
    h, w = background.shape[:2]
    img = rasterize(v3, model.triangles, colors, w, h)
    out = np.where(img.mask[:, :, None], img.color, background)
    return np.round(255 * np.clip(out, 0, 1)).astype(np.uint8)


def landmark_bbox(landmarks) -> np.ndarray:
    pts = np.asarray(landmarks).reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return np.array([lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]])


def generate_samples(model: MorphableModel, config: SynthConfig, start: int = 0):
    """Samples ``start .. start + n_samples - 1``; sample i uses its own rng stream."""
    from .cascade import TrainingSample

    ncc = compute_ncc(model)
    samples = []
    for i in range(start, start + config.n_samples):
        rng = np.random.default_rng([config.seed, i])
        p = sample_params(model, config, rng)
        img = render_face(model, p, _background(rng, config.image_size), ncc)
        lms = project(model, p).reshape(-1, 2)[model.landmark_indices]
        samples.append(TrainingSample.create(model, img, p, landmark_bbox(lms), sample_id=i))
    return samples


def save_dataset(samples, directory) -> None:
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.jsonl", "w") as fh:
        for s in samples:
            name = f"images/{s.sample_id:06d}.png"
            Image.fromarray(s.image).save(directory / name)
            fh.write(json.dumps({"id": s.sample_id, "image": name,
                                 "params": pack(s.pg).tolist(),
                                 "bbox": np.asarray(s.bbox).tolist()}) + "\n")


def load_dataset(model: MorphableModel, directory):
    from PIL import Image

    from .cascade import TrainingSample

    directory = Path(directory)
    samples = []
    for line in (directory / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        img = np.array(Image.open(directory / rec["image"]).convert("RGB"))
        p = unpack(rec["params"], model.d_id, model.d_exp)
        samples.append(TrainingSample.create(model, img, p, rec["bbox"], sample_id=rec["id"]))
    return samples


def config_dict(config: SynthConfig) -> dict:
    return asdict(config)
