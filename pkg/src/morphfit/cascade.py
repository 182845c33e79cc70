"""Cascaded regression: p[k+1] = p[k] + stage_k(features(image, p[k])).

The stage regressor here is ridge regression on flattened features
(low-resolution PNCC plus PAF responses). Each output parameter gets its
own per-sample weights, which is how the weighted parameter costs enter a
closed-form least-squares fit.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import cost
from .errors import InvalidArgument
from .evaluation import nme, sample_landmarks
from .features import AnchorSet, build_patch_map, pac, project_anchors, sample_anchors
from .features import bilinear_sample
from .model import (MorphableModel, ParamVector, as_params, compose_rotation, compute_ncc,
                    construct_shape, pack, project_3d, rotation_from_quaternion,
                    unpack)
from .render import rasterize

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class TrainingSample:
    image: np.ndarray
    pg: ParamVector
    bbox: np.ndarray
    fp: np.ndarray
    sample_id: int = 0

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)
        if not (self.bbox[2] > 0 and self.bbox[3] > 0):
            raise InvalidArgument(f"bounding box needs positive size, got {self.bbox}")

    @classmethod
    def create(cls, model, image, pg, bbox, sample_id=0):
        pg = as_params(model, pg)
        return cls(np.asarray(image), pg, bbox, face_posture(model, pg), sample_id)


@dataclass
class TrainConfig:
    stages: int = 3
    patch: int = 5
    n_filters: int = 8
    pncc_size: int = 32
    paf_pool: int = 1
    lambda_factor: float = cost.DEFAULT_LAMBDA_FACTOR
    cost: str = "owpdc"
    reweight_iters: int = 1
    ridge: float = 1e-3
    augment_count: int = 10
    max_rotation: float = 30.0
    bbox_mean: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    bbox_cov: list = field(default_factory=lambda: [[0.0] * 4 for _ in range(4)])
    subset_size: int = 20
    validation_fraction: float = 0.2
    regenerate: bool = True
    threads: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgument(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        from ._toml import load_toml

        data = load_toml(path)
        return cls.from_dict(data.get("train", data))


# --- initialisation and training-set utilities --------------------------------

def _mean_face_layout(model: MorphableModel):
    """Landmark hull size and vertex mean point of the frontal, unit-scale mean face."""
    v = model.vertices
    lm = v[model.landmark_indices, :2]
    return np.ptp(lm, axis=0), v[:, :2].mean(axis=0)


def init_from_bbox(model: MorphableModel, bbox) -> ParamVector:
    """Frontal mean face scaled to the box and centred on it.

    The scale is the larger of the width and height ratios between the box
    and the mean face's landmark hull, and the mean vertex lands on the box
    centre.
    """
    x, y, w, h = np.asarray(bbox, dtype=np.float64).reshape(4)
    if not (w > 0 and h > 0) or not np.all(np.isfinite([x, y, w, h])):
        raise InvalidArgument(f"degenerate bounding box {bbox}")
    hull, mean_xy = _mean_face_layout(model)
    f = max(w / hull[0], h / hull[1])
    t = np.array([x + w / 2, y + h / 2]) - f * mean_xy
    return ParamVector([np.sqrt(f), 0, 0, 0], t, np.zeros(model.d_id), np.zeros(model.d_exp))


def face_posture(model: MorphableModel, pg) -> np.ndarray:
    """Shape rotated by the unit-normalised quaternion; no scale, no translation."""
    pg = as_params(model, pg)
    R = rotation_from_quaternion(pg.q / np.linalg.norm(pg.q))
    return (construct_shape(model, pg).reshape(-1, 3) @ R.T).reshape(-1)


def regenerate_init(pg, pk_v, pg_v) -> np.ndarray:
    """New stage input: pg - (pg_v - pk_v), on packed vectors."""
    return np.asarray(pg, dtype=np.float64) - (np.asarray(pg_v, dtype=np.float64)
                                               - np.asarray(pk_v, dtype=np.float64))


def build_validation_subsets(train_fp, val_fp, m: int) -> np.ndarray:
    """Indices of the m validation postures closest to each training posture."""
    train_fp = np.atleast_2d(np.asarray(train_fp, dtype=np.float64))
    val_fp = np.atleast_2d(np.asarray(val_fp, dtype=np.float64))
    if len(val_fp) == 0:
        raise InvalidArgument("validation set is empty")
    if m > len(val_fp):
        log.warning("subset size %d clamped to validation size %d", m, len(val_fp))
        m = len(val_fp)
    d2 = ((train_fp ** 2).sum(1)[:, None] + (val_fp ** 2).sum(1)[None, :]
          - 2.0 * train_fp @ val_fp.T)
    return np.argsort(d2, axis=1, kind="stable")[:, :m]


def split_validation(samples, fraction=0.2, seed=0):
    """Seeded random split into (train, validation)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_val = int(round(fraction * len(samples)))
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [samples[i] for i in train], [samples[i] for i in val]


def rotate_image(image, angle, center=None):
    """In-plane rotation by ``angle`` radians about ``center`` (bilinear, zero fill)."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    c = np.array([W / 2, H / 2]) if center is None else np.asarray(center, dtype=np.float64)
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    ca, sa = np.cos(angle), np.sin(angle)
    # inverse map: destination -> source
    dx, dy = jj - c[0], ii - c[1]
    sx = ca * dx + sa * dy + c[0]
    sy = -sa * dx + ca * dy + c[1]
    out = bilinear_sample(img.astype(np.float64), sx, sy)
    if img.dtype == np.uint8:
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    return out


def rotate_params_in_plane(model, pg, angle, center) -> ParamVector:
    """Parameters whose projection is the in-plane rotation of pg's projection."""
    pg = as_params(model, pg)
    ca, sa = np.cos(angle), np.sin(angle)
    R2 = np.array([[ca, -sa], [sa, ca]])
    Rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    c = np.asarray(center, dtype=np.float64)
    return ParamVector(compose_rotation(pg.q, Rz), R2 @ (pg.t2d - c) + c,
                       pg.alpha_id.copy(), pg.alpha_exp.copy())


def augment(model, sample: TrainingSample, rng, max_rotation=30.0, bbox_mean=None,
            bbox_cov=None, angle=None) -> TrainingSample:
    """Random in-plane rotation (|angle| <= max_rotation degrees) and box jitter.

    The box is replaced by the axis-aligned hull of its rotated corners, then
    shifted by a draw from N(bbox_mean, bbox_cov) over (x, y, w, h).
    """
    if angle is None:
        angle = rng.uniform(-max_rotation, max_rotation)
    theta = np.deg2rad(angle)
    H, W = sample.image.shape[:2]
    c = np.array([W / 2, H / 2])
    image = rotate_image(sample.image, theta, c) if angle != 0 else sample.image.copy()
    pg = rotate_params_in_plane(model, sample.pg, theta, c)
    x, y, w, h = sample.bbox
    corners = np.array([[x, y], [x + w, y], [x, y + h], [x + w, y + h]])
    ca, sa = np.cos(theta), np.sin(theta)
    rc = (corners - c) @ np.array([[ca, -sa], [sa, ca]]).T + c
    lo, hi = rc.min(axis=0), rc.max(axis=0)
    bbox = np.array([lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]])
    if bbox_cov is not None and np.any(np.asarray(bbox_cov)):
        mean = np.zeros(4) if bbox_mean is None else np.asarray(bbox_mean, dtype=np.float64)
        bbox = bbox + rng.multivariate_normal(mean, np.asarray(bbox_cov, dtype=np.float64))
    elif bbox_mean is not None:
        bbox = bbox + np.asarray(bbox_mean, dtype=np.float64)
    bbox[2:] = np.maximum(bbox[2:], 1.0)
    return TrainingSample(image, pg, bbox, face_posture(model, pg), sample.sample_id)


# --- features ---------------------------------------------------------------

@dataclass
class FeatureExtractor:
    model: MorphableModel
    anchors: AnchorSet
    filters: np.ndarray  # (f, d, d, c)
    pncc_size: int = 32
    paf_pool: int = 1

    def __post_init__(self):
        self.ncc = compute_ncc(self.model)

    @property
    def dim(self):
        g = self.anchors.shape[0] // self.paf_pool
        return self.pncc_size ** 2 * 3 + g * g * len(self.filters)

    def pncc(self, image_shape, p) -> np.ndarray:
        H, W = image_shape[:2]
        s = self.pncc_size
        v = project_3d(self.model, p).reshape(-1, 3)
        v[:, 0] *= s / W
        v[:, 1] *= s / H
        return rasterize(v, self.model.triangles, self.ncc, s, s).color

    def paf(self, image, p) -> np.ndarray:
        pos, vis = project_anchors(self.anchors, self.model, p)
        d = self.filters.shape[1]
        resp = pac(build_patch_map(image, pos, d), self.filters, vis)
        k = self.paf_pool
        if k > 1:
            g = resp.shape[0] // k
            resp = resp[:g * k, :g * k].reshape(g, k, g, k, -1).mean(axis=(1, 3))
        return resp

    def __call__(self, image, p) -> np.ndarray:
        img = _as_float_image(image)
        return np.concatenate([self.pncc(img.shape, p).reshape(-1),
                               self.paf(img, p).reshape(-1)]).astype(np.float32)

    def batch(self, images, params, threads=1) -> np.ndarray:
        X = np.empty((len(images), self.dim), dtype=np.float32)

        def work(i):
            X[i] = self(images[i], params[i])

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(work, range(len(images))))
        else:
            for i in range(len(images)):
                work(i)
        return X


def _as_float_image(image):
    img = np.asarray(image)
    return img / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)


def learn_filters(model, anchors, samples, params, n_filters=8, d=5, seed=0):
    """PCA filters from anchor patches, seeded by random filters.

    Random unit filters are drawn first; when patch data is available they
    are replaced by the leading principal directions of centred patches.
    """
    rng = np.random.default_rng(seed)
    filters = rng.normal(size=(n_filters, d * d * 3))
    filters /= np.linalg.norm(filters, axis=1, keepdims=True)
    patches = []
    for s, p in list(zip(samples, params))[:200]:
        pos, _ = project_anchors(anchors, model, p)
        pm = build_patch_map(_as_float_image(s.image), pos, d)
        g = anchors.shape[0]
        blocks = pm.reshape(g, d, g, d, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
        patches.append(blocks[rng.choice(g * g, size=min(256, g * g), replace=False)])
    if patches:
        data = np.vstack(patches)
        data = data - data.mean(axis=0)
        _, _, vt = np.linalg.svd(data, full_matrices=False)
        k = min(n_filters, vt.shape[0])
        filters[:k] = vt[:k]
    return filters.reshape(n_filters, d, d, 3)


# --- regressor ---------------------------------------------------------------

@dataclass
class LinearStage:
    """Ridge-regression stage: update = (x - mean) @ coef + intercept."""

    coef: np.ndarray  # (F, P)
    intercept: np.ndarray  # (P,)
    mean: np.ndarray  # (F,)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return (X - self.mean).astype(np.float64) @ self.coef + self.intercept

    @classmethod
    def zero(cls, n_features, n_params):
        return cls(np.zeros((n_features, n_params)), np.zeros(n_params),
                   np.zeros(n_features, dtype=np.float32))


def centered_gram(X):
    """(feature mean, centred float32 features, float64 Gram matrix)."""
    X = np.asarray(X, dtype=np.float32)
    mean = X.mean(axis=0, dtype=np.float64).astype(np.float32)
    Xc = X - mean
    return mean, Xc, (Xc @ Xc.T).astype(np.float64)


def fit_ridge(X, Y, weights=None, ridge=1e-3, gram=None, max_escalations=6) -> LinearStage:
    """Per-output weighted ridge regression solved in the sample (dual) space.

    ``weights`` is (N, P): sample i's weight for output j. The ridge term is
    ``ridge * trace(X^T X) / n_features`` and grows 10x whenever the system
    is singular. ``gram`` may carry the result of :func:`centered_gram`.
    """
    Y = np.asarray(Y, dtype=np.float64)
    n, P = Y.shape
    mean, Xc, K = centered_gram(X) if gram is None else gram
    base = ridge * max(np.trace(K), 1e-300) / Xc.shape[1]

    if weights is None:
        weights = np.ones((n, P))
    weights = np.asarray(weights, dtype=np.float64)
    alpha = np.zeros((n, P))
    yw_means = np.zeros(P)
    uniform = np.all(weights == weights[:, :1])
    groups = [list(range(P))] if uniform else [[j] for j in range(P)]
    for cols in groups:
        w = weights[:, cols[0]]
        s = w.sum()
        if not s > 0:
            continue
        yw_means[cols] = (w @ Y[:, cols]) / s
        # Gram of the features re-centred on their weighted mean, so the
        # intercept decouples from the penalised coefficients
        kw = K @ w / s
        Kw = K - kw[None, :] - kw[:, None] + (w @ kw) / s
        target = w[:, None] * (Y[:, cols] - yw_means[cols])
        r = base
        for attempt in range(max_escalations + 1):
            A = w[:, None] * Kw
            A[np.diag_indices(n)] += r
            try:
                sol = np.linalg.solve(A, target)
                if np.all(np.isfinite(sol)):
                    break
            except np.linalg.LinAlgError:
                pass
            log.warning("singular normal equations; ridge escalated to %.3e", r * 10)
            r *= 10
        else:
            raise np.linalg.LinAlgError("ridge escalation exhausted")
        alpha[:, cols] = sol
    active = weights.sum(axis=0) > 0
    wsum = np.where(active, weights.sum(axis=0), 1.0)
    xbar_w = (Xc.T @ (weights / wsum).astype(np.float32)).astype(np.float64)  # (F, P)
    coef = (Xc.T @ alpha.astype(np.float32)).astype(np.float64) - xbar_w * alpha.sum(axis=0)
    coef[:, ~active] = 0.0
    intercept = np.where(active, yw_means - np.einsum("fp,fp->p", xbar_w, coef), 0.0)
    return LinearStage(coef, intercept, mean)


# --- cascade ---------------------------------------------------------------

@dataclass
class CascadeModel:
    model: MorphableModel
    extractor: FeatureExtractor
    stages: list
    config: TrainConfig

    def __post_init__(self):
        if len(self.stages) < 1:
            raise InvalidArgument("a cascade needs at least one stage")

    @property
    def anchors(self):
        return self.extractor.anchors


def model_fingerprint(model: MorphableModel) -> str:
    h = hashlib.sha256()
    for arr in (model.mean_shape, model.basis_id, model.basis_exp, model.triangles,
                model.landmark_indices):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_cascade(cascade: CascadeModel, path) -> None:
    header = {"format": "morphfit-cascade", "version": FORMAT_VERSION,
              "n_stages": len(cascade.stages), "model_sha256": model_fingerprint(cascade.model),
              "pncc_size": cascade.extractor.pncc_size, "paf_pool": cascade.extractor.paf_pool,
              "config": asdict(cascade.config)}
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
              "filters": cascade.extractor.filters,
              "anchor_triangle": cascade.anchors.triangle, "anchor_bary": cascade.anchors.bary,
              "anchor_azimuth": cascade.anchors.azimuth, "anchor_height": cascade.anchors.height}
    for k, st in enumerate(cascade.stages):
        arrays[f"stage{k}_coef"] = st.coef
        arrays[f"stage{k}_intercept"] = st.intercept
        arrays[f"stage{k}_mean"] = st.mean
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_cascade(path, model: MorphableModel) -> CascadeModel:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != "morphfit-cascade" or header["version"] > FORMAT_VERSION:
            raise InvalidArgument(f"{path}: unsupported cascade file")
        if header["model_sha256"] != model_fingerprint(model):
            raise InvalidArgument(f"{path}: cascade was trained on a different model")
        anchors = AnchorSet(z["anchor_triangle"], z["anchor_bary"], z["anchor_azimuth"],
                            z["anchor_height"])
        stages = [LinearStage(z[f"stage{k}_coef"], z[f"stage{k}_intercept"], z[f"stage{k}_mean"])
                  for k in range(header["n_stages"])]
        extractor = FeatureExtractor(model, anchors, z["filters"], header["pncc_size"],
                                     header["paf_pool"])
    return CascadeModel(model, extractor, stages, TrainConfig.from_dict(header["config"]))


def fit(cascade: CascadeModel, image, bbox, return_trajectory=False):
    """Run the cascade from the bounding-box initialisation."""
    model = cascade.model
    p = pack(init_from_bbox(model, bbox))
    trajectory = [p.copy()]
    for stage in cascade.stages:
        p = p + stage.predict(cascade.extractor(image, p))[0]
        trajectory.append(p.copy())
    out = unpack(p, model.d_id, model.d_exp)
    return (out, trajectory) if return_trajectory else out


def _mean_nme(model, params, samples):
    return float(np.mean([nme(sample_landmarks(model, p), sample_landmarks(model, s.pg))
                          for p, s in zip(params, samples)]))


def _stage_weights(model, kind, P0, Y, pred, jacs, lambda_factor):
    """Per-sample, per-parameter weights for one reweighting pass."""
    n, P = Y.shape
    if kind == "pdc":
        return np.ones((n, P))
    W = np.zeros((n, P))
    for i in range(n):
        pg = P0[i] + Y[i]
        if kind == "wpdc":
            W[i] = cost.wpdc_weights(model, pred[i], P0[i], pg)
        elif kind == "owpdc":
            W[i] = cost.owpdc_weights(model, P0[i] + pred[i], pg,
                                      lambda_factor=lambda_factor, jac=jacs[i])
        else:
            raise InvalidArgument(f"unknown cost {kind!r}")
    return W


def train_stage(model, X, P0, PG, config: TrainConfig, jacs=None) -> LinearStage:
    """Fit one stage to move P0 towards PG under the configured cost."""
    Y = PG - P0
    gram = centered_gram(X)
    stage = fit_ridge(X, Y, ridge=config.ridge, gram=gram)
    if config.cost == "pdc":
        return stage
    for _ in range(config.reweight_iters):
        pred = stage.predict(X)
        W = _stage_weights(model, config.cost, P0, Y, pred, jacs, config.lambda_factor)
        stage = fit_ridge(X, Y, W, ridge=config.ridge, gram=gram)
    return stage


def train(model: MorphableModel, samples, validation, config: TrainConfig | None = None,
          anchors: AnchorSet | None = None, test=None):
    """Train a K-stage cascade. Returns (CascadeModel, history).

    With ``config.regenerate`` each later stage starts the training samples
    from pg - (pg_v - p_v), where v is a random similar-posture validation
    sample that has been run through the stages trained so far. Otherwise
    the training samples simply carry their own predictions forward.
    ``history`` records mean NME per stage on train (and ``test`` if given).
    """
    config = config or TrainConfig()
    if not samples:
        raise InvalidArgument("no training samples")
    rng = np.random.default_rng(config.seed)
    samples = list(samples)
    if config.augment_count > 1:
        extra = [augment(model, s, rng, config.max_rotation, config.bbox_mean, config.bbox_cov)
                 for s in samples for _ in range(config.augment_count - 1)]
        samples = samples + extra
    validation = list(validation or [])
    if config.regenerate and not validation:
        raise InvalidArgument("initialisation regeneration needs a validation set")

    anchors = anchors if anchors is not None else sample_anchors(model)
    PG = np.array([pack(s.pg) for s in samples])
    P = np.array([pack(init_from_bbox(model, s.bbox)) for s in samples])
    filters = learn_filters(model, anchors, samples, P, config.n_filters, config.patch,
                            config.seed)
    extractor = FeatureExtractor(model, anchors, filters, config.pncc_size, config.paf_pool)
    jacs = [cost.jacobian(model, pg) for pg in PG] if config.cost == "owpdc" else None

    if config.regenerate:
        VG = np.array([pack(s.pg) for s in validation])
        V = np.array([pack(init_from_bbox(model, s.bbox)) for s in validation])
        subsets = build_validation_subsets([s.fp for s in samples], [s.fp for s in validation],
                                           config.subset_size)
    test = list(test or [])
    T = np.array([pack(init_from_bbox(model, s.bbox)) for s in test])

    images = [s.image for s in samples]
    history = {"train_nme": [_mean_nme(model, P, samples)],
               "test_nme": [_mean_nme(model, T, test)] if test else []}
    stages = []
    for k in range(config.stages):
        X = extractor.batch(images, P, config.threads)
        stage = train_stage(model, X, P, PG, config, jacs)
        stages.append(stage)
        P_next = P + stage.predict(X)
        history["train_nme"].append(_mean_nme(model, P_next, samples))
        if test:
            T = T + stage.predict(extractor.batch([s.image for s in test], T, config.threads))
            history["test_nme"].append(_mean_nme(model, T, test))
        log.info("stage %d: train NME %.3f%s", k + 1, history["train_nme"][-1],
                 f", test NME {history['test_nme'][-1]:.3f}" if test else "")
        if k + 1 == config.stages:
            break
        if config.regenerate:
            V = V + stage.predict(extractor.batch([s.image for s in validation], V,
                                                  config.threads))
            pick = subsets[np.arange(len(samples)), rng.integers(0, subsets.shape[1],
                                                                 len(samples))]
            P = regenerate_init(PG, V[pick], VG[pick])
        else:
            P = P_next
        _guard_quaternions(P)
    return CascadeModel(model, extractor, stages, config), history


def _guard_quaternions(P):
    bad = ~np.any(P[:, :4], axis=1)
    if np.any(bad):
        P[bad, 0] = 1e-6
