"""3D morphable model, quaternion pose and scaled orthographic projection.

Vertices are stored interleaved, ``[x0, y0, z0, x1, y1, z1, ...]``. Image
coordinates follow the raster convention (x right, y down) and the camera
looks along -z, so a larger z is closer to the viewer. Models are expected
to be authored in that frame; no axis flip happens anywhere downstream.

The quaternion is never normalised. Its squared norm is the projection
scale: ``R(s*q) == s**2 * R(q)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateModel, InvalidArgument

N_LANDMARKS = 68
POSE_DIM = 6


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_shape: np.ndarray
    basis_id: np.ndarray
    basis_exp: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean_shape, dtype=np.float64).reshape(-1)
        if mean.size % 3:
            raise InvalidArgument("mean_shape length must be a multiple of 3")
        n3 = mean.size
        bid = np.asarray(self.basis_id, dtype=np.float64).reshape(n3, -1)
        bexp = np.asarray(self.basis_exp, dtype=np.float64).reshape(n3, -1)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        lms = np.asarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        n = n3 // 3
        if tris.size and (tris.min() < 0 or tris.max() >= n):
            raise InvalidArgument("triangle index out of range")
        if lms.size and (lms.min() < 0 or lms.max() >= n):
            raise InvalidArgument("landmark index out of range")
        if np.unique(lms).size != lms.size:
            raise InvalidArgument("landmark indices must be distinct")
        for name, arr in (("mean_shape", mean), ("basis_id", bid), ("basis_exp", bexp),
                          ("triangles", tris), ("landmark_indices", lms)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def d_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def d_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def n_params(self) -> int:
        return POSE_DIM + self.d_id + self.d_exp

    @property
    def vertices(self) -> np.ndarray:
        """Mean shape as an (n, 3) view."""
        return self.mean_shape.reshape(-1, 3)


@dataclass
class ParamVector:
    q: np.ndarray
    t2d: np.ndarray
    alpha_id: np.ndarray
    alpha_exp: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.t2d = np.asarray(self.t2d, dtype=np.float64).reshape(2)
        self.alpha_id = np.asarray(self.alpha_id, dtype=np.float64).reshape(-1)
        self.alpha_exp = np.asarray(self.alpha_exp, dtype=np.float64).reshape(-1)

    @classmethod
    def neutral(cls, model: MorphableModel) -> "ParamVector":
        return cls([1.0, 0, 0, 0], [0.0, 0.0], np.zeros(model.d_id), np.zeros(model.d_exp))

    def __len__(self):
        return POSE_DIM + self.alpha_id.size + self.alpha_exp.size


def pack(p: ParamVector) -> np.ndarray:
    return np.concatenate([p.q, p.t2d, p.alpha_id, p.alpha_exp])


def unpack(flat, d_id: int, d_exp: int) -> ParamVector:
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    if flat.size != POSE_DIM + d_id + d_exp:
        raise InvalidArgument(
            f"packed parameter length {flat.size} != 6 + {d_id} + {d_exp}")
    return ParamVector(flat[0:4].copy(), flat[4:6].copy(),
                       flat[6:6 + d_id].copy(), flat[6 + d_id:].copy())


def as_params(model: MorphableModel, p) -> ParamVector:
    """Accept either a ParamVector or a packed vector."""
    if isinstance(p, ParamVector):
        return p
    return unpack(p, model.d_id, model.d_exp)


def construct_shape(model: MorphableModel, p) -> np.ndarray:
    p = as_params(model, p)
    if p.alpha_id.size != model.d_id or p.alpha_exp.size != model.d_exp:
        raise InvalidArgument(
            f"coefficient sizes ({p.alpha_id.size}, {p.alpha_exp.size}) do not match "
            f"model ({model.d_id}, {model.d_exp})")
    return model.mean_shape + model.basis_id @ p.alpha_id + model.basis_exp @ p.alpha_exp


def rotation_from_quaternion(q) -> np.ndarray:
    q0, q1, q2, q3 = np.asarray(q, dtype=np.float64).reshape(4)
    if q0 == 0 and q1 == 0 and q2 == 0 and q3 == 0:
        raise InvalidArgument("zero quaternion has no rotation")
    return np.array([
        [q0*q0 + q1*q1 - q2*q2 - q3*q3, 2*(q1*q2 + q0*q3), 2*(q1*q3 - q0*q2)],
        [2*(q1*q2 - q0*q3), q0*q0 - q1*q1 + q2*q2 - q3*q3, 2*(q0*q1 + q2*q3)],
        [2*(q0*q2 + q1*q3), 2*(q2*q3 - q0*q1), q0*q0 - q1*q1 - q2*q2 + q3*q3],
    ])


def rotation_derivatives(q) -> np.ndarray:
    """dR/dq_i for i = 0..3, stacked as (4, 3, 3). Linear in q."""
    q0, q1, q2, q3 = np.asarray(q, dtype=np.float64).reshape(4)
    return 2.0 * np.array([
        [[q0, q3, -q2], [-q3, q0, q1], [q2, -q1, q0]],
        [[q1, q2, q3], [q2, -q1, q0], [q3, -q0, -q1]],
        [[-q2, q1, -q0], [q1, q2, q3], [q0, q3, -q2]],
        [[-q3, q0, q1], [-q0, -q3, q2], [q1, q2, q3]],
    ])


def _axis_rotation(axis: int, angle: float) -> np.ndarray:
    # Elementary rotations in the same (transposed) handedness as the
    # quaternion formula above, so a pure-yaw quaternion and a pure-yaw
    # Euler triple give the same matrix.
    c, s = np.cos(angle), np.sin(angle)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, s], [0, -s, c]])
    if axis == 1:
        return np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])
    return np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])


def rotation_from_euler(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """Pitch about x, then yaw about y, then roll about z (angles in radians)."""
    return _axis_rotation(2, roll) @ _axis_rotation(1, yaw) @ _axis_rotation(0, pitch)


def euler_from_rotation(R) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_from_euler` for a proper rotation matrix.

    At |yaw| = 90 degrees pitch and roll are not separable; the whole
    ambiguous angle is assigned to roll.
    """
    R = np.asarray(R, dtype=np.float64)
    yaw = float(np.arcsin(np.clip(R[2, 0], -1.0, 1.0)))
    if abs(R[2, 0]) < 1.0 - 1e-12:
        pitch = float(np.arctan2(-R[2, 1], R[2, 2]))
        roll = float(np.arctan2(-R[1, 0], R[0, 0]))
    else:
        pitch = 0.0
        roll = float(np.arctan2(R[0, 1], R[1, 1]))
    return pitch, yaw, roll


def quaternion_from_rotation(R) -> np.ndarray:
    """Unit quaternion q (q0 >= 0) with ``rotation_from_quaternion(q) == R``."""
    R = np.asarray(R, dtype=np.float64)
    # The formula's matrix is the transpose of the usual active-rotation
    # matrix, so read the off-diagonal differences with flipped sign.
    m = R.T
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_multiply(a, b) -> np.ndarray:
    """Hamilton product a*b."""
    a0, a1, a2, a3 = a
    b0, b1, b2, b3 = b
    return np.array([
        a0*b0 - a1*b1 - a2*b2 - a3*b3,
        a0*b1 + a1*b0 + a2*b3 - a3*b2,
        a0*b2 - a1*b3 + a2*b0 + a3*b1,
        a0*b3 + a1*b2 - a2*b1 + a3*b0,
    ])


def compose_rotation(q, R_left) -> np.ndarray:
    """Quaternion q' with ``R(q') == R_left @ R(q)`` and ``|q'| == |q|``.

    ``R_left`` must be a proper rotation.
    """
    # R(q) is the transpose of the active matrix of q, so a left-applied
    # rotation composes on the right of the product.
    return quaternion_multiply(np.asarray(q, dtype=np.float64),
                               quaternion_from_rotation(R_left))


def _posed(model: MorphableModel, p) -> tuple[np.ndarray, ParamVector]:
    p = as_params(model, p)
    shape = construct_shape(model, p).reshape(-1, 3)
    return shape @ rotation_from_quaternion(p.q).T, p


def project(model: MorphableModel, p) -> np.ndarray:
    """Scaled orthographic projection, interleaved (x, y) per vertex."""
    rotated, p = _posed(model, p)
    return (rotated[:, :2] + p.t2d).reshape(-1)


def project_3d(model: MorphableModel, p) -> np.ndarray:
    """Like :func:`project` but keeps the rotated z (translation is [t2d, 0])."""
    rotated, p = _posed(model, p)
    rotated[:, :2] += p.t2d
    return rotated.reshape(-1)


def compute_ncc(model: MorphableModel) -> np.ndarray:
    """Per-vertex mean-shape coordinates min-max normalised to [0, 1]^3, shape (n, 3)."""
    v = model.vertices
    if v.shape[0] < 2:
        raise DegenerateModel("NCC needs at least two vertices")
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    extent = hi - lo
    if np.any(extent <= 0):
        raise DegenerateModel(f"zero extent on axis {int(np.argmin(extent))}")
    ncc = (v - lo) / extent
    # Division can land a hair off the endpoints; pin them exactly.
    for d in range(3):
        ncc[v[:, d] == lo[d], d] = 0.0
        ncc[v[:, d] == hi[d], d] = 1.0
    return ncc


# --- model files ---------------------------------------------------------

MAGIC = b"MFM1"
TEXT_MAGIC = "mfm1-text"
_HEADER = struct.Struct("<4s5I")


def save_model(model: MorphableModel, path) -> None:
    n3 = model.mean_shape.size
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, model.n_vertices, model.d_id, model.d_exp,
                              len(model.triangles), len(model.landmark_indices)))
        fh.write(model.mean_shape.astype("<f8").tobytes())
        fh.write(model.basis_id.reshape(n3, -1).astype("<f8").tobytes(order="F"))
        fh.write(model.basis_exp.reshape(n3, -1).astype("<f8").tobytes(order="F"))
        fh.write(model.triangles.astype("<u4").tobytes())
        fh.write(model.landmark_indices.astype("<u4").tobytes())


def load_model(path) -> MorphableModel:
    """Load a binary MFM1 file, or the plain-text variant."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if head[:4] != MAGIC:
            return _load_text_model(path)
        _, n, d_id, d_exp, n_tri, n_lm = _HEADER.unpack(head)
        data = fh.read()

    sizes = [3 * n * 8, 3 * n * d_id * 8, 3 * n * d_exp * 8, 3 * n_tri * 4, n_lm * 4]
    if len(data) != sum(sizes):
        raise InvalidArgument(f"{path}: truncated or oversized model payload")
    off = 0
    chunks = []
    for size in sizes:
        chunks.append(data[off:off + size])
        off += size
    mean = np.frombuffer(chunks[0], "<f8")
    bid = np.frombuffer(chunks[1], "<f8").reshape((3 * n, d_id), order="F")
    bexp = np.frombuffer(chunks[2], "<f8").reshape((3 * n, d_exp), order="F")
    tris = np.frombuffer(chunks[3], "<u4").reshape(-1, 3)
    lms = np.frombuffer(chunks[4], "<u4")
    return MorphableModel(mean, bid, bexp, tris, lms)


def _load_text_model(path: Path) -> MorphableModel:
    """Parse the hand-writable text variant.

    One record per line; ``#`` starts a comment::

        mfm1-text
        v  x y z              # one per vertex, in order
        id c0 c1 ... c(3n-1)  # one line per identity basis column
        exp c0 ... c(3n-1)    # one line per expression basis column
        f  a b c              # triangle
        lm i0 i1 ...          # landmark indices (may repeat across lines)
    """
    lines = [ln.split("#", 1)[0].split() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != [TEXT_MAGIC]:
        raise InvalidArgument(f"{path}: not an MFM1 model file")
    verts, ids, exps, faces, lms = [], [], [], [], []
    for rec in lines[1:]:
        key, vals = rec[0], rec[1:]
        if key == "v":
            verts.append([float(x) for x in vals])
        elif key == "id":
            ids.append([float(x) for x in vals])
        elif key == "exp":
            exps.append([float(x) for x in vals])
        elif key == "f":
            faces.append([int(x) for x in vals])
        elif key == "lm":
            lms.extend(int(x) for x in vals)
        else:
            raise InvalidArgument(f"{path}: unknown record {key!r}")
    mean = np.array(verts, dtype=np.float64).reshape(-1)
    n3 = mean.size
    bid = np.array(ids, dtype=np.float64).reshape(-1, n3).T if ids else np.zeros((n3, 0))
    bexp = np.array(exps, dtype=np.float64).reshape(-1, n3).T if exps else np.zeros((n3, 0))
    return MorphableModel(mean, bid, bexp, np.array(faces, dtype=np.int64).reshape(-1, 3),
                          np.array(lms, dtype=np.int64))


def save_text_model(model: MorphableModel, path) -> None:
    out = [TEXT_MAGIC]
    out += ["v " + " ".join(repr(float(c)) for c in v) for v in model.vertices]
    out += ["id " + " ".join(repr(float(c)) for c in col) for col in model.basis_id.T]
    out += ["exp " + " ".join(repr(float(c)) for c in col) for col in model.basis_exp.T]
    out += ["f %d %d %d" % tuple(t) for t in model.triangles]
    if len(model.landmark_indices):
        out.append("lm " + " ".join(str(int(i)) for i in model.landmark_indices))
    Path(path).write_text("\n".join(out) + "\n")
