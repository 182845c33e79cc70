"""Training costs on the packed parameter vector, and the OWPDC weight QP.

All parameter arguments here are packed vectors (see :func:`model.pack`).
"""

from __future__ import annotations

import csv
import logging

import numpy as np

from .errors import InvalidArgument, SolverFailure
from .model import (MorphableModel, as_params, construct_shape, project, rotation_derivatives,
                    rotation_from_quaternion)

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_FACTOR = 0.17


def param_names(model: MorphableModel) -> list[str]:
    return (["q0", "q1", "q2", "q3", "tx", "ty"]
            + [f"id{j}" for j in range(model.d_id)] + [f"exp{j}" for j in range(model.d_exp)])


def _flat(x):
    return np.asarray(x, dtype=np.float64).reshape(-1)


def pdc(dp, p0, pg) -> float:
    r = _flat(dp) - (_flat(pg) - _flat(p0))
    return float(r @ r)


def owpdc_cost(dp, p0, pg, w, with_grad=False):
    """(dp - (pg - p0))^T diag(w) (dp - (pg - p0)); optionally with gradient wrt dp."""
    r = _flat(dp) - (_flat(pg) - _flat(p0))
    w = _flat(w)
    cost = float(r @ (w * r))
    return (cost, 2.0 * w * r) if with_grad else cost


wpdc_cost = owpdc_cost


def jacobian(model: MorphableModel, p) -> np.ndarray:
    """Analytic d project(model, p) / dp, shape (2n, P), rows interleaved (x, y)."""
    p = as_params(model, p)
    n = model.n_vertices
    shape = construct_shape(model, p).reshape(n, 3)
    R = rotation_from_quaternion(p.q)
    J = np.empty((2 * n, model.n_params))
    dR = rotation_derivatives(p.q)
    for i in range(4):
        J[:, i] = (shape @ dR[i][:2].T).reshape(-1)
    J[:, 4] = np.tile([1.0, 0.0], n)
    J[:, 5] = np.tile([0.0, 1.0], n)
    bases = np.hstack([model.basis_id, model.basis_exp])  # (3n, d)
    if bases.shape[1]:
        b = bases.reshape(n, 3, -1)
        J[:, 6:] = np.einsum("rc,ncd->nrd", R[:2], b).reshape(2 * n, -1)
    return J


def vdc(model: MorphableModel, dp, p0, pg):
    """Squared projected-vertex distance and its gradient wrt dp."""
    pc = _flat(p0) + _flat(dp)
    if not np.any(pc[:4]):
        raise InvalidArgument("zero quaternion at p0 + dp")
    r = project(model, pc) - project(model, pg)
    return float(r @ r), 2.0 * jacobian(model, pc).T @ r


def wpdc_weights(model: MorphableModel, dp, p0, pg) -> np.ndarray:
    """Per-parameter importance from the i-degraded parameters, max-normalised."""
    pg = _flat(pg)
    pc = _flat(p0) + _flat(dp)
    vg = project(model, pg)
    raw = np.zeros(pg.size)
    for i in range(pg.size):
        if pc[i] == pg[i]:
            continue
        de = pg.copy()
        de[i] = pc[i]
        raw[i] = np.linalg.norm(project(model, de) - vg)
    z = raw.max()
    if z == 0:
        return raw
    w = raw / z
    w[np.argmax(raw)] = 1.0
    return w


# --- OWPDC -----------------------------------------------------------------

def solve_box_qp(Q, b, w0=None, tol=1e-8, max_iter=500):
    """Minimise w^T Q w - 2 b^T w over the unit box by projected Newton.

    Returns (w, info). ``info`` holds the iteration count and the final
    projected-gradient infinity norm, both measured on the problem rescaled
    so that max diag(Q) == 1.
    """
    Q = np.asarray(Q, dtype=np.float64)
    b = _flat(b)
    n = b.size
    scale = float(np.max(np.abs(np.diag(Q)))) if n else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    Qs, bs = Q / scale, b / scale

    w = np.ones(n) if w0 is None else np.clip(_flat(w0), 0.0, 1.0)
    pg_norm = np.inf
    for it in range(max_iter + 1):
        g = 2.0 * (Qs @ w - bs)
        clamped = ((w <= 0.0) & (g > 0.0)) | ((w >= 1.0) & (g < 0.0))
        free = ~clamped
        pg_norm = float(np.max(np.abs(g[free]), initial=0.0))
        if pg_norm <= tol or it == max_iter:
            break
        d = np.zeros(n)
        Qff = Qs[np.ix_(free, free)]
        try:
            d[free] = -np.linalg.solve(Qff, 0.5 * g[free])
        except np.linalg.LinAlgError:
            d[free] = -np.linalg.lstsq(Qff, 0.5 * g[free], rcond=None)[0]
        step = 1.0
        while True:
            dw = np.clip(w + step * d, 0.0, 1.0) - w
            # exact change of the quadratic; differencing two objective values
            # loses everything once the decrease is near rounding level
            slope = g @ dw
            if slope + dw @ (Qs @ dw) <= 1e-4 * slope:
                break
            step *= 0.5
            if step < 1e-20:
                raise SolverFailure("line search failed in box QP", residual=pg_norm)
        if not dw.any():
            break
        w = w + dw
        np.clip(w, 0.0, 1.0, out=w)
    if pg_norm > tol:
        raise SolverFailure(f"box QP did not converge in {max_iter} iterations "
                            f"(projected gradient {pg_norm:.3e})", residual=pg_norm)
    return w, {"iterations": it, "projected_gradient": pg_norm, "scale": scale}


def kkt_violation(Q, b, w) -> float:
    """Largest KKT violation of the unit-box QP, on the max-diag-normalised scale."""
    Q = np.asarray(Q, dtype=np.float64)
    scale = float(np.max(np.abs(np.diag(Q)))) or 1.0
    g = 2.0 * (Q @ w - _flat(b)) / scale
    viol = np.where(w <= 0.0, np.maximum(-g, 0.0),
                    np.where(w >= 1.0, np.maximum(g, 0.0), np.abs(g)))
    out_of_box = np.maximum(-w, 0.0) + np.maximum(w - 1.0, 0.0)
    return float(np.max(viol + out_of_box, initial=0.0))


def owpdc_qp(model: MorphableModel, pc, pg, lam=None, lambda_factor=DEFAULT_LAMBDA_FACTOR,
             jac=None):
    """Build (Q, b, active) for the OWPDC weight problem.

    ``active`` marks parameters with a nonzero residual; the others are fixed
    to weight 0 and left out of Q and b.
    """
    pc, pg = _flat(pc), _flat(pg)
    delta = pg - pc
    active = delta != 0
    if lam is None:
        r = project(model, pc) - project(model, pg)
        lam = lambda_factor * float(r @ r)
    J = jacobian(model, pg) if jac is None else jac
    H = J[:, active] * delta[active]
    HtH = H.T @ H
    Q = HtH + lam * np.diag(delta[active] ** 2)
    b = HtH @ np.ones(int(active.sum()))
    return Q, b, active


def owpdc_weights(model: MorphableModel, pc, pg, lam=None,
                  lambda_factor=DEFAULT_LAMBDA_FACTOR, jac=None, return_info=False):
    """Optimal box-constrained weights for the OWPDC cost.

    ``jac`` may carry a precomputed Jacobian at ``pg``.
    """
    pc, pg = _flat(pc), _flat(pg)
    w = np.zeros(pg.size)
    info = {"iterations": 0, "projected_gradient": 0.0, "kkt": 0.0}
    if np.array_equal(pc, pg):
        return (w, info) if return_info else w
    Q, b, active = owpdc_qp(model, pc, pg, lam, lambda_factor, jac)
    if lam == 0:
        w[active] = 1.0
    else:
        w_act, info = solve_box_qp(Q, b)
        w[active] = w_act
        info["kkt"] = kkt_violation(Q, b, w_act)
    return (w, info) if return_info else w


def owpdc_objective(model: MorphableModel, w, pc, pg, lam):
    """The un-linearised weight objective (before the Taylor expansion)."""
    pc, pg = _flat(pc), _flat(pg)
    delta = pg - pc
    r = project(model, pc + _flat(w) * delta) - project(model, pg)
    u = _flat(w) * delta
    return float(r @ r + lam * (u @ u))


# --- diagnostics --------------------------------------------------------------

def curvature_table(model: MorphableModel, p) -> list[dict]:
    """Gauss-Newton Hessian diagonal of VDC per parameter (2 * J^T J)."""
    J = jacobian(model, p)
    diag = 2.0 * np.einsum("ij,ij->j", J, J)
    return [{"param": name, "gn_diag": float(d)} for name, d in zip(param_names(model), diag)]


def write_diagnostics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
