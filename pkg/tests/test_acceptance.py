"""Acceptance suite: one reported line per criterion, at the agreed tolerances.

Each test records ``criterion N: PASS|FAIL ...`` through the ``acceptance_report``
fixture; the lines are printed together in the terminal summary.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial import Delaunay

from oracles import (brute_force_zbuffer, dense_anchor_lsq, direct_anchor_convolution,
                     loop_project)
from morphfit.cascade import TrainConfig, split_validation, train
from morphfit.cost import (jacobian, kkt_violation, owpdc_objective, owpdc_qp, owpdc_weights,
                           vdc, wpdc_weights)
from morphfit.datagen import SynthConfig, generate_model, generate_samples, sample_params
from morphfit.evaluation import EvalRecord, summarize
from morphfit.features import build_patch_map, pac, sample_anchors
from morphfit.model import (pack, project, quaternion_from_rotation, rotation_from_euler,
                            rotation_from_quaternion)
from morphfit.profiling import (BACKGROUND, CONTOUR, ImageMesh, _edges, adjust_anchors,
                                edge_residual, mesh_image, rotate_mesh)
from morphfit.render import zbuffer

BASELINE = Path(__file__).parent / "data" / "cascade_baseline.json"


def _check(report, n, ok, detail):
    report(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def _draw(model, rng):
    return pack(sample_params(model, SynthConfig(d_id=model.d_id, d_exp=model.d_exp), rng))


def _perturb(pg, rng, rel):
    return pg + rel * rng.normal(size=pg.size) * np.maximum(np.abs(pg), 1.0)


@pytest.fixture(scope="module")
def model():
    return generate_model(SynthConfig(n_vertices=256, d_id=3, d_exp=2, seed=4))


def test_c01_gimbal_lock(acceptance_report):
    t = time.perf_counter()
    a = rotation_from_euler(*np.deg2rad([20.0, 90.0, 0.0]))
    b = rotation_from_euler(*np.deg2rad([0.0, 90.0, 20.0]))
    dev = np.abs(a - b).max()
    qa, qb = quaternion_from_rotation(a), quaternion_from_rotation(b)
    qdev = min(np.abs(qa - qb).max(), np.abs(qa + qb).max())
    dt = time.perf_counter() - t
    ok = dev <= 1e-12 and qdev <= 1e-12 and dt < 1.0
    _check(acceptance_report, 1, ok,
           f"matrix dev {dev:.1e}, quaternion dev (up to sign) {qdev:.1e}, {dt * 1e3:.1f} ms")


def test_c02_quaternion_scale_law(acceptance_report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        q = rng.normal(size=4)
        s = rng.uniform(0.1, 3.0)
        R = rotation_from_quaternion(q)
        worst = max(worst,
                    np.abs(rotation_from_quaternion(s * q) - s * s * R).max(),
                    np.abs(R.T @ R - (q @ q) ** 2 * np.eye(3)).max())
    _check(acceptance_report, 2, worst <= 1e-10, f"max abs deviation {worst:.1e} over 1000 q")


def test_c03_zbuffer_oracle(acceptance_report):
    rng = np.random.default_rng(3)
    spent = 0.0  # rasterizer time only; the oracle is not part of the budget
    mismatches = perm_fail = 0
    for k in range(50):
        n_tri = int(rng.integers(1, 201))
        # quarter-pixel lattice coordinates keep every edge test exact
        v = rng.integers(-16, 4 * 64 + 16, size=(3 * n_tri, 2)) / 4.0
        z = np.repeat(rng.permutation(n_tri).astype(np.float64), 3) if k % 2 else \
            rng.uniform(-5, 5, 3 * n_tri)
        v3 = np.column_stack([v, z])
        tris = np.arange(3 * n_tri).reshape(-1, 3)
        t0 = time.perf_counter()
        tri_id, _, depth = zbuffer(v3, tris, 64, 64)
        spent += time.perf_counter() - t0
        ref_id, ref_depth = brute_force_zbuffer(v3, tris, 64, 64)
        if not (np.array_equal(tri_id, ref_id) and np.array_equal(depth, ref_depth)):
            mismatches += 1
        for perm in ([1, 2, 0], [0, 2, 1]):
            pid, _, pdepth = zbuffer(v3, tris[:, perm], 64, 64)
            if k % 2 and not (np.array_equal(pid, tri_id) and np.array_equal(pdepth, depth)):
                perm_fail += 1
        if k % 2:  # distinct flat depths: triangle order cannot matter
            order = rng.permutation(n_tri)
            oid, _, _ = zbuffer(v3, tris[order], 64, 64)
            mapped = np.where(oid >= 0, order[np.maximum(oid, 0)], -1)
            perm_fail += not np.array_equal(mapped, tri_id)
    ok = mismatches == 0 and perm_fail == 0 and spent < 30
    _check(acceptance_report, 3, ok, f"{mismatches}/50 oracle mismatches, "
           f"{perm_fail} permutation failures, rasterizer {spent:.2f} s")


def test_c04_pac_equivalence(acceptance_report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        G, d, c = int(rng.integers(2, 8)), 2 * int(rng.integers(0, 3)) + 1, 3
        img = rng.uniform(size=(40, 40, c))
        pos = rng.uniform(-5, 45, size=(G, G, 2))
        vis = rng.uniform(size=(G, G)) > 0.3
        filt = rng.normal(size=(int(rng.integers(1, 5)), d, d, c))
        got = pac(build_patch_map(img, pos, d), filt, vis)
        worst = max(worst, np.abs(got - direct_anchor_convolution(img, pos, filt, vis)).max())
    _check(acceptance_report, 4, worst <= 1e-10, f"max abs difference {worst:.1e}")


def test_c05_jacobian_and_vdc_gradient(acceptance_report, model):
    rng = np.random.default_rng(5)
    worst_j = worst_g = 0.0
    for _ in range(50):
        p = _draw(model, rng)
        J = jacobian(model, p)
        fd = np.empty_like(J)
        for i in range(p.size):
            e = np.zeros(p.size)
            e[i] = 1e-6
            fd[:, i] = (project(model, p + e) - project(model, p - e)) / 2e-6
        worst_j = max(worst_j, np.abs(J - fd).max() / np.abs(fd).max())

        pg, p0 = _draw(model, rng), p
        dp = 0.05 * rng.normal(size=p.size)
        _, g = vdc(model, dp, p0, pg)
        gfd = np.empty(p.size)
        for i in range(p.size):
            e = np.zeros(p.size)
            e[i] = 1e-6
            gfd[i] = (vdc(model, dp + e, p0, pg)[0] - vdc(model, dp - e, p0, pg)[0]) / 2e-6
        worst_g = max(worst_g, np.abs(g - gfd).max() / np.abs(gfd).max())
    ok = max(worst_j, worst_g) <= 1e-4
    _check(acceptance_report, 5, ok,
           f"max rel error Jacobian {worst_j:.1e}, VDC gradient {worst_g:.1e} over 50 points")


def test_c06_owpdc_qp(acceptance_report, model):
    rng = np.random.default_rng(6)
    kkt = 0.0
    cases = [(_perturb(pg, rng, rng.choice([0.01, 0.1, 0.3])), pg)
             for pg in (_draw(model, rng) for _ in range(100))]
    t = time.perf_counter()
    for pc, pg in cases:
        w, info = owpdc_weights(model, pc, pg, return_info=True)
        kkt = max(kkt, info["kkt"])
        Q, b, active = owpdc_qp(model, pc, pg)
        kkt = max(kkt, kkt_violation(Q, b, w[active]))
    dt = time.perf_counter() - t

    p8 = generate_model(SynthConfig(n_vertices=256, d_id=1, d_exp=1, seed=5))
    gap = 0.0
    for _ in range(8):
        pg = _draw(p8, rng)
        pc = _perturb(pg, rng, 0.01)  # small-residual regime, where the Taylor step is valid
        r = project(p8, pc) - project(p8, pg)
        lam = 0.17 * r @ r
        w = owpdc_weights(p8, pc, pg, lam=lam)

        def f(x):
            return owpdc_objective(p8, x, pc, pg, lam)

        best = min(f(minimize(f, x0, method="L-BFGS-B", bounds=[(0, 1)] * 8,
                              options={"ftol": 1e-15, "gtol": 1e-12}).x)
                   for x0 in (w, np.ones(8), np.full(8, 0.5)))
        gap = max(gap, (f(w) - best) / best)

    pg = _draw(model, rng)
    ones = np.array_equal(owpdc_weights(model, _perturb(pg, rng, 0.1), pg, lam=0),
                          np.ones(pg.size))
    ok = kkt <= 1e-6 and gap <= 1e-4 and ones and dt < 10
    _check(acceptance_report, 6, ok,
           f"max KKT {kkt:.1e}, P=8 rel objective gap {gap:.1e}, lambda=0 ones {ones}, "
           f"100 solves {dt:.2f} s")


def test_c07_wpdc(acceptance_report, model):
    rng = np.random.default_rng(7)
    worst, zero_ok, max_ok = 0.0, True, True
    for _ in range(10):
        pg = _draw(model, rng)
        p0 = _perturb(pg, rng, 0.1)
        dp = 0.02 * rng.normal(size=pg.size)
        k = int(rng.integers(pg.size))
        p0[k], dp[k] = pg[k], 0.0
        w = wpdc_weights(model, dp, p0, pg)
        vg = loop_project(model, pg)
        raw = np.zeros(pg.size)
        for i in range(pg.size):
            de = pg.copy()
            de[i] = p0[i] + dp[i]
            raw[i] = np.linalg.norm(loop_project(model, de) - vg)
        worst = max(worst, np.abs(w - raw / raw.max()).max())
        zero_ok &= w[k] == 0
        max_ok &= w.max() == 1.0
    ok = worst <= 1e-10 and zero_ok and max_ok
    _check(acceptance_report, 7, ok,
           f"oracle dev {worst:.1e}, exact entries zero {zero_ok}, max exactly 1 {max_ok}")


def test_c08_anchor_adjustment(acceptance_report, toy_model):
    R = rotation_from_euler(0.0, np.deg2rad(25.0), 0.0)
    q = quaternion_from_rotation(R) * np.sqrt(0.6)
    from morphfit.model import ParamVector

    pg = ParamVector(q, np.array([100.0, 100.0]), np.zeros(toy_model.d_id),
                     np.zeros(toy_model.d_exp))
    mesh = mesh_image(np.zeros((200, 200, 3)), toy_model, pg)
    identity = np.array_equal(adjust_anchors(mesh, rotate_mesh(mesh, 0.0)), mesh.points[:, :2])
    prof = rotate_mesh(mesh, 15.0)
    out = adjust_anchors(mesh, prof)
    pin = mesh.kind == CONTOUR
    contour = np.array_equal(out[pin], prof[pin, :2])

    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        pts = rng.uniform(0, 100, size=(30, 2))
        tri = Delaunay(pts).simplices
        kind = np.full(30, BACKGROUND)
        kind[:8] = CONTOUR
        g = ImageMesh(np.column_stack([pts, rng.uniform(size=30)]), kind, tri, _edges(tri),
                      np.array([50.0, 50.0, 0.0]))
        prof = pts + rng.normal(size=(30, 2)) * 3
        pinned = kind == CONTOUR
        got = adjust_anchors(g, prof, pinned)
        ref = dense_anchor_lsq(pts, prof, g.edges, pinned)
        worst = max(worst, abs(edge_residual(g, got) - edge_residual(g, ref)),
                    np.abs(got - ref).max())
    ok = identity and contour and worst <= 1e-8
    _check(acceptance_report, 8, ok,
           f"zero rotation exact {identity}, contour pinned {contour}, "
           f"dense oracle dev {worst:.1e}")


BENCH = dict(n_train=2000, n_test=400, ridge=0.3, paf_pool=2, cost="owpdc", augment_count=1)


@pytest.mark.slow
def test_c09_cascade_benchmark(acceptance_report):
    t0 = time.perf_counter()
    m = generate_model(SynthConfig())
    anchors = sample_anchors(m)
    data = generate_samples(m, SynthConfig(n_samples=BENCH["n_train"], seed=1))
    test = generate_samples(m, SynthConfig(n_samples=BENCH["n_test"], seed=1),
                            start=BENCH["n_train"])
    tr, val = split_validation(data, 0.2, 0)
    curves = {}
    for regen in (True, False):
        cfg = TrainConfig(augment_count=BENCH["augment_count"], regenerate=regen,
                          paf_pool=BENCH["paf_pool"], cost=BENCH["cost"], ridge=BENCH["ridge"])
        _, hist = train(m, tr, val, cfg, anchors=anchors, test=test)
        curves[regen] = np.asarray(hist["test_nme"], dtype=float)
    dt = time.perf_counter() - t0
    on, off = curves[True], curves[False]
    decreasing = bool(np.all(np.diff(on) < 0))
    gain_on, gain_off = on[-2] - on[-1], off[-2] - off[-1]

    baseline_note = "baseline recorded"
    if BASELINE.exists():
        ref = json.loads(BASELINE.read_text())
        drift = abs(ref["final_test_nme"] - on[-1])
        baseline_note = f"baseline {ref['final_test_nme']:.3f} (drift {drift:.1e})"
        regression_ok = drift <= 1e-3 * ref["final_test_nme"]
    else:
        BASELINE.parent.mkdir(exist_ok=True)
        BASELINE.write_text(json.dumps({"config": BENCH, "test_nme_regen": on.tolist(),
                                        "test_nme_no_regen": off.tolist(),
                                        "final_test_nme": float(on[-1])}, indent=2) + "\n")
        regression_ok = True
    ok = decreasing and gain_on > gain_off and dt < 600 and regression_ok
    _check(acceptance_report, 9, ok,
           f"test NME {np.round(on, 3).tolist()}, stage-3 gain {gain_on:.3f} with regeneration "
           f"vs {gain_off:.3f} without, {baseline_note}, {dt:.0f} s")


def test_c10_population_std_convention(acceptance_report):
    """Bin means 4.11/4.38/5.16 should give mean 4.55 and std 0.54 under population std."""
    records = [EvalRecord(i, None, None, yaw, nme) for i, (yaw, nme) in
               enumerate([(10.0, 4.11), (45.0, 4.38), (75.0, 5.16)])]
    bins = [4.11, 4.38, 5.16]
    mean = round(float(np.mean(bins)), 2)
    std = round(float(np.std(bins, ddof=0)), 2)
    s = summarize(records, ddof=0)
    ok = mean == 4.55 and std == 0.54 and round(s["std"], 2) == 0.54
    sample = round(float(np.std(bins, ddof=1)), 2)
    _check(acceptance_report, 10, ok,
           f"mean {mean:.2f}, population std {std:.2f} (expected 0.54); "
           f"sample std gives {sample:.2f}")


def test_c11_non_reproducibility(acceptance_report):
    acceptance_report(
        "criterion 11: PASS - statement only: absolute NMEs of the published tables "
        "(e.g. mean 4.55 on AFLW) need the real datasets and CNN training and are not "
        "reproduced; criteria 1-10 are the property-based substitute")
