import numpy as np
import pytest

from morphfit.cascade import (LinearStage, TrainConfig, TrainingSample, augment,
                              build_validation_subsets, face_posture, fit, fit_ridge,
                              init_from_bbox, load_cascade, regenerate_init,
                              rotate_params_in_plane, save_cascade, split_validation, train)
from morphfit.datagen import SynthConfig, generate_model, generate_samples
from morphfit.errors import InvalidArgument
from morphfit.evaluation import nme, sample_landmarks
from morphfit.model import ParamVector, pack, project


def test_regenerate_formula():
    pg, pk, pgv = np.array([1.0, 2.0]), np.array([0.5, 0.0]), np.array([1.5, 1.0])
    np.testing.assert_array_equal(regenerate_init(pg, pk, pgv), [0.0, 1.0])


def test_validation_subsets_brute_force():
    rng = np.random.default_rng(0)
    tr, va = rng.normal(size=(7, 5)), rng.normal(size=(9, 5))
    got = build_validation_subsets(tr, va, 3)
    for i in range(7):
        d = [np.sum((tr[i] - v) ** 2) for v in va]
        assert set(got[i]) == set(np.argsort(d)[:3])


def test_validation_subset_clamped(caplog):
    with caplog.at_level("WARNING"):
        got = build_validation_subsets(np.zeros((2, 3)), np.ones((2, 3)), 5)
    assert got.shape == (2, 2) and "clamped" in caplog.text


def test_split_is_seeded_partition():
    items = list(range(50))
    a, b = split_validation(items, 0.2, seed=4)
    assert len(b) == 10 and sorted(a + b) == items
    assert split_validation(items, 0.2, seed=4) == (a, b)


class TestRidge:
    def test_matches_primal_solution(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(40, 15)).astype(np.float32)
        Y = rng.normal(size=(40, 3))
        st = fit_ridge(X, Y, ridge=0.1)
        Xc = X.astype(np.float64) - X.mean(0)
        r = 0.1 * np.trace(Xc @ Xc.T) / 15
        beta = np.linalg.solve(Xc.T @ Xc + r * np.eye(15), Xc.T @ (Y - Y.mean(0)))
        np.testing.assert_allclose(st.coef, beta, atol=1e-4)
        np.testing.assert_allclose(st.predict(X), Xc @ beta + Y.mean(0), atol=1e-4)

    def test_weighted_columns(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 8)).astype(np.float32)
        Y = rng.normal(size=(30, 2))
        W = rng.uniform(0.1, 1.0, size=(30, 2))
        st = fit_ridge(X, Y, W, ridge=0.05)
        Xc = X.astype(np.float64) - X.astype(np.float64).mean(0)
        r = 0.05 * np.trace(Xc @ Xc.T) / 8
        for j in range(2):
            w = W[:, j]
            # weighted ridge on [Xc, 1] with unpenalised intercept
            A = np.column_stack([Xc, np.ones(30)])
            P = np.diag(np.r_[np.full(8, r), 0.0])
            sol = np.linalg.solve(A.T @ (w[:, None] * A) + P, A.T @ (w * Y[:, j]))
            np.testing.assert_allclose(st.coef[:, j], sol[:8], atol=1e-4)
            np.testing.assert_allclose(st.intercept[j], sol[8], atol=1e-4)

    def test_zero_weight_column_gives_zero_update(self):
        X = np.random.default_rng(3).normal(size=(10, 4))
        st = fit_ridge(X, np.ones((10, 2)), np.column_stack([np.ones(10), np.zeros(10)]))
        assert not st.coef[:, 1].any() and st.intercept[1] == 0

    def test_zero_stage(self):
        st = LinearStage.zero(5, 3)
        assert not st.predict(np.ones((2, 5))).any()


def test_init_fixed_point_on_mean_face_hull(toy_model):
    lm = toy_model.vertices[toy_model.landmark_indices, :2]
    lo, hi = lm.min(axis=0), lm.max(axis=0)
    mean_xy = toy_model.vertices[:, :2].mean(axis=0)
    bbox = np.r_[mean_xy - (hi - lo) / 2, hi - lo]
    p = init_from_bbox(toy_model, bbox)
    np.testing.assert_allclose(p.q, [1, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(p.t2d, [0, 0], atol=1e-9)


def test_init_scale_law_and_centre(toy_model):
    bbox = np.array([10.0, 20.0, 50.0, 80.0])
    p1 = init_from_bbox(toy_model, bbox)
    p2 = init_from_bbox(toy_model, np.r_[bbox[:2], 2 * bbox[2:]])
    assert p2.q @ p2.q == pytest.approx(2 * (p1.q @ p1.q))
    centre = project(toy_model, p1).reshape(-1, 2).mean(axis=0)
    assert np.abs(centre - [35.0, 60.0]).max() <= 0.5
    # the larger ratio wins: the hull matches the box on one axis and covers it on the other
    w, h = np.ptp(sample_landmarks(toy_model, p1), axis=0)
    assert (np.isclose(w, 50.0) and h >= 80.0 - 1e-9) or (np.isclose(h, 80.0) and w >= 50.0 - 1e-9)
    assert np.array_equal(p1.q[1:], [0, 0, 0])


def test_init_rejects_empty_box(toy_model):
    with pytest.raises(InvalidArgument):
        init_from_bbox(toy_model, [0, 0, 0, 10])


def test_face_posture_ignores_scale_and_translation(toy_model):
    p = ParamVector([0.9, 0.1, 0.2, 0.0], [3, 4], np.ones(10), np.zeros(5))
    scaled = ParamVector(p.q * 2.5, [40, -7], p.alpha_id, p.alpha_exp)
    np.testing.assert_allclose(face_posture(toy_model, p), face_posture(toy_model, scaled),
                               atol=1e-10)


def test_in_plane_rotation_of_params(toy_model):
    p = ParamVector([0.9, 0.1, 0.2, 0.0], [60, 50], np.ones(10), np.zeros(5))
    th = np.deg2rad(17)
    c = np.array([60.0, 60.0])
    out = rotate_params_in_plane(toy_model, p, th, c)
    R2 = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    ref = (project(toy_model, p).reshape(-1, 2) - c) @ R2.T + c
    np.testing.assert_allclose(project(toy_model, out).reshape(-1, 2), ref, atol=1e-9)


@pytest.fixture(scope="module")
def data(toy_model):
    return generate_samples(toy_model, SynthConfig(n_samples=60, seed=5))


def test_augment_keeps_landmarks_in_box(toy_model, data):
    rng = np.random.default_rng(0)
    s = augment(toy_model, data[0], rng, angle=20.0)
    lm = sample_landmarks(toy_model, s.pg)
    x, y, w, h = s.bbox
    assert np.all(lm[:, 0] >= x - 1e-6) and np.all(lm[:, 0] <= x + w + 1e-6)
    assert np.all(lm[:, 1] >= y - 1e-6) and np.all(lm[:, 1] <= y + h + 1e-6)
    same = augment(toy_model, data[0], rng, angle=0.0)
    assert np.array_equal(same.image, data[0].image)
    np.testing.assert_allclose(pack(same.pg), pack(data[0].pg), atol=1e-12)


def test_sample_needs_positive_box(toy_model, data):
    with pytest.raises(InvalidArgument):
        TrainingSample.create(toy_model, data[0].image, data[0].pg, [0, 0, -1, 5])


class TestConfig:
    def test_toml(self, tmp_path):
        (tmp_path / "c.toml").write_text("[train]\nstages = 2\nridge = 5.0\ncost = 'pdc'\n")
        cfg = TrainConfig.from_toml(tmp_path / "c.toml")
        assert (cfg.stages, cfg.ridge, cfg.cost) == (2, 5.0, "pdc")

    def test_unknown_key(self):
        with pytest.raises(InvalidArgument):
            TrainConfig.from_dict({"stagez": 3})


@pytest.fixture(scope="module")
def trained(toy_model, data):
    tr, va = split_validation(data, 0.25, seed=0)
    cfg = TrainConfig(stages=2, augment_count=2, ridge=30.0, paf_pool=2, cost="owpdc",
                      subset_size=5, seed=1)
    return train(toy_model, tr, va, cfg, test=data[:5]), tr


def test_training_reduces_error(trained):
    (cascade, history), _ = trained
    assert len(cascade.stages) == 2
    tr = history["train_nme"]
    assert tr[0] > tr[1] > tr[2]
    assert len(history["test_nme"]) == 3


def test_fit_on_training_sample_beats_init(trained, toy_model):
    (cascade, _), tr = trained
    s = tr[0]
    p, traj = fit(cascade, s.image, s.bbox, return_trajectory=True)
    gt = sample_landmarks(toy_model, s.pg)
    assert nme(sample_landmarks(toy_model, p), gt) < nme(sample_landmarks(toy_model, traj[0]), gt)


def test_cascade_round_trip(trained, toy_model, tmp_path, data):
    (cascade, _), _ = trained
    save_cascade(cascade, tmp_path / "c.npz")
    back = load_cascade(tmp_path / "c.npz", toy_model)
    a = pack(fit(cascade, data[3].image, data[3].bbox))
    b = pack(fit(back, data[3].image, data[3].bbox))
    np.testing.assert_array_equal(a, b)


def test_cascade_rejects_other_model(trained, tmp_path):
    (cascade, _), _ = trained
    save_cascade(cascade, tmp_path / "c.npz")
    with pytest.raises(InvalidArgument):
        load_cascade(tmp_path / "c.npz", generate_model(SynthConfig(seed=99)))


def test_regeneration_needs_validation(toy_model, data):
    with pytest.raises(InvalidArgument):
        train(toy_model, data[:10], [], TrainConfig(regenerate=True, augment_count=1))


def test_threads_do_not_change_result(toy_model, data):
    cfg = TrainConfig(stages=1, augment_count=1, ridge=30.0, paf_pool=4, cost="pdc",
                      regenerate=False)
    a, _ = train(toy_model, data[:20], [], cfg)
    b, _ = train(toy_model, data[:20], [], TrainConfig(**{**cfg.__dict__, "threads": 3}))
    np.testing.assert_array_equal(a.stages[0].coef, b.stages[0].coef)
