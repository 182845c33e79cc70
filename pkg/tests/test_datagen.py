import numpy as np
import pytest

from morphfit.datagen import (SynthConfig, generate_model, generate_samples, landmark_bbox,
                              load_dataset, save_dataset)
from morphfit.evaluation import nme, sample_landmarks, yaw_bin, yaw_of
from morphfit.model import N_LANDMARKS, save_model


def test_basis_columns_orthogonal(toy_model):
    B = np.hstack([toy_model.basis_id, toy_model.basis_exp])
    U = B / np.linalg.norm(B, axis=0)
    G = U.T @ U
    assert np.abs(G - np.diag(np.diag(G))).max() <= 1e-10


def test_decaying_singular_values(toy_model):
    norms = np.linalg.norm(toy_model.basis_id, axis=0)
    assert np.all(np.diff(norms) < 0)


def test_no_degenerate_triangles(toy_model):
    v = toy_model.vertices
    t = toy_model.triangles
    area = 0.5 * np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)
    assert area.min() > 0


def test_landmarks(toy_model):
    lm = toy_model.landmark_indices
    assert lm.size == N_LANDMARKS and np.unique(lm).size == N_LANDMARKS


def test_model_determinism(tmp_path):
    a, b = generate_model(SynthConfig(seed=3)), generate_model(SynthConfig(seed=3))
    save_model(a, tmp_path / "a.mfm")
    save_model(b, tmp_path / "b.mfm")
    assert (tmp_path / "a.mfm").read_bytes() == (tmp_path / "b.mfm").read_bytes()


def test_bad_config():
    with pytest.raises(ValueError):
        SynthConfig(d_id=0)


@pytest.fixture(scope="module")
def samples(toy_model):
    return generate_samples(toy_model, SynthConfig(n_samples=40, seed=2))


def test_landmarks_inside_image(samples, toy_model):
    for s in samples:
        lm = sample_landmarks(toy_model, s.pg)
        assert np.all(lm >= 0) and np.all(lm < s.image.shape[0])


def test_yaw_covers_all_bins(toy_model):
    many = generate_samples(toy_model, SynthConfig(n_samples=60, seed=9, image_size=32))
    bins = {yaw_bin(yaw_of(s.pg.q)) for s in many}
    assert bins == {0, 1, 2}


def test_seed_determinism(samples, toy_model):
    again = generate_samples(toy_model, SynthConfig(n_samples=3, seed=2))
    for a, b in zip(samples[:3], again):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.pg.q, b.pg.q)


def test_start_offset_matches_full_run(samples, toy_model):
    tail = generate_samples(toy_model, SynthConfig(n_samples=2, seed=2), start=5)
    assert np.array_equal(tail[0].image, samples[5].image)


def test_oracle_params_give_zero_nme(samples, toy_model):
    for s in samples[:5]:
        lm = sample_landmarks(toy_model, s.pg)
        assert nme(lm, lm) == 0.0
        np.testing.assert_allclose(s.bbox, landmark_bbox(lm))


def test_dataset_round_trip(samples, toy_model, tmp_path):
    save_dataset(samples[:4], tmp_path)
    back = load_dataset(toy_model, tmp_path)
    assert [s.sample_id for s in back] == [s.sample_id for s in samples[:4]]
    assert np.array_equal(back[2].image, samples[2].image)
    np.testing.assert_array_equal(back[2].bbox, samples[2].bbox)
    np.testing.assert_array_equal(back[1].pg.alpha_exp, samples[1].pg.alpha_exp)
