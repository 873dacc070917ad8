import numpy as np
import pytest

from gvd.bilevel import (Dataset, TrainingError, finite_difference_gradient, load_dataset, loss, train,
                         value_and_gradient)
from gvd.config import ModelConfig
from gvd.fixed_point import decompose
from gvd.predictor import init_params, kappa_bound, zero_params
from gvd.synth import generate_arrays, generate_dataset

CFG = ModelConfig(K=2)


def blockwise_rel_error(a, b):
    return {n: np.linalg.norm(a[n] - b[n]) / max(np.linalg.norm(b[n]), 1e-300) for n in b}


def test_loss_matches_decompose():
    F, C, T = generate_arrays(2, 8, 8, seed=1)
    p = init_params(CFG, seed=0)
    expected = 0
    for i in range(2):
        c, t, _ = decompose(F[i], p, CFG)
        expected += 0.5 * (np.sum((c - C[i]) ** 2) + np.sum((t - T[i]) ** 2))
    assert loss(Dataset(F, C, T), p, CFG) == pytest.approx(expected / 2, rel=1e-9)


def test_labels_equal_predictions_give_zero_loss():
    F, _, _ = generate_arrays(2, 8, 8, seed=2)
    p = init_params(CFG, seed=1)
    outs = [decompose(F[i], p, CFG) for i in range(2)]
    data = Dataset(F, np.stack([o[0] for o in outs]), np.stack([o[1] for o in outs]))
    assert loss(data, p, CFG) < 1e-20
    _, g = value_and_gradient(data, p, CFG)
    assert np.sqrt(sum(np.sum(v**2) for v in g.values())) < 1e-10


def test_constant_image_zero_loss_any_params():
    f = np.full((1, 6, 6), 0.4)
    data = Dataset(f, f, np.zeros_like(f))
    for seed in range(3):
        assert loss(data, init_params(CFG, seed=seed, scale=3.0), CFG) == 0.0


def test_zero_params_regression_baseline():
    data = Dataset(*generate_arrays(2, 8, 8, seed=21))
    assert loss(data, zero_params(CFG), CFG, solver="dense") == pytest.approx(0.553046280638893, rel=1e-9)
    assert loss(data, zero_params(CFG), CFG) == pytest.approx(0.553046280638893, rel=1e-6)


def test_gradient_matches_finite_differences():
    # oracle: central differences of the loss evaluated with dense direct solves
    data = Dataset(*generate_arrays(1, 8, 8, seed=3))
    p = init_params(CFG, seed=1)
    fd = finite_difference_gradient(data, p, CFG, step=1e-5)
    _, g = value_and_gradient(data, p, CFG)
    err = blockwise_rel_error(g, fd)
    assert max(err.values()) < 1e-4, err


def test_dead_path_has_zero_gradient():
    data = Dataset(*generate_arrays(1, 8, 8, seed=4))
    p = init_params(CFG, seed=2)
    w2 = p.conv2_w.copy()
    w2[:, 3] = 0.0  # channel 3 no longer reaches the output
    p = p.replace_arrays({"conv2_w": w2})
    _, g = value_and_gradient(data, p, CFG)
    assert not np.any(g["conv1_w"][3]) and g["conv1_b"][3] == 0.0


def test_loss_permutation_invariant():
    F, C, T = generate_arrays(4, 8, 8, seed=5)
    p = init_params(CFG, seed=3)
    perm = [2, 0, 3, 1]
    a = loss(Dataset(F, C, T), p, CFG)
    b = loss(Dataset(F[perm], C[perm], T[perm]), p, CFG)
    assert a == pytest.approx(b, rel=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)), np.zeros((2, 4, 4)))


def test_zero_learning_rate_keeps_params():
    data = Dataset(*generate_arrays(2, 8, 8, seed=6))
    p = init_params(CFG, seed=0)
    q, hist = train(data, p, CFG, 3, 0.0)
    assert q.flat().tobytes() == p.flat().tobytes()
    assert len(hist) == 4 and len(set(hist)) == 1


def test_training_reduces_loss():
    data = Dataset(*generate_arrays(4, 8, 8, seed=7))
    _, hist = train(data, init_params(CFG, seed=0), CFG, 10, 0.1)
    assert hist[-1] < hist[0]


def test_renormalized_training_keeps_kappa():
    data = Dataset(*generate_arrays(2, 8, 8, seed=8))
    p = init_params(CFG, seed=0)
    p.spectral_factors = (0.5, 0.8)
    q, _ = train(data, p, CFG, 3, 0.1, renormalize_shape=(8, 8))
    assert kappa_bound(q, CFG, (8, 8)) == pytest.approx(0.5 * 0.8 * (CFG.omega_max - CFG.omega_min) / 4, rel=1e-4)


def test_nan_loss_aborts_with_history():
    data = Dataset(*generate_arrays(2, 8, 8, seed=9))
    with pytest.raises(TrainingError) as err:
        train(data, init_params(CFG, seed=0), CFG, 5, 1e200)
    assert len(err.value.history) >= 1


def test_manifest_round_trip(tmp_path):
    manifest = generate_dataset(3, 8, 8, 4, tmp_path)
    data = load_dataset(manifest)
    F, C, T = generate_arrays(3, 8, 8, 4)
    assert data.f.tobytes() == F.tobytes() and data.texture.tobytes() == T.tobytes()
