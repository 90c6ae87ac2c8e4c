import json
import math

import numpy as np
import pytest

from casa.toy_model import (
    MlpClassifier,
    TrainConfig,
    forward_loss,
    input_gradient,
    param_step,
    resample_matrix,
)


def rel_err(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def model():
    return MlpClassifier.init(seed=3)


@pytest.fixture
def image(rng):
    return rng.uniform(0.2, 0.9, size=(32, 32, 3))


def test_zero_network_is_uniform():
    m = MlpClassifier.zeros()
    img = np.full((32, 32, 3), 0.5)
    assert forward_loss(m, img, 0) == pytest.approx(math.log(2), abs=1e-15)
    assert np.all(input_gradient(m, img, 1) == 0.0)


def test_loss_vanishes_with_margin():
    m = MlpClassifier.zeros()
    img = np.full((16, 16, 3), 0.5)
    losses = []
    for margin in (2, 4, 8):
        m.b2 = np.array([0.0, float(margin)])
        losses.append(forward_loss(m, img, 1))
    assert losses[0] > losses[1] > losses[2] > 0
    assert losses[2] == pytest.approx(math.log1p(math.exp(-8)), rel=1e-12)


def test_forward_is_reproducible(image):
    a = MlpClassifier.init(seed=11).loss(image, 1)
    b = MlpClassifier.init(seed=11).loss(image, 1)
    assert a == b


def test_resample_halving_is_box_average():
    m = resample_matrix(32, 16)
    expected = np.zeros((16, 32))
    for i in range(16):
        expected[i, 2 * i:2 * i + 2] = 0.5
    np.testing.assert_allclose(m, expected, atol=1e-15)
    np.testing.assert_allclose(resample_matrix(20, 16).sum(axis=1), 1.0)


def test_input_gradient_matches_finite_differences(model, image, rng):
    grad = input_gradient(model, image, 1)
    step = 1e-5
    for _ in range(20):
        y, x, c = rng.integers(32), rng.integers(32), rng.integers(3)
        plus, minus = image.copy(), image.copy()
        plus[y, x, c] += step
        minus[y, x, c] -= step
        fd = (model.loss(plus, 1) - model.loss(minus, 1)) / (2 * step)
        assert rel_err(grad[y, x, c], fd) <= 1e-4


def test_input_gradient_directional_derivative(model, image, rng):
    direction = rng.normal(size=image.shape)
    step = 1e-5
    fd = (model.loss(image + step * direction, 0) - model.loss(image - step * direction, 0)) / (2 * step)
    assert rel_err(np.sum(input_gradient(model, image, 0) * direction), fd) <= 1e-4


def test_input_gradient_non_square_input(model, rng):
    img = rng.uniform(0, 1, size=(20, 24, 3))
    grad = model.input_gradient(img, 0)
    direction = rng.normal(size=img.shape)
    fd = (model.loss(img + 1e-5 * direction, 0) - model.loss(img - 1e-5 * direction, 0)) / 2e-5
    assert rel_err(np.sum(grad * direction), fd) <= 1e-4


def test_param_gradients_match_finite_differences(model, rng):
    images = rng.uniform(0, 1, size=(4, 32, 32, 3))
    labels = np.array([0, 1, 1, 0])
    _, grads = model.param_gradients(images, labels)
    step = 1e-5
    for name in ("w1", "b1", "w2", "b2"):
        arr = getattr(model, name)
        for _ in range(5):
            idx = tuple(rng.integers(s) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            up = model.batch_loss(images, labels)
            arr[idx] = orig - step
            down = model.batch_loss(images, labels)
            arr[idx] = orig
            assert rel_err(grads[name][idx], (up - down) / (2 * step)) <= 1e-4


def test_zero_learning_rate_keeps_parameters(model, rng):
    before = {k: v.copy() for k, v in model.params.items()}
    images = rng.uniform(0, 1, size=(3, 32, 32, 3))
    _, loss = param_step(model, images, [0, 1, 0], 0.0)
    assert loss > 0
    for k, v in model.params.items():
        assert np.array_equal(v, before[k])


def test_separable_batch_converges(rng):
    model = MlpClassifier.init(seed=0)
    labels = np.array([0, 1] * 8)
    images = np.where(labels[:, None, None, None] == 1, 0.3, 0.7) + rng.uniform(-0.1, 0.1, (16, 32, 32, 3))
    for _ in range(200):
        loss = model.sgd_step(images, labels, 0.05)
    assert model.batch_loss(images, labels) < 0.1
    assert loss < 0.1


def test_small_steps_descend():
    failures = 0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        model = MlpClassifier.init(seed=trial)
        images = rng.uniform(0, 1, size=(8, 32, 32, 3))
        labels = rng.integers(0, 2, size=8)
        before = model.sgd_step(images, labels, 1e-3)
        failures += model.batch_loss(images, labels) > before
    assert failures <= 2


def test_batch_loss_permutation_invariant(model, rng):
    images = rng.uniform(0, 1, size=(6, 32, 32, 3))
    labels = rng.integers(0, 2, size=6)
    perm = rng.permutation(6)
    assert model.batch_loss(images, labels) == pytest.approx(model.batch_loss(images[perm], labels[perm]), rel=1e-14)


def test_checkpoint_round_trip(model, image):
    doc = json.loads(json.dumps(model.to_json()))
    assert doc["version"] == "toy-mlp-v1"
    assert {layer["name"]: layer["shape"] for layer in doc["layers"]} == {
        "w1": [768, 32], "b1": [32], "w2": [32, 2], "b2": [2]}
    back = MlpClassifier.from_json(doc)
    assert back.loss(image, 1) == model.loss(image, 1)


def test_checkpoint_version_checked(model):
    doc = model.to_json()
    doc["version"] = "other"
    with pytest.raises(ValueError):
        MlpClassifier.from_json(doc)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
