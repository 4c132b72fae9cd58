"""Tests for the coupling layers, the flow model and checkpoints."""
import json

import numpy as np
import pytest

import diffcore as dc
from errors import DataError, DimensionError, NumericError
from flow import (CHECKPOINT_VERSION, LOG_2PI, CouplingLayer, FlowModel, alternating_masks, coupling_forward,
                  coupling_inverse, load_checkpoint, log_prob, sample, save_checkpoint)
from selfsup import SelfSupHead


def randomize(params, rng, scale=0.5):
    for p in params:
        p.values[...] = rng.normal(scale=scale, size=p.shape)


def test_alternating_masks():
    masks = alternating_masks(5, 3)
    np.testing.assert_array_equal(masks[0], [1, 0, 1, 0, 1])
    np.testing.assert_array_equal(masks[1], [0, 1, 0, 1, 0])
    np.testing.assert_array_equal(masks[2], masks[0])


def test_identity_at_initialization():
    model = FlowModel(2, rng=np.random.default_rng(0))
    x = np.array([[0.3, -1.2], [2.0, 0.5]])
    z, log_det = model.forward(x)
    np.testing.assert_array_equal(z.values, x)
    np.testing.assert_array_equal(log_det.values, [0.0, 0.0])


def test_log_prob_examples():
    model = FlowModel(2, rng=np.random.default_rng(0))
    assert log_prob(model, np.zeros(2)).item() == pytest.approx(-1.837877, abs=1e-6)
    assert log_prob(model, np.zeros(2)).shape == ()
    wide = FlowModel(4, rng=np.random.default_rng(0))
    assert log_prob(wide, np.zeros(4)).item() == pytest.approx(-2 * LOG_2PI, abs=1e-12)
    assert log_prob(model, [1.0, 0.0]).item() == pytest.approx(-LOG_2PI - 0.5, abs=1e-12)


def test_invertibility_round_trip():
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(10):
        d = int(rng.integers(2, 9))
        mask = alternating_masks(d, 2)[trial % 2]
        layer = CouplingLayer(mask, hidden=8, rng=rng)
        randomize(layer.parameters(), rng, scale=1.0)
        x = rng.normal(scale=3.0, size=(100, d))
        with dc.no_grad():
            y, _ = layer.forward(dc.as_array(x))
            back = layer.inverse(y).values
        worst = max(worst, np.max(np.abs(back - x)))
    assert worst < 1e-9


def test_model_inverse_round_trip():
    rng = np.random.default_rng(2)
    model = FlowModel(6, n_layers=4, hidden=8, rng=rng)
    randomize(model.parameters(), rng)
    x = rng.normal(size=(50, 6))
    with dc.no_grad():
        z, _ = model.forward(x)
        np.testing.assert_allclose(model.inverse(z).values, x, atol=1e-9, rtol=0)


def test_unmasked_coordinates_stay_fixed():
    rng = np.random.default_rng(3)
    layer = CouplingLayer([1, 0, 1, 0], hidden=4, rng=rng)
    randomize(layer.parameters(), rng)
    x = rng.normal(size=4)
    y, _ = coupling_forward(layer, x)
    np.testing.assert_array_equal(y.values[[0, 2]], x[[0, 2]])
    assert y.shape == (4,)


def numeric_jacobian(layer_or_model, x, eps=1e-6):
    d = x.shape[0]
    jac = np.zeros((d, d))
    for k in range(d):
        step = np.zeros(d)
        step[k] = eps
        with dc.no_grad():
            upper = layer_or_model.forward(dc.as_array((x + step)[None, :]))[0].values[0]
            lower = layer_or_model.forward(dc.as_array((x - step)[None, :]))[0].values[0]
        jac[:, k] = (upper - lower) / (2 * eps)
    return jac


@pytest.mark.parametrize("d", [2, 3, 4, 5, 6])
def test_log_det_matches_finite_difference_jacobian(d):
    rng = np.random.default_rng(10 + d)
    model = FlowModel(d, n_layers=4, hidden=6, rng=rng)
    randomize(model.parameters(), rng)
    for _ in range(5):
        x = rng.normal(size=d)
        with dc.no_grad():
            _, log_det = model.forward(x[None, :])
        sign, expected = np.linalg.slogdet(numeric_jacobian(model, x))
        assert sign > 0
        assert log_det.values[0] == pytest.approx(expected, abs=1e-4)


def test_single_layer_log_det_is_sum_of_scales():
    rng = np.random.default_rng(4)
    layer = CouplingLayer([0, 1, 1], hidden=5, rng=rng)
    randomize(layer.parameters(), rng)
    x = rng.normal(size=3)
    _, log_det = coupling_forward(layer, x)
    assert log_det.shape == ()
    sign, expected = np.linalg.slogdet(numeric_jacobian(layer, x))
    assert log_det.item() == pytest.approx(expected, abs=1e-6)
    np.testing.assert_allclose(coupling_inverse(layer, coupling_forward(layer, x)[0]).values, x, atol=1e-12)


def test_density_integrates_to_one():
    rng = np.random.default_rng(5)
    model = FlowModel(2, n_layers=4, hidden=16, rng=rng)
    randomize(model.parameters(), rng, scale=0.2)
    grid = np.linspace(-15.0, 15.0, 601)
    h = grid[1] - grid[0]
    weights = np.full(grid.shape, h)
    weights[[0, -1]] = h / 2
    xs, ys = np.meshgrid(grid, grid, indexing="ij")
    points = np.column_stack([xs.ravel(), ys.ravel()])
    total = 0.0
    with dc.no_grad():
        for start in range(0, points.shape[0], 50000):
            chunk = points[start:start + 50000]
            density = np.exp(model.log_prob(chunk).values)
            w = np.outer(weights, weights).ravel()[start:start + 50000]
            total += float(np.sum(density * w))
    assert total == pytest.approx(1.0, abs=1e-2)


def test_log_prob_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    model = FlowModel(3, n_layers=2, hidden=4, rng=rng)
    randomize(model.parameters(), rng, scale=0.3)
    x = rng.normal(size=(4, 3))
    build = lambda: dc.mean(-model.log_prob(x))
    dc.zero_grad(model.parameters())
    dc.backward(build())
    for param in model.parameters():
        numeric = dc.numeric_gradient(lambda: build().item(), param)
        np.testing.assert_allclose(param.gradient, numeric, rtol=1e-5, atol=1e-7, err_msg=param.name)


def test_sample_is_seeded_and_inverse_of_base_draws():
    model = FlowModel(3, rng=np.random.default_rng(0))
    a = sample(model, 5, seed=11)
    np.testing.assert_array_equal(a, sample(model, 5, seed=11))
    # identity model: samples are the base draws
    np.testing.assert_array_equal(a, np.random.default_rng(11).standard_normal((5, 3)))
    with pytest.raises(DimensionError):
        model.sample(0)


def test_contracts():
    with pytest.raises(DimensionError):
        FlowModel(1)
    with pytest.raises(DimensionError):
        CouplingLayer([1, 1, 1])
    with pytest.raises(DimensionError):
        FlowModel(4, masks=[np.array([1, 0, 1, 0.0])] * 2)
    model = FlowModel(2)
    with pytest.raises(NumericError):
        model.forward([np.nan, 0.0])
    with pytest.raises(DimensionError):
        model.forward(np.zeros((2, 3)))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    model = FlowModel(6, n_layers=4, hidden=5, rng=rng)
    randomize(model.parameters(), rng)
    head = SelfSupHead(6, 3, rng=rng)
    path = tmp_path / "model.json"
    save_checkpoint(path, model, head, extra={"note": "x"})

    loaded, head_payload, extra = load_checkpoint(path)
    for original, restored in zip(model.parameters(), loaded.parameters()):
        assert original.name == restored.name
        assert original.values.tobytes() == restored.values.tobytes()
    assert head_payload["n_classes"] == 3
    assert extra == {"note": "x"}
    x = rng.normal(size=(3, 6))
    assert model.log_prob(x).values.tobytes() == loaded.log_prob(x).values.tobytes()


def test_checkpoint_rejects_other_versions(tmp_path):
    path = tmp_path / "model.json"
    save_checkpoint(path, FlowModel(2))
    payload = json.loads(path.read_text())
    payload["format_version"] = CHECKPOINT_VERSION + 1
    path.write_text(json.dumps(payload))
    with pytest.raises(DataError):
        load_checkpoint(path)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.json")
