import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import KINDS, check_layer, check_loss, random_case
from privcxr.dp_engine import per_sample_gradients
from privcxr.nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from privcxr.nn.layers import NumericalError, mish, mish_grad
from privcxr.nn.loss import inverse_frequency_weights, weighted_bce, weighted_bce_logit_grad
from privcxr.nn.model import ModelConfig, build_model, count_parameters, sigmoid
from privcxr.nn.optim import NAdamState, nadam_step

# torch.optim.NAdam(lr=0.01), float64 parameters, three steps
TORCH_NADAM_TRACE = [
    [0.9894354822979425, -1.9894354821922973, 0.5],
    [0.9849672892168291, -1.991835503980927, 0.5104498043124479],
    [0.9861606217791811, -2.001647733175909, 0.5002421113768886],
]
GRADS = [[0.5, -1.0, 0.0], [0.2, 0.3, -0.4], [-0.1, 2.0, 1.0]]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", range(3))
def test_layer_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    layer, x = random_case(kind, rng)
    assert check_layer(layer, x, rng) <= 1e-4


def test_loss_gradient():
    rng = np.random.default_rng(0)
    z = rng.normal(scale=2.0, size=(5, 8))
    y = (rng.random((5, 8)) < 0.4).astype(float)
    assert check_loss(z, y, rng.uniform(0.5, 5.0, size=8), rng) <= 1e-4


@pytest.mark.parametrize("activation", ["mish", "relu"])
def test_whole_model_gradient(tiny_config, activation, tiny_batch):
    cfg = ModelConfig(**{**tiny_config.to_dict(), "activation": activation})
    model = build_model(cfg, seed=1)
    x, y, w = tiny_batch
    grads, _ = per_sample_gradients(model, x, y, w)
    analytic = grads.values.sum(axis=0)
    flat = model.get_flat()
    rng = np.random.default_rng(2)
    idx = rng.choice(flat.size, 25, replace=False)

    def total(theta):
        model.set_flat(theta)
        losses, _ = weighted_bce_logit_grad(model.forward(x), y, w)
        return losses.sum()

    num = []
    for i in idx:
        e = np.zeros_like(flat)
        e[i] = 1e-6
        num.append((total(flat + e) - total(flat - e)) / 2e-6)
    model.set_flat(flat)
    a = analytic[idx]
    assert np.linalg.norm(a - num) / np.linalg.norm(num) <= 1e-4


def test_mish_values_and_extremes():
    x = np.array([-1000.0, -20.0, -1.0, 0.0, 1.0, 20.0, 1000.0])
    ref = x * np.tanh(np.log1p(np.exp(np.clip(x, None, 700))))
    np.testing.assert_allclose(mish(x), ref, rtol=1e-12, atol=1e-300)
    assert np.isfinite(mish_grad(x)).all()
    assert mish_grad(np.array([1000.0]))[0] == pytest.approx(1.0)


def test_sigmoid_stable():
    z = np.array([-800.0, 0.0, 800.0])
    np.testing.assert_array_equal(sigmoid(z), [0.0, 0.5, 1.0])


def test_weighted_bce_hand_value():
    p = np.array([[0.8, 0.3]])
    y = np.array([[1.0, 0.0]])
    w = np.array([2.0, 1.0])
    mean, per = weighted_bce(p, y, w)
    expect = (-2.0 * np.log(0.8) - np.log(0.7)) / 2
    assert mean == pytest.approx(expect, rel=1e-14)
    assert per[0] == pytest.approx(expect, rel=1e-14)


def test_inverse_frequency_weights():
    t = np.array([[1, 0, 0], [0, 0, 1], [0, 0, 1], [0, 0, 1]])
    np.testing.assert_allclose(inverse_frequency_weights(t), [3.0, 1.0, 1 / 3])


def test_nadam_matches_torch_trace():
    p = np.array([1.0, -2.0, 0.5])
    state = NAdamState.fresh(3, 0.01)
    for g, want in zip(GRADS, TORCH_NADAM_TRACE):
        p = nadam_step(p, np.array(g), state)
        np.testing.assert_allclose(p, want, rtol=1e-8)


def test_nadam_first_step_by_hand():
    lr, g = 0.01, 0.5
    mu1 = 0.9 * (1 - 0.5 * 0.96 ** 0.004)
    mu2 = 0.9 * (1 - 0.5 * 0.96 ** 0.008)
    denom = abs(g) + 1e-8  # sqrt(0.001 g^2 / 0.001)
    expect = 1.0 - lr * g / denom - lr * mu2 / (1 - mu1 * mu2) * 0.1 * g / denom
    out = nadam_step(np.array([1.0]), np.array([g]), NAdamState.fresh(1, lr))
    assert out[0] == pytest.approx(expect, rel=1e-15)


def test_nadam_live_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=20)
    t = torch.tensor(p0, requires_grad=True)
    opt = torch.optim.NAdam([t], lr=3e-3)
    p, state = p0.copy(), NAdamState.fresh(20, 3e-3)
    for _ in range(10):
        g = rng.normal(size=20)
        t.grad = torch.tensor(g)
        opt.step()
        p = nadam_step(p, g, state)
    np.testing.assert_allclose(p, t.detach().numpy(), rtol=1e-7)


def test_per_sample_rows_equal_singleton(tiny_model, tiny_batch):
    x, y, w = tiny_batch
    full, _ = per_sample_gradients(tiny_model, x, y, w)
    for i in range(x.shape[0]):
        one, _ = per_sample_gradients(tiny_model, x[i : i + 1], y[i : i + 1], w)
        assert np.array_equal(full.values[i], one.values[0])


def test_summed_mode_matches_per_sample(tiny_model, tiny_batch):
    x, y, w = tiny_batch
    ps, _ = per_sample_gradients(tiny_model, x, y, w)
    tiny_model.set_per_sample(False)
    _, d = weighted_bce_logit_grad(tiny_model.forward(x), y, w)
    tiny_model.backward(d)
    np.testing.assert_allclose(tiny_model.summed_grad(), ps.values.sum(axis=0), rtol=1e-10, atol=1e-13)


def test_input_shape_errors(tiny_model):
    with pytest.raises(ValueError, match="input must have shape"):
        tiny_model.forward(np.zeros((2, 3, 8, 8)))
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(widths=(6, 8, 8, 8), groups_per_norm=4)


def test_non_finite_activation_raises(tiny_model):
    x = np.zeros((1, 1, 8, 8))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="layer"):
        tiny_model.forward(x)


def test_full_scale_parameter_count():
    assert count_parameters(ModelConfig.full_scale()) == 4_909_896


def test_locate(tiny_model):
    assert tiny_model.locate(0) == "stem.0.weight"
    with pytest.raises(IndexError):
        tiny_model.locate(tiny_model.num_parameters)


def test_checkpoint_round_trip_and_fine_tune(tmp_path, tiny_model, tiny_config, tiny_batch):
    save_checkpoint(tiny_model, tmp_path / "ck", {"master_seed": 3})
    loaded = load_checkpoint(tmp_path / "ck", expected=tiny_config)
    np.testing.assert_array_equal(loaded.get_flat(), tiny_model.get_flat().astype(np.float32))
    assert loaded.lineage == {"master_seed": 3}
    # loaded weights keep training
    x, y, w = tiny_batch
    g, _ = per_sample_gradients(loaded, x, y, w)
    before = loaded.get_flat()
    loaded.set_flat(nadam_step(before, g.values.mean(axis=0), NAdamState.fresh(before.size, 1e-3)))
    assert not np.array_equal(before, loaded.get_flat())


def test_checkpoint_mismatch_names_field(tmp_path, tiny_model, tiny_config):
    save_checkpoint(tiny_model, tmp_path / "ck")
    other = ModelConfig(**{**tiny_config.to_dict(), "activation": "relu"})
    with pytest.raises(CheckpointError, match="activation"):
        load_checkpoint(tmp_path / "ck", expected=other)
    (tmp_path / "ck" / "weights.f32").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "ck")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_mish_bounded_below(xs):
    y = mish(np.array(xs))
    assert (y >= -0.3089).all()
    assert (np.abs(y) <= np.abs(xs) + 1e-12).all()
