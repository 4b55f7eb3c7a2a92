import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from privcxr import kernels
from privcxr.accountant import DpSgdConfig, RdpAccountant
from privcxr.dp_engine import (
    PerSampleGradients,
    clip_per_sample,
    non_private_training_step,
    per_sample_gradients,
    poisson_sample,
    private_training_step,
    privatize,
)
from privcxr.nn.layers import NumericalError
from privcxr.nn.model import build_model
from privcxr.nn.optim import NAdamState
from privcxr.training import BudgetExceededError, train_private


def test_poisson_sample_rate():
    rng = np.random.default_rng(0)
    sizes = [poisson_sample(1000, 0.05, rng).size for _ in range(400)]
    assert np.mean(sizes) == pytest.approx(50, rel=0.03)
    assert poisson_sample(10, 0.0, rng).size == 0
    assert poisson_sample(10, 1.0, rng).tolist() == list(range(10))
    with pytest.raises(ValueError):
        poisson_sample(10, 1.5, rng)


def test_clip_by_hand():
    g = PerSampleGradients(np.array([[3.0, 4.0], [0.3, 0.4]]))
    out = clip_per_sample(g, 1.0).values
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.3, 0.4]])


def test_privatize_divides_by_expected_size():
    g = PerSampleGradients(np.array([[3.0, 4.0], [0.3, 0.4]]))
    out = privatize(g, 1.0, 0.0, 4.0, np.random.default_rng(0))
    np.testing.assert_allclose(out.values, [0.9 / 4, 1.2 / 4])
    assert out.realized_batch_size == 2
    assert out.noise_std_applied == 0.0


def test_empty_batch_is_pure_noise():
    g = PerSampleGradients(np.zeros((0, 1000)))
    out = privatize(g, 2.0, 1.5, 10.0, np.random.default_rng(1))
    assert out.values.std() == pytest.approx(1.5 * 2.0 / 10.0, rel=0.1)
    assert out.noise_std_applied == pytest.approx(0.3)


def test_non_finite_names_sample():
    v = np.ones((3, 4))
    v[2, 1] = np.inf
    with pytest.raises(NumericalError, match="sample 2"):
        privatize(PerSampleGradients(v), 1.0, 1.0, 3.0, np.random.default_rng(0))
    with pytest.raises(NumericalError, match="sample 2"):
        clip_per_sample(PerSampleGradients(v), 1.0)


def test_argument_validation():
    g = PerSampleGradients(np.ones((2, 2)))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        privatize(g, 1.0, 1.0, 0.0, rng)
    with pytest.raises(ValueError):
        privatize(g, 0.0, 1.0, 1.0, rng)
    with pytest.raises(ValueError):
        PerSampleGradients(np.ones(3))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 30)), elements=st.floats(-1e3, 1e3)),
    st.floats(1e-3, 10.0),
)
def test_clipped_norms_bounded(values, c):
    clipped = clip_per_sample(PerSampleGradients(values), c).values
    norms = np.linalg.norm(clipped, axis=1)
    assert (norms <= c * (1 + 1e-12)).all()
    small = np.linalg.norm(values, axis=1) <= c
    np.testing.assert_array_equal(clipped[small], values[small])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 10), st.integers(1, 20)), elements=st.floats(-100, 100)), st.floats(0.01, 5.0))
def test_fused_clip_sum_matches_two_pass(values, c):
    total, _ = kernels.clip_sum(np.ascontiguousarray(values), c)
    clipped, _ = kernels.clip_rows(np.ascontiguousarray(values), c)
    np.testing.assert_allclose(total, clipped.sum(axis=0), rtol=1e-12, atol=1e-10)


@pytest.mark.parametrize("workers", [1, 2, 3])
@pytest.mark.parametrize("chunk", [None, 1, 4])
def test_per_sample_gradients_independent_of_chunking(tiny_model, tiny_batch, workers, chunk):
    x, y, w = tiny_batch
    ref, ref_loss = per_sample_gradients(tiny_model, x, y, w)
    got, loss = per_sample_gradients(tiny_model, x, y, w, chunk_size=chunk, workers=workers)
    assert np.array_equal(ref.values, got.values)
    assert np.array_equal(ref_loss, loss)


def test_noiseless_unclipped_step_equals_sgd(tiny_config, tiny_batch):
    x, y, w = tiny_batch
    a, b = build_model(tiny_config, 5), build_model(tiny_config, 5)
    cfg = DpSgdConfig(1.0, 0.0, 1e12, 3, 1e-5)
    sa, sb = NAdamState.fresh(a.num_parameters, 1e-3), NAdamState.fresh(b.num_parameters, 1e-3)
    for _ in range(3):
        private_training_step(a, x, y, w, cfg, sa, RdpAccountant(), np.random.default_rng(0), float(len(x)))
        non_private_training_step(b, x, y, w, sb, per_sample=True)
    assert np.abs(a.get_flat() - b.get_flat()).max() <= 1e-12


def test_fast_non_private_path_close_to_exact(tiny_config, tiny_batch):
    x, y, w = tiny_batch
    a, b = build_model(tiny_config, 5), build_model(tiny_config, 5)
    sa, sb = NAdamState.fresh(a.num_parameters, 1e-3), NAdamState.fresh(b.num_parameters, 1e-3)
    non_private_training_step(a, x, y, w, sa, per_sample=True)
    non_private_training_step(b, x, y, w, sb)
    np.testing.assert_allclose(a.get_flat(), b.get_flat(), rtol=1e-9, atol=1e-11)


def test_private_step_records_accountant(tiny_model, tiny_batch):
    x, y, w = tiny_batch
    acc = RdpAccountant()
    cfg = DpSgdConfig(0.1, 1.0, 1.0, 1, 1e-5)
    res = private_training_step(tiny_model, x[:0], y[:0], w, cfg, NAdamState.fresh(tiny_model.num_parameters, 1e-3),
                                acc, np.random.default_rng(0), 3.0)
    assert res.batch_size == 0
    assert acc.steps == 1


def test_budget_guard(tiny_model, tiny_batch):
    x, y, w = tiny_batch
    cfg = DpSgdConfig(0.5, 0.5, 1.0, 50, 1e-5)
    with pytest.raises(BudgetExceededError) as info:
        train_private(tiny_model, x, y, w, cfg, lr=1e-3, seed=0, target_epsilon=1.0)
    assert info.value.step < 50
    assert info.value.epsilon > 1.0


def test_training_is_deterministic(tiny_config, tiny_batch):
    x, y, w = tiny_batch
    flats = []
    for workers in (1, 2):
        m = build_model(tiny_config, 0)
        train_private(m, x, y, w, DpSgdConfig(0.5, 1.0, 1.0, 5, 1e-5), lr=1e-3, seed=4, workers=workers)
        flats.append(m.get_flat())
    assert np.array_equal(*flats)
