import numpy as np
import pytest
from gradcheck import ARCHITECTURES, max_relative_error

from tspace.denoiser import (
    AdamState,
    DenoiserModel,
    adam_step,
    create_model,
    forward,
    loss_and_grad,
    param_count,
    time_embed,
)
from tspace.errors import InvalidRangeError, ShapeError


def test_embedding_at_zero():
    assert time_embed(0, 1000, 4).tolist() == [0.0, 1.0, 0.0, 1.0]


def test_embedding_range_and_shape():
    e = time_embed(np.arange(1000), 1000, 64)
    assert e.shape == (1000, 64)
    assert np.all(np.abs(e) <= 1.0)


def test_embedding_injective_on_grid():
    e = time_embed(np.arange(1000), 1000, 64)
    # compare every pair via the per-pair max absolute difference
    for shift in range(1, 1000):
        diff = np.max(np.abs(e[shift:] - e[:-shift]), axis=1)
        assert diff.min() > 1e-6


def test_embedding_frequencies_span_one_to_T():
    T = 1000
    e = time_embed(np.array([1.0]), T, 8)[0]
    assert e[0] == pytest.approx(np.sin(1.0))
    assert e[6] == pytest.approx(np.sin(1.0 / T))


@pytest.mark.parametrize("dim,t", [(3, 0), (-2, 0), (4, -1), (4, 1000)])
def test_embedding_errors(dim, t):
    with pytest.raises(InvalidRangeError):
        time_embed(t, 1000, dim)


def test_param_layout():
    m = create_model((4,), time_embed_dim=2, init_seed=0)
    assert m.layer_sizes == (4, 4, 2)
    assert m.n_params == param_count(m.layer_sizes) == 4 * 4 + 4 + 4 * 2 + 2
    # views share memory with the flat vector
    m.weights[0][1, 2] = 7.0
    assert m.params[1 * 4 + 2] == 7.0
    m.biases[1][0] = -3.0
    assert m.params[4 * 4 + 4 + 4 * 2] == -3.0


def test_glorot_bounds_and_zero_bias():
    m = create_model((128, 128), time_embed_dim=64, init_seed=5)
    for W, b in zip(m.weights, m.biases):
        limit = np.sqrt(6.0 / sum(W.shape))
        assert np.all(np.abs(W) <= limit)
        assert np.all(b == 0)
    assert create_model((128, 128), init_seed=5).params.tobytes() == m.params.tobytes()


def test_zero_weights_give_zero_output():
    m = create_model((32, 32), time_embed_dim=16, label_dim=4, activation="silu")
    m.params[:] = 0.0
    rng = np.random.default_rng(0)
    out = forward(m, rng.standard_normal((10, 2)), rng.integers(0, 1000, 10), rng.integers(0, 4, 10))
    assert np.all(out == 0.0)


def test_identity_layer():
    m = DenoiserModel((2 + 6, 2), time_embed_dim=6, init_seed=0)
    m.params[:] = 0.0
    m.weights[0][:2, :] = np.eye(2)
    x = np.random.default_rng(1).standard_normal((5, 2))
    assert forward(m, x, 500).tolist() == x.tolist()


def _oracle_forward(m: DenoiserModel, x, t, labels):
    """Second implementation written directly from the layer definitions."""
    n = x.shape[0]
    half = m.time_embed_dim // 2
    cols = [x]
    if half:
        omegas = np.array([m.T ** (j / (half - 1)) for j in range(half)])
        emb = np.zeros((n, 2 * half))
        for j in range(half):
            emb[:, 2 * j] = np.sin(t / omegas[j])
            emb[:, 2 * j + 1] = np.cos(t / omegas[j])
        cols.append(emb)
    if m.label_dim:
        cols.append(np.eye(m.label_dim)[labels])
    h = np.hstack(cols)
    sizes = m.layer_sizes
    offset = 0
    for li in range(len(sizes) - 1):
        fi, fo = sizes[li], sizes[li + 1]
        W = m.params[offset : offset + fi * fo].reshape(fi, fo)
        offset += fi * fo
        b = m.params[offset : offset + fo]
        offset += fo
        z = np.einsum("ni,io->no", h, W) + b
        if li < len(sizes) - 2:
            z = z / (1.0 + np.exp(-z)) if m.activation == "silu" else np.where(z > 0, z, 0.0)
        h = z
    return h


@pytest.mark.parametrize("arch", ARCHITECTURES[:4] + ARCHITECTURES[4:6])
def test_forward_matches_independent_oracle(arch):
    m = create_model(arch["hidden"], time_embed_dim=arch["time_embed_dim"], label_dim=arch["label_dim"],
                     activation=arch["activation"], init_seed=3)
    rng = np.random.default_rng(4)
    m.params += rng.normal(0, 0.01, m.n_params)
    x = rng.standard_normal((64, 2))
    t = rng.integers(0, 1000, 64).astype(float)
    labels = rng.integers(0, arch["label_dim"], 64) if arch["label_dim"] else None
    got = forward(m, x, t, labels)
    want = _oracle_forward(m, x, t, labels)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_single_vector_input():
    m = create_model((16,), time_embed_dim=4, label_dim=3)
    x = np.array([0.3, -0.2])
    assert np.allclose(forward(m, x, 10, 1), forward(m, x[None], 10, np.array([1]))[0])
    assert forward(m, x, 10, 1).shape == (2,)


def test_one_hot_labels_accepted():
    m = create_model((16,), time_embed_dim=0, label_dim=3)
    x = np.ones((2, 2))
    a = forward(m, x, 0, np.array([0, 2]))
    b = forward(m, x, 0, np.array([[1.0, 0, 0], [0, 0, 1.0]]))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize(
    "call",
    [
        lambda m: forward(m, np.zeros((3, 3)), 0),
        lambda m: forward(m, np.zeros((3, 2)), 0),  # missing label
        lambda m: forward(m, np.zeros((3, 2)), 0, np.zeros((3, 2))),
        lambda m: loss_and_grad(m, np.zeros((0, 2)), 0, np.zeros((0, 2)), np.zeros(0, int)),
        lambda m: loss_and_grad(m, np.zeros((3, 2)), 0, np.zeros((2, 2)), np.zeros(3, int)),
    ],
)
def test_shape_errors(call):
    m = create_model((8,), time_embed_dim=4, label_dim=3)
    with pytest.raises(ShapeError):
        call(m)


def test_bad_architecture_rejected():
    with pytest.raises(ShapeError):
        DenoiserModel((5, 8, 2), time_embed_dim=4)
    with pytest.raises(ShapeError):
        DenoiserModel((6, 8, 3), time_embed_dim=4)
    with pytest.raises(InvalidRangeError):
        create_model((8,), activation="gelu")


def test_phi_mode_ignores_timestep():
    m = create_model((32, 32), time_embed_dim=0, init_seed=2)
    x = np.random.default_rng(0).standard_normal((20, 2))
    ref = forward(m, x, 0).tobytes()
    for t in (1, 374, 999):
        assert forward(m, x, t).tobytes() == ref


def test_loss_zero_at_exact_prediction():
    m = create_model((8,), time_embed_dim=0)
    x = np.random.default_rng(0).standard_normal((6, 2))
    eps = forward(m, x, 0)
    loss, grad = loss_and_grad(m, x, 0, eps)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_loss_of_unit_offset_is_one():
    m = create_model((8,), time_embed_dim=0)
    x = np.random.default_rng(0).standard_normal((6, 2))
    loss, _ = loss_and_grad(m, x, 0, forward(m, x, 0) - 1.0)
    assert loss == pytest.approx(1.0, rel=1e-14)


def test_small_model_every_coordinate_matches_finite_differences():
    arch = dict(hidden=(16, 16), time_embed_dim=8, label_dim=3, activation="silu")
    assert max_relative_error(arch, seed=5, n_coords=None) < 1e-4


@pytest.mark.parametrize("arch", ARCHITECTURES, ids=lambda a: f"{a['activation']}-e{a['time_embed_dim']}-l{a['label_dim']}")
def test_gradient_matches_finite_differences(arch):
    assert max_relative_error(arch, seed=1, n_coords=150) < 1e-4


def test_loss_and_grad_is_deterministic():
    m = create_model(time_embed_dim=64, init_seed=0)
    rng = np.random.default_rng(0)
    x, t, e = rng.standard_normal((256, 2)), rng.integers(0, 1000, 256), rng.standard_normal((256, 2))
    a = loss_and_grad(m, x, t, e)
    b = loss_and_grad(m, x, t, e)
    assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes()


# ---- Adam --------------------------------------------------------------------


def test_adam_zero_gradient_leaves_weights():
    m = create_model((8,), time_embed_dim=0)
    before = m.params.copy()
    state = AdamState.for_model(m)
    adam_step(m, state, np.zeros(m.n_params))
    assert state.step == 1
    assert m.params.tobytes() == before.tobytes()


def test_adam_first_step_is_sign_of_gradient():
    m = create_model((8,), time_embed_dim=0)
    before = m.params.copy()
    g = np.random.default_rng(0).normal(size=m.n_params)
    state = AdamState.for_model(m, lr=0.01)
    adam_step(m, state, g)
    np.testing.assert_allclose(m.params - before, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_converges_on_scalar_quadratic():
    # every coordinate follows the same scalar problem 0.5 * (p - 0.25)**2 from p = 1
    m = DenoiserModel((2, 2), time_embed_dim=0)
    m.params[:] = 1.0
    state = AdamState.for_model(m, lr=0.2, beta1=0.0, beta2=0.999)
    for _ in range(100):
        adam_step(m, state, m.params - 0.25)
    assert np.linalg.norm(m.params - 0.25) < 1e-6


def test_adam_shape_mismatch():
    m = create_model((8,), time_embed_dim=0)
    with pytest.raises(ShapeError):
        adam_step(m, AdamState.for_model(m), np.zeros(3))


def test_frozen_model_cannot_be_updated():
    m = create_model((8,), time_embed_dim=0).freeze()
    assert m.frozen
    with pytest.raises(ValueError):
        adam_step(m, AdamState.for_model(m), np.ones(m.n_params))
    assert not m.copy().frozen
