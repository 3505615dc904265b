import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ablab import nn
from ablab.errors import NotDecomposableError, NumericError, ShapeError


def mlp(seed=0):
    model = nn.build_model([nn.Linear(5, 7), nn.ReLU(), nn.Linear(7, 3)], seed=seed)
    # non-zero biases so every path is exercised
    rng = np.random.default_rng(seed + 100)
    for p in model.params.values():
        if p.w.ndim == 1:
            p.w[:] = rng.standard_normal(p.w.shape) * 0.1
    return model


def conv_model(seed=0):
    return nn.build_model([nn.Conv2d(2, 3, 3, 3), nn.ReLU(), nn.Flatten(), nn.Linear(3 * 4 * 4, 3)], seed=seed)


def factor_all(model, target, cutoff=0.0):
    for name, p in list(model.params.items()):
        if p.decomposable:
            model.params[name] = nn.ab_decompose(p, cutoff, train_target=target)
    return model


def test_flatten_examples():
    m, t = nn.flatten_to_2d(np.zeros((64, 3, 3, 3)))
    assert m.shape == (64, 27) and not t
    m, t = nn.flatten_to_2d(np.zeros((10, 50)))
    assert m.shape == (50, 10) and t
    m, t = nn.flatten_to_2d(np.zeros((50, 10)))
    assert m.shape == (50, 10) and not t
    with pytest.raises(NotDecomposableError):
        nn.flatten_to_2d(np.zeros(5))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=2, max_size=4), st.integers(0, 2**16))
def test_flatten_unflatten_identity(shape, seed):
    w = np.random.default_rng(seed).standard_normal(shape)
    m, t = nn.flatten_to_2d(w)
    assert m.shape[0] >= m.shape[1]
    back = nn.unflatten(m, tuple(shape), t)
    assert back.tobytes() == w.tobytes()


def test_decompose_rank_one():
    rng = np.random.default_rng(1)
    w = np.outer(rng.standard_normal(6), rng.standard_normal(4))
    p = nn.ab_decompose(nn.Parameter.full("w", w), 0.9)
    assert p.rank == 1
    np.testing.assert_allclose(p.a @ p.b, w, atol=1e-10)


def test_decompose_matches_full_svd_oracle():
    w = np.random.default_rng(8).standard_normal((8, 6))
    p = nn.ab_decompose(nn.Parameter.full("w", w), 0.3)
    s = np.linalg.svd(w, compute_uv=False)
    k = int(np.sum(s >= 0.3 * s[0]))
    assert p.rank == k
    err = np.linalg.norm(w - nn.reconstruct(p).w) ** 2
    np.testing.assert_allclose(err, np.sum(s[k:] ** 2), rtol=1e-6)


def test_decompose_identity():
    p = nn.ab_decompose(nn.Parameter.full("w", np.eye(4)), 0.5)
    assert p.rank == 4
    np.testing.assert_allclose(p.a @ p.b, np.eye(4), atol=1e-10)


def test_decompose_wide_and_conv_shapes_round_trip():
    rng = np.random.default_rng(2)
    for shape in [(10, 50), (6, 2, 3, 3), (5, 5)]:
        w = rng.standard_normal(shape)
        p = nn.ab_decompose(nn.Parameter.full("w", w), 0.0)
        back = nn.reconstruct(p).w
        assert back.shape == shape
        assert np.linalg.norm(back - w) / np.linalg.norm(w) <= 1e-8


def test_decompose_zero_weight_warns_and_stays_full():
    p = nn.Parameter.full("w", np.zeros((3, 3)))
    with pytest.warns(RuntimeWarning):
        q = nn.ab_decompose(p, 0.1)
    assert not q.factored


def test_decompose_rejects_bias_and_factored():
    with pytest.raises(NotDecomposableError):
        nn.ab_decompose(nn.Parameter.full("b", np.ones(3)), 0.1)
    p = nn.ab_decompose(nn.Parameter.full("w", np.eye(3)), 0.1)
    with pytest.raises(ValueError):
        nn.ab_decompose(p, 0.1)
    with pytest.raises(ValueError):
        nn.reconstruct(nn.Parameter.full("w", np.eye(3)))


def test_reconstruct_zero_factor():
    p = nn.ab_decompose(nn.Parameter.full("w", np.random.default_rng(0).standard_normal((4, 2, 3))), 0.0)
    p.a = np.zeros_like(p.a)
    w = nn.reconstruct(p).w
    assert w.shape == (4, 2, 3) and not w.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.floats(0.0, 0.95), st.integers(0, 2**16))
def test_reconstruct_error_is_discarded_energy(m, n, cutoff, seed):
    w = np.random.default_rng(seed).standard_normal((m, n))
    p = nn.ab_decompose(nn.Parameter.full("w", w), cutoff)
    s = np.linalg.svd(w, compute_uv=False)
    err = np.linalg.norm(w - nn.reconstruct(p).w) ** 2
    tail = float(np.sum(s[p.rank:] ** 2))
    assert abs(err - tail) <= 1e-6 * tail + 1e-20 * np.sum(s ** 2) + 1e-12


def test_uniform_loss_on_zero_input():
    model = nn.build_model([nn.Linear(6, 8), nn.ReLU(), nn.Linear(8, 5)], seed=0)
    loss, _ = nn.forward(model, np.zeros((4, 6)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(5), abs=1e-15)


def _fd_against(model, x, y, grads, h=1e-5):
    worst = 0.0
    for key, piece in model.pieces().items():
        flat = piece.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp, _ = nn.forward(model, x, y)
            flat[idx] = orig - h
            lm, _ = nn.forward(model, x, y)
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[key].reshape(-1)[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def check_gradients(model, x, y, target):
    _, grads = nn.loss_and_grads(model, x, y)
    if target:
        other_t = "B" if target == "A" else "A"
        frozen = [k for k in grads if k.endswith("." + other_t)]
        assert frozen and all(not grads[k].any() for k in frozen)
        # frozen pieces are checked with the roles flipped
        flipped = model.copy()
        for p in flipped.params.values():
            if p.factored:
                p.train_target = other_t
        _, other = nn.loss_and_grads(flipped, x, y)
        grads = {k: (other[k] if k in frozen else grads[k]) for k in grads}
    assert _fd_against(model, x, y, grads) <= 1e-5


@pytest.mark.parametrize("target", [None, "A", "B"])
def test_mlp_gradients_match_finite_differences(target):
    model = mlp(3)
    if target:
        factor_all(model, target)
    rng = np.random.default_rng(4)
    check_gradients(model, rng.standard_normal((6, 5)), rng.integers(0, 3, 6), target)


@pytest.mark.parametrize("target", [None, "A", "B"])
def test_conv_gradients_match_finite_differences(target):
    model = conv_model(5)
    if target:
        factor_all(model, target)
    rng = np.random.default_rng(6)
    check_gradients(model, rng.standard_normal((3, 2, 4, 4)), rng.integers(0, 3, 3), target)


def test_factored_forward_equals_reconstructed():
    rng = np.random.default_rng(9)
    for build, x in [(mlp, rng.standard_normal((5, 5))), (conv_model, rng.standard_normal((2, 2, 4, 4)))]:
        model = factor_all(build(1), "A", cutoff=0.2)
        full = model.copy()
        for name, p in full.params.items():
            if p.factored:
                full.params[name] = nn.reconstruct(p)
        np.testing.assert_allclose(nn.logits(model, x), nn.logits(full, x), atol=1e-10)


def test_factor_gradient_chain_rule():
    # dL/dA = dL/dW @ B.T for both orientations
    rng = np.random.default_rng(10)
    for in_f, out_f in [(4, 9), (9, 4)]:
        model = nn.build_model([nn.Linear(in_f, out_f)], seed=2)
        x, y = rng.standard_normal((7, in_f)), rng.integers(0, out_f, 7)
        full = model.copy()
        _, gw = nn.loss_and_grads(full, x, y)
        p = nn.ab_decompose(model.params["layers.0.weight"], 0.0, "A")
        model.params["layers.0.weight"] = p
        _, ga = nn.loss_and_grads(model, x, y)
        dw2d, _ = nn.flatten_to_2d(gw["layers.0.weight"])
        np.testing.assert_allclose(ga["layers.0.weight.A"], dw2d @ p.b.T, atol=1e-12)


def test_parameter_count_tracks_representation():
    model = mlp()
    assert model.num_elements() == 5 * 7 + 7 + 7 * 3 + 3
    factor_all(model, "A", cutoff=0.0)
    w0, w2 = model.params["layers.0.weight"], model.params["layers.2.weight"]
    assert not w0.transposed and w0.rank == 5
    assert w2.transposed and w2.rank == 3
    assert model.num_elements() == (7 * 5 + 5 * 5) + 7 + (7 * 3 + 3 * 3) + 3
    assert model.full_num_elements() == 5 * 7 + 7 + 7 * 3 + 3


def test_forward_is_deterministic():
    model = mlp(2)
    x = np.random.default_rng(0).standard_normal((4, 5))
    assert nn.logits(model, x).tobytes() == nn.logits(model.copy(), x).tobytes()


def test_forward_errors():
    model = mlp()
    with pytest.raises(ShapeError):
        nn.forward(model, np.zeros((2, 4)), np.array([0, 1]))
    with pytest.raises(ShapeError):
        nn.forward(model, np.zeros((2, 5)), np.array([0, 1, 2]))
    model.params["layers.0.weight"].w[0, 0] = np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(NumericError):
            nn.forward(model, np.ones((2, 5)), np.array([0, 1]))
    with pytest.raises(ShapeError):
        nn.build_model([nn.Conv2d(1, 1, 2, 2)], seed=0)
