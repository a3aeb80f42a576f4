import numpy as np
import pytest

from trajbias import autodiff as ad
from trajbias.autodiff import Tensor

from helpers import max_rel_error, numeric_grad


def _check(build, *shapes, seed=0):
    """Compare backward() against central differences for every input of ``build``."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    out = build(*leaves)
    ad.backward(out)
    for leaf in leaves:
        num = numeric_grad(lambda: build(*[Tensor(t.data) for t in leaves]).item(), leaf.data)
        assert max_rel_error(leaf.grad, num) < 1e-4


def test_relu_values():
    assert ad.relu(Tensor(-1.0)).item() == 0.0
    assert ad.relu(Tensor(2.0)).item() == 2.0


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_mse_identical_is_zero():
    assert ad.mse(Tensor([1.0, 2.0]), [1.0, 2.0], [True, True]).item() == 0.0


def test_mse_empty_mask_zero_with_zero_grad():
    p = Tensor([1.0, 5.0], requires_grad=True)
    out = ad.mse(p, [0.0, 0.0], [False, False])
    ad.backward(out)
    assert out.item() == 0.0
    assert np.all(p.grad == 0.0)


def test_mse_masked_element_gradient_exactly_zero():
    p = Tensor([1.0, 5.0, -2.0], requires_grad=True)
    ad.backward(ad.mse(p, [0.0, 0.0, 0.0], [True, False, True]))
    assert p.grad[1] == 0.0
    assert p.grad[0] != 0.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        ad.mse(Tensor(np.ones(3)), np.ones(2), np.ones(2, bool))


def test_nonfinite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        Tensor(np.array([1.0])) * np.inf


def test_gru_step_zero_parameters_halves_state():
    h = np.array([[0.4, -0.8, 1.0]])
    x = np.array([[1.0, 2.0]])
    out = ad.gru_step(Tensor(x), Tensor(h), np.zeros((2, 9)), np.zeros((3, 9)), np.zeros(9), np.zeros(9))
    np.testing.assert_allclose(out.data, 0.5 * h, rtol=0, atol=0)


def test_gru_step_bounded_from_zero_state():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(scale=5, size=(4, 3))
        out = ad.gru_step(x, np.zeros((4, 5)), rng.normal(size=(3, 15)), rng.normal(size=(5, 15)),
                          rng.normal(size=15), rng.normal(size=15))
        assert np.all(np.abs(out.data) < 1.0)


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: ad.sum_(ad.tanh(a + b)), [(3, 4), (4,)]),
    ("sub", lambda a, b: ad.sum_(ad.tanh(a - b)), [(3, 4), (3, 4)]),
    ("mul", lambda a, b: ad.sum_(a * b), [(3, 4), (1, 4)]),
    ("matmul", lambda a, b: ad.sum_(ad.tanh(a @ b)), [(3, 4), (4, 2)]),
    ("linear3d", lambda x, W, b: ad.mean(ad.tanh(ad.linear(x, W, b))), [(2, 3, 4), (4, 5), (5,)]),
    ("sigmoid", lambda a: ad.sum_(ad.sigmoid(a) * ad.sigmoid(a)), [(5,)]),
    ("tanh", lambda a: ad.sum_(ad.tanh(a) * a), [(5,)]),
    ("relu", lambda a: ad.sum_(ad.relu(a) * a), [(7,)]),
    ("column_sigmoid", lambda a: ad.sum_(ad.tanh(ad.column_sigmoid(a, [True, False, True]))), [(2, 3)]),
    ("stack", lambda a, b: ad.sum_(ad.tanh(ad.stack([a, b], axis=1)) * np.arange(12.0).reshape(2, 2, 3)),
     [(2, 3), (2, 3)]),
    ("concat", lambda a, b: ad.sum_(ad.tanh(ad.concat([a, b])) * np.arange(10.0).reshape(2, 5)),
     [(2, 3), (2, 2)]),
    ("minimum", lambda a: ad.sum_(ad.minimum(a * a, 0.5)), [(6,)]),
    ("blend", lambda a, b: ad.sum_(ad.tanh(ad.blend(a, b, [True, False, True]))), [(3, 2), (3, 2)]),
    ("mse", lambda a: ad.mse(ad.tanh(a), np.linspace(-1, 1, 6).reshape(2, 3),
                             np.array([[1, 0, 1], [1, 1, 0]], bool)), [(2, 3)]),
])
def test_layer_gradients_match_finite_differences(name, build, shapes):
    _check(build, *shapes)


def test_gru_step_gradient():
    def build(x, h, Wx, Wh, bx, bh):
        return ad.sum_(ad.gru_step(x, h, Wx, Wh, bx, bh) * np.arange(1.0, 7.0).reshape(2, 3))

    _check(build, (2, 4), (2, 3), (4, 9), (3, 9), (9,), (9,), seed=5)


def test_gru_sequence_gradient_reaches_every_input():
    rng = np.random.default_rng(1)
    T = 6
    xs = [Tensor(rng.normal(size=(2, 3)), requires_grad=True) for _ in range(T)]
    Wx, Wh = rng.normal(size=(3, 12)) * 0.5, rng.normal(size=(4, 12)) * 0.5
    bx, bh = rng.normal(size=12), rng.normal(size=12)

    def run(inputs):
        h = Tensor(np.zeros((2, 4)))
        for x in inputs:
            h = ad.gru_step(x, h, Wx, Wh, bx, bh)
        return ad.sum_(h * h)

    ad.backward(run(xs))
    for x in xs:
        assert x.grad is not None and x.grad.shape == (2, 3)
        num = numeric_grad(lambda: run([Tensor(t.data) for t in xs]).item(), x.data)
        assert max_rel_error(x.grad, num) < 1e-4


def test_backward_twice_raises():
    x = Tensor(2.0, requires_grad=True)
    y = ad.tanh(x * x)
    ad.backward(y)
    with pytest.raises(ad.GraphError):
        ad.backward(y)


def test_reuse_graph_after_step_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = ad.sum_(w * w)
    opt = ad.Adam({"w": w}, lr=0.1)
    w.grad = np.ones(3)
    opt.step()
    with pytest.raises(ad.GraphError):
        ad.backward(loss)


def test_adam_zero_gradient_no_decay_leaves_params():
    w = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    opt = ad.Adam({"w": w}, lr=0.01)
    w.grad = np.zeros((1, 2))
    opt.step()
    np.testing.assert_array_equal(w.data, [[1.0, -2.0]])


def test_adam_first_step_is_lr_sign():
    w = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
    opt = ad.Adam({"w": w}, lr=2e-3)
    w.grad = np.array([3.0, -0.2, 1e-3])
    opt.step()
    np.testing.assert_allclose(w.data - 0.5, -2e-3 * np.sign([3.0, -0.2, 1e-3]), rtol=1e-4)


def test_adam_weight_decay_skips_biases():
    W = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = ad.Adam({"W": W, "b": b}, lr=0.1, weight_decay=0.5)
    opt.step()
    np.testing.assert_allclose(W.data, 1 - 0.1 * 0.5)
    np.testing.assert_array_equal(b.data, 1.0)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        opt = ad.Adam({"w": w}, lr=0.05, weight_decay=1e-6)
        target = rng.normal(size=(3, 2))
        for _ in range(10):
            opt.zero_grad()
            ad.backward(ad.mse(ad.tanh(w), target, np.ones((3, 2), bool)))
            opt.step()
        return w.data

    np.testing.assert_array_equal(run(), run())


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {"enc/W": rng.normal(size=(3, 4)), "enc/b": rng.normal(size=4) * 1e-300}
    ad.save_checkpoint(tmp_path / "c.npz", params, {"n_z": 256})
    loaded, meta = ad.load_checkpoint(tmp_path / "c.npz")
    assert meta == {"n_z": 256}
    for k, v in params.items():
        assert loaded[k].tobytes() == v.tobytes()


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert ad.clip_grad_norm([a], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(a.grad) == pytest.approx(1.0)
