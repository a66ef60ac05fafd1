import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iclcbf.neural import Adam, Mlp


def random_net(sizes=(2, 16, 16, 1), output="identity", seed=0):
    return Mlp(list(sizes), output, seed=seed, zero_output=False)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def fd_params(net, loss, h=1e-6):
    p0 = net.params.copy()
    g = np.zeros_like(p0)
    for i in range(p0.size):
        net.params[i] = p0[i] + h
        up = loss()
        net.params[i] = p0[i] - h
        dn = loss()
        net.params[i] = p0[i]
        g[i] = (up - dn) / (2 * h)
    return g


def test_zero_network_is_zero_function():
    net = Mlp([2, 64, 64, 1])
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert np.all(net.forward(x) == 0.0)
    assert np.all(net.input_gradient(x) == 0.0)


def test_single_linear_layer():
    net = Mlp([2, 1], params=np.array([1.0, 2.0, 0.5]))
    assert net.forward(np.array([1.0, 1.0])) == 3.5
    np.testing.assert_array_equal(net.input_gradient(np.array([-3.0, 7.0])), [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(0, 100))
def test_tanh_output_is_bounded(x, seed):
    net = Mlp([3, 8, 1], "tanh", seed=seed, zero_output=False)
    y = net.forward(np.array(x))
    assert -1.0 <= y <= 1.0 and np.isfinite(y)


def test_dimension_mismatch():
    net = Mlp([2, 4, 1])
    with pytest.raises(ValueError):
        net.forward(np.zeros(3))
    with pytest.raises(ValueError):
        net.input_gradient(np.zeros((5, 4)))


def test_batch_matches_single():
    net = random_net()
    x = np.random.default_rng(1).normal(size=(7, 2))
    ys = net.forward(x)
    assert all(ys[i] == net.forward(x[i]) for i in range(7))


@pytest.mark.parametrize("output", ["identity", "tanh"])
def test_input_gradient_finite_differences(output):
    net = random_net(output=output, seed=3)
    xs = np.random.default_rng(2).uniform(-2, 2, size=(100, 2))
    h = 1e-5
    for x in xs:
        fd = np.array([(net.forward(x + h * e) - net.forward(x - h * e)) / (2 * h) for e in np.eye(2)])
        assert rel_err(net.input_gradient(x), fd) < 1e-4


def test_parameter_gradient_of_output_at_zero_network():
    net = Mlp([2, 8, 8, 1])
    x = np.array([[0.3, -0.4]])
    y, _, cache = net.tangent_forward(x)
    grad = net.backward(cache, 2 * y)  # d/dp of y^2
    assert np.all(grad == 0.0)
    # a unit upstream gradient reaches only the last layer
    g1 = net.parameter_gradient(x, gy=np.ones(1))
    off_last = net.num_params - (8 + 1)
    assert np.all(g1[:off_last] == 0.0)
    assert g1[-1] == 1.0


@pytest.mark.parametrize("output", ["identity", "tanh"])
def test_parameter_gradient_of_forward(output):
    net = random_net(output=output, seed=5)
    x = np.random.default_rng(4).normal(size=(6, 2))
    g = net.parameter_gradient(x, gy=np.ones(6))
    fd = fd_params(net, lambda: float(np.sum(net.forward(x))))
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("output", ["identity", "tanh"])
def test_parameter_gradient_of_squared_input_gradient(output):
    net = random_net(output=output, seed=7)
    x = np.random.default_rng(6).normal(size=(5, 2))
    g = np.zeros(net.num_params)
    for e in np.eye(2):
        v = np.tile(e, (5, 1))
        _, dy, cache = net.tangent_forward(x, v)
        g += net.backward(cache, None, 2 * dy)
    fd = fd_params(net, lambda: float(np.sum(net.input_gradient(x) ** 2)))
    assert rel_err(g, fd) < 1e-3


def test_mixed_ascent_term_gradient():
    # d/dp of sum(relu(eps - grad_B . v - alpha * B)) away from the kinks
    net = random_net(sizes=(4, 16, 16, 1), seed=9)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(8, 4))
    v = rng.normal(size=(8, 4))
    alpha, eps = 2.0, 0.3

    def loss():
        y, dy, _ = net.tangent_forward(x, v)
        return float(np.sum(np.maximum(eps - dy - alpha * y, 0.0)))

    y, dy, cache = net.tangent_forward(x, v)
    active = (eps - dy - alpha * y > 0).astype(float)
    g = net.backward(cache, -alpha * active, -active)
    fd = fd_params(net, loss)
    assert rel_err(g, fd) < 1e-4


def test_shipped_architectures_pass_gradient_check():
    for n in (2, 3, 6):
        net = Mlp([n, 64, 64, 1], "tanh", seed=n, zero_output=False)
        x = np.random.default_rng(n).normal(size=(3, n))
        h = 1e-5
        fd = np.stack([(net.forward(x + h * e) - net.forward(x - h * e)) / (2 * h) for e in np.eye(n)], 1)
        assert rel_err(net.input_gradient(x), fd) < 1e-4


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    net = random_net(sizes=(6, 64, 64, 1), output="tanh", seed=11)
    net.params[3] = 1 / 3
    path = tmp_path / "net.ckpt"
    net.save(path)
    back = Mlp.load(path)
    assert back.layer_sizes == net.layer_sizes
    assert back.output_activation == "tanh"
    assert back.seed == 11
    assert np.array_equal(back.params, net.params)
    first = path.read_text().splitlines()[0]
    assert first.startswith("layer_sizes=6,64,64,1")


def test_copy_is_independent():
    net = random_net()
    c = net.copy()
    c.params[:] = 0.0
    assert np.any(net.params != 0.0)
    assert c.forward(np.ones(2)) == 0.0


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    opt = Adam(3)
    opt.step(p, np.zeros(3))
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_adam_first_step_magnitude_is_learning_rate():
    p = np.zeros(4)
    g = np.array([1e-4, -3.0, 250.0, 7.0])
    Adam(4, lr=1e-2).step(p, g)
    np.testing.assert_allclose(np.abs(p), 1e-2, rtol=1e-3)
    assert np.all(np.sign(p) == -np.sign(g))


def test_adam_on_quadratic_bowl():
    w = np.array([1.0, -0.5, 2.0])
    opt = Adam(3, lr=0.02)
    losses = []
    for _ in range(100):
        losses.append(float(w @ w))
        opt.step(w, 2 * w)
    assert np.all(np.diff(losses[5:]) < 0)
    assert losses[-1] < 0.05 * losses[0]


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        Adam(3).step(np.zeros(3), np.zeros(4))
