"""Autodiff engine: forward ops against loop oracles, gradients against
central finite differences, straight-through estimator semantics."""

import numpy as np
import pytest

import qcnn
from qcnn import ops
from qcnn import kernels_numba, kernels_numpy
from qcnn.errors import ConfigurationError, ContractError, DimensionError
from qcnn.tensor import Tensor, get_graph

from oracles import (
    avgpool_loops,
    conv2d_loops,
    finite_difference,
    grad_close,
    linear_loops,
    maxpool_loops,
    well_separated,
)

BACKENDS = [kernels_numba, kernels_numpy]


# ---------------------------------------------------------------------------
# forward vs naive loop oracles
# ---------------------------------------------------------------------------


def test_conv1d_degenerate_case():
    # A=[1,2,3], K=[1,0,-1] as a 1x1x1x3 convolution
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
    w = Tensor(np.array([1.0, 0.0, -1.0]).reshape(1, 1, 1, 3))
    y = ops.conv2d(x, w)
    assert y.data.reshape(-1).tolist() == [-2.0]


def test_conv_zero_input_gives_bias(rng):
    x = Tensor(np.zeros((2, 3, 6, 6), dtype=np.float32))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
    b = Tensor(np.array([1.0, -2.0, 0.5, 3.0], dtype=np.float32))
    y = ops.conv2d(x, w, b)
    for f in range(4):
        assert np.allclose(y.data[:, f], b.data[f])


@pytest.mark.parametrize("kmod", BACKENDS, ids=lambda m: m.NAME)
@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_forward_matches_loops(kmod, stride, padding, rng, monkeypatch):
    monkeypatch.setattr(ops, "kernels", kmod)
    x = rng.normal(size=(2, 2, 7, 7)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
    ref = conv2d_loops(x, w, stride=stride, padding=padding)
    assert np.allclose(y.data, ref, atol=1e-5)


def test_conv_random_vs_six_nested_loops(rng):
    x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(w))
    assert np.allclose(y.data, conv2d_loops(x, w), atol=1e-5)


def test_linear_identity_and_simple():
    y = ops.linear(
        Tensor([[1.0, 2.0]]),
        Tensor([[1.0, 0.0], [0.0, 1.0]]),
        Tensor([0.0, 0.0]),
    )
    assert y.data.tolist() == [[1.0, 2.0]]
    y2 = ops.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0, 3.0]]), Tensor([1.0]))
    assert y2.data.tolist() == [[6.0]]


def test_linear_matches_loops(rng):
    x = rng.normal(size=(4, 8)).astype(np.float32)
    w = rng.normal(size=(3, 8)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    y = ops.linear(Tensor(x), Tensor(w), Tensor(b))
    assert np.allclose(y.data, linear_loops(x, w, b), atol=1e-5)


@pytest.mark.parametrize("kmod", BACKENDS, ids=lambda m: m.NAME)
@pytest.mark.parametrize("kind,oracle", [("max", maxpool_loops), ("avg", avgpool_loops)])
def test_pool_forward_matches_loops(kmod, kind, oracle, rng, monkeypatch):
    monkeypatch.setattr(ops, "kernels", kmod)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    y = ops.pool2d(Tensor(x), kind, 2, 2)
    assert np.allclose(y.data, oracle(x, 2, 2), atol=1e-5)


def test_pool_simple_windows():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert ops.pool2d(x, "max", 2, 2).data.reshape(-1)[0] == 4.0
    assert ops.pool2d(x, "avg", 2, 2).data.reshape(-1)[0] == 2.5


def test_backends_agree_on_random_shapes(rng):
    for _ in range(5):
        n, c, f = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
        h = int(rng.integers(5, 9))
        x = rng.normal(size=(n, c, h, h)).astype(np.float32)
        w = rng.normal(size=(f, c, 3, 3)).astype(np.float32)
        ya = kernels_numba.conv2d_forward(x, w, 1)
        yb = kernels_numpy.conv2d_forward(x, w, 1)
        assert np.allclose(ya, yb, atol=1e-4)


# ---------------------------------------------------------------------------
# shape / contract errors
# ---------------------------------------------------------------------------


def test_conv_channel_mismatch_names_axis(rng):
    x = Tensor(rng.normal(size=(1, 3, 5, 5)).astype(np.float32))
    w = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32))
    with pytest.raises(DimensionError, match="axis 1"):
        ops.conv2d(x, w)


def test_conv_floor_semantics_drops_partial_windows(rng):
    x = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
    w = rng.normal(size=(1, 1, 2, 2)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(w), stride=2)
    assert y.shape == (1, 1, 2, 2)
    assert np.allclose(y.data, conv2d_loops(x, w, stride=2), atol=1e-5)


def test_conv_kernel_larger_than_input_is_config_error(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)).astype(np.float32))
    w = Tensor(rng.normal(size=(1, 1, 5, 5)).astype(np.float32))
    with pytest.raises(ConfigurationError):
        ops.conv2d(x, w)


def test_linear_mismatch(rng):
    with pytest.raises(DimensionError):
        ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_pool_window_too_large(rng):
    with pytest.raises(ConfigurationError):
        ops.pool2d(Tensor(np.zeros((1, 1, 2, 2))), "max", 3, 1)


def test_backward_requires_scalar():
    t = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ContractError):
        qcnn.backward(t)


def test_backward_empty_graph_is_noop():
    t = Tensor(np.zeros(1), requires_grad=True)
    qcnn.backward(t)  # nothing recorded; must not raise


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_sum_of_squares_gradient():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    loss = ops.tsum(ops.mul(w, w))
    loss.backward()
    assert w.grad.tolist() == [2.0, -4.0]


def test_unused_parameter_has_zero_grad():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    x = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    loss = ops.tsum(ops.mul(x, x))
    loss.backward()
    assert np.all(w.grad == 0.0)


def test_repeated_backward_accumulates():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    loss = ops.tsum(ops.mul(w, w))
    loss.backward()
    loss.backward()
    assert w.grad.tolist() == [4.0, -8.0]


def test_backward_deterministic(rng):
    x = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    grads = []
    for _ in range(2):
        get_graph().clear()
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        loss = ops.tsum(ops.mul(ops.conv2d(xt, wt), ops.conv2d(xt, wt)))
        loss.backward()
        grads.append((xt.grad.copy(), wt.grad.copy()))
    assert np.array_equal(grads[0][0], grads[1][0])
    assert np.array_equal(grads[0][1], grads[1][1])


def _weighted_sum(y, r):
    return ops.tsum(ops.mul(y, Tensor(r)))


@pytest.mark.parametrize("case", ["conv", "linear", "maxpool", "avgpool", "relu", "hardtanh",
                                  "batchnorm", "xent", "mean", "spatial_mean"])
def test_gradients_match_finite_differences(case, rng):
    """Central differences (step 1e-3) within 1e-2 relative on random inputs."""
    for trial in range(4):
        get_graph().clear()
        if case == "conv":
            x = Tensor(rng.uniform(-1, 1, (2, 2, 5, 5)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)).astype(np.float32), requires_grad=True)
            b = Tensor(rng.uniform(-1, 1, 3).astype(np.float32), requires_grad=True)
            r = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
            make = lambda: _weighted_sum(ops.conv2d(x, w, b, stride=1, padding=1), r)
            params = [x, w, b]
        elif case == "linear":
            x = Tensor(rng.uniform(-1, 1, (3, 4)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.uniform(-1, 1, (2, 4)).astype(np.float32), requires_grad=True)
            b = Tensor(rng.uniform(-1, 1, 2).astype(np.float32), requires_grad=True)
            r = rng.normal(size=(3, 2)).astype(np.float32)
            make = lambda: _weighted_sum(ops.linear(x, w, b), r)
            params = [x, w, b]
        elif case in ("maxpool", "avgpool"):
            x = Tensor(well_separated(rng, (2, 2, 4, 4)), requires_grad=True)
            r = rng.normal(size=(2, 2, 2, 2)).astype(np.float32)
            kind = "max" if case == "maxpool" else "avg"
            make = lambda: _weighted_sum(ops.pool2d(x, kind, 2, 2), r)
            params = [x]
        elif case in ("relu", "hardtanh"):
            # keep away from the kinks so finite differences are valid
            v = rng.uniform(-2, 2, (3, 4)).astype(np.float32)
            v[np.abs(np.abs(v) - 1.0) < 0.05] = 0.5
            v[np.abs(v) < 0.05] = 0.5
            x = Tensor(v, requires_grad=True)
            r = rng.normal(size=(3, 4)).astype(np.float32)
            make = lambda: _weighted_sum(ops.nonlinearity(x, case), r)
            params = [x]
        elif case == "batchnorm":
            x = Tensor(rng.uniform(-1, 1, (4, 3, 2, 2)).astype(np.float32), requires_grad=True)
            gamma = Tensor(rng.uniform(0.5, 1.5, 3).astype(np.float32), requires_grad=True)
            beta = Tensor(rng.uniform(-0.5, 0.5, 3).astype(np.float32), requires_grad=True)
            r = rng.normal(size=(4, 3, 2, 2)).astype(np.float32)

            def make():
                rm, rv = np.zeros(3, np.float64), np.ones(3, np.float64)
                return _weighted_sum(
                    ops.batchnorm(x, gamma, beta, rm, rv, 1e-5, 0.1, True), r
                )

            params = [x, gamma, beta]
        elif case == "xent":
            x = Tensor(rng.uniform(-1, 1, (4, 5)).astype(np.float32), requires_grad=True)
            labels = rng.integers(0, 5, 4)
            make = lambda: ops.softmax_cross_entropy(x, labels)
            params = [x]
        elif case == "mean":
            x = Tensor(rng.uniform(-1, 1, (3, 4)).astype(np.float32), requires_grad=True)
            make = lambda: ops.tmean(ops.mul(x, x))
            params = [x]
        else:  # spatial_mean
            x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32), requires_grad=True)
            r = rng.normal(size=(2, 3)).astype(np.float32)
            make = lambda: _weighted_sum(ops.spatial_mean(x), r)
            params = [x]

        loss = make()
        loss.backward()
        for p in params:
            analytic = p.grad.copy()

            def f():
                with qcnn.no_grad():
                    return make().item()

            fd = finite_difference(f, p.data)
            assert grad_close(analytic, fd), f"{case}: gradient mismatch on trial {trial}"
            p.zero_grad()


# ---------------------------------------------------------------------------
# straight-through estimator
# ---------------------------------------------------------------------------


def test_subgradients_at_kinks():
    # relu'(0) = 0; hardtanh passes through on the closed interval [-1, 1]
    x = Tensor(np.array([0.0, -1.0, 1.0]), requires_grad=True)
    ops.tsum(ops.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]
    x2 = Tensor(np.array([0.0, -1.0, 1.0, 2.0]), requires_grad=True)
    ops.tsum(ops.hardtanh(x2)).backward()
    assert x2.grad.tolist() == [1.0, 1.0, 1.0, 0.0]


def test_ste_passes_gradient_inside_window():
    x = Tensor(np.array([0.5]), requires_grad=True)
    y = ops.ste_identity(x, np.sign, -1.0, 1.0)
    loss = ops.tsum(ops.mul(y, Tensor(np.array([2.0]))))
    loss.backward()
    assert x.grad.tolist() == [2.0]


def test_ste_blocks_gradient_outside_window():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = ops.ste_identity(x, np.sign, -1.0, 1.0)
    loss = ops.tsum(ops.mul(y, Tensor(np.array([2.0]))))
    loss.backward()
    assert x.grad.tolist() == [0.0]


def test_ste_mask_is_exact_window_indicator(rng):
    x = Tensor(rng.uniform(-2, 2, 64).astype(np.float32), requires_grad=True)
    y = ops.ste_identity(x, np.sign, -1.0, 1.0)
    loss = ops.tsum(y)
    loss.backward()
    expected = ((x.data >= -1.0) & (x.data <= 1.0)).astype(np.float32)
    assert np.array_equal(x.grad, expected)


def test_ste_forward_applies_map(rng):
    x = Tensor(rng.normal(size=16).astype(np.float32))
    y = ops.ste_identity(x, lambda v: np.where(v >= 0, 1.0, -1.0).astype(np.float32), -1, 1)
    assert set(np.unique(y.data)) <= {-1.0, 1.0}


def test_ste_invalid_window():
    with pytest.raises(ContractError):
        ops.ste_identity(Tensor(np.zeros(2)), np.sign, 1.0, -1.0)


def test_forward_outputs_finite_on_finite_inputs(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32) * 100)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32) * 100)
    y = ops.conv2d(x, w, padding=1)
    z = ops.softmax_cross_entropy(ops.flatten(y), np.zeros(2, dtype=np.int64))
    assert np.isfinite(y.data).all() and np.isfinite(z.data).all()
