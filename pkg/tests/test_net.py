import struct

import numpy as np
import pytest

from nsfp.errors import DimensionError, FormatError, ValidationError
from nsfp.net import (
    ArchConfig,
    NetworkParams,
    backward,
    finite_diff_grad,
    finite_diff_input_grad,
    forward,
    init_params,
    load_params,
    relative_error,
    save_params,
)


def shape_count(layers, units):
    # independent re-derivation: input layer, hidden-to-hidden layers, output layer
    return (3 * units + units) + (layers - 1) * (units * units + units) + (units * 3 + 3)


def test_default_param_count():
    arch = ArchConfig()
    assert (arch.hidden_layers, arch.hidden_units, arch.activation) == (8, 128, "relu")
    assert arch.param_count == 116_483
    assert init_params(arch, 0).param_count == 116_483


def test_tiny_param_count():
    assert ArchConfig(1, 8).param_count == 59
    assert init_params(ArchConfig(1, 8), 3).param_count == 59


@pytest.mark.parametrize("layers", [1, 2, 3, 5, 8])
@pytest.mark.parametrize("units", [1, 4, 17, 128])
def test_param_count_formula(layers, units):
    assert ArchConfig(layers, units).param_count == shape_count(layers, units)


def test_arch_validation():
    with pytest.raises(ValidationError):
        ArchConfig(0, 8)
    with pytest.raises(ValidationError):
        ArchConfig(2, 0)
    with pytest.raises(ValidationError):
        ArchConfig(2, 8, "tanh")


def test_init_deterministic():
    a = init_params(ArchConfig(3, 16), 7)
    b = init_params(ArchConfig(3, 16), 7)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != init_params(ArchConfig(3, 16), 8).to_bytes()


@pytest.mark.parametrize("scheme,gain", [("default", 1.0), ("kaiming", 6.0)])
def test_init_bounds(scheme, gain):
    p = init_params(ArchConfig(4, 64), 0, scheme)
    for w, b in zip(p.weights, p.biases):
        bound = np.sqrt(gain / w.shape[0])
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.9 * bound
        assert not b.any()


def test_zero_output_layer_gives_zero_flow():
    p = init_params(ArchConfig(3, 8), 0)
    p.weights[-1][:] = 0.0
    p.biases[-1][:] = 0.0
    flows, _ = forward(p, np.random.default_rng(0).normal(size=(25, 3)))
    assert not flows.any()


def test_forward_cardinality_and_equivariance():
    rng = np.random.default_rng(1)
    p = init_params(ArchConfig(3, 16), 1)
    x = rng.normal(size=(40, 3))
    flows, trace = forward(p, x)
    assert flows.shape == (40, 3)
    assert trace.batch_size == 40
    perm = rng.permutation(40)
    np.testing.assert_array_equal(forward(p, x[perm])[0], flows[perm])


def test_forward_is_pointwise():
    rng = np.random.default_rng(2)
    p = init_params(ArchConfig(2, 8), 2)
    x = rng.normal(size=(5, 3))
    batch = forward(p, x)[0]
    single = np.concatenate([forward(p, x[i:i + 1])[0] for i in range(5)])
    np.testing.assert_allclose(batch, single, rtol=1e-14, atol=1e-15)


def test_forward_rejects_nan():
    p = init_params(ArchConfig(1, 4), 0)
    with pytest.raises(ValidationError):
        forward(p, np.array([[np.nan, 0.0, 0.0]]))


def test_zero_upstream_gradient():
    p = init_params(ArchConfig(2, 8), 0)
    _, trace = forward(p, np.random.default_rng(0).normal(size=(6, 3)))
    grads, gx = backward(trace, p, np.zeros((6, 3)))
    assert not grads.flat().any()
    assert not gx.any()


def test_backward_shape_mismatch():
    p = init_params(ArchConfig(2, 8), 0)
    _, trace = forward(p, np.zeros((6, 3)))
    with pytest.raises(DimensionError):
        backward(trace, p, np.zeros((5, 3)))


def _probe(rng, n):
    """A random smooth scalar function of the flows: quadratic plus linear terms."""
    a = rng.normal(size=(n, 3))
    c = rng.normal(size=(n, 3))

    def probe(flows):
        return float(np.sum(a * flows) + 0.5 * np.sum(c * flows * flows))

    def grad(flows):
        return a + c * flows

    return probe, grad


def _random_params(rng, layers, units, activation="relu"):
    p = init_params(ArchConfig(layers, units, activation), int(rng.integers(2**32)), "kaiming")
    for b in p.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    return p


@pytest.mark.parametrize("activation", ["relu", "sigmoid"])
def test_param_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(5)
    p = _random_params(rng, 2, 4, activation)
    x = rng.normal(size=(1, 3))
    probe, dprobe = _probe(rng, 1)
    flows, trace = forward(p, x)
    grads, _ = backward(trace, p, dprobe(flows))
    numeric = finite_diff_grad(p, x, probe, 1e-6)
    assert relative_error(grads, numeric) <= 1e-4


@pytest.mark.parametrize("activation", ["relu", "sigmoid"])
def test_input_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(6)
    p = _random_params(rng, 2, 4, activation)
    x = rng.normal(size=(1, 3))
    probe, dprobe = _probe(rng, 1)
    flows, trace = forward(p, x)
    _, gx = backward(trace, p, dprobe(flows))
    assert relative_error(gx, finite_diff_input_grad(p, x, probe, 1e-6)) <= 1e-4


def test_gradient_sweep_over_architectures():
    rng = np.random.default_rng(7)
    worst_p = worst_x = 0.0
    for _ in range(100):
        layers = int(rng.choice([1, 2, 4]))
        units = int(rng.choice([4, 8, 16]))
        p = _random_params(rng, layers, units)
        x = rng.normal(size=(1, 3))
        probe, dprobe = _probe(rng, 1)
        flows, trace = forward(p, x)
        grads, gx = backward(trace, p, dprobe(flows))
        if not grads.flat().any():
            continue  # every unit dead: nothing to compare
        worst_p = max(worst_p, relative_error(grads, finite_diff_grad(p, x, probe, 1e-6)))
        worst_x = max(worst_x, relative_error(gx, finite_diff_input_grad(p, x, probe, 1e-6)))
    assert worst_p <= 1e-4
    assert worst_x <= 1e-4


def test_linear_probe_on_output_bias_is_exact():
    p = init_params(ArchConfig(1, 4), 0)
    x = np.random.default_rng(0).normal(size=(3, 3))
    numeric = finite_diff_grad(p, x, lambda f: float(f.sum()), 1e-3)
    # d(sum of flows)/d(output bias) is the batch size for each component
    np.testing.assert_allclose(numeric.biases[-1], [3.0, 3.0, 3.0], rtol=0, atol=1e-10)
    flows, trace = forward(p, x)
    grads, _ = backward(trace, p, np.ones_like(flows))
    np.testing.assert_array_equal(grads.biases[-1], [3.0, 3.0, 3.0])


def test_finite_difference_error_is_second_order():
    rng = np.random.default_rng(8)
    p = _random_params(rng, 2, 4, "sigmoid")
    x = rng.normal(size=(2, 3))
    probe, dprobe = _probe(rng, 2)
    flows, trace = forward(p, x)
    exact = backward(trace, p, dprobe(flows))[0].flat()
    e1 = np.max(np.abs(finite_diff_grad(p, x, probe, 2e-2).flat() - exact))
    e2 = np.max(np.abs(finite_diff_grad(p, x, probe, 1e-2).flat() - exact))
    # halving the step should cut the truncation error by about four
    assert 3.0 < e1 / e2 < 5.0


def test_finite_difference_step_must_be_positive():
    p = init_params(ArchConfig(1, 4), 0)
    with pytest.raises(ValidationError):
        finite_diff_grad(p, np.zeros((1, 3)), lambda f: 0.0, 0.0)


def test_serialization_round_trip(tmp_path):
    p = init_params(ArchConfig(3, 16), 4)
    save_params(p, tmp_path / "p.bin")
    q = load_params(tmp_path / "p.bin")
    assert q.arch == p.arch
    for a, b in zip(p.arrays(), q.arrays()):
        assert a.tobytes() == b.tobytes()


def test_serialization_layout():
    p = init_params(ArchConfig(2, 3), 9)
    blob = p.to_bytes()
    assert blob[:4] == b"NSFP"
    assert struct.unpack("<III", blob[4:16]) == (1, 2, 3)
    body = np.frombuffer(blob[16:], dtype="<f8")
    # W1 row-major, then b1, then W2 ...
    np.testing.assert_array_equal(body[:9], p.weights[0].ravel())
    np.testing.assert_array_equal(body[9:12], p.biases[0])
    np.testing.assert_array_equal(body[12:21], p.weights[1].ravel())
    assert len(blob) == 16 + 8 * p.param_count


def test_serialization_rejects_bad_blobs():
    blob = init_params(ArchConfig(1, 4), 0).to_bytes()
    with pytest.raises(FormatError):
        NetworkParams.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        NetworkParams.from_bytes(blob[:-8])
    with pytest.raises(FormatError):
        NetworkParams.from_bytes(blob[:10])
