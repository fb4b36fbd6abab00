import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import numeric_grad, rel_err
from tdtl import nn
from tdtl.linalg import ContractError, ShapeError


def dense(i, o, group="backbone"):
    return nn.LayerSpec("dense", i, o, group=group)


def act(kind, n, rate=0.0):
    return nn.LayerSpec(kind, n, n, drop_rate=rate)


def random_params(spec, seed, scale=0.7):
    p = nn.init_network(spec, seed)
    rng = np.random.default_rng(seed + 1000)
    p.weights = [rng.normal(0, scale, w.shape) for w in p.weights]
    p.biases = [rng.normal(0, 0.3, b.shape) for b in p.biases]
    return p


def grad_check(spec, seed, batch=4):
    """Analytic vs central-difference gradients of sum(out * r) through ``spec``."""
    rng = np.random.default_rng(seed)
    params = random_params(spec, seed)
    x = rng.normal(size=(batch, spec[0].in_dim))
    r = rng.normal(size=(batch, spec[-1].out_dim))

    def loss():
        out, _ = nn.forward(params, spec, x, train_mode=True, rng=nn.make_rng(seed))
        return float(np.sum(out * r))

    _, tape = nn.forward(params, spec, x, train_mode=True, rng=nn.make_rng(seed))
    grads = nn.backward(params, spec, tape, r)
    errs = []
    for arrays, g in ((params.weights, grads.weights), (params.biases, grads.biases)):
        for a, ga in zip(arrays, g):
            errs.append(rel_err(ga, numeric_grad(loss, a)))
    return max(errs)


ARCHS = {
    "dense": [dense(5, 3)],
    "relu": [dense(5, 4), act("relu", 4)],
    "tanh": [dense(5, 4), act("tanh", 4)],
    "softmax": [dense(5, 4), act("softmax", 4)],
    "dropout": [dense(5, 4), act("dropout", 4, 0.5)],
    "composite": [dense(5, 6), act("relu", 6), act("dropout", 6, 0.5), dense(6, 4),
                  act("tanh", 4), dense(4, 3, "transfer"), act("tanh", 3), act("softmax", 3)],
}


@pytest.mark.parametrize("name", sorted(ARCHS))
@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(name, seed):
    assert grad_check(ARCHS[name], seed) < 1e-4


def test_backward_from_logits_skips_softmax():
    spec = ARCHS["softmax"]
    params = random_params(spec, 0)
    x = np.random.default_rng(0).normal(size=(3, 5))
    _, tape = nn.forward(params, spec, x)
    g = np.random.default_rng(1).normal(size=(3, 4))
    via_logits = nn.backward(params, spec, tape, g, from_logits=True)
    direct = nn.backward(params, spec[:1], nn.ActivationTape(tape.inputs[:1], tape.outputs[:1],
                                                             tape.masks[:1]), g)
    np.testing.assert_array_equal(via_logits.weights[0], direct.weights[0])


def test_linear_squared_loss_closed_form():
    rng = np.random.default_rng(3)
    spec = [dense(4, 2)]
    params = random_params(spec, 3)
    params.biases[0][:] = 0
    x, y = rng.normal(size=(8, 4)), rng.normal(size=(8, 2))
    out, tape = nn.forward(params, spec, x)
    g = nn.backward(params, spec, tape, 2 * (out - y) / len(x))
    np.testing.assert_allclose(g.weights[0], 2 * x.T @ (x @ params.weights[0] - y) / len(x),
                               rtol=1e-12, atol=1e-14)


def test_zero_output_gradient_gives_zero():
    spec = ARCHS["composite"]
    params = random_params(spec, 1)
    _, tape = nn.forward(params, spec, np.ones((2, 5)), train_mode=True, rng=nn.make_rng(0))
    g = nn.backward(params, spec, tape, np.zeros((2, 3)))
    assert all(not w.any() for w in g.weights + g.biases)


def test_backward_rejects_foreign_tape():
    spec = ARCHS["composite"]
    params = random_params(spec, 1)
    _, tape = nn.forward(params, spec[:2], np.ones((2, 5)))
    with pytest.raises(ContractError):
        nn.backward(params, spec, tape, np.zeros((2, 6)))


# -- init / spec --------------------------------------------------------------

def test_init_deterministic_and_zero_bias():
    spec = nn.default_architecture(16, 4)
    a, b = nn.init_network(spec, 9), nn.init_network(spec, 9)
    assert nn.checkpoint_bytes(a) == nn.checkpoint_bytes(b)
    assert all(np.all(bias == 0.0) for bias in a.biases)
    assert a.groups == ["backbone", "backbone", "transfer"]


def test_init_weight_statistics():
    w = nn.init_network([dense(100, 100)], 5).weights[0].ravel()
    assert 0.009 <= w.std() <= 0.011
    assert abs(w.mean()) <= 3 * 0.01 / np.sqrt(w.size)


@pytest.mark.parametrize("spec", [
    [],
    [dense(3, 4), dense(5, 2)],
    [dense(3, 4), act("softmax", 4), act("relu", 4)],
    [nn.LayerSpec("relu", 3, 4)],
    [dense(3, 3), act("dropout", 3, 1.0)],
    [nn.LayerSpec("conv", 3, 3)],
])
def test_invalid_specs_rejected(spec):
    with pytest.raises(ContractError):
        nn.init_network(spec, 0)


# -- forward ------------------------------------------------------------------

def test_identity_network():
    spec = [dense(3, 3)]
    params = nn.init_network(spec, 0)
    params.weights[0] = np.eye(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    out, tape = nn.forward(params, spec, x)
    np.testing.assert_array_equal(out, x)
    assert len(tape.inputs) == len(tape.outputs) == len(tape.masks) == 1


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        nn.forward(nn.init_network([dense(3, 2)], 0), [dense(3, 2)], np.ones((2, 4)))


def test_softmax_equal_logits():
    np.testing.assert_allclose(nn.softmax(np.full((1, 4), 7.0)), [[0.25] * 4])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalised(z, c):
    z = np.array([z])
    s = nn.softmax(z)
    np.testing.assert_allclose(nn.softmax(z + c), s, rtol=0, atol=1e-12)
    assert abs(s.sum() - 1) <= 1e-12
    assert np.all(s > 0)


def test_softmax_rows_on_network_output():
    spec = nn.default_architecture(6, 5)
    params = random_params(spec, 2, scale=3.0)
    out, _ = nn.forward(params, spec, np.random.default_rng(2).normal(size=(50, 6)) * 10)
    assert np.max(np.abs(out.sum(axis=1) - 1)) <= 1e-12
    assert np.all((out > 0) & (out < 1))


def test_dropout_only_in_train_mode():
    spec = [dense(4, 4), act("dropout", 4, 0.5)]
    params = random_params(spec, 0)
    x = np.ones((3, 4))
    eval_out, tape = nn.forward(params, spec, x)
    assert tape.masks[1] is None
    np.testing.assert_array_equal(eval_out, tape.inputs[1])
    with pytest.raises(ContractError):
        nn.forward(params, spec, x, train_mode=True)


def test_inverted_dropout_expectation():
    spec = [act("dropout", 5, 0.5)]
    params = nn.init_network(spec, 0)
    x = np.tile(np.array([[1.0, -2.0, 0.5, 3.0, 0.25]]), (10_000, 1))
    out, _ = nn.forward(params, spec, x, train_mode=True, rng=nn.make_rng(11))
    np.testing.assert_allclose(out.mean(axis=0), x[0], rtol=0.02)


# -- optimiser ----------------------------------------------------------------

def test_sgd_arithmetic_and_groups():
    spec = [dense(1, 1), dense(1, 1, "transfer")]
    params = nn.init_network(spec, 0)
    params.weights = [np.ones((1, 1)), np.ones((1, 1))]
    grads = params.zeros_like()
    grads.weights = [np.ones((1, 1)), np.ones((1, 1))]
    cfg = nn.OptimizerConfig()
    out = nn.sgd_step(params, grads, cfg)
    assert out.weights[0][0, 0] == pytest.approx(0.99)
    assert out.weights[1][0, 0] == pytest.approx(0.995)
    only_backbone = nn.sgd_step(params, grads, cfg, layer_group="backbone")
    assert only_backbone.weights[1][0, 0] == 1.0
    assert params.weights[0][0, 0] == 1.0  # input untouched


def test_sgd_zero_gradient_fixed_point():
    params = random_params(ARCHS["composite"], 0)
    out = nn.sgd_step(params, params.zeros_like(), nn.OptimizerConfig())
    np.testing.assert_array_equal(out.flat(), params.flat())


def test_two_steps_equal_one_double_step():
    params = nn.init_network([dense(2, 2)], 0)
    params.weights[0] = np.array([[1.0, -0.5], [0.25, 2.0]])  # dyadic: rounding-free
    g = params.zeros_like()
    g.weights[0][:] = 0.5
    g.biases[0][:] = 0.25
    small = nn.OptimizerConfig(learning_rate_backbone=0.125)
    big = nn.OptimizerConfig(learning_rate_backbone=0.25)
    twice = nn.sgd_step(nn.sgd_step(params, g, small), g, small)
    once = nn.sgd_step(params, g, big)
    np.testing.assert_array_equal(twice.flat(), once.flat())


def test_optimizer_rejects_non_positive_rates():
    with pytest.raises(ContractError):
        nn.OptimizerConfig(learning_rate_transfer=0.0)


def test_determinism_of_a_training_step():
    spec = nn.default_architecture(6, 3)
    x = np.random.default_rng(0).normal(size=(8, 6))

    def step():
        params = nn.init_network(spec, 4)
        out, tape = nn.forward(params, spec, x, train_mode=True, rng=nn.make_rng(4))
        g = nn.backward(params, spec, tape, out)
        return nn.checkpoint_bytes(nn.sgd_step(params, g, nn.OptimizerConfig()))

    assert step() == step()


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    spec = nn.default_architecture(7, 3, hidden=(5,))
    params = random_params(spec, 8)
    nn.save_checkpoint(tmp_path / "m.tdtl", params)
    back = nn.load_checkpoint(tmp_path / "m.tdtl")
    for a, b in zip(params.weights + params.biases, back.weights + back.biases):
        assert a.tobytes() == b.tobytes()
    assert back.groups == params.groups
    assert nn.checkpoint_bytes(back) == (tmp_path / "m.tdtl").read_bytes()


def test_checkpoint_layout():
    params = nn.init_network([dense(2, 1)], 0)
    params.weights[0] = np.array([[1.5], [-2.0]])
    params.biases[0] = np.array([0.25])
    blob = nn.checkpoint_bytes(params)
    assert blob[:4] == b"TDTL"
    assert blob[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert blob[12:20] == (2).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert np.frombuffer(blob[20:], "<f8").tolist() == [1.5, -2.0, 0.25]


@pytest.mark.parametrize("blob", [b"XXXX" + bytes(8), b"TDTL" + (2).to_bytes(4, "little") + bytes(4)])
def test_checkpoint_rejects_bad_header(blob):
    with pytest.raises(ValueError):
        nn.params_from_bytes(blob)
