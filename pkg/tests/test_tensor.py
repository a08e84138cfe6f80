import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feedloc.core import ShapeMismatch
from feedloc.tensor import autograd as ag
from feedloc.tensor import checkpoint, nn
from feedloc.tensor.autograd import DisconnectedGraph, NumericFault, Tensor
from feedloc.tensor.gradcheck import check_gradients, grad_errors
from feedloc.tensor.optim import Adam, AdamState, adam_step


@pytest.fixture
def f64():
    with ag.precision(np.float64):
        yield


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# --- forward ---------------------------------------------------------------

def test_sigmoid_zero():
    assert ag.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]


def test_softmax_constant_row_is_uniform():
    y = ag.softmax(Tensor(np.full((2, 4), 3.7)))
    np.testing.assert_allclose(y.data, 0.25, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    y = ag.softmax(Tensor(np.array([row, row[::-1]])))
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-6)


def test_matmul_loop_oracle(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    ref = [[sum(a[i, k] * b[k, j] for k in range(3)) for j in range(2)] for i in range(2)]
    with ag.precision(np.float64):
        got = ag.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_two_sided_broadcast_rejected():
    with pytest.raises(ShapeMismatch):
        ag.add(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 4))))


def test_bias_broadcast_allowed():
    y = ag.add(Tensor(np.ones((2, 3))), Tensor(np.arange(3.0)))
    assert y.data.tolist() == [[1, 2, 3], [1, 2, 3]]


def test_attention_matches_definition(rng, f64):
    q, k, v = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 6))
    mask = np.zeros((2, 3, 5))
    mask[:, :, -1] = -1e9
    out = ag.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
    s = q @ k.transpose(0, 2, 1) / 2.0 + mask
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    np.testing.assert_allclose(out, p @ v, atol=1e-12)
    assert np.all(p[..., -1] < 1e-300)


def test_layer_norm_zero_mean_unit_var(rng, f64):
    x = Tensor(rng.normal(3, 5, size=(4, 16)))
    y = ag.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(1), 1, atol=1e-5)


# --- losses ----------------------------------------------------------------

def test_bce_perfect_prediction_near_zero():
    assert ag.bce_loss(Tensor(np.ones(4)), np.ones(4)).item() < 1e-6


def test_bce_half_is_ln2():
    t = np.array([0, 1, 1, 0, 1], dtype=float)
    assert ag.bce_loss(Tensor(np.full(5, 0.5)), t).item() == pytest.approx(math.log(2), abs=1e-6)


def test_bce_loop_oracle(rng, f64):
    p, t = rng.uniform(0.01, 0.99, 20), rng.uniform(0, 1, 20)
    m = rng.uniform(size=20) < 0.6
    terms = [-(t[i] * math.log(p[i]) + (1 - t[i]) * math.log(1 - p[i])) for i in range(20) if m[i]]
    got = ag.bce_loss(Tensor(p), t, m).item()
    assert got == pytest.approx(sum(terms) / len(terms), abs=1e-6)


def test_mse_examples():
    t = np.array([0.0, 1.0, -2.0])
    assert ag.mse_loss(Tensor(t), t).item() == 0.0
    assert ag.mse_loss(Tensor(t + 2.0), t).item() == pytest.approx(4.0)


def test_mse_loop_oracle(rng, f64):
    p, t = rng.normal(size=15), rng.normal(size=15)
    m = np.arange(15) % 3 != 0
    terms = [(p[i] - t[i]) ** 2 for i in range(15) if m[i]]
    assert ag.mse_loss(Tensor(p), t, m).item() == pytest.approx(sum(terms) / len(terms), abs=1e-6)


def test_empty_mask_gives_zero_loss():
    x = Tensor(np.full(3, 0.3), requires_grad=True)
    loss = ag.bce_loss(x, np.ones(3), np.zeros(3))
    loss.backward()
    assert loss.item() == 0.0 and not x.grad.any()


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ag.bce_loss(Tensor(np.full(3, 0.5)), np.ones(4))
    with pytest.raises(ShapeMismatch):
        ag.mse_loss(Tensor(np.zeros(3)), np.zeros(3), np.ones(2))


# --- backward --------------------------------------------------------------

def test_sum_grad_all_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert x.grad.tolist() == [[1, 1, 1], [1, 1, 1]]


def test_scalar_product_grad():
    x, y = Tensor(3.0, requires_grad=True), Tensor(-2.0, requires_grad=True)
    (x * y).backward()
    assert x.grad == -2.0 and y.grad == 3.0


def test_gradients_accumulate_without_zeroing():
    x = Tensor(np.ones(2), requires_grad=True)
    ag.scale(x, 3.0).sum().backward()
    ag.scale(x, 3.0).sum().backward()
    assert x.grad.tolist() == [6.0, 6.0]


def test_shared_node_visited_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(8.0)


def test_disconnected_leaf():
    x, y = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(DisconnectedGraph):
        ag.backward(x.sum(), [x, y])
    with pytest.raises(DisconnectedGraph):
        ag.backward(Tensor(np.ones(2)).sum())


def test_backward_needs_scalar():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones(2), requires_grad=True).backward()


def test_numeric_fault_in_forward_names_op():
    with np.errstate(all="ignore"), pytest.raises(NumericFault, match="log"):
        ag.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(NumericFault):
        Tensor([np.nan])


def test_numeric_fault_in_backward():
    # forward log is finite on a float32 subnormal, its gradient 1/x is not
    x = Tensor(np.array([1e-40, 1.0], dtype=np.float32), requires_grad=True)
    loss = ag.log(x).sum()
    with np.errstate(all="ignore"), pytest.raises(NumericFault, match="log"):
        loss.backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ag.no_grad():
        y = ag.relu(x)
    assert not y.requires_grad and y.parents == ()


# --- gradient checks (64-bit, h=1e-5, 1e-3 relative) -----------------------

UNARY = {
    "exp": ag.exp, "relu": ag.relu, "gelu": ag.gelu, "sigmoid": ag.sigmoid, "tanh": ag.tanh,
    "abs": ag.abs_, "neg": ag.neg, "scale": lambda t: ag.scale(t, -1.7),
    "clamp": lambda t: ag.clamp(t, -0.5, 0.5), "softmax": ag.softmax,
    "softmax_axis0": lambda t: ag.softmax(t, axis=0), "transpose": lambda t: t.transpose(),
    "reshape": lambda t: t.reshape(12), "sum_axis": lambda t: t.sum(axis=1),
    "mean_axis": lambda t: t.mean(axis=0, keepdims=True), "slice": lambda t: t[1:, ::2],
    "fancy_index": lambda t: t[[0, 2, 2]],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_gradcheck_unary(name, rng, f64):
    x = _leaf(rng, 3, 4)
    if name in ("relu", "abs", "clamp"):
        # keep away from kinks so finite differences are well defined
        x.data = np.sign(x.data) * (0.1 + np.abs(x.data))
        x.data[np.abs(np.abs(x.data) - 0.5) < 0.05] = 0.3
    w = rng.normal(size=UNARY[name](x).shape)
    assert check_gradients(lambda: (UNARY[name](x) * w).sum(), [x])


def test_gradcheck_log(rng, f64):
    x = _leaf(rng, 5, lo=0.5, hi=2.0)
    assert check_gradients(lambda: ag.log(x).sum(), [x])


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_gradcheck_binary_with_bias(op, rng, f64):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    fn = getattr(ag, op)
    w = rng.normal(size=(3, 4))
    assert check_gradients(lambda: (fn(a, b) * w).sum(), [a, b])


def test_gradcheck_matmul_and_bmm(rng, f64):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    c = _leaf(rng, 2, 5, 3)
    assert check_gradients(lambda: ag.sigmoid(ag.matmul(ag.matmul(a, b), c)).sum(), [a, b, c])


def test_gradcheck_concat(rng, f64):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    w = rng.normal(size=(2, 5))
    assert check_gradients(lambda: (ag.concat([a, b], axis=1) * w).sum(), [a, b])


def test_gradcheck_layer_norm(rng, f64):
    x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    w = rng.normal(size=(3, 6))
    assert check_gradients(lambda: (ag.layer_norm(x, g, b) * w).sum(), [x, g, b])


def test_gradcheck_attention_with_mask(rng, f64):
    q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 3)
    mask = np.where(rng.uniform(size=(2, 1, 5)) < 0.3, -1e9, 0.0)
    mask[..., 0] = 0.0
    w = rng.normal(size=(2, 3, 3))
    assert check_gradients(lambda: (ag.scaled_dot_attention(q, k, v, mask) * w).sum(), [q, k, v])


def test_gradcheck_losses(rng, f64):
    x = _leaf(rng, 8)
    t, m = rng.uniform(size=8), rng.uniform(size=8) < 0.7
    assert check_gradients(lambda: ag.bce_loss(ag.sigmoid(x), t, m), [x])
    assert check_gradients(lambda: ag.mse_loss(x, t, m), [x])
    assert check_gradients(lambda: ag.l1_loss(x, t + 2.0, m), [x])


def test_gradcheck_three_layer_mlp(rng, f64):
    layers = [nn.Linear(5, 7, rng), nn.Linear(7, 6, rng), nn.Linear(6, 1, rng)]
    for layer in layers:
        layer.bias.data = rng.normal(scale=0.1, size=layer.bias.shape)
    x = Tensor(rng.normal(size=(4, 5)))
    t = rng.uniform(size=(4, 1))

    def loss():
        h = ag.gelu(layers[0](x))
        h = ag.tanh(layers[1](h))
        return ag.bce_loss(ag.sigmoid(layers[2](h)), t)
    params = [p for layer in layers for p in layer.parameters()]
    assert max(grad_errors(loss, params)) < 1e-3


@pytest.mark.parametrize("block", ["encoder", "decoder", "head"])
def test_gradcheck_model_blocks(block, rng, f64):
    d = 8
    x = _leaf(rng, 2, 3, d)
    mem = Tensor(rng.normal(size=(2, 4, d)))
    mask = np.array([[True, True, False], [True, True, True]])
    if block == "encoder":
        mod = nn.EncoderLayer(d, 2, rng)
        fwd = lambda: mod(x, mask)  # noqa: E731
    elif block == "decoder":
        mod = nn.DecoderLayer(d, 2, rng)
        fwd = lambda: mod(x, mem, mask, np.ones((2, 4), bool))  # noqa: E731
    else:
        mod = nn.MLPHead(d, 6, rng)
        fwd = lambda: mod(x)  # noqa: E731
    w = rng.normal(size=fwd().shape)
    assert max(grad_errors(lambda: (fwd() * w).sum(), mod.parameters() + [x])) < 1e-3


def test_gradcheck_requires_float64(rng):
    x = Tensor(rng.normal(size=3).astype(np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_errors(lambda: x.sum(), [x])


# --- Adam ------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    st_ = AdamState([np.zeros(3)], [np.zeros(3)])
    adam_step([p], [np.zeros(3)], st_, lr=0.1)
    assert p.tolist() == [1.0, -2.0, 3.0]


def test_adam_first_step_is_signed_lr():
    p = np.zeros(4)
    g = np.array([0.3, -5.0, 1e-3, -0.02])
    adam_step([p], [g], AdamState([np.zeros(4)], [np.zeros(4)]), lr=0.01, eps=1e-8)
    np.testing.assert_allclose(p, -np.sign(g) * 0.01, rtol=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step([np.zeros(3)], [np.zeros(2)], AdamState([np.zeros(3)], [np.zeros(3)]), lr=0.1)
    with pytest.raises(ShapeMismatch):
        adam_step([np.zeros(3)], [np.zeros(3)], AdamState([], []), lr=0.1)


def test_adam_quadratic_decreases(rng):
    # far start, small lr: 100 steps stay on the descending slope
    a = np.diag([1.0, 4.0, 9.0])
    x = Tensor(np.array([5.0, -4.0, 3.0]), requires_grad=True)
    opt = Adam([x], lr=0.01)
    losses = []
    for _ in range(100):
        opt.zero_grad()
        loss = (x * ag.matmul(x.reshape(1, 3), Tensor(a)).reshape(3)).sum()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a_ for a_, b in zip(losses[5:], losses[6:]))


def test_adam_deterministic(rng):
    def run():
        x = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for _ in range(20):
            opt.zero_grad()
            ag.mse_loss(ag.tanh(x), np.full(5, 0.3)).backward()
            opt.step()
        return x.data.tobytes()
    assert run() == run()


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    state = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
             "b": np.float32(rng.normal(size=5)), "s": np.array(1.5, dtype=np.float32)}
    checkpoint.save(tmp_path / "m.ckpt", state, {"kind": "x"})
    back, meta = checkpoint.load(tmp_path / "m.ckpt")
    assert meta == {"kind": "x"} and list(back) == list(state)
    for k in state:
        assert back[k].tobytes() == np.asarray(state[k]).tobytes()


def test_checkpoint_corruption(tmp_path):
    buf = checkpoint.encode({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.decode(buf[:-3])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.decode(b"nope" + buf[4:])
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.decode(buf + b"\0")


def test_module_state_dict_round_trip(rng):
    a, b = nn.EncoderLayer(8, 2, rng), nn.EncoderLayer(8, 2, np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    with pytest.raises(KeyError):
        b.load_state_dict({})
