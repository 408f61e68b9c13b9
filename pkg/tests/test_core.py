import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from effscale import core
from effscale.core import Tape, Tensor


def grads_of(fn, *arrs):
    ts = [Tensor(a, requires_grad=True) for a in arrs]
    with Tape() as tape:
        out = fn(*ts)
    tape.backward(out)
    return out, [t.grad for t in ts]


# ---------------------------------------------------------------------------
# precision and tensors

def test_precision_mode_is_scoped():
    assert core.get_dtype() is np.float32
    with core.precision(64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_bad_precision_rejected():
    with pytest.raises(ValueError):
        core.set_precision(16)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_result_is_an_error():
    with pytest.raises(FloatingPointError):
        core.mul(Tensor([1e30]), Tensor([1e30]))


def test_backward_needs_loss_on_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        core.sum_all(x)
    with pytest.raises(ValueError):
        tape.backward(Tensor(3.0))


def test_leaf_grad_zero_when_unused_branch(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        core.mul(y, 2.0)
        out = core.sum_all(x)
    tape.backward(out)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_gradients_accumulate_over_reuse(f64):
    _, (g,) = grads_of(lambda x: core.sum_all(core.mul(x, x)), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(g, [2.0, -4.0, 6.0])


def test_backward_runs_in_reverse_order(f64):
    order = []
    x = Tensor([1.0], requires_grad=True)

    def traced(name, t):
        out = core.scale(t, 1.0)
        node = core._active_tape().nodes[-1]
        inner = node.backward

        def bw(g):
            order.append(name)
            return inner(g)
        node.backward = bw
        return out

    with Tape() as tape:
        a = traced("first", x)
        b = traced("second", a)
        out = core.sum_all(traced("third", b))
    tape.backward(out)
    assert order == ["third", "second", "first"]


# ---------------------------------------------------------------------------
# matmul and elementwise

def test_matmul_identity():
    out = core.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_row_col():
    assert core.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_triple_loop_oracle(f64):
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(core.matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        core.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_and_silu_values(f64):
    assert core.add(Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]
    assert core.silu(Tensor([0.0])).data[0] == 0.0
    assert core.silu(Tensor([1.0])).data[0] == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-15)
    assert core.silu(Tensor([1.0])).data[0] == pytest.approx(0.7310585786300049)


def test_silu_extreme_inputs_are_finite(f64):
    out = core.silu(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [-0.0, 1000.0])


def test_broadcast_limited_to_scalar_and_row():
    with pytest.raises(ValueError):
        core.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


@pytest.mark.parametrize("op", [core.add, core.sub, core.mul])
@pytest.mark.parametrize("shape_b", [(3, 4), (4,), (1,)])
def test_binary_op_gradients(f64, op, shape_b):
    rng = np.random.default_rng(0)
    pts = [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, shape_b)]
    assert core.gradient_check(lambda ts: core.sum_all(core.mul(op(ts[0], ts[1]), ts[0])), pts) <= 1e-6


@pytest.mark.parametrize("name", ["silu", "scale", "reshape", "transpose"])
def test_unary_op_gradients(f64, name):
    fns = {
        "silu": core.silu,
        "scale": lambda t: core.scale(t, -1.7),
        "reshape": lambda t: core.reshape(t, (4, 3)),
        "transpose": lambda t: core.transpose(t),
    }
    rng = np.random.default_rng(2)
    x0, w = rng.uniform(-2, 2, (3, 4)), Tensor(rng.normal(size=(3, 4)))

    def f(t):
        y = fns[name](t)
        return core.sum_all(core.mul(core.reshape(y, (3, 4)), w))
    assert core.gradient_check(f, x0) <= 1e-6


def test_matmul_gradient(f64):
    rng = np.random.default_rng(3)
    pts = [rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4, 5))]
    w = Tensor(rng.normal(size=(2, 3, 5)))
    assert core.gradient_check(lambda ts: core.sum_all(core.mul(core.matmul(ts[0], ts[1]), w)), pts) <= 1e-6


def test_embedding_gradient_accumulates_repeats(f64):
    table = np.arange(12.0).reshape(4, 3)
    ids = np.array([[1, 1], [3, 0]])
    out, (g,) = grads_of(lambda t: core.sum_all(core.embedding(t, ids)), table)
    np.testing.assert_array_equal(out.data, table[ids].sum())
    np.testing.assert_array_equal(g, [[1, 1, 1], [2, 2, 2], [0, 0, 0], [1, 1, 1]])
    with pytest.raises(IndexError):
        core.embedding(Tensor(table), np.array([4]))


# ---------------------------------------------------------------------------
# rmsnorm

def test_rmsnorm_unit_rms(f64):
    out = core.rmsnorm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor(np.ones(4)), epsilon=0.0)
    np.testing.assert_allclose(out.data, [1, 1, 1, 1], rtol=1e-15)
    out = core.rmsnorm(Tensor([2.0, 2.0]), Tensor([1.0, 1.0]), epsilon=0.0)
    np.testing.assert_allclose(out.data, [1, 1], rtol=1e-15)


def test_rmsnorm_gradient(f64):
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(size=(2, 4)))
    pts = [rng.uniform(-2, 2, (2, 4)), rng.uniform(-2, 2, 4)]
    assert core.gradient_check(lambda ts: core.sum_all(core.mul(core.rmsnorm(ts[0], ts[1]), w)), pts) <= 1e-6


def test_rmsnorm_rejects_bad_gain():
    with pytest.raises(ValueError):
        core.rmsnorm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))


# ---------------------------------------------------------------------------
# attention

def rope_oracle(x, theta=10000.0):
    """Rotate each (i, i + dh/2) pair by angle pos * theta^(-2i/dh)."""
    t, dh = x.shape[-2], x.shape[-1]
    out = np.array(x, dtype=np.float64)
    for pos in range(t):
        for i in range(dh // 2):
            ang = pos * theta ** (-2.0 * i / dh)
            a, b = x[..., pos, i], x[..., pos, i + dh // 2]
            out[..., pos, i] = a * math.cos(ang) - b * math.sin(ang)
            out[..., pos, i + dh // 2] = b * math.cos(ang) + a * math.sin(ang)
    return out


def attention_oracle(q, k, v):
    h, t, dh = q.shape
    qr, kr = rope_oracle(q), rope_oracle(k)
    out = np.zeros_like(v)
    for head in range(h):
        for i in range(t):
            scores = [sum(qr[head, i, c] * kr[head, j, c] for c in range(dh)) / math.sqrt(dh)
                      for j in range(i + 1)]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            for j in range(i + 1):
                out[head, i] += w[j] / z * v[head, j]
    return out


def test_attention_single_position_returns_v(f64):
    rng = np.random.default_rng(5)
    q, k, v = (rng.normal(size=(2, 1, 4)) for _ in range(3))
    np.testing.assert_allclose(core.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data, v, rtol=1e-14)


def test_attention_uniform_scores_give_running_mean(f64):
    rng = np.random.default_rng(6)
    k, v = rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 5, 4))
    out = core.causal_attention(Tensor(np.zeros((1, 5, 4))), Tensor(k), Tensor(v)).data
    ref = np.cumsum(v, axis=1) / np.arange(1, 6)[None, :, None]
    np.testing.assert_allclose(out, ref, rtol=1e-13)


def test_attention_matches_dense_oracle(f64):
    rng = np.random.default_rng(7)
    q, k, v = (rng.normal(size=(1, 3, 4)) for _ in range(3))
    out = core.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, attention_oracle(q, k, v), rtol=1e-12, atol=1e-14)


def test_attention_gradient(f64):
    rng = np.random.default_rng(8)
    pts = [rng.uniform(-2, 2, (2, 2, 4, 6)) for _ in range(3)]
    w = Tensor(rng.normal(size=(2, 2, 4, 6)))
    err = core.gradient_check(lambda ts: core.sum_all(core.mul(core.causal_attention(*ts), w)), pts)
    assert err <= 1e-6


@given(st.integers(0, 5), st.integers(0, 2**31 - 1))
def test_attention_is_causal(pos, seed):
    with core.precision(64):
        rng = np.random.default_rng(seed)
        q, k, v = (rng.normal(size=(2, 6, 4)) for _ in range(3))
        base = core.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
        k2, v2 = k.copy(), v.copy()
        k2[:, pos + 1:] += rng.normal(size=k2[:, pos + 1:].shape)
        v2[:, pos + 1:] += rng.normal(size=v2[:, pos + 1:].shape)
        out = core.causal_attention(Tensor(q), Tensor(k2), Tensor(v2)).data
        np.testing.assert_array_equal(out[:, : pos + 1], base[:, : pos + 1])


def test_rope_needs_even_head_dim():
    with pytest.raises(ValueError):
        core.causal_attention(*(Tensor(np.ones((1, 2, 3))) for _ in range(3)))


# ---------------------------------------------------------------------------
# cross entropy

def test_cross_entropy_uniform_is_log_vocab(f64):
    loss = core.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(math.log(4), rel=1e-15)


def test_cross_entropy_huge_margin_is_zero(f64):
    logits = np.zeros((2, 5))
    logits[0, 2] = logits[1, 4] = 1e9
    assert core.cross_entropy(Tensor(logits), np.array([2, 4])).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_high_precision_oracle(f64):
    rng = np.random.default_rng(9)
    logits, targets = rng.normal(scale=3, size=(2, 5)), np.array([3, 0])
    mpmath.mp.dps = 50
    ref = sum(mpmath.log(sum(mpmath.exp(mpmath.mpf(z)) for z in row)) - mpmath.mpf(row[t])
              for row, t in zip(logits, targets)) / 2
    assert core.cross_entropy(Tensor(logits), targets).item() == pytest.approx(float(ref), rel=1e-14)


def test_cross_entropy_gradient(f64):
    rng = np.random.default_rng(10)
    targets = np.array([[1, 4, 0], [2, 2, 3]])
    assert core.gradient_check(lambda t: core.cross_entropy(t, targets), rng.uniform(-2, 2, (2, 3, 5))) <= 1e-6


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(IndexError):
        core.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# ---------------------------------------------------------------------------
# custom_grad and gradient_check

def test_custom_grad_forward_and_identity_backward(f64):
    w0 = np.array([0.3, -1.2, 2.5])
    q = np.round(w0)
    w = Tensor(w0, requires_grad=True)
    with Tape() as tape:
        y = core.custom_grad(q, w)
        out = core.sum_all(y)
    tape.backward(out)
    np.testing.assert_array_equal(y.data, q)
    np.testing.assert_array_equal(w.grad, np.ones(3))


def test_custom_grad_chain_rule_oracle(f64):
    """d loss / d w through STE equals d loss / d w_q at the quantized point."""
    rng = np.random.default_rng(11)
    x, target = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    w0 = rng.normal(size=(3, 2))
    wq = np.round(w0 * 2) / 2
    w = Tensor(w0, requires_grad=True)
    with Tape() as tape:
        pred = core.matmul(Tensor(x), core.custom_grad(wq, w))
        diff = core.sub(pred, Tensor(target))
        loss = core.sum_all(core.mul(diff, diff))
    tape.backward(loss)
    manual = 2 * x.T @ (x @ wq - target)
    np.testing.assert_allclose(w.grad, manual, rtol=1e-13)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-5, 5)))
def test_custom_grad_equals_identity_path(x):
    with core.precision(64):
        weights = np.linspace(-1, 1, x.size)
        _, (g_id,) = grads_of(lambda t: core.sum_all(core.mul(t, Tensor(weights))), x)
        _, (g_ste,) = grads_of(lambda t: core.sum_all(core.mul(core.custom_grad(np.sign(x), t), Tensor(weights))), x)
        np.testing.assert_array_equal(g_ste, g_id)


def test_gradient_check_square(f64):
    assert core.gradient_check(lambda t: core.sum_all(core.mul(t, t)), np.array([3.0])) < 1e-9


def test_gradient_check_silu(f64):
    x = np.random.default_rng(12).uniform(-2, 2, 8)
    assert core.gradient_check(lambda t: core.sum_all(core.silu(t)), x) <= 1e-6


def test_gradient_check_detects_wrong_gradient(f64):
    def bad(t):
        out = core.silu(t)
        tape = core._active_tape()
        if tape is not None:
            tape.nodes[-1].backward = lambda g: (g,)
        return core.sum_all(out)
    assert core.gradient_check(bad, np.array([0.5, 1.5])) > 1e-2


def test_gradient_check_requires_64_bit():
    with pytest.raises(RuntimeError):
        core.gradient_check(lambda t: core.sum_all(t), np.array([1.0]))


def test_ops_are_deterministic():
    rng = np.random.default_rng(13)
    q, k, v = (rng.normal(size=(2, 8, 4)).astype(np.float32) for _ in range(3))
    runs = []
    for _ in range(2):
        out, grads = grads_of(lambda a, b, c: core.sum_all(core.causal_attention(a, b, c)), q, k, v)
        runs.append((out.data.tobytes(), [g.tobytes() for g in grads]))
    assert runs[0] == runs[1]
