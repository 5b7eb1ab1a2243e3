import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smbop.neural import (
    GRAD_CHECK_OPS, GRAD_CHECK_THRESHOLDS, ParamStore, ShapeMismatch, Tape, Tensor, UnknownOp, adam_update,
    grad_check, layer_norm_forward, linear_forward, load_checkpoint, lstm_forward, rat_block_forward,
    save_checkpoint, softmax_forward, tree_lstm_forward, _block_params,
)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def test_softmax_examples():
    p, _ = softmax_forward(np.array([0.0, 0.0]))
    assert np.array_equal(p, [0.5, 0.5])
    p, _ = softmax_forward(np.array([5.0, 7.0]), mask=np.array([True, False]))
    assert np.array_equal(p, [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    g = rng(seed)
    x = g.normal(size=(4, 7)) * 10
    mask = g.random(size=x.shape) > 0.4
    mask[:, 0] = True
    p, _ = softmax_forward(x, mask)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-12)
    assert np.all(p[~mask] == 0.0)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        linear_forward(np.zeros((2, 3)), np.zeros((4, 5)))
    with pytest.raises(ShapeMismatch):
        rat_block_forward(np.zeros((3, 8)), np.zeros((2, 2), dtype=int), _block_params(rng(), 8, 2, 4, 16), 2)
    with pytest.raises(ShapeMismatch):
        rat_block_forward(np.zeros((3, 8)), None, _block_params(rng(), 8, 3, 4, 16), 3)


@pytest.mark.parametrize("op", GRAD_CHECK_OPS)
def test_grad_checks(op):
    assert grad_check(op, 0) < GRAD_CHECK_THRESHOLDS[op]


def test_grad_check_unknown():
    with pytest.raises(UnknownOp):
        grad_check("conv2d", 0)


def _plain_attention_block(u, p, heads):
    """Reference multi-head attention block written without relation terms."""
    n, d = u.shape
    dh = d // heads
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = u @ p["WQ"][:, sl], u @ p["WK"][:, sl], u @ p["WV"][:, sl]
        e = q @ k.T / np.sqrt(dh)
        a = np.exp(e - e.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        outs.append(a @ v)
    z = np.concatenate(outs, axis=1)

    def ln(x, g, b):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    y1 = ln(u + z, p["ln1_g"], p["ln1_b"])
    f = np.maximum(y1 @ p["W1"] + p["b1"], 0) @ p["W2"] + p["b2"]
    return ln(y1 + f, p["ln2_g"], p["ln2_b"])


def test_zero_relations_match_plain_attention():
    g = rng(3)
    p = _block_params(g, 12, 3, 9, 24)
    p["rK"][:] = 0.0
    p["rV"][:] = 0.0
    u = g.normal(size=(6, 12))
    tags = g.integers(0, 9, size=(6, 6))
    out, _ = rat_block_forward(u, tags, p, 3)
    assert np.max(np.abs(out - _plain_attention_block(u, p, 3))) < 1e-12
    plain, _ = rat_block_forward(u, None, p, 3)
    assert np.max(np.abs(plain - out)) < 1e-12


def test_relations_change_the_output():
    g = rng(4)
    p = _block_params(g, 8, 2, 9, 16)
    u = g.normal(size=(5, 8))
    tags = g.integers(0, 9, size=(5, 5))
    a, _ = rat_block_forward(u, tags, p, 2)
    b, _ = rat_block_forward(u, np.zeros_like(tags), p, 2)
    assert np.max(np.abs(a - b)) > 1e-3


def test_single_element_attends_to_itself():
    g = rng(5)
    p = _block_params(g, 8, 2, 9, 16)
    p["rK"][:] = 0.0
    p["rV"][:] = 0.0
    u = g.normal(size=(1, 8))
    out, cache = rat_block_forward(u, np.zeros((1, 1), dtype=int), p, 2)
    alpha = cache[8]
    assert np.array_equal(alpha, np.ones((2, 1, 1)))
    v = u @ p["WV"]
    y1, _ = layer_norm_forward(u + v, p["ln1_g"], p["ln1_b"])
    f = np.maximum(y1 @ p["W1"] + p["b1"], 0) @ p["W2"] + p["b2"]
    expected, _ = layer_norm_forward(y1 + f, p["ln2_g"], p["ln2_b"])
    assert np.allclose(out, expected, atol=1e-12)


def test_cells_with_zero_weights_give_zero():
    d = 6
    z = np.zeros((2, d))
    (h, c), _ = lstm_forward(z, z, z, np.zeros((d, 4 * d)), np.zeros((d, 4 * d)), np.zeros(4 * d))
    assert np.array_equal(h, z) and np.array_equal(c, z)
    (h, c), _ = tree_lstm_forward(z, z, z, z, z, np.zeros((d, 5 * d)), np.zeros((d, 5 * d)), np.zeros((d, 5 * d)), np.zeros(5 * d))
    assert np.array_equal(h, z)


def test_tree_lstm_symmetric_under_tied_weights():
    g = rng(6)
    d = 5
    W = g.normal(size=(d, 5 * d))
    U = g.normal(size=(d, 5 * d))
    b = g.normal(size=5 * d)
    # tie the two forget-gate blocks so the cell cannot tell left from right
    for M in (W, U):
        M[:, 2 * d:3 * d] = M[:, d:2 * d]
    b[2 * d:3 * d] = b[d:2 * d]
    e, hl, cl, hr, cr = (g.normal(size=(3, d)) for _ in range(5))
    (h1, c1), _ = tree_lstm_forward(e, hl, cl, hr, cr, W, U, U, b)
    (h2, c2), _ = tree_lstm_forward(e, hr, cr, hl, cl, W, U, U, b)
    assert np.allclose(h1, h2, atol=1e-14) and np.allclose(c1, c2, atol=1e-14)


def test_adam_first_step():
    s = ParamStore()
    s.set("p", np.array([1.0]))
    s.grads["p"][:] = 1.0
    adam_update(s, lr=0.1)
    assert abs(s["p"][0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15
    assert s.step == 1


def test_adam_zero_gradient():
    s = ParamStore()
    s.set("p", np.array([2.0, -1.0]))
    s.m["p"][:] = 0.5
    s.v["p"][:] = 0.25
    before = s["p"].copy()
    adam_update(s, lr=0.0)
    assert np.array_equal(s["p"], before)
    assert np.allclose(s.m["p"], 0.45) and np.allclose(s.v["p"], 0.25 * 0.999)


def test_zero_grad_keeps_moments():
    s = ParamStore(1)
    s.add("w", (3, 3))
    s.grads["w"][:] = 2.0
    adam_update(s)
    m = s.m["w"].copy()
    s.zero_grad()
    assert np.array_equal(s.m["w"], m) and not s.grads["w"].any()


def test_same_seed_same_trajectory():
    def run():
        s = ParamStore(42)
        s.add("w", (4, 4))
        for k in range(5):
            s.grads["w"][:] = np.sin(s["w"] * (k + 1))
            adam_update(s, lr=0.01)
        return s["w"]
    assert np.array_equal(run(), run())


def test_init_bounds():
    s = ParamStore(0)
    w = s.add("w", (16, 8))
    assert np.all(np.abs(w) <= 1 / np.sqrt(16))
    assert not s.add("b", (8,), "zeros").any()


def test_checkpoint_round_trip(tmp_path):
    s = ParamStore(0)
    s.add("a", (3, 4))
    s.add("b.c", (2, 3, 4))
    s.grads["a"][:] = 1.0
    adam_update(s, lr=0.01)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, s, {"note": "x"})
    t, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert t.names() == s.names() and t.step == s.step
    for name in s.names():
        assert t[name].tobytes() == s[name].tobytes()
        assert t.m[name].tobytes() == s.m[name].tobytes()


def test_accumulate_checks_shapes():
    s = ParamStore()
    s.add("w", (2, 2))
    with pytest.raises(ShapeMismatch):
        s.accumulate({"w": np.zeros(3)})


def test_tape_composite_gradient():
    """A chain of tape ops checked against finite differences end to end."""
    g = rng(8)
    W = Tensor(g.normal(size=(4, 4)))
    x0 = g.normal(size=(3, 4))
    idx = [0, 2, 2]

    def loss(Wv, grad=False):
        tape = Tape(enabled=grad)
        Wt = W if grad else Tensor(Wv, requires_grad=False)
        x = tape.const(x0)
        h = tape.linear(x, Wt)
        r = tape.rows(h, idx)
        s = tape.ffn_score(r, Wt, tape.const(np.ones(4)))
        out = tape.marginal_nll(s, [1, 2])
        if grad:
            tape.backward(out)
        return float(out.value)

    loss(W.value, grad=True)
    num = np.zeros_like(W.value)
    for i in np.ndindex(W.value.shape):
        Wp, Wm = W.value.copy(), W.value.copy()
        Wp[i] += 1e-6
        Wm[i] -= 1e-6
        num[i] = (loss(Wp) - loss(Wm)) / 2e-6
    assert np.max(np.abs(num - W.grad)) < 1e-7


def test_disabled_tape_records_nothing():
    tape = Tape(enabled=False)
    a = Tensor(np.ones((2, 2)))
    out = tape.linear(a, a)
    assert not out.requires_grad and tape._backward == []
