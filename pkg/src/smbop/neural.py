"""Dense kernels with explicit backward passes, a recording tape,
parameter storage, Adam and finite-difference gradient checks.

Every kernel comes as a ``*_forward`` returning ``(out, cache)`` and a
``*_backward(dout, cache)`` returning input/parameter gradients.  The
:class:`Tape` only sequences those hand-written backward passes; there is
no general autodiff.  All math is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

LN_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class UnknownOp(KeyError):
    pass


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatch(msg)


# -- elementwise / dense kernels ---------------------------------------------

def linear_forward(x, W, b=None):
    _check(x.shape[-1] == W.shape[0], f"linear: x {x.shape} vs W {W.shape}")
    out = x @ W
    if b is not None:
        _check(b.shape == (W.shape[1],), f"linear: bias {b.shape} vs W {W.shape}")
        out = out + b
    return out, (x, W, b is not None)


def linear_backward(dout, cache):
    x, W, has_b = cache
    dx = dout @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dW = x2.T @ d2
    db = d2.sum(axis=0) if has_b else None
    return dx, dW, db


def layer_norm_forward(x, g, b):
    _check(g.shape == (x.shape[-1],) and b.shape == g.shape, "layer_norm: gain/bias shape")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def layer_norm_backward(dout, cache):
    xh, inv, g = cache
    n = xh.shape[-1]
    d2 = dout.reshape(-1, n)
    dg = (d2 * xh.reshape(-1, n)).sum(axis=0)
    db = d2.sum(axis=0)
    dxh = dout * g
    dx = inv / n * (n * dxh - dxh.sum(axis=-1, keepdims=True) - xh * (dxh * xh).sum(axis=-1, keepdims=True))
    return dx, dg, db


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return dout * (1.0 - y * y)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def softmax_forward(x, mask=None):
    """Row softmax over the last axis; ``mask`` False entries get probability 0."""
    if mask is not None:
        _check(mask.shape == x.shape, "softmax: mask shape")
        z = np.where(mask, x, -np.inf)
    else:
        z = x
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    return p, p


def softmax_backward(dout, p):
    return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


def log_softmax_forward(x):
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    return out, np.exp(out)


def log_softmax_backward(dout, p):
    return dout - p * dout.sum(axis=-1, keepdims=True)


# -- relation-aware transformer block ------------------------------------------

BLOCK_PARAMS = ("WQ", "WK", "WV", "rK", "rV", "ln1_g", "ln1_b", "W1", "b1", "W2", "b2", "ln2_g", "ln2_b")


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def rat_block_forward(u, tags, p: Mapping[str, np.ndarray], heads: int):
    """Relation-aware self-attention followed by the standard post-norm block.

    ``tags`` is an ``(n, n)`` int matrix of relation ids or None for plain
    attention; ``p["rK"]``/``p["rV"]`` have shape ``(heads, n_relations, d/heads)``.
    """
    n, d = u.shape
    _check(d % heads == 0, f"dim {d} not divisible by {heads} heads")
    _check(p["WQ"].shape == (d, d), f"WQ {p['WQ'].shape} vs dim {d}")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    Q = _split_heads(u @ p["WQ"], heads)
    K = _split_heads(u @ p["WK"], heads)
    V = _split_heads(u @ p["WV"], heads)
    e = Q @ K.transpose(0, 2, 1)
    rows = np.arange(n)[:, None]
    onehot = None
    if tags is not None:
        _check(tags.shape == (n, n), f"relation matrix {tags.shape} vs sequence {n}")
        n_rel = p["rK"].shape[1]
        onehot = np.zeros((n, n, n_rel))
        onehot[rows, np.arange(n)[None, :], tags] = 1.0
        QR = Q @ p["rK"].transpose(0, 2, 1)
        e = e + QR[:, rows, tags]
    e = e * scale
    alpha, _ = softmax_forward(e)
    out = alpha @ V
    A = None
    if tags is not None:
        A = np.einsum("hij,ijr->hir", alpha, onehot)
        out = out + A @ p["rV"]
    z = _merge_heads(out)
    y1, ln1 = layer_norm_forward(u + z, p["ln1_g"], p["ln1_b"])
    h1 = y1 @ p["W1"] + p["b1"]
    a1, relu_mask = relu_forward(h1)
    f = a1 @ p["W2"] + p["b2"]
    y2, ln2 = layer_norm_forward(y1 + f, p["ln2_g"], p["ln2_b"])
    cache = (u, tags, onehot, heads, scale, Q, K, V, alpha, A, y1, ln1, a1, relu_mask, ln2, p)
    return y2, cache


def rat_block_backward(dy, cache):
    u, tags, onehot, heads, scale, Q, K, V, alpha, A, y1, ln1, a1, relu_mask, ln2, p = cache
    n = u.shape[0]
    rows = np.arange(n)[:, None]
    g = {}
    ds, g["ln2_g"], g["ln2_b"] = layer_norm_backward(dy, ln2)
    g["W2"] = a1.T @ ds
    g["b2"] = ds.sum(axis=0)
    dh1 = relu_backward(ds @ p["W2"].T, relu_mask)
    g["W1"] = y1.T @ dh1
    g["b1"] = dh1.sum(axis=0)
    dy1 = ds + dh1 @ p["W1"].T
    dpre, g["ln1_g"], g["ln1_b"] = layer_norm_backward(dy1, ln1)
    du = dpre.copy()
    dout = _split_heads(dpre, heads)
    dalpha = dout @ V.transpose(0, 2, 1)
    dV = alpha.transpose(0, 2, 1) @ dout
    if tags is not None:
        dA = dout @ p["rV"].transpose(0, 2, 1)
        g["rV"] = A.transpose(0, 2, 1) @ dout
        dalpha = dalpha + dA[:, rows, tags]
    de = softmax_backward(dalpha, alpha) * scale
    dQ = de @ K
    dK = de.transpose(0, 2, 1) @ Q
    if tags is not None:
        dQR = np.einsum("hij,ijr->hir", de, onehot)
        dQ = dQ + dQR @ p["rK"]
        g["rK"] = dQR.transpose(0, 2, 1) @ Q
    else:
        g["rK"] = np.zeros_like(p["rK"]) if "rK" in p else None
        g["rV"] = np.zeros_like(p["rV"]) if "rV" in p else None
    dQm, dKm, dVm = _merge_heads(dQ), _merge_heads(dK), _merge_heads(dV)
    g["WQ"] = u.T @ dQm
    g["WK"] = u.T @ dKm
    g["WV"] = u.T @ dVm
    du += dQm @ p["WQ"].T + dKm @ p["WK"].T + dVm @ p["WV"].T
    return du, {k: v for k, v in g.items() if v is not None}


# -- recurrent cells ---------------------------------------------------------

def lstm_forward(e, h0, c0, Wx, Wh, b):
    """Batched LSTM cell; gate order (input, forget, output, candidate)."""
    d = h0.shape[-1]
    _check(Wx.shape == (e.shape[-1], 4 * d) and Wh.shape == (d, 4 * d), "lstm weight shapes")
    _check(e.shape[:-1] == h0.shape[:-1] == c0.shape[:-1], "lstm batch shapes")
    gates = e @ Wx + h0 @ Wh + b
    i = sigmoid(gates[..., :d])
    f = sigmoid(gates[..., d:2 * d])
    o = sigmoid(gates[..., 2 * d:3 * d])
    cand = np.tanh(gates[..., 3 * d:])
    c = f * c0 + i * cand
    tc = np.tanh(c)
    h = o * tc
    return (h, c), (e, h0, c0, Wx, Wh, i, f, o, cand, tc)


def lstm_backward(dh, dc, cache):
    e, h0, c0, Wx, Wh, i, f, o, cand, tc = cache
    dc_tot = dc + dh * o * (1.0 - tc * tc)
    dgates = np.concatenate(
        [
            dc_tot * cand * i * (1.0 - i),
            dc_tot * c0 * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc_tot * i * (1.0 - cand * cand),
        ],
        axis=-1,
    )
    dWx = e.T @ dgates
    dWh = h0.T @ dgates
    db = dgates.sum(axis=0)
    return dgates @ Wx.T, dgates @ Wh.T, dc_tot * f, dWx, dWh, db


def tree_lstm_forward(e, hl, cl, hr, cr, W, UL, UR, b):
    """Binary tree-LSTM cell with a forget gate per child.

    Gate blocks: input, forget-left, forget-right, output, candidate.  Left
    and right children have separate recurrent matrices ``UL``/``UR``.
    """
    d = hl.shape[-1]
    _check(W.shape == (e.shape[-1], 5 * d) and UL.shape == UR.shape == (d, 5 * d), "tree_lstm weight shapes")
    _check(hl.shape == hr.shape == cl.shape == cr.shape, "tree_lstm child shapes")
    gates = e @ W + hl @ UL + hr @ UR + b
    i = sigmoid(gates[..., :d])
    fl = sigmoid(gates[..., d:2 * d])
    fr = sigmoid(gates[..., 2 * d:3 * d])
    o = sigmoid(gates[..., 3 * d:4 * d])
    cand = np.tanh(gates[..., 4 * d:])
    c = i * cand + fl * cl + fr * cr
    tc = np.tanh(c)
    return (o * tc, c), (e, hl, cl, hr, cr, W, UL, UR, i, fl, fr, o, cand, tc)


def tree_lstm_backward(dh, dc, cache):
    e, hl, cl, hr, cr, W, UL, UR, i, fl, fr, o, cand, tc = cache
    dc_tot = dc + dh * o * (1.0 - tc * tc)
    dgates = np.concatenate(
        [
            dc_tot * cand * i * (1.0 - i),
            dc_tot * cl * fl * (1.0 - fl),
            dc_tot * cr * fr * (1.0 - fr),
            dh * tc * o * (1.0 - o),
            dc_tot * i * (1.0 - cand * cand),
        ],
        axis=-1,
    )
    grads = {
        "e": dgates @ W.T,
        "hl": dgates @ UL.T,
        "hr": dgates @ UR.T,
        "cl": dc_tot * fl,
        "cr": dc_tot * fr,
        "W": e.T @ dgates,
        "UL": hl.T @ dgates,
        "UR": hr.T @ dgates,
        "b": dgates.sum(axis=0),
    }
    return grads


# -- scorers -----------------------------------------------------------------

def frontier_forward(Z, Wu, Wb):
    """Unary scores ``w_u . z_i`` (k, U) and bilinear scores ``z_i W_b z_j`` (B, k, k)."""
    _check(Wu.shape[1] == Z.shape[1] and Wb.shape[1:] == (Z.shape[1], Z.shape[1]), "frontier weight shapes")
    Su = Z @ Wu.T
    T = np.matmul(Z, Wb)  # (B, k, d): z_i W_b
    Sb = T @ Z.T
    return (Su, Sb), (Z, Wu, Wb, T)


def frontier_backward(dSu, dSb, cache):
    Z, Wu, Wb, T = cache
    dZ = dSu @ Wu
    dWu = dSu.T @ Z
    dZ = dZ + np.tensordot(dSb, T, axes=([0, 1], [0, 1]))
    dT = dSb @ Z
    dWb = np.matmul(Z.T, dT)
    dZ = dZ + np.tensordot(dT, Wb, axes=([0, 2], [0, 2]))
    return dZ, dWu, dWb


def ffn_score_forward(x, W, w):
    """``w . tanh(W x)`` per row of ``x`` (row-vector convention ``x @ W``)."""
    h = np.tanh(x @ W)
    return h @ w, (x, W, w, h)


def ffn_score_backward(dout, cache):
    x, W, w, h = cache
    dh = np.outer(dout, w) * (1.0 - h * h)
    return dh @ W.T, x.T @ dh, h.T @ dout


# -- tape ----------------------------------------------------------------------

class Tensor:
    """A value on a :class:`Tape` with an accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = True):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    """Records backward closures in execution order and replays them reversed.

    A ``Tape(enabled=False)`` computes forward values only.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._backward: list[Callable[[], None]] = []

    def record(self, fn: Callable[[], None]):
        if self.enabled:
            self._backward.append(fn)

    def backward(self, loss: Tensor):
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._backward):
            fn()
        self._backward.clear()

    # ops ----------------------------------------------------------------
    def _new(self, value, *parents: Tensor) -> Tensor:
        return Tensor(value, self.enabled and any(p.requires_grad for p in parents))

    def const(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), requires_grad=False)

    def linear(self, x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
        val, cache = linear_forward(x.value, W.value, None if b is None else b.value)
        out = self._new(val, x, W, *([b] if b is not None else []))

        def back():
            if out.grad is None:
                return
            dx, dW, db = linear_backward(out.grad, cache)
            x.accumulate(dx)
            W.accumulate(dW)
            if b is not None:
                b.accumulate(db)

        self.record(back)
        return out

    def matmul_const(self, M: np.ndarray, x: Tensor) -> Tensor:
        out = self._new(M @ x.value, x)

        def back():
            if out.grad is not None:
                x.accumulate(M.T @ out.grad)

        self.record(back)
        return out

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        out = self._new(a.value + b.value, a, b)

        def back():
            if out.grad is None:
                return
            a.accumulate(_unbroadcast(out.grad, a.shape))
            b.accumulate(_unbroadcast(out.grad, b.shape))

        self.record(back)
        return out

    def rows(self, x: Tensor, idx) -> Tensor:
        """Gather rows ``x[idx]``; gradients scatter-add back."""
        idx = np.asarray(idx, dtype=np.int64)
        out = self._new(x.value[idx], x)

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            np.add.at(g, idx, out.grad)
            x.accumulate(g)

        self.record(back)
        return out

    def concat(self, parts: list[Tensor]) -> Tensor:
        out = self._new(np.concatenate([p.value for p in parts], axis=0), *parts)
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])

        def back():
            if out.grad is None:
                return
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                p.accumulate(out.grad[lo:hi])

        self.record(back)
        return out

    def stack_vectors(self, vecs: list[Tensor]) -> Tensor:
        out = self._new(np.stack([v.value for v in vecs]), *vecs)

        def back():
            if out.grad is None:
                return
            for k, v in enumerate(vecs):
                v.accumulate(out.grad[k])

        self.record(back)
        return out

    def rat_block(self, u: Tensor, tags, p: Mapping[str, Tensor], heads: int) -> Tensor:
        val, cache = rat_block_forward(u.value, tags, {k: t.value for k, t in p.items()}, heads)
        out = self._new(val, u, *p.values())

        def back():
            if out.grad is None:
                return
            du, grads = rat_block_backward(out.grad, cache)
            u.accumulate(du)
            for k, g in grads.items():
                p[k].accumulate(g)

        self.record(back)
        return out

    def lstm(self, e: Tensor, h0: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> Tensor:
        """LSTM step with zero initial cell; returns the hidden state (cell discarded)."""
        c0 = np.zeros_like(h0.value)
        (h, c), cache = lstm_forward(e.value, h0.value, c0, Wx.value, Wh.value, b.value)
        out_h = self._new(h, e, h0, Wx, Wh, b)
        out_c = self._new(c, e, h0, Wx, Wh, b)

        def back():
            if out_h.grad is None and out_c.grad is None:
                return
            dh = out_h.grad if out_h.grad is not None else np.zeros_like(h)
            dc = out_c.grad if out_c.grad is not None else np.zeros_like(c)
            de, dh0, _, dWx, dWh, db = lstm_backward(dh, dc, cache)
            e.accumulate(de)
            h0.accumulate(dh0)
            Wx.accumulate(dWx)
            Wh.accumulate(dWh)
            b.accumulate(db)

        self.record(back)
        return out_h, out_c

    def tree_lstm(self, e, hl, cl, hr, cr, W, UL, UR, b):
        (h, c), cache = tree_lstm_forward(e.value, hl.value, cl.value, hr.value, cr.value, W.value, UL.value, UR.value, b.value)
        ins = (e, hl, cl, hr, cr, W, UL, UR, b)
        out_h = self._new(h, *ins)
        out_c = self._new(c, *ins)

        def back():
            if out_h.grad is None and out_c.grad is None:
                return
            dh = out_h.grad if out_h.grad is not None else np.zeros_like(h)
            dc = out_c.grad if out_c.grad is not None else np.zeros_like(c)
            g = tree_lstm_backward(dh, dc, cache)
            for name, t in zip(("e", "hl", "cl", "hr", "cr", "W", "UL", "UR", "b"), ins):
                t.accumulate(g[name])

        self.record(back)
        return out_h, out_c

    def frontier(self, Z: Tensor, Wu: Tensor, Wb: Tensor, uidx, bidx) -> Tensor:
        """Raw scores of the listed candidates.

        ``uidx`` is an ``(m, 2)`` array of (item, unary op); ``bidx`` an
        ``(n, 3)`` array of (binary op, left item, right item).  Output order
        is unary candidates first.
        """
        (Su, Sb), cache = frontier_forward(Z.value, Wu.value, Wb.value)
        uidx = np.asarray(uidx, dtype=np.int64).reshape(-1, 2)
        bidx = np.asarray(bidx, dtype=np.int64).reshape(-1, 3)
        val = np.concatenate([Su[uidx[:, 0], uidx[:, 1]], Sb[bidx[:, 0], bidx[:, 1], bidx[:, 2]]])
        out = self._new(val, Z, Wu, Wb)
        nu = len(uidx)

        def back():
            if out.grad is None:
                return
            dSu = np.zeros_like(Su)
            dSb = np.zeros_like(Sb)
            np.add.at(dSu, (uidx[:, 0], uidx[:, 1]), out.grad[:nu])
            np.add.at(dSb, (bidx[:, 0], bidx[:, 1], bidx[:, 2]), out.grad[nu:])
            dZ, dWu, dWb = frontier_backward(dSu, dSb, cache)
            Z.accumulate(dZ)
            Wu.accumulate(dWu)
            Wb.accumulate(dWb)

        self.record(back)
        return out

    def ffn_score(self, x: Tensor, W: Tensor, w: Tensor) -> Tensor:
        val, cache = ffn_score_forward(x.value, W.value, w.value)
        out = self._new(val, x, W, w)

        def back():
            if out.grad is None:
                return
            dx, dW, dw = ffn_score_backward(out.grad, cache)
            x.accumulate(dx)
            W.accumulate(dW)
            w.accumulate(dw)

        self.record(back)
        return out

    def log_softmax(self, x: Tensor) -> Tensor:
        val, p = log_softmax_forward(x.value)
        out = self._new(val, x)

        def back():
            if out.grad is not None:
                x.accumulate(log_softmax_backward(out.grad, p))

        self.record(back)
        return out

    def weighted_sum(self, x: Tensor, idx, weight: float) -> Tensor:
        """Scalar ``weight * sum(x[idx])``."""
        idx = np.asarray(idx, dtype=np.int64)
        out = self._new(np.asarray(weight * x.value[idx].sum()), x)

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            np.add.at(g, idx, weight * out.grad)
            x.accumulate(g)

        self.record(back)
        return out

    def marginal_nll(self, scores: Tensor, idx) -> Tensor:
        """``-log sum_{i in idx} softmax(scores)_i``."""
        idx = np.asarray(idx, dtype=np.int64)
        logp, p = log_softmax_forward(scores.value)
        sub = logp[idx]
        m = sub.max()
        log_marg = m + np.log(np.exp(sub - m).sum())
        out = self._new(np.asarray(-log_marg), scores)

        def back():
            if out.grad is None:
                return
            q = np.zeros_like(p)
            np.add.at(q, idx, np.exp(sub - log_marg))
            scores.accumulate(out.grad * (p - q))

        self.record(back)
        return out

    def sum_scalars(self, parts: list[Tensor]) -> Tensor:
        out = self._new(np.asarray(sum(float(p.value) for p in parts)), *parts)

        def back():
            if out.grad is None:
                return
            for p in parts:
                p.accumulate(out.grad)

        self.record(back)
        return out

    def scale(self, x: Tensor, c: float) -> Tensor:
        out = self._new(x.value * c, x)

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * c)

        self.record(back)
        return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- parameters ----------------------------------------------------------------

class ParamStore:
    """Named float64 parameters with gradients and Adam moments.

    Model symbols map to entries as follows (``{l}`` is a layer index):

    ====================  ==========================================
    token/leaf embeddings ``tok_emb``, ``pos_emb``, ``const_type_emb``,
                          ``leaf_pinned`` (rows: value, *)
    W_Q, W_K, W_V         ``enc.{l}.WQ`` ... ``beam.{l}.WQ`` ... ``rerank.{l}.WQ``
    r^K, r^V              ``enc.{l}.rK``, ``enc.{l}.rV``
    w_const, W_const      ``const.w``, ``const.W``
    w_u (all unary ops)   ``score.Wu`` (row per unary op)
    W_b (all binary ops)  ``score.Wb`` (slice per binary op)
    e_l                   ``op_emb`` (unary ops first, then binary)
    LSTM                  ``lstm.Wx``, ``lstm.Wh``, ``lstm.b``
    TreeLSTM              ``tree.W``, ``tree.UL``, ``tree.UR``, ``tree.b``
    w_rerank, W_rerank    ``rerank_ffn.w``, ``rerank_ffn.W``
    beam output proj.     ``beam.out``
    ====================  ==========================================
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, shape: tuple[int, ...], init: str = "uniform", fan_in: int | None = None) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name}")
        if init == "zeros":
            val = np.zeros(shape)
        elif init == "ones":
            val = np.ones(shape)
        else:
            fan = fan_in if fan_in is not None else shape[-2] if len(shape) >= 2 else shape[-1]
            bound = 1.0 / np.sqrt(fan)
            val = self.rng.uniform(-bound, bound, size=shape)
        self.set(name, val)
        return val

    def set(self, name: str, value: np.ndarray):
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, grads: Mapping[str, np.ndarray], scale: float = 1.0):
        for name, g in grads.items():
            if g.shape != self.values[name].shape:
                raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {self.values[name].shape}")
            self.grads[name] += scale * g

    def bind(self, tape: Tape) -> "BoundParams":
        return BoundParams(self, tape)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name in self.values:
            other.set(name, self.values[name])
            other.m[name] = self.m[name].copy()
            other.v[name] = self.v[name].copy()
            other.grads[name] = self.grads[name].copy()
        other.step = self.step
        return other


class BoundParams:
    """Per-tape :class:`Tensor` views of a store's parameters (created lazily)."""

    def __init__(self, store: ParamStore, tape: Tape):
        self.store = store
        self.tape = tape
        self._t: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        t = self._t.get(name)
        if t is None:
            t = Tensor(self.store.values[name], requires_grad=self.tape.enabled)
            self._t[name] = t
        return t

    def group(self, prefix: str, names: Iterable[str]) -> dict[str, Tensor]:
        return {n: self[f"{prefix}.{n}"] for n in names if f"{prefix}.{n}" in self.store}

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._t.items() if t.grad is not None}


def adam_update(store: ParamStore, lr: float = 1.86e-4, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam step over every parameter, in insertion order."""
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, p in store.values.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr != 0.0:
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None):
    """Flat binary ``.npz``: one array per parameter plus JSON metadata."""
    arrays = {f"param/{k}": v for k, v in store.values.items()}
    arrays.update({f"adam_m/{k}": v for k, v in store.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in store.v.items()})
    header = {"names": store.names(), "step": store.step, "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        store = ParamStore()
        for name in header["names"]:
            store.set(name, data[f"param/{name}"])
            store.m[name] = data[f"adam_m/{name}"].copy()
            store.v[name] = data[f"adam_v/{name}"].copy()
        store.step = header["step"]
    return store, header["meta"]


# -- gradient checking -------------------------------------------------------

@dataclass
class _CheckCase:
    inputs: dict[str, np.ndarray]
    fn: Callable[[dict[str, np.ndarray]], np.ndarray]
    grad: Callable[[dict[str, np.ndarray], np.ndarray], dict[str, np.ndarray]]


def _block_params(rng, d, heads, n_rel, ff):
    p = {
        "WQ": rng.normal(size=(d, d)) / np.sqrt(d),
        "WK": rng.normal(size=(d, d)) / np.sqrt(d),
        "WV": rng.normal(size=(d, d)) / np.sqrt(d),
        "rK": rng.normal(size=(heads, n_rel, d // heads)) * 0.5,
        "rV": rng.normal(size=(heads, n_rel, d // heads)) * 0.5,
        "ln1_g": 1.0 + 0.1 * rng.normal(size=d),
        "ln1_b": 0.1 * rng.normal(size=d),
        "W1": rng.normal(size=(d, ff)) / np.sqrt(d),
        "b1": 0.1 * rng.normal(size=ff),
        "W2": rng.normal(size=(ff, d)) / np.sqrt(ff),
        "b2": 0.1 * rng.normal(size=d),
        "ln2_g": 1.0 + 0.1 * rng.normal(size=d),
        "ln2_b": 0.1 * rng.normal(size=d),
    }
    return p


def _case(op: str, rng: np.random.Generator) -> _CheckCase:
    d = 8
    if op == "linear":
        inputs = {"x": rng.normal(size=(8, 8)), "W": rng.normal(size=(8, 8)), "b": rng.normal(size=8)}

        def fn(v):
            return linear_forward(v["x"], v["W"], v["b"])[0]

        def grad(v, dout):
            dx, dW, db = linear_backward(dout, linear_forward(v["x"], v["W"], v["b"])[1])
            return {"x": dx, "W": dW, "b": db}

    elif op == "layer_norm":
        inputs = {"x": rng.normal(size=(6, d)), "g": rng.normal(size=d), "b": rng.normal(size=d)}

        def fn(v):
            return layer_norm_forward(v["x"], v["g"], v["b"])[0]

        def grad(v, dout):
            dx, dg, db = layer_norm_backward(dout, layer_norm_forward(v["x"], v["g"], v["b"])[1])
            return {"x": dx, "g": dg, "b": db}

    elif op == "softmax":
        mask = rng.random(size=(6, d)) > 0.3
        mask[:, 0] = True
        inputs = {"x": rng.normal(size=(6, d))}

        def fn(v):
            return softmax_forward(v["x"], mask)[0]

        def grad(v, dout):
            return {"x": softmax_backward(dout, softmax_forward(v["x"], mask)[1])}

    elif op == "tanh":
        inputs = {"x": rng.normal(size=(6, d))}

        def fn(v):
            return tanh_forward(v["x"])[0]

        def grad(v, dout):
            return {"x": tanh_backward(dout, tanh_forward(v["x"])[1])}

    elif op == "relation_aware_attention":
        n, heads, n_rel = 5, 2, 4
        tags = rng.integers(0, n_rel, size=(n, n))
        inputs = {"u": rng.normal(size=(n, d)), **_block_params(rng, d, heads, n_rel, 2 * d)}

        def fn(v):
            return rat_block_forward(v["u"], tags, v, heads)[0]

        def grad(v, dout):
            du, g = rat_block_backward(dout, rat_block_forward(v["u"], tags, v, heads)[1])
            return {"u": du, **g}

    elif op == "lstm":
        m = 3
        inputs = {
            "e": rng.normal(size=(m, d)), "h0": rng.normal(size=(m, d)), "c0": rng.normal(size=(m, d)),
            "Wx": rng.normal(size=(d, 4 * d)) / np.sqrt(d), "Wh": rng.normal(size=(d, 4 * d)) / np.sqrt(d),
            "b": 0.1 * rng.normal(size=4 * d),
        }
        mix = rng.normal(size=(m, d))

        def fn(v):
            (h, c), _ = lstm_forward(v["e"], v["h0"], v["c0"], v["Wx"], v["Wh"], v["b"])
            return np.concatenate([h, c * mix])

        def grad(v, dout):
            _, cache = lstm_forward(v["e"], v["h0"], v["c0"], v["Wx"], v["Wh"], v["b"])
            de, dh0, dc0, dWx, dWh, db = lstm_backward(dout[:m], dout[m:] * mix, cache)
            return {"e": de, "h0": dh0, "c0": dc0, "Wx": dWx, "Wh": dWh, "b": db}

    elif op == "tree_lstm":
        m = 3
        inputs = {name: rng.normal(size=(m, d)) for name in ("e", "hl", "cl", "hr", "cr")}
        inputs.update({
            "W": rng.normal(size=(d, 5 * d)) / np.sqrt(d), "UL": rng.normal(size=(d, 5 * d)) / np.sqrt(d),
            "UR": rng.normal(size=(d, 5 * d)) / np.sqrt(d), "b": 0.1 * rng.normal(size=5 * d),
        })
        mix = rng.normal(size=(m, d))

        def fn(v):
            (h, c), _ = tree_lstm_forward(*(v[k] for k in ("e", "hl", "cl", "hr", "cr", "W", "UL", "UR", "b")))
            return np.concatenate([h, c * mix])

        def grad(v, dout):
            _, cache = tree_lstm_forward(*(v[k] for k in ("e", "hl", "cl", "hr", "cr", "W", "UL", "UR", "b")))
            return tree_lstm_backward(dout[:m], dout[m:] * mix, cache)

    elif op == "bilinear_frontier":
        k, U, B = 4, 3, 5
        inputs = {"Z": rng.normal(size=(k, d)), "Wu": rng.normal(size=(U, d)), "Wb": rng.normal(size=(B, d, d)) / np.sqrt(d)}

        def fn(v):
            (Su, Sb), _ = frontier_forward(v["Z"], v["Wu"], v["Wb"])
            return np.concatenate([Su.ravel(), Sb.ravel()])

        def grad(v, dout):
            (Su, Sb), cache = frontier_forward(v["Z"], v["Wu"], v["Wb"])
            dZ, dWu, dWb = frontier_backward(dout[:Su.size].reshape(Su.shape), dout[Su.size:].reshape(Sb.shape), cache)
            return {"Z": dZ, "Wu": dWu, "Wb": dWb}

    elif op == "ffn_score":
        inputs = {"x": rng.normal(size=(5, d)), "W": rng.normal(size=(d, d)) / np.sqrt(d), "w": rng.normal(size=d)}

        def fn(v):
            return ffn_score_forward(v["x"], v["W"], v["w"])[0]

        def grad(v, dout):
            dx, dW, dw = ffn_score_backward(dout, ffn_score_forward(v["x"], v["W"], v["w"])[1])
            return {"x": dx, "W": dW, "w": dw}

    elif op == "log_softmax":
        inputs = {"x": rng.normal(size=(4, d))}

        def fn(v):
            return log_softmax_forward(v["x"])[0]

        def grad(v, dout):
            return {"x": log_softmax_backward(dout, log_softmax_forward(v["x"])[1])}

    else:
        raise UnknownOp(op)
    return _CheckCase(inputs, fn, grad)


GRAD_CHECK_OPS = (
    "linear", "layer_norm", "softmax", "tanh", "log_softmax", "ffn_score",
    "relation_aware_attention", "lstm", "tree_lstm", "bilinear_frontier",
)
GRAD_CHECK_THRESHOLDS = {
    "linear": 1e-6, "layer_norm": 1e-6, "softmax": 1e-6, "tanh": 1e-6, "log_softmax": 1e-6,
    "ffn_score": 1e-4, "relation_aware_attention": 1e-4, "lstm": 1e-4, "tree_lstm": 1e-4,
    "bilinear_frontier": 1e-4,
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` with Euclidean norms over the whole tensor."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den == 0.0 else float(num / den)


def grad_check(opname: str, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of the analytic gradient against central differences.

    The scalar probed is ``sum(out * R)`` for a fixed random ``R``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    case = _case(opname, rng)
    probe = rng.normal(size=case.fn(case.inputs).shape)
    analytic = case.grad(case.inputs, probe)
    worst = 0.0
    for name, x in case.inputs.items():
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float((case.fn(case.inputs) * probe).sum())
            flat[i] = old - h
            fm = float((case.fn(case.inputs) * probe).sum())
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(analytic[name], num))
    return worst
