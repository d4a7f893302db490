"""Numpy kernels with hand-derived backward passes.

Every layer is a pair of functions: ``*_forward`` returns ``(out, cache)`` and
``*_backward`` consumes the upstream gradient and that cache.  Arrays follow
``(batch, channels, length)`` for convolutions and ``(batch, tokens, features)``
for the attention stack.  Kernels are dtype-agnostic: float64 inputs give
float64 math (used for gradient checks), float32 for training and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch

LN_EPS = 1e-5


def same_padding(k: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the length for a stride-1 kernel of size k."""
    total = k - 1
    left = total // 2
    return left, total - left


# ---------------------------------------------------------------- convolution

def sepconv1d_forward(x, dw_w, dw_b, pw_w, pw_b):
    """Depthwise (per channel, kernel k) then pointwise (1x1) convolution.

    ``dw_w`` is (C_in, k), ``pw_w`` is (C_out, C_in).  Stride 1, same padding.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (B, C, L) input, got shape {x.shape}")
    B, C, L = x.shape
    if dw_w.shape[0] != C or dw_b.shape != (C,):
        raise ShapeMismatch(f"depthwise kernel {dw_w.shape} does not fit {C} input channels")
    if pw_w.shape[1] != C or pw_b.shape != (pw_w.shape[0],):
        raise ShapeMismatch(f"pointwise kernel {pw_w.shape} does not fit {C} input channels")
    k = dw_w.shape[1]
    left, _ = same_padding(k)
    if k > 1:
        xp = np.zeros((B, C, L + k - 1), dtype=x.dtype)
        xp[:, :, left:left + L] = x
    else:
        xp = x
    z = dw_w[None, :, 0, None] * xp[:, :, 0:L]
    for j in range(1, k):
        z += dw_w[None, :, j, None] * xp[:, :, j:j + L]
    z += dw_b[None, :, None]
    y = np.matmul(pw_w, z)
    y += pw_b[None, :, None]
    return y, (xp, z, dw_w, pw_w, left, L)


def sepconv1d_backward(dy, cache):
    xp, z, dw_w, pw_w, left, L = cache
    k = dw_w.shape[1]
    d_pw_b = dy.sum(axis=(0, 2))
    d_pw_w = np.tensordot(dy, z, axes=([0, 2], [0, 2]))
    dz = np.matmul(pw_w.T, dy)
    d_dw_b = dz.sum(axis=(0, 2))
    d_dw_w = np.empty_like(dw_w)
    dxp = np.zeros_like(xp)
    for j in range(k):
        d_dw_w[:, j] = np.einsum("bcl,bcl->c", dz, xp[:, :, j:j + L])
        dxp[:, :, j:j + L] += dw_w[None, :, j, None] * dz
    dx = dxp[:, :, left:left + L]
    return dx, {"dw_w": d_dw_w, "dw_b": d_dw_b, "pw_w": d_pw_w, "pw_b": d_pw_b}


def pointwise_forward(x, w, b):
    """1x1 convolution, ``w`` is (C_out, C_in)."""
    if x.ndim != 3 or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"pointwise kernel {w.shape} does not fit input {x.shape}")
    y = np.matmul(w, x)
    y += b[None, :, None]
    return y, (x, w)


def pointwise_backward(dy, cache):
    x, w = cache
    return np.matmul(w.T, dy), {
        "w": np.tensordot(dy, x, axes=([0, 2], [0, 2])),
        "b": dy.sum(axis=(0, 2)),
    }


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, out


def relu_backward(dy, out):
    return dy * (out > 0)


def maxpool1d_forward(x, size: int = 3):
    """Max pooling, stride 1, same padding with -inf so the length is unchanged."""
    L = x.shape[-1]
    left, _ = same_padding(size)
    xp = np.full(x.shape[:-1] + (L + size - 1,), -np.inf, dtype=x.dtype)
    xp[:, :, left:left + L] = x
    out = xp[:, :, 0:L].copy()
    for j in range(1, size):
        np.maximum(out, xp[:, :, j:j + L], out=out)
    return out, (xp, out, size, left)


def maxpool1d_backward(dy, cache):
    # gradient goes to the first window position holding the max
    xp, out, size, left = cache
    L = dy.shape[-1]
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    free = np.ones(out.shape, dtype=bool)
    for j in range(size):
        hit = (xp[:, :, j:j + L] == out) & free
        free &= ~hit
        dxp[:, :, j:j + L] += dy * hit
    return dxp[:, :, left:left + L]


def resconv1d_forward(x, p: dict, pool_size: int = 3):
    """``Pool(ReLU(SepConv(x))) + Proj(x)``; Proj is identity unless ``p`` carries proj_w/proj_b."""
    y, c_conv = sepconv1d_forward(x, p["dw_w"], p["dw_b"], p["pw_w"], p["pw_b"])
    a, c_relu = relu_forward(y)
    out, c_pool = maxpool1d_forward(a, pool_size)
    if "proj_w" in p:
        skip, c_proj = pointwise_forward(x, p["proj_w"], p["proj_b"])
    else:
        if x.shape[1] != y.shape[1]:
            raise ShapeMismatch("identity residual needs matching channel counts")
        skip, c_proj = x, None
    return out + skip, (c_conv, c_relu, c_pool, c_proj)


def resconv1d_backward(dy, cache):
    c_conv, c_relu, c_pool, c_proj = cache
    da = maxpool1d_backward(dy, c_pool)
    dx, grads = sepconv1d_backward(relu_backward(da, c_relu), c_conv)
    if c_proj is not None:
        dx_skip, g = pointwise_backward(dy, c_proj)
        grads["proj_w"], grads["proj_b"] = g["w"], g["b"]
        dx = dx + dx_skip
    else:
        dx = dx + dy
    return dx, grads


# ----------------------------------------------------------- dense / tokens

def linear_forward(x, w, b=None):
    """``x @ w + b`` over the last axis; ``w`` is (d_in, d_out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear weight {w.shape} does not fit input {x.shape}")
    y = (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    if b is not None:
        y += b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_b = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads = {"w": x2.T @ dy2}
    if has_b:
        grads["b"] = dy2.sum(axis=0)
    return (dy2 @ w.T).reshape(x.shape), grads


def _row_mean(x):
    # matmul against a constant column beats a keepdims reduction over a short axis
    d = x.shape[-1]
    col = np.full((d, 1), 1.0 / d, dtype=x.dtype)
    return (x.reshape(-1, d) @ col).reshape(x.shape[:-1] + (1,))


def layernorm_forward(x, gain, bias, eps: float = LN_EPS):
    xc = x - _row_mean(x)
    inv = 1.0 / np.sqrt(_row_mean(xc * xc) + x.dtype.type(eps))
    xh = xc * inv
    return xh * gain + bias, (xh, inv, gain)


def layernorm_backward(dy, cache):
    xh, inv, gain = cache
    axes = tuple(range(dy.ndim - 1))
    d_gain = np.sum(dy * xh, axis=axes)
    d_bias = dy.sum(axis=axes)
    dxh = dy * gain
    dx = inv * (dxh - _row_mean(dxh) - xh * _row_mean(dxh * xh))
    return dx, {"g": d_gain, "b": d_bias}


def dropout_forward(x, rate: float, training: bool, rng: np.random.Generator | None):
    if not training or rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep, keep


def dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


def softmax(x, axis: int = -1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _exp_columns(E, k, qt):
    """exp() of the score matrix in place, plus 1 / column sums.

    The max shift is skipped unless a column sum leaves
    [sqrt(tiny), sqrt(max)] of the dtype, which keeps every weight and the
    later weights @ values product finite; softmax is shift invariant so
    both paths agree.
    """
    T = E.shape[-2]
    ones = np.ones((1, T), dtype=E.dtype)
    info = np.finfo(E.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        np.exp(E, out=E)
        s = ones @ E
    if not (np.isfinite(s).all() and np.sqrt(info.tiny) <= s.min() and s.max() <= np.sqrt(info.max)):
        np.matmul(k, qt, out=E)
        E -= E.max(axis=-2, keepdims=True)
        np.exp(E, out=E)
        s = ones @ E
    return 1.0 / s


def mhsa_forward(F, wq, wk, wv, wo, heads: int):
    """Multi-head scaled dot-product self-attention over the token axis (no bias terms).

    Scores are held transposed, (B, h, key, query), so per-query reductions run
    down the columns, and the softmax normaliser is applied to the small head
    outputs instead of the score matrix.
    """
    B, T, d = F.shape
    inner = wq.shape[1]
    if wq.shape != (d, inner) or wk.shape != (d, inner) or wv.shape != (d, inner) \
            or wo.shape != (inner, d) or inner % heads:
        raise ShapeMismatch(f"attention weights do not fit tokens of width {d} with {heads} heads")
    dk = inner // heads
    scale = F.dtype.type(1.0 / np.sqrt(dk))
    Ft = np.ascontiguousarray(F.transpose(0, 2, 1))
    X = (np.concatenate([wq, wk, wv], axis=1).T @ Ft).reshape(B, 3, heads, dk, T)
    qt = X[:, 0] * scale                                            # (B,h,dk,T)
    k = np.ascontiguousarray(X[:, 1].transpose(0, 1, 3, 2))         # (B,h,T,dk)
    vt = X[:, 2]
    E = k @ qt                                                      # (B,h,key,query)
    inv_s = _exp_columns(E, k, qt)                                  # (B,h,1,query)
    ot = (vt @ E) * inv_s                                           # (B,h,dk,query)
    o = ot.transpose(0, 3, 1, 2).reshape(B, T, inner)
    return o @ wo, (Ft, qt, k, vt, E, inv_s, o, wq, wk, wv, wo, scale)


def attention_weights(cache) -> np.ndarray:
    """(B, h, query, key) attention matrix from an mhsa cache; rows sum to 1."""
    E, inv_s = cache[4], cache[5]
    return (E * inv_s).transpose(0, 1, 3, 2)


def mhsa_backward(dy, cache):
    Ft, qt, k, vt, E, inv_s, o, wq, wk, wv, wo, scale = cache
    B, d, T = Ft.shape
    heads, dk = qt.shape[1], qt.shape[2]
    inner = heads * dk
    At = E * inv_s
    d_wo = o.reshape(-1, inner).T @ dy.reshape(-1, d)
    do = (dy @ wo.T).reshape(B, T, heads, dk)
    dot = np.ascontiguousarray(do.transpose(0, 2, 3, 1))           # (B,h,dk,query)
    do = np.ascontiguousarray(do.transpose(0, 2, 1, 3))            # (B,h,query,dk)
    dAt = np.ascontiguousarray(vt.transpose(0, 1, 3, 2)) @ dot     # (B,h,key,query)
    dvt = dot @ At.transpose(0, 1, 3, 2)                           # (B,h,dk,key)
    dAt -= np.ones((1, T), dtype=dAt.dtype) @ (dAt * At)
    dAt *= At                                                      # d(scaled score)
    dkt = qt @ dAt.transpose(0, 1, 3, 2)                           # (B,h,dk,key)
    dqt = np.ascontiguousarray(k.transpose(0, 1, 3, 2)) @ dAt      # (B,h,dk,query)
    dqt *= scale
    dX = np.stack([dqt, dkt, dvt], axis=1).reshape(B, 3 * inner, T)
    W = np.concatenate([wq, wk, wv], axis=1)                        # (d, 3*inner)
    d_w = np.tensordot(Ft, dX, axes=([0, 2], [0, 2]))              # (d, 3*inner)
    dF = (W @ dX).transpose(0, 2, 1)
    return dF, {
        "wq": d_w[:, :inner], "wk": d_w[:, inner:2 * inner],
        "wv": d_w[:, 2 * inner:], "wo": d_wo,
    }


def fusion_layer_forward(F, p: dict, heads: int, dropout: float = 0.0,
                         training: bool = False, rng=None):
    """One attention + feed-forward block, each sublayer with dropout, residual and LayerNorm."""
    a, c_att = mhsa_forward(F, p["wq"], p["wk"], p["wv"], p["wo"], heads)
    a, c_d1 = dropout_forward(a, dropout, training, rng)
    h, c_ln1 = layernorm_forward(F + a, p["ln1_g"], p["ln1_b"])
    f1, c_l1 = linear_forward(h, p["w1"], p["b1"])
    f1r, c_r = relu_forward(f1)
    f2, c_l2 = linear_forward(f1r, p["w2"], p["b2"])
    f2, c_d2 = dropout_forward(f2, dropout, training, rng)
    out, c_ln2 = layernorm_forward(h + f2, p["ln2_g"], p["ln2_b"])
    return out, (c_att, c_d1, c_ln1, c_l1, c_r, c_l2, c_d2, c_ln2)


def fusion_layer_backward(dy, cache):
    c_att, c_d1, c_ln1, c_l1, c_r, c_l2, c_d2, c_ln2 = cache
    grads = {}
    ds, g = layernorm_backward(dy, c_ln2)
    grads["ln2_g"], grads["ln2_b"] = g["g"], g["b"]
    df2 = dropout_backward(ds, c_d2)
    df1r, g = linear_backward(df2, c_l2)
    grads["w2"], grads["b2"] = g["w"], g["b"]
    dh_ffn, g = linear_backward(relu_backward(df1r, c_r), c_l1)
    grads["w1"], grads["b1"] = g["w"], g["b"]
    dh = ds + dh_ffn
    ds1, g = layernorm_backward(dh, c_ln1)
    grads["ln1_g"], grads["ln1_b"] = g["g"], g["b"]
    dF_att, g = mhsa_backward(dropout_backward(ds1, c_d1), c_att)
    grads.update(g)
    return ds1 + dF_att, grads


# ------------------------------------------------------------------- loss

def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for {B} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LabelOutOfRange(f"labels must lie in [0, {K})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= B
    return float(loss), grad


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, "
                                f"parameter has {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state
