"""Cache-free batched inference.

Computes the same function as :func:`hpnet.model.forward` in eval mode, but
keeps nothing for a backward pass and runs the token stack in a
``(features, batch*tokens)`` layout so each dense layer is one GEMM and the
per-token reductions run down columns.  Large batches are processed in tiles
small enough for the attention scores to stay in cache.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import ShapeMismatch
from .model import ModelConfig, check_input_range
from .packets import HEADER_LEN

DEFAULT_TILE = 16


def _sepconv(x, dw_w, dw_b, pw_w, pw_b):
    B, C, L = x.shape
    k = dw_w.shape[1]
    left, _ = nn.same_padding(k)
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
    return y


def _relu_pool(y, size: int):
    # y is overwritten.  After ReLU every value is >= 0 and each window holds
    # its centre, so zero padding gives the same max as -inf padding.
    np.maximum(y, 0, out=y)
    if size == 1:
        return y
    left, _ = nn.same_padding(size)
    out = y.copy()
    for s in range(1, left + 1):
        np.maximum(out[..., s:], y[..., :-s], out=out[..., s:])
    for s in range(1, size - left):
        np.maximum(out[..., :-s], y[..., s:], out=out[..., :-s])
    return out


def _branches(x, params, prefix, kernels, pool_size, out):
    """Write every residual branch of one modality into the channel slices of ``out``."""
    C = out.shape[1] // len(kernels)
    for i, k in enumerate(kernels):
        pre = f"{prefix}.b{i}."
        if params[pre + "dw_w"].shape[1] != k:
            raise ShapeMismatch(f"{pre}dw_w has kernel {params[pre + 'dw_w'].shape[1]}, expected {k}")
        y = _sepconv(x, params[pre + "dw_w"], params[pre + "dw_b"],
                     params[pre + "pw_w"], params[pre + "pw_b"])
        y = _relu_pool(y, pool_size)
        if pre + "proj_w" in params:
            y += np.matmul(params[pre + "proj_w"], x)
            y += params[pre + "proj_b"][None, :, None]
        else:
            y += x
        out[:, i * C:(i + 1) * C] = y


def _tokens_T(x, params, prefix, kernels, cfg: ModelConfig):
    """One modality as a ``(d, B*tokens)`` block."""
    B, _, L = x.shape
    C = params[f"{prefix}.b0.pw_w"].shape[0]
    cat = np.empty((B, C * len(kernels), L), dtype=x.dtype)
    _branches(x, params, prefix, kernels, cfg.pool_size, cat)
    pre = f"{prefix}.refine."
    y = _sepconv(cat, params[pre + "dw_w"], params[pre + "dw_b"],
                 params[pre + "pw_w"], params[pre + "pw_b"])
    return y.reshape(B, -1, cfg.d_model)


def _layernorm_T(X, g, b, ones_row):
    d = X.shape[0]
    mu = (ones_row @ X) / d
    X = X - mu
    var = (ones_row @ (X * X)) / d
    var += nn.LN_EPS
    X *= 1.0 / np.sqrt(var)
    X *= g[:, None]
    X += b[:, None]
    return X


def _mhsa_T(X, wqkv_t, wo_t, B, T, heads):
    inner = wo_t.shape[1]
    dk = inner // heads
    scale = X.dtype.type(1.0 / np.sqrt(dk))
    Y = (wqkv_t @ X).reshape(3, heads, dk, B, T)
    qt = Y[0].transpose(2, 0, 1, 3) * scale                        # (B,h,dk,query)
    k = np.ascontiguousarray(Y[1].transpose(2, 0, 3, 1))           # (B,h,key,dk)
    vt = Y[2].transpose(2, 0, 1, 3)                                # (B,h,dk,key)
    E = k @ qt                                                     # (B,h,key,query)
    inv_s = nn._exp_columns(E, k, qt)
    ot = (vt @ E) * inv_s                                          # (B,h,dk,query)
    o = np.ascontiguousarray(ot.transpose(1, 2, 0, 3)).reshape(inner, B * T)
    return wo_t @ o


def _prepared(params, cfg: ModelConfig):
    prep = {}
    if cfg.fusion:
        for i in range(cfg.num_layers):
            pre = f"fusion.{i}."
            prep[pre + "wqkv_t"] = np.ascontiguousarray(np.concatenate(
                [params[pre + "wq"], params[pre + "wk"], params[pre + "wv"]], axis=1).T)
            for n in ("wo", "w1", "w2"):
                prep[pre + n + "_t"] = np.ascontiguousarray(params[pre + n].T)
    else:
        prep["nofusion.w_t"] = np.ascontiguousarray(params["nofusion.w"].T)
    return prep


def _tile(params, prep, cfg: ModelConfig, h, d):
    B = h.shape[0]
    ht = _tokens_T(h, params, "header", cfg.header_kernels, cfg)
    pt = _tokens_T(d, params, "payload", cfg.payload_kernels, cfg)
    F = np.concatenate([ht, pt], axis=1)                           # (B, T, d)
    T, dm = F.shape[1], F.shape[2]
    X = np.ascontiguousarray(F.reshape(B * T, dm).T)               # (d, B*T)
    ones_row = np.ones((1, dm), dtype=X.dtype)

    if cfg.fusion:
        for i in range(cfg.num_layers):
            pre = f"fusion.{i}."
            X = X + _mhsa_T(X, prep[pre + "wqkv_t"], prep[pre + "wo_t"], B, T, cfg.num_heads)
            X = _layernorm_T(X, params[pre + "ln1_g"], params[pre + "ln1_b"], ones_row)
            Hd = prep[pre + "w1_t"] @ X
            Hd += params[pre + "b1"][:, None]
            np.maximum(Hd, 0, out=Hd)
            Z = prep[pre + "w2_t"] @ Hd
            Z += params[pre + "b2"][:, None]
            Z += X
            X = _layernorm_T(Z, params[pre + "ln2_g"], params[pre + "ln2_b"], ones_row)
    else:
        X = prep["nofusion.w_t"] @ X
        X += params["nofusion.b"][:, None]
        np.maximum(X, 0, out=X)

    mean_col = np.full((T, 1), 1.0 / T, dtype=X.dtype)
    pooled = (X.reshape(dm * B, T) @ mean_col).reshape(dm, B).T    # (B, d)
    z = pooled @ params["cls.w1"]
    z += params["cls.b1"]
    np.maximum(z, 0, out=z)
    logits = z @ params["cls.w2"]
    logits += params["cls.b2"]
    return logits


def infer_logits(params, cfg: ModelConfig, header, payload, tile: int = DEFAULT_TILE):
    """Eval-mode logits for ``header`` (B, 128) and ``payload`` (B, P), tiled by ``tile``."""
    header = np.asarray(header)
    payload = np.asarray(payload)
    if header.ndim != 2 or payload.ndim != 2 or header.shape[0] != payload.shape[0]:
        raise ShapeMismatch(f"bad batch shapes {header.shape} / {payload.shape}")
    if header.shape[1] != HEADER_LEN or payload.shape[1] != cfg.payload_len:
        raise ShapeMismatch(f"expected widths {HEADER_LEN}/{cfg.payload_len}, "
                            f"got {header.shape[1]}/{payload.shape[1]}")
    check_input_range(header, "header")
    check_input_range(payload, "payload")
    if tile < 1:
        raise ValueError("tile must be >= 1")
    dtype = params["cls.w1"].dtype
    h = header.astype(dtype, copy=False)[:, None, :]
    d = payload.astype(dtype, copy=False)[:, None, :]
    if cfg.mask_header:
        h = np.zeros_like(h)
    if cfg.mask_payload:
        d = np.zeros_like(d)
    B = h.shape[0]
    if B == 0:
        return np.zeros((0, cfg.num_classes), dtype=dtype)
    prep = _prepared(params, cfg)
    if B <= tile:
        return _tile(params, prep, cfg, h, d)
    out = np.empty((B, cfg.num_classes), dtype=dtype)
    for s in range(0, B, tile):
        out[s:s + tile] = _tile(params, prep, cfg, h[s:s + tile], d[s:s + tile])
    return out
