"""The header/payload network: extractors, refinement, attention fusion, classifier."""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .errors import BadMagic, RecordFileError, ShapeMismatch, VersionMismatch
from .packets import HEADER_LEN

WEIGHT_MAGIC = b"AMLHPW1\n"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    payload_len: int = 64
    num_classes: int = 5
    header_kernels: tuple[int, ...] = (1, 2, 4)
    payload_kernels: tuple[int, ...] = (2, 4, 8)
    extractor_channels: int = 8
    header_tokens: int = 32
    payload_tokens: int = 32
    refine_kernel: int = 3
    d_model: int = 32
    num_layers: int = 2
    num_heads: int = 8
    d_ff: int = 128
    dropout: float = 0.1
    classifier_hidden: int = 32
    pool_size: int = 3
    fusion: bool = True
    mask_header: bool = False
    mask_payload: bool = False

    def __post_init__(self):
        object.__setattr__(self, "header_kernels", tuple(self.header_kernels))
        object.__setattr__(self, "payload_kernels", tuple(self.payload_kernels))
        if self.d_model % self.num_heads:
            raise ShapeMismatch(f"d_model={self.d_model} not divisible by {self.num_heads} heads")
        for length, ntok, what in ((HEADER_LEN, self.header_tokens, "header"),
                                   (self.payload_len, self.payload_tokens, "payload")):
            if ntok < 1 or (ntok * self.d_model) % length:
                raise ShapeMismatch(
                    f"{what}: {ntok} tokens x d_model={self.d_model} is not a whole number "
                    f"of channels of length {length}")
        if self.num_classes < 2 or self.payload_len < 1:
            raise ShapeMismatch("need num_classes >= 2 and payload_len >= 1")

    @property
    def header_refine_channels(self) -> int:
        return self.header_tokens * self.d_model // HEADER_LEN

    @property
    def payload_refine_channels(self) -> int:
        return self.payload_tokens * self.d_model // self.payload_len

    @property
    def tokens(self) -> int:
        return self.header_tokens + self.payload_tokens

    def to_dict(self) -> dict:
        d = asdict(self)
        d["header_kernels"] = list(self.header_kernels)
        d["payload_kernels"] = list(self.payload_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- weights

def _extractor_shapes(prefix: str, kernels, C: int) -> dict:
    shapes = {}
    for i, k in enumerate(kernels):
        b = f"{prefix}.b{i}"
        shapes.update({
            f"{b}.dw_w": (1, k), f"{b}.dw_b": (1,),
            f"{b}.pw_w": (C, 1), f"{b}.pw_b": (C,),
        })
        if C != 1:
            shapes.update({f"{b}.proj_w": (C, 1), f"{b}.proj_b": (C,)})
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in canonical order."""
    C, d = cfg.extractor_channels, cfg.d_model
    shapes = _extractor_shapes("header", cfg.header_kernels, C)
    shapes.update(_extractor_shapes("payload", cfg.payload_kernels, C))
    for mod, n, R in (("header", len(cfg.header_kernels), cfg.header_refine_channels),
                      ("payload", len(cfg.payload_kernels), cfg.payload_refine_channels)):
        cin = C * n
        shapes.update({
            f"{mod}.refine.dw_w": (cin, cfg.refine_kernel), f"{mod}.refine.dw_b": (cin,),
            f"{mod}.refine.pw_w": (R, cin), f"{mod}.refine.pw_b": (R,),
        })
    if cfg.fusion:
        for i in range(cfg.num_layers):
            f = f"fusion.{i}"
            shapes.update({
                f"{f}.wq": (d, d), f"{f}.wk": (d, d), f"{f}.wv": (d, d), f"{f}.wo": (d, d),
                f"{f}.ln1_g": (d,), f"{f}.ln1_b": (d,),
                f"{f}.w1": (d, cfg.d_ff), f"{f}.b1": (cfg.d_ff,),
                f"{f}.w2": (cfg.d_ff, d), f"{f}.b2": (d,),
                f"{f}.ln2_g": (d,), f"{f}.ln2_b": (d,),
            })
    else:
        shapes.update({"nofusion.w": (d, d), "nofusion.b": (d,)})
    H = cfg.classifier_hidden
    shapes.update({
        "cls.w1": (d, H), "cls.b1": (H,),
        "cls.w2": (H, cfg.num_classes), "cls.b2": (cfg.num_classes,),
    })
    return shapes


def _fan_in(name: str, shapes: dict) -> int:
    stem, leaf = name.rsplit(".", 1)
    if leaf in ("dw_w", "dw_b"):
        return shapes[f"{stem}.dw_w"][1]
    if leaf in ("pw_w", "pw_b"):
        return shapes[f"{stem}.pw_w"][1]
    if leaf in ("proj_w", "proj_b"):
        return shapes[f"{stem}.proj_w"][1]
    if leaf in ("w", "b"):
        return shapes[f"{stem}.w"][0]
    if leaf in ("b1",):
        return shapes[f"{stem}.w1"][0]
    if leaf in ("b2",):
        return shapes[f"{stem}.w2"][0]
    return shapes[name][0]


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor; LayerNorm gains 1, shifts 0."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf.startswith("ln"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(1.0 / _fan_in(name, shapes))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------- forward

def header_extractor(x, params, cfg: ModelConfig):
    """Three parallel residual blocks over the 128-byte header, kernels 1/2/4 by default."""
    if x.shape[1:] != (1, HEADER_LEN):
        raise ShapeMismatch(f"header input must be (B, 1, {HEADER_LEN}), got {x.shape}")
    return _extract(x, params, cfg, "header", cfg.header_kernels)


def payload_extractor(x, params, cfg: ModelConfig):
    if x.shape[1:] != (1, cfg.payload_len):
        raise ShapeMismatch(f"payload input must be (B, 1, {cfg.payload_len}), got {x.shape}")
    return _extract(x, params, cfg, "payload", cfg.payload_kernels)


def _extract(x, params, cfg, prefix, kernels):
    outs, caches = [], []
    for i, k in enumerate(kernels):
        p = _sub(params, f"{prefix}.b{i}")
        if p["dw_w"].shape[1] != k:
            raise ShapeMismatch(f"{prefix}.b{i}.dw_w has kernel {p['dw_w'].shape[1]}, expected {k}")
        y, c = nn.resconv1d_forward(x, p, cfg.pool_size)
        outs.append(y)
        caches.append(c)
    return outs, caches


def refine_concat(header_maps, payload_maps, params, cfg: ModelConfig):
    """Channel-concat each modality's maps, refine with a separable conv, cut into tokens.

    Returns F with header tokens first, then payload tokens.
    """
    toks, caches = [], []
    for mod, maps in (("header", header_maps), ("payload", payload_maps)):
        if len({m.shape for m in maps}) != 1:
            raise ShapeMismatch(f"{mod} branch maps differ in shape")
        cat = np.concatenate(maps, axis=1)
        p = _sub(params, f"{mod}.refine")
        y, c = nn.sepconv1d_forward(cat, p["dw_w"], p["dw_b"], p["pw_w"], p["pw_b"])
        B = y.shape[0]
        toks.append(y.reshape(B, -1, cfg.d_model))
        caches.append((c, y.shape, len(maps)))
    return np.concatenate(toks, axis=1), caches


def check_input_range(x, what: str):
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{what} features must be scaled to [0, 1]; got range "
                         f"[{x.min():.3g}, {x.max():.3g}]")


def forward(params, cfg: ModelConfig, header, payload, *, training=False, rng=None):
    """Logits for a batch; header is (B, 128) and payload is (B, P), both in [0, 1].

    Returns ``(logits, cache)``; the cache feeds :func:`backward`.
    """
    header = np.asarray(header)
    payload = np.asarray(payload)
    check_input_range(header, "header")
    check_input_range(payload, "payload")
    dtype = params["cls.w1"].dtype
    if header.ndim != 2 or payload.ndim != 2 or header.shape[0] != payload.shape[0]:
        raise ShapeMismatch(f"bad batch shapes {header.shape} / {payload.shape}")
    h = header.astype(dtype, copy=False)[:, None, :]
    d = payload.astype(dtype, copy=False)[:, None, :]
    if cfg.mask_header:
        h = np.zeros_like(h)
    if cfg.mask_payload:
        d = np.zeros_like(d)
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")

    hm, hc = header_extractor(h, params, cfg)
    pm, pc = payload_extractor(d, params, cfg)
    F, rc = refine_concat(hm, pm, params, cfg)

    fc = []
    if cfg.fusion:
        for i in range(cfg.num_layers):
            F, c = nn.fusion_layer_forward(F, _sub(params, f"fusion.{i}"), cfg.num_heads,
                                           cfg.dropout, training, rng)
            fc.append(c)
    else:
        F, c1 = nn.linear_forward(F, params["nofusion.w"], params["nofusion.b"])
        F, c2 = nn.relu_forward(F)
        fc = [(c1, c2)]

    T = F.shape[1]
    pooled = F.mean(axis=1)
    z, cl1 = nn.linear_forward(pooled, params["cls.w1"], params["cls.b1"])
    za, cr = nn.relu_forward(z)
    logits, cl2 = nn.linear_forward(za, params["cls.w2"], params["cls.b2"])
    return logits, (hc, pc, rc, fc, T, cl1, cr, cl2)


def backward(params, cfg: ModelConfig, dlogits, cache) -> dict[str, np.ndarray]:
    """Gradients of every parameter given d(loss)/d(logits)."""
    hc, pc, rc, fc, T, cl1, cr, cl2 = cache
    grads = {}
    dza, g = nn.linear_backward(dlogits, cl2)
    grads["cls.w2"], grads["cls.b2"] = g["w"], g["b"]
    dpool, g = nn.linear_backward(nn.relu_backward(dza, cr), cl1)
    grads["cls.w1"], grads["cls.b1"] = g["w"], g["b"]
    B, d = dpool.shape
    dF = np.broadcast_to(dpool[:, None, :] / T, (B, T, d)).astype(dpool.dtype)

    if cfg.fusion:
        for i in reversed(range(cfg.num_layers)):
            dF, g = nn.fusion_layer_backward(dF, fc[i])
            grads.update({f"fusion.{i}.{k}": v for k, v in g.items()})
    else:
        c1, c2 = fc[0]
        dF, g = nn.linear_backward(nn.relu_backward(dF, c2), c1)
        grads["nofusion.w"], grads["nofusion.b"] = g["w"], g["b"]

    start = 0
    for (mod, maps_cache), (c, yshape, n) in zip((("header", hc), ("payload", pc)), rc):
        ntok = yshape[1] * yshape[2] // cfg.d_model
        dy = dF[:, start:start + ntok].reshape(yshape)
        start += ntok
        dcat, g = nn.sepconv1d_backward(dy, c)
        grads.update({f"{mod}.refine.{k}": v for k, v in g.items()})
        C = dcat.shape[1] // n
        for i in range(n):
            _, g = nn.resconv1d_backward(dcat[:, i * C:(i + 1) * C], maps_cache[i])
            grads.update({f"{mod}.b{i}.{k}": v for k, v in g.items()})
    return grads


def predict_proba(params, cfg, header, payload, batch_size: int = 1024):
    """Class probabilities (float64 rows summing to 1) via the cache-free inference path."""
    from .infer import infer_logits

    header = np.asarray(header)
    payload = np.asarray(payload)
    if len(header) == 0:
        return np.zeros((0, cfg.num_classes))
    out = []
    for s in range(0, len(header), batch_size):
        logits = infer_logits(params, cfg, header[s:s + batch_size], payload[s:s + batch_size])
        out.append(nn.softmax(logits.astype(np.float64)))
    return np.concatenate(out)


def argmax_lowest(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(scores, axis=1)


def predict(params, cfg, header, payload, batch_size: int = 1024) -> np.ndarray:
    return argmax_lowest(predict_proba(params, cfg, header, payload, batch_size))


# ---------------------------------------------------------------- resources

@dataclass
class ResourceReport:
    flops: int
    params: int
    model_size_bytes: int
    breakdown: list[tuple[str, int, int]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "flops": self.flops, "params": self.params,
            "model_size_bytes": self.model_size_bytes,
            "breakdown": [{"layer": n, "params": p, "flops": f} for n, p, f in self.breakdown],
        }


def _sepconv_cost(cin, cout, k, L):
    params = cin * k + cin + cin * cout + cout
    # 2 per multiply-add, 1 per bias add
    flops = 2 * cin * k * L + cin * L + 2 * cin * cout * L + cout * L
    return params, flops


def count_resources(cfg: ModelConfig, params: dict | None = None) -> ResourceReport:
    """Parameter and single-packet FLOP counts from the architecture formulas.

    FLOPs count each multiply-add as 2 and each bias add as 1; activations,
    pooling, softmax and normalisation are not counted.  ``model_size_bytes``
    is the length of the serialized weight file.
    """
    C, d, T = cfg.extractor_channels, cfg.d_model, cfg.tokens
    rows = []
    for mod, kernels, L, R in (
            ("header", cfg.header_kernels, HEADER_LEN, cfg.header_refine_channels),
            ("payload", cfg.payload_kernels, cfg.payload_len, cfg.payload_refine_channels)):
        for i, k in enumerate(kernels):
            p, f = _sepconv_cost(1, C, k, L)
            if C != 1:
                p += 2 * C
                f += 2 * C * L + C * L
            rows.append((f"{mod}.b{i} (k={k})", p, f))
        p, f = _sepconv_cost(C * len(kernels), R, cfg.refine_kernel, L)
        rows.append((f"{mod}.refine", p, f))
    if cfg.fusion:
        for i in range(cfg.num_layers):
            att_p = 4 * d * d
            att_f = 2 * 3 * T * d * d + 2 * 2 * T * T * d + 2 * T * d * d
            ffn_p = 2 * d * cfg.d_ff + cfg.d_ff + d
            ffn_f = 2 * 2 * T * d * cfg.d_ff + T * (cfg.d_ff + d)
            rows.append((f"fusion.{i}.attention", att_p, att_f))
            rows.append((f"fusion.{i}.ffn", ffn_p, ffn_f))
            rows.append((f"fusion.{i}.layernorm", 4 * d, 0))
    else:
        rows.append(("nofusion", d * d + d, 2 * T * d * d + T * d))
    H, K = cfg.classifier_hidden, cfg.num_classes
    rows.append(("classifier", d * H + H + H * K + K, 2 * d * H + H + 2 * H * K + K))
    n_params = sum(r[1] for r in rows)
    flops = sum(r[2] for r in rows)
    if params is None:
        params = init_weights(cfg)
    size = len(serialize_weights(params, cfg))
    return ResourceReport(flops=flops, params=n_params, model_size_bytes=size, breakdown=rows)


# ---------------------------------------------------------------- file format

def serialize_weights(params: dict, cfg: ModelConfig) -> bytes:
    cfg_blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    out = [WEIGHT_MAGIC, struct.pack("<HI", WEIGHT_VERSION, len(cfg_blob)), cfg_blob]
    for name in param_shapes(cfg):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_weights(path, params: dict, cfg: ModelConfig) -> int:
    blob = serialize_weights(params, cfg)
    Path(path).write_bytes(blob)
    return len(blob)


def load_weights(path, expect: ModelConfig | None = None) -> tuple[dict, ModelConfig]:
    """Read a weight file; with ``expect`` set, every tensor must match its shapes."""
    blob = Path(path).read_bytes()
    if blob[:len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        if blob[:5] == WEIGHT_MAGIC[:5]:
            raise VersionMismatch(f"{path}: unsupported weight file magic {blob[:8]!r}")
        raise BadMagic(f"{path}: not a weight file")
    try:
        return _parse_weights(blob, path, expect)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, ShapeMismatch):
            raise
        raise RecordFileError(f"{path}: truncated or corrupt weight file ({e})") from e


def _parse_weights(blob: bytes, path, expect):
    pos = len(WEIGHT_MAGIC)
    version, n = struct.unpack_from("<HI", blob, pos)
    if version != WEIGHT_VERSION:
        raise VersionMismatch(f"{path}: weight file version {version}, expected {WEIGHT_VERSION}")
    pos += 6
    cfg = ModelConfig.from_dict(json.loads(blob[pos:pos + n]))
    pos += n
    params = {}
    while pos < len(blob):
        ln, rank = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos:pos + ln].decode()
        pos += ln
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(blob, "<f4", count, pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    target = expect or cfg
    want = param_shapes(target)
    for name, shape in want.items():
        if name not in params:
            raise ShapeMismatch(f"tensor {name} missing from {path}")
        if params[name].shape != shape:
            raise ShapeMismatch(f"tensor {name}: file has {params[name].shape}, "
                                f"config expects {shape}")
    extra = set(params) - set(want)
    if extra:
        raise ShapeMismatch(f"unexpected tensors in {path}: {sorted(extra)}")
    if expect is not None and expect != cfg:
        warnings.warn("weight file config differs from expected config in non-shape fields")
    return params, cfg
