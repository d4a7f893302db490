import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hpnet.errors import BadMagic, RecordFileError, ShapeMismatch, VersionMismatch
from hpnet.infer import infer_logits
from hpnet.model import (
    ModelConfig, _sepconv_cost, _sub, argmax_lowest, backward, count_resources, forward, header_extractor,
    init_weights, load_weights, param_shapes, payload_extractor, predict, predict_proba,
    refine_concat, save_weights, serialize_weights,
)
from hpnet.nn import softmax_cross_entropy
from oracles import numeric_grad, rel_error

SMALL = ModelConfig(payload_len=16, num_classes=3, extractor_channels=2, header_tokens=8,
                    payload_tokens=2, d_model=16, num_layers=1, num_heads=2, d_ff=8,
                    classifier_hidden=4)


def _inputs(rng, B, P=64):
    return rng.random((B, 128)), rng.random((B, P))


# ------------------------------------------------------------ extractors

def test_kernel_sizes_instantiated():
    shapes = param_shapes(ModelConfig())
    assert [shapes[f"header.b{i}.dw_w"][1] for i in range(3)] == [1, 2, 4]
    assert [shapes[f"payload.b{i}.dw_w"][1] for i in range(3)] == [2, 4, 8]
    assert ModelConfig().payload_len == 64


def test_zero_extractor_weights_pass_input_through():
    cfg = ModelConfig()
    p = {k: np.zeros_like(v, dtype=np.float64) for k, v in init_weights(cfg).items()}
    for i in range(3):
        p[f"header.b{i}.proj_w"][:] = 1.0
    x = np.random.default_rng(0).random((2, 1, 128))
    maps, _ = header_extractor(x, p, cfg)
    for m in maps:
        assert np.array_equal(m, np.broadcast_to(x, m.shape))


def test_wider_kernel_reacts_more_to_two_byte_motif():
    cfg = ModelConfig(extractor_channels=1)
    p = {k: np.zeros_like(v, dtype=np.float64) for k, v in init_weights(cfg).items()}
    for i in range(3):
        p[f"header.b{i}.dw_w"][:] = 1.0
        p[f"header.b{i}.pw_w"][:] = 1.0
    two = np.zeros((1, 1, 128))
    two[0, 0, 50:52] = [0.6, 0.9]
    one = two.copy()
    one[0, 0, 51] = 0.0
    a, _ = header_extractor(two, p, cfg)
    b, _ = header_extractor(one, p, cfg)
    d1 = np.abs(a[0] - b[0]).sum()
    d2 = np.abs(a[1] - b[1]).sum()
    assert d2 > d1 > 0


def test_zero_payload_gives_bias_response():
    cfg = ModelConfig()
    p = init_weights(cfg, seed=3, dtype=np.float64)
    maps, _ = payload_extractor(np.zeros((1, 1, 64)), p, cfg)
    for i, m in enumerate(maps):
        b = _sub(p, f"payload.b{i}")
        expected = np.maximum(b["pw_w"][:, 0] * b["dw_b"][0] + b["pw_b"], 0) + b["proj_b"]
        assert np.allclose(m[0], expected[:, None], atol=1e-15, rtol=0)


def test_extractor_shape_errors():
    cfg = ModelConfig()
    p = init_weights(cfg)
    with pytest.raises(ShapeMismatch):
        header_extractor(np.zeros((1, 1, 127)), p, cfg)
    with pytest.raises(ShapeMismatch):
        payload_extractor(np.zeros((1, 1, 32)), p, cfg)


# ------------------------------------------------------------ token layout

def test_token_count_and_header_first():
    cfg = ModelConfig()
    p = init_weights(cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    h, d = _inputs(rng, 2)
    hm, _ = header_extractor(h[:, None], p, cfg)
    pm, _ = payload_extractor(d[:, None], p, cfg)
    F, _ = refine_concat(hm, pm, p, cfg)
    assert F.shape == (2, cfg.header_tokens + cfg.payload_tokens, cfg.d_model)
    pm2, _ = payload_extractor(rng.random((2, 1, 64)), p, cfg)
    F2, _ = refine_concat(hm, pm2, p, cfg)
    assert np.array_equal(F[:, :cfg.header_tokens], F2[:, :cfg.header_tokens])
    assert not np.array_equal(F[:, cfg.header_tokens:], F2[:, cfg.header_tokens:])


def test_zero_refine_weights_give_bias_tokens():
    cfg = ModelConfig()
    p = init_weights(cfg, dtype=np.float64)
    for mod in ("header", "payload"):
        for leaf in ("dw_w", "dw_b", "pw_w"):
            p[f"{mod}.refine.{leaf}"][:] = 0
    rng = np.random.default_rng(1)
    hm, _ = header_extractor(rng.random((1, 1, 128)), p, cfg)
    pm, _ = payload_extractor(rng.random((1, 1, 64)), p, cfg)
    F, _ = refine_concat(hm, pm, p, cfg)
    hb = np.repeat(p["header.refine.pw_b"][:, None], 128, axis=1).reshape(-1, cfg.d_model)
    pb = np.repeat(p["payload.refine.pw_b"][:, None], 64, axis=1).reshape(-1, cfg.d_model)
    assert np.array_equal(F[0], np.concatenate([hb, pb]))


# ------------------------------------------------------------ forward / predict

@pytest.mark.parametrize("cfg", [ModelConfig(), SMALL, replace(SMALL, fusion=False),
                                 ModelConfig(num_classes=2, payload_len=32, payload_tokens=16)])
def test_logit_shapes(cfg):
    p = init_weights(cfg)
    h, d = _inputs(np.random.default_rng(0), 3, cfg.payload_len)
    logits, _ = forward(p, cfg, h, d)
    assert logits.shape == (3, cfg.num_classes)
    assert np.isfinite(logits).all()


def test_eval_forward_is_deterministic():
    cfg = ModelConfig()
    p = init_weights(cfg)
    h, d = _inputs(np.random.default_rng(0), 5)
    a, _ = forward(p, cfg, h, d)
    b, _ = forward(p, cfg, h, d)
    assert np.array_equal(a, b)


def test_argmax_ties_go_to_lowest_index():
    assert list(argmax_lowest(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0], [0.0, -1.0, 0.0]]))) == [1, 0, 0]


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8), st.floats(-1e3, 1e3))
def test_argmax_invariant_to_constant_shift(row, c):
    z = np.array([row])
    # the shift must not merge distinct values through rounding
    if len(set((z + c)[0])) != len(set(row)):
        return
    assert argmax_lowest(z)[0] == argmax_lowest(z + c)[0]


def test_masking_changes_logits():
    cfg = ModelConfig()
    p = init_weights(cfg, seed=1)
    h, d = _inputs(np.random.default_rng(2), 4)
    full, _ = forward(p, cfg, h, d)
    mh, _ = forward(p, replace(cfg, mask_header=True), h, d)
    mp, _ = forward(p, replace(cfg, mask_payload=True), h, d)
    assert not np.allclose(full, mh)
    assert not np.allclose(full, mp)


def test_header_mask_is_noop_when_header_path_is_constant():
    cfg = ModelConfig()
    p = init_weights(cfg, seed=1, dtype=np.float64)
    for name in p:
        if name.startswith("header.b"):
            p[name][:] = 0
    h, d = _inputs(np.random.default_rng(2), 4)
    full, _ = forward(p, cfg, h, d)
    mh, _ = forward(p, replace(cfg, mask_header=True), h, d)
    assert np.array_equal(full, mh)


def test_inputs_outside_unit_range_are_rejected():
    cfg = ModelConfig()
    p = init_weights(cfg)
    h, d = _inputs(np.random.default_rng(0), 2)
    with pytest.raises(ValueError):
        forward(p, cfg, h * 255, d)
    with pytest.raises(ValueError):
        infer_logits(p, cfg, h, d - 0.5)


@pytest.mark.parametrize("cfg", [ModelConfig(), replace(ModelConfig(), fusion=False),
                                 replace(ModelConfig(), mask_payload=True), SMALL])
def test_inference_path_matches_forward(cfg):
    p64 = init_weights(cfg, seed=5, dtype=np.float64)
    h, d = _inputs(np.random.default_rng(6), 37, cfg.payload_len)
    ref, _ = forward(p64, cfg, h, d)
    assert np.abs(infer_logits(p64, cfg, h, d) - ref).max() < 1e-12
    p32 = init_weights(cfg, seed=5)
    ref32, _ = forward(p32, cfg, h, d)
    assert np.abs(infer_logits(p32, cfg, h, d) - ref32).max() < 1e-4
    assert infer_logits(p32, cfg, h[:0], d[:0]).shape == (0, cfg.num_classes)


def test_predict_proba_rows_sum_to_one():
    cfg = ModelConfig()
    p = init_weights(cfg)
    h, d = _inputs(np.random.default_rng(0), 10)
    pr = predict_proba(p, cfg, h, d, batch_size=3)
    assert np.abs(pr.sum(1) - 1).max() < 1e-12
    assert np.array_equal(predict(p, cfg, h, d), np.argmax(pr, 1))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("fusion", [True, False])
def test_full_model_gradients(seed, fusion):
    cfg = replace(SMALL, fusion=fusion, dropout=0.0)
    p = init_weights(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(100 + seed)
    h, d = _inputs(rng, 3, cfg.payload_len)
    y = rng.integers(0, 3, 3)

    def loss():
        return softmax_cross_entropy(forward(p, cfg, h, d)[0], y)[0]

    logits, cache = forward(p, cfg, h, d)
    _, dl = softmax_cross_entropy(logits, y)
    grads = backward(p, cfg, dl, cache)
    assert set(grads) == set(p)
    for name in p:
        num = numeric_grad(loss, p[name], eps=1e-5)
        if np.abs(grads[name]).max() < 1e-12:
            assert np.abs(num).max() < 1e-8, name
            continue
        assert rel_error(grads[name], num) < 1e-5, name


# ------------------------------------------------------------ resources

def test_default_resource_budget():
    r = count_resources(ModelConfig())
    assert 10_000 <= r.params <= 40_000
    assert 4_000_000 <= r.flops <= 10_000_000
    assert r.model_size_bytes <= 500_000
    assert r.params * 4 <= r.model_size_bytes <= r.params * 4 + 16_384
    assert sum(x[1] for x in r.breakdown) == r.params
    assert sum(x[2] for x in r.breakdown) == r.flops


def test_sepconv_contribution_formula():
    # k=3, C_in=4 -> C_out=8: 12 + 4 + 32 + 8
    assert _sepconv_cost(4, 8, 3, 128)[0] == 56
    cfg = ModelConfig(extractor_channels=4, header_tokens=8, payload_tokens=8, d_model=32)
    rows = {n: pr for n, pr, _ in count_resources(cfg).breakdown}
    # header refine: 3 branches x 4 channels = 12 inputs, k=3, 8*32/128 = 2 outputs
    assert rows["header.refine"] == 12 * 3 + 12 + 12 * 2 + 2
    names = [n for n in param_shapes(cfg) if n.startswith("header.refine.")]
    assert rows["header.refine"] == sum(init_weights(cfg)[n].size for n in names)


def _tensor_sizes_from_file(blob: bytes) -> list[int]:
    """Walk the weight file independently of load_weights."""
    pos = 8
    _version, n = struct.unpack_from("<HI", blob, pos)
    pos += 6 + n
    sizes = []
    while pos < len(blob):
        ln, rank = struct.unpack_from("<HB", blob, pos)
        pos += 3 + ln
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims))
        sizes.append(size)
        pos += 4 * size
    assert pos == len(blob)
    return sizes


@pytest.mark.parametrize("cfg", [ModelConfig(), SMALL, replace(SMALL, fusion=False)])
def test_param_count_equals_serialized_elements(cfg):
    blob = serialize_weights(init_weights(cfg), cfg)
    assert sum(_tensor_sizes_from_file(blob)) == count_resources(cfg).params


# ------------------------------------------------------------ weight files

def test_save_load_bitwise(tmp_path):
    cfg = ModelConfig()
    p = init_weights(cfg, seed=9)
    path = tmp_path / "w.bin"
    n = save_weights(path, p, cfg)
    assert n == path.stat().st_size <= 500_000
    q, cfg2 = load_weights(path)
    assert cfg2 == cfg
    assert all(np.array_equal(p[k], q[k]) for k in p)
    h, d = _inputs(np.random.default_rng(0), 8)
    assert np.array_equal(forward(p, cfg, h, d)[0], forward(q, cfg2, h, d)[0])
    assert path.read_bytes()[:8] == b"AMLHPW1\n"


def test_load_with_wrong_class_count_names_tensor(tmp_path):
    cfg = ModelConfig()
    path = tmp_path / "w.bin"
    save_weights(path, init_weights(cfg), cfg)
    with pytest.raises(ShapeMismatch, match="cls.w2"):
        load_weights(path, expect=replace(cfg, num_classes=7))


def test_bad_magic_and_version(tmp_path):
    cfg = SMALL
    path = tmp_path / "w.bin"
    save_weights(path, init_weights(cfg), cfg)
    blob = bytearray(path.read_bytes())
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(BadMagic):
        load_weights(bad)
    blob[8:10] = struct.pack("<H", 99)
    bad.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        load_weights(bad)


def test_truncated_weight_file(tmp_path):
    cfg = SMALL
    path = tmp_path / "w.bin"
    save_weights(path, init_weights(cfg), cfg)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(RecordFileError):
        load_weights(path)


def test_config_validation():
    with pytest.raises(ShapeMismatch):
        ModelConfig(d_model=30)
    with pytest.raises(ShapeMismatch):
        ModelConfig(header_tokens=3)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
