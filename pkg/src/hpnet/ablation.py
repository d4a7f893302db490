"""Modality and fusion ablations, each trained and evaluated under the base settings."""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace

from .metrics import EvalReport, evaluate
from .model import ModelConfig
from .train import TrainConfig, TrainResult, train


class Variant(enum.Enum):
    FULL = "full"
    MASK_HEADER = "mask_header"
    MASK_PAYLOAD = "mask_payload"
    NO_FUSION = "no_fusion"


# the one config field each variant is allowed to change, and the change itself
_FIELD = {
    Variant.FULL: None,
    Variant.MASK_HEADER: "mask_header",
    Variant.MASK_PAYLOAD: "mask_payload",
    Variant.NO_FUSION: "fusion",
}
_DELTA = {
    Variant.FULL: {},
    Variant.MASK_HEADER: {"mask_header": True},
    Variant.MASK_PAYLOAD: {"mask_payload": True},
    Variant.NO_FUSION: {"fusion": False},
}


def variant_config(base: ModelConfig, variant: Variant) -> ModelConfig:
    """``base`` with exactly the variant's declared change; asserts nothing else moved."""
    cfg = replace(base, **_DELTA[variant])
    diff = {f.name for f in fields(ModelConfig) if getattr(cfg, f.name) != getattr(base, f.name)}
    allowed = _FIELD[variant]
    expected = {allowed} if allowed and getattr(base, allowed) != getattr(cfg, allowed) else set()
    if diff != expected:
        raise AssertionError(f"{variant.value} changed {sorted(diff)}, expected {sorted(expected)}")
    return cfg


@dataclass
class AblationRun:
    variant: Variant
    config: ModelConfig
    result: TrainResult
    report: EvalReport


def run_ablation(train_set, val_set, test_set, base: ModelConfig, train_cfg: TrainConfig,
                 variants, class_names=None, log=None) -> dict[Variant, AblationRun]:
    """Train and evaluate the full model and every requested variant with identical seeds."""
    variants = [Variant(v) for v in variants]
    if not variants:
        raise ValueError("no ablation variants requested")
    if Variant.FULL not in variants:
        variants = [Variant.FULL] + variants
    runs = {}
    for v in variants:
        cfg = variant_config(base, v)
        if log:
            log(f"training variant {v.value}")
        res = train(train_set, val_set, cfg, train_cfg, log=log)
        rep = evaluate(test_set, res.params, res.model_config, class_names)
        runs[v] = AblationRun(v, cfg, res, rep)
    return runs
