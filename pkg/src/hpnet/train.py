"""Mini-batch Adam training on softmax cross-entropy."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .errors import DivergedLoss, EmptySplit, ShapeMismatch
from .metrics import EvalReport, confusion_matrix
from .model import ModelConfig, backward, forward, init_weights


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-2
    dropout: float = 0.1
    seed: int = 0
    log_every: int = 0  # steps between progress lines; 0 logs once per epoch

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs and batch_size must be >= 1 and lr > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_acc: float | None
    val_macro_f1: float | None
    seconds: float


@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    history: list[EpochLog] = field(default_factory=list)

    def history_dicts(self) -> list[dict]:
        return [asdict(h) for h in self.history]


def validation_metrics(params, cfg: ModelConfig, records) -> tuple[float, EvalReport]:
    """Mean cross-entropy and metrics of the eval-mode model on ``records``."""
    from .infer import infer_logits

    h, p = records.features()
    logits = infer_logits(params, cfg, h, p).astype(np.float64)
    loss, _ = nn.softmax_cross_entropy(logits, records.labels)
    pred = np.argmax(logits, axis=1)
    report = EvalReport.from_confusion(confusion_matrix(records.labels, pred, cfg.num_classes))
    return float(loss), report


def train(train_set, val_set, model_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(),
          log=None, params=None) -> TrainResult:
    """Train from a seeded initialization; the returned weights are the final epoch's.

    The dropout rate comes from ``train_cfg``.  Batches are reshuffled every
    epoch by a generator seeded from ``train_cfg.seed``, which also drives
    dropout, so a run is bit-reproducible on a single thread.
    """
    if len(train_set) == 0:
        raise EmptySplit("training split is empty")
    for name, rs in (("train", train_set), ("val", val_set)):
        if rs is None:
            continue
        if rs.num_classes != model_cfg.num_classes:
            raise ShapeMismatch(f"{name} records have K={rs.num_classes}, "
                                f"model config has K={model_cfg.num_classes}")
        if rs.payload_len != model_cfg.payload_len:
            raise ShapeMismatch(f"{name} records have P={rs.payload_len}, "
                                f"model config has P={model_cfg.payload_len}")
    cfg = replace(model_cfg, dropout=train_cfg.dropout)
    if params is None:
        params = init_weights(cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    state = nn.AdamState(lr=train_cfg.lr)
    h_all, p_all = train_set.features()
    y_all = train_set.labels
    n = len(y_all)
    history = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, train_cfg.batch_size):
            idx = order[s:s + train_cfg.batch_size]
            logits, cache = forward(params, cfg, h_all[idx], p_all[idx], training=True, rng=rng)
            loss, dlogits = nn.softmax_cross_entropy(logits, y_all[idx])
            if not np.isfinite(loss):
                raise DivergedLoss(step)
            grads = backward(params, cfg, dlogits, cache)
            nn.adam_step(params, grads, state)
            step += 1
            total += float(loss) * len(idx)
            seen += len(idx)
            if log and train_cfg.log_every and step % train_cfg.log_every == 0:
                log(f"step {step} loss {float(loss):.5f}")
        if val_set is not None and len(val_set):
            vloss, rep = validation_metrics(params, cfg, val_set)
            vacc, vf1 = rep.acc, rep.macro_f1
        else:
            vloss = vacc = vf1 = None
        rec = EpochLog(epoch, total / seen, vloss, vacc, vf1, time.perf_counter() - t0)
        history.append(rec)
        if log:
            vtxt = "" if vloss is None else f" val_loss {vloss:.5f} val_acc {vacc:.4f} val_f1 {vf1:.4f}"
            log(f"epoch {epoch} train_loss {rec.train_loss:.5f}{vtxt} ({rec.seconds:.1f}s)")
    return TrainResult(params=params, model_config=cfg, history=history)
