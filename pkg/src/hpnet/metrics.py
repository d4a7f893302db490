"""Confusion-matrix metrics: accuracy and macro precision / recall / F1."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySplit, LabelOutOfRange, ShapeMismatch


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise ShapeMismatch(f"{len(true)} labels but {len(pred)} predictions")
    for v in (true, pred):
        if len(v) and (v.min() < 0 or v.max() >= num_classes):
            raise LabelOutOfRange(f"class ids must lie in [0, {num_classes})")
    return np.bincount(true * num_classes + pred, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    # 0/0 is reported as 0 and flagged
    return (num / den, False) if den else (0.0, True)


@dataclass
class EvalReport:
    confusion: np.ndarray
    class_names: list[str]
    acc: float
    macro_pr: float
    macro_rc: float
    macro_f1: float
    per_class_pr: list[float]
    per_class_rc: list[float]
    per_class_f1: list[float]
    undefined: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @classmethod
    def from_confusion(cls, confusion, class_names=None) -> "EvalReport":
        cm = np.asarray(confusion, dtype=np.int64)
        K = cm.shape[0]
        if cm.shape != (K, K):
            raise ShapeMismatch(f"confusion matrix must be square, got {cm.shape}")
        names = list(class_names) if class_names else [str(i) for i in range(K)]
        total = int(cm.sum())
        if total == 0:
            raise EmptySplit("no examples to evaluate")
        prs, rcs, f1s, undefined = [], [], [], []
        for k in range(K):
            tp = int(cm[k, k])
            fp = int(cm[:, k].sum()) - tp
            fn = int(cm[k, :].sum()) - tp
            pr, u_pr = _ratio(tp, tp + fp)
            rc, u_rc = _ratio(tp, tp + fn)
            f1, u_f1 = (2 * (pr * rc) / (pr + rc), False) if pr + rc else (0.0, True)
            undefined += [f"{m}:{names[k]}" for m, u in (("pr", u_pr), ("rc", u_rc), ("f1", u_f1)) if u]
            prs.append(pr)
            rcs.append(rc)
            f1s.append(f1)
        return cls(confusion=cm, class_names=names, acc=int(np.trace(cm)) / total,
                   macro_pr=sum(prs) / K, macro_rc=sum(rcs) / K, macro_f1=sum(f1s) / K,
                   per_class_pr=prs, per_class_rc=rcs, per_class_f1=f1s, undefined=undefined)

    def to_dict(self) -> dict:
        return {
            "n": self.total, "acc": self.acc, "macro_pr": self.macro_pr,
            "macro_rc": self.macro_rc, "macro_f1": self.macro_f1,
            "class_names": self.class_names, "per_class_pr": self.per_class_pr,
            "per_class_rc": self.per_class_rc, "per_class_f1": self.per_class_f1,
            "undefined": self.undefined, "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + self.class_names)
        for name, row in zip(self.class_names, self.confusion.tolist()):
            w.writerow([name] + row)
        return buf.getvalue()

    @staticmethod
    def confusion_from_csv(text: str) -> tuple[np.ndarray, list[str]]:
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0][1:]
        cm = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        return cm, names

    def table(self) -> str:
        width = max(8, max(len(n) for n in self.class_names))
        lines = [f"{'class':<{width}}  {'PR':>7}  {'RC':>7}  {'F1':>7}  {'support':>7}"]
        support = self.confusion.sum(axis=1)
        for k, n in enumerate(self.class_names):
            lines.append(f"{n:<{width}}  {self.per_class_pr[k]:7.4f}  {self.per_class_rc[k]:7.4f}  "
                         f"{self.per_class_f1[k]:7.4f}  {int(support[k]):7d}")
        lines.append(f"{'macro':<{width}}  {self.macro_pr:7.4f}  {self.macro_rc:7.4f}  "
                     f"{self.macro_f1:7.4f}  {self.total:7d}")
        lines.append(f"accuracy {self.acc:.4f}")
        if self.undefined:
            lines.append("undefined (reported as 0): " + ", ".join(self.undefined))
        return "\n".join(lines) + "\n"


def evaluate_predictions(true, pred, num_classes: int, class_names=None) -> EvalReport:
    return EvalReport.from_confusion(confusion_matrix(true, pred, num_classes), class_names)


def merge_confusions(parts) -> np.ndarray:
    """Exact merge of per-shard confusion matrices (counts add)."""
    parts = list(parts)
    return np.sum(parts, axis=0, dtype=np.int64)


def evaluate(records, params, cfg, class_names=None, shards: int = 1,
             batch_size: int = 1024) -> EvalReport:
    """Evaluate a model on a :class:`~hpnet.dataset.RecordSet`.

    ``shards > 1`` splits the set into contiguous shards evaluated by a thread
    pool; their confusion matrices are summed, which is exact.
    """
    from .model import predict

    if records.num_classes != cfg.num_classes:
        raise ShapeMismatch(f"records have K={records.num_classes}, model has K={cfg.num_classes}")
    if len(records) == 0:
        raise EmptySplit("no examples to evaluate")
    h, p = records.features()
    K = cfg.num_classes

    def run(idx):
        pred = predict(params, cfg, h[idx], p[idx], batch_size)
        return confusion_matrix(records.labels[idx], pred, K)

    if shards <= 1:
        cm = run(slice(None))
    else:
        pieces = np.array_split(np.arange(len(records)), shards)
        with ThreadPoolExecutor(max_workers=shards) as ex:
            cm = merge_confusions(ex.map(run, pieces))
    return EvalReport.from_confusion(cm, class_names)
