"""Command-line pipeline: prepare, synth, split, train, eval, classify, bench, count, ablate.

Exit codes: 0 success, 1 usage error, 2 input error, 3 model/config mismatch,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import dump_json, load_config
from .errors import (CaptureError, ConfigError, DivergedLoss, EmptySplit, HpnetError,
                     InvalidSpec, LabelOutOfRange, RecordFileError, ShapeMismatch)

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_MODEL, EXIT_RUNTIME = 0, 1, 2, 3, 4
SECTIONS = ("model", "train", "data")


class UsageError(Exception):
    pass


class ModelMismatch(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- run config

def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def run_config(args, flag_overrides: dict) -> dict:
    """Merge the config file, then ``--set`` pairs, then explicit flags (later wins)."""
    cfg = {s: {} for s in SECTIONS}
    if getattr(args, "config", None):
        data = load_config(args.config)
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{args.config}: unknown sections {sorted(unknown)}")
        for s in SECTIONS:
            cfg[s].update(data.get(s, {}))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise UsageError(f"--set expects section.key=value with section in {SECTIONS}, got {item!r}")
        cfg[section][name] = _parse_value(value)
    for (section, name), value in flag_overrides.items():
        if value is not None:
            cfg[section][name] = value
    return cfg


def _model_config(cfg: dict, **fixed):
    from .model import ModelConfig

    d = dict(cfg["model"])
    d.update({k: v for k, v in fixed.items() if v is not None})
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[model]: {e}") from e


def _train_config(cfg: dict):
    from .train import TrainConfig

    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[train]: {e}") from e


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo(out_dir: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    dump_json({"command": command, "version": __version__, "config": cfg,
               "argv": sys.argv[1:], **(extra or {})}, out_dir / "run_config.json")


def _load_weights(path, expect=None):
    from .model import load_weights

    try:
        return load_weights(path, expect)
    except FileNotFoundError:
        raise
    except (HpnetError, ValueError, KeyError) as e:
        raise ModelMismatch(f"{path}: {e}") from e


def _class_names(manifest_arg, records_path, K):
    from .dataset import DatasetManifest, manifest_path_for

    path = Path(manifest_arg) if manifest_arg else (
        manifest_path_for(records_path) if records_path else None)
    if path and path.exists():
        names = DatasetManifest.load(path).class_names
        if len(names) != K:
            raise ModelMismatch(f"{path}: {len(names)} classes but the model has K={K}")
        return names
    return [str(i) for i in range(K)]


def _load_set(path, K=None, P=None):
    from .dataset import load_records

    rs = load_records(path)
    if K is not None and rs.num_classes != K:
        raise ModelMismatch(f"{path}: records have K={rs.num_classes}, model has K={K}")
    if P is not None and rs.payload_len != P:
        raise ModelMismatch(f"{path}: records have P={rs.payload_len}, model has P={P}")
    return rs


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    from .dataset import LabelingRules, ingest_capture, manifest_path_for

    cfg = run_config(args, {("data", "payload_len"): args.payload_len,
                            ("data", "anonymize"): args.anonymize,
                            ("data", "mode"): args.mode})
    data = cfg["data"]
    P = int(data.get("payload_len", 64))
    rules = LabelingRules.load(args.rules)
    manifest, stats = ingest_capture(args.pcaps, rules, args.out, P=P,
                                     anonymize_ip=bool(data.get("anonymize", True)),
                                     mode=data.get("mode", "permissive"))
    manifest.extra["run_config"] = cfg
    manifest.save(manifest_path_for(args.out))
    print("frames,emitted,too_short,unsupported,no_match,dropped")
    s = stats
    print(f"{s.frames},{s.emitted},{s.too_short},{s.unsupported},{s.no_match},{s.dropped}")
    for name, n in zip(manifest.class_names, manifest.counts):
        _log(f"class {name}: {n}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .capture import write_pcap
    from .dataset import manifest_path_for, write_records
    from .synthetic import SyntheticSpec, standard_spec, synthesize

    spec = SyntheticSpec.from_dict(load_config(args.spec)) if args.spec else standard_spec()
    over = {}
    if args.per_class is not None:
        over["per_class_count"] = args.per_class
    if args.noise is not None:
        over["noise_level"] = args.noise
    if args.payload_len is not None:
        over["payload_len"] = args.payload_len
    spec = replace(spec, **over)
    data = synthesize(spec, args.seed, keep_frames=bool(args.pcap_dir))
    write_records(args.out, data.records, spec.num_classes, spec.payload_len)
    data.manifest.save(manifest_path_for(args.out))
    if args.pcap_dir:
        d = _out_dir(args.pcap_dir)
        write_pcap(d / "synthetic.pcap", data.frames)
        lines = ["[labels]", "classes = [" + ", ".join(json.dumps(c.name) for c in spec.classes) + "]",
                 "strict = true", ""]
        for k, c in enumerate(spec.classes):
            lines += ["[[labels.rule]]", f'src = "10.{k}.0.0/16"', f"class = {json.dumps(c.name)}", ""]
        (d / "rules.toml").write_text("\n".join(lines))
    print("class,count")
    for name, n in zip(data.manifest.class_names, data.manifest.counts):
        print(f"{name},{n}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .dataset import split_files

    ratios = [float(r) for r in args.ratios.split(",")]
    if len(ratios) != 3:
        raise UsageError("--ratios needs three comma-separated numbers")
    try:
        manifest = split_files(args.records, args.out, args.seed, ratios)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print("class,train,val,test")
    for name in manifest.class_names:
        tr, va, te = manifest.split_counts[name]
        print(f"{name},{tr},{va},{te}")
    if manifest.uneven_classes:
        _log("uneven split for: " + ", ".join(manifest.uneven_classes))
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import DatasetManifest, manifest_path_for
    from .model import save_weights
    from .plotting import plot_history
    from .train import train

    cfg = run_config(args, {("train", "epochs"): args.epochs, ("train", "lr"): args.lr,
                            ("train", "batch_size"): args.batch_size, ("train", "seed"): args.seed,
                            ("train", "dropout"): args.dropout})
    tr = _load_set(args.train)
    va = _load_set(args.val) if args.val else None
    mcfg = _model_config(cfg, num_classes=cfg["model"].get("num_classes", tr.num_classes),
                         payload_len=cfg["model"].get("payload_len", tr.payload_len))
    tcfg = _train_config(cfg)
    try:
        result = train(tr, va, mcfg, tcfg, log=_log)
    except ShapeMismatch as e:
        raise ModelMismatch(str(e)) from e
    out = _out_dir(args.out)
    size = save_weights(out / "weights.bin", result.params, result.model_config)
    hist = result.history_dicts()
    dump_json(hist, out / "history.json")
    with open(out / "history.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(hist[0]))
        w.writeheader()
        w.writerows(hist)
    plot_history(hist, out / "history.png")
    mpath = manifest_path_for(args.train)
    if mpath.exists():
        DatasetManifest.load(mpath).save(out / "manifest.json")
    cfg["model"] = result.model_config.to_dict()
    cfg["train"] = tcfg.to_dict()
    _echo(out, "train", cfg, {"inputs": {"train": args.train, "val": args.val}})
    print("epoch,train_loss,val_loss,val_acc,val_macro_f1")
    for h in hist:
        print(",".join("" if h[k] is None else f"{h[k]:.6g}" if isinstance(h[k], float) else str(h[k])
                       for k in ("epoch", "train_loss", "val_loss", "val_acc", "val_macro_f1")))
    _log(f"wrote {out / 'weights.bin'} ({size} bytes)")
    return EXIT_OK


def _write_eval(report, out: Path, stem: str = "eval") -> None:
    from .plotting import plot_confusion

    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}.txt").write_text(report.table())
    (out / f"{stem}_confusion.csv").write_text(report.confusion_csv())
    plot_confusion(report, out / f"{stem}_confusion.png")


def cmd_eval(args) -> int:
    from .metrics import evaluate

    params, mcfg = _load_weights(args.weights)
    rs = _load_set(args.records, mcfg.num_classes, mcfg.payload_len)
    names = _class_names(args.manifest, args.records, mcfg.num_classes)
    report = evaluate(rs, params, mcfg, names, shards=args.shards)
    out = _out_dir(args.out)
    _write_eval(report, out)
    _echo(out, "eval", {"model": mcfg.to_dict(), "train": {}, "data": {}},
          {"inputs": {"records": args.records, "weights": args.weights}, "shards": args.shards})
    print("metric,value")
    for k in ("acc", "macro_pr", "macro_rc", "macro_f1"):
        print(f"{k},{getattr(report, k):.6f}")
    print(f"n,{report.total}")
    if report.undefined:
        _log("undefined ratios reported as 0: " + ", ".join(report.undefined))
    return EXIT_OK


def _iter_inputs(path, P, mode, batch):
    """Yield ``(index, ts, header_uint8, payload_uint8)`` batches from a capture or record file."""
    from .dataset import RECORD_MAGIC, iter_capture_records, read_records, record_vectors
    from .errors import UnsupportedProtocol

    with open(path, "rb") as f:
        is_records = f.read(len(RECORD_MAGIC)) == RECORD_MAGIC
    buf = []

    def flush():
        idx = [b[0] for b in buf]
        ts = [b[1] for b in buf]
        return idx, ts, np.stack([b[2] for b in buf]), np.stack([b[3] for b in buf])

    skipped = 0
    if is_records:
        for i, ex in enumerate(read_records(path)):
            if len(ex.payload) != P:
                raise ModelMismatch(f"{path}: records have P={len(ex.payload)}, model has P={P}")
            buf.append((i, "", ex.header, ex.payload))
            if len(buf) == batch:
                yield flush()
                buf = []
    else:
        from .dataset import IngestStats

        stats = IngestStats()
        i = -1
        for i, (_, rec) in enumerate(iter_capture_records([path], mode, stats)):
            try:
                h, p = record_vectors(rec, P, mode)
            except UnsupportedProtocol:
                skipped += 1
                continue
            buf.append((i, f"{rec.ts_sec}.{rec.ts_nsec:09d}", h, p))
            if len(buf) == batch:
                yield flush()
                buf = []
        skipped += stats.too_short + stats.unsupported
    if buf:
        yield flush()
    if skipped:
        _log(f"skipped {skipped} packets that could not be represented")


def cmd_classify(args) -> int:
    from .model import predict_proba

    params, mcfg = _load_weights(args.weights)
    names = _class_names(args.manifest, None, mcfg.num_classes)
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "ts", "pred"] + [f"prob_{c}" for c in names])
        for idx, ts, h, p in _iter_inputs(args.input, mcfg.payload_len, args.mode, args.batch):
            probs = predict_proba(params, mcfg, h / np.float32(255), p / np.float32(255))
            pred = np.argmax(probs, axis=1)
            for i in range(len(idx)):
                w.writerow([idx[i], ts[i], int(pred[i])] + [f"{v:.8f}" for v in probs[i]])
            n += len(idx)
    print(f"classified,{n}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_inference
    from .model import init_weights
    from .plotting import plot_bench

    if args.weights:
        params, mcfg = _load_weights(args.weights)
    else:
        cfg = run_config(args, {})
        mcfg = _model_config(cfg)
        params = init_weights(mcfg, seed=args.seed)
    levels = [int(v) for v in args.levels.split(",")]
    if not levels or min(levels) < 1:
        raise UsageError("--levels must be positive integers")
    report = bench_inference(params, mcfg, levels, reps=args.reps, seed=args.seed)
    out = _out_dir(args.out)
    dump_json(report.to_dict(), out / "bench.json")
    (out / "bench.csv").write_text(report.csv())
    (out / "bench.txt").write_text(report.table())
    plot_bench(report, out / "bench.png")
    _echo(out, "bench", {"model": mcfg.to_dict(), "train": {}, "data": {}},
          {"levels": levels, "reps": args.reps, "seed": args.seed})
    sys.stdout.write(report.csv())
    return EXIT_OK


def cmd_count(args) -> int:
    from .model import count_resources

    if args.weights:
        params, mcfg = _load_weights(args.weights)
    else:
        mcfg = _model_config(run_config(args, {}))
        params = None
    rep = count_resources(mcfg, params)
    print("layer,params,flops")
    for name, p, f in rep.breakdown:
        print(f"{name},{p},{f}")
    print(f"total,{rep.params},{rep.flops}")
    print(f"model_size_bytes,{rep.model_size_bytes},")
    if args.out:
        out = _out_dir(args.out)
        dump_json(rep.as_dict(), out / "resources.json")
        _echo(out, "count", {"model": mcfg.to_dict(), "train": {}, "data": {}})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import Variant, run_ablation
    from .plotting import plot_ablation

    cfg = run_config(args, {("train", "epochs"): args.epochs, ("train", "seed"): args.seed})
    tr, va, te = _load_set(args.train), _load_set(args.val), _load_set(args.test)
    mcfg = _model_config(cfg, num_classes=cfg["model"].get("num_classes", tr.num_classes),
                         payload_len=cfg["model"].get("payload_len", tr.payload_len))
    names = _class_names(args.manifest, args.test, mcfg.num_classes)
    variants = [Variant(v) for v in args.variants.split(",")]
    runs = run_ablation(tr, va, te, mcfg, _train_config(cfg), variants, names, log=_log)
    out = _out_dir(args.out)
    print("variant,acc,macro_pr,macro_rc,macro_f1")
    summary = {}
    for v, run in runs.items():
        r = run.report
        _write_eval(r, out, stem=v.value)
        summary[v.value] = r.to_dict()
        print(f"{v.value},{r.acc:.6f},{r.macro_pr:.6f},{r.macro_rc:.6f},{r.macro_f1:.6f}")
    dump_json(summary, out / "ablation.json")
    plot_ablation({v.value: run.report.macro_f1 for v, run in runs.items()}, out / "ablation.png")
    _echo(out, "ablate", cfg, {"variants": [v.value for v in runs]})
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hpnet", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"hpnet {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="TOML or JSON file with [model], [train], [data] sections")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        return p

    p = with_config(sub.add_parser("prepare", help="label and serialize packets from captures"))
    p.add_argument("pcaps", nargs="+")
    p.add_argument("--rules", required=True, help="labeling rules file")
    p.add_argument("--out", required=True, help="output record file")
    p.add_argument("--payload-len", type=int, default=None)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--anonymize", dest="anonymize", action="store_true", default=None)
    g.add_argument("--no-anonymize", dest="anonymize", action="store_false")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--strict", dest="mode", action="store_const", const="strict", default=None)
    g.add_argument("--permissive", dest="mode", action="store_const", const="permissive")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--spec", help="synthetic spec file (default: the standard 5-class task)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--payload-len", type=int, default=None)
    p.add_argument("--pcap-dir", help="also write the frames as a pcap plus matching labeling rules")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="stratified train/val/test split")
    p.add_argument("records")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_split)

    p = with_config(sub.add_parser("train", help="train a model"))
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate weights on a record file")
    p.add_argument("records")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--shards", type=int, default=1, help="evaluate in N shards and merge")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="per-packet predictions for a capture or record file")
    p.add_argument("input")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--manifest")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--mode", choices=("permissive", "strict"), default="permissive")
    p.set_defaults(func=cmd_classify)

    p = with_config(sub.add_parser("bench", help="batched inference latency and memory"))
    p.add_argument("--weights")
    p.add_argument("--levels", default="1,10,100,1000")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = with_config(sub.add_parser("count", help="parameters, FLOPs and model size"))
    p.add_argument("--weights")
    p.add_argument("--out")
    p.set_defaults(func=cmd_count)

    p = with_config(sub.add_parser("ablate", help="train and compare ablation variants"))
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--variants", default="mask_header,mask_payload,no_fusion")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors, --help and --version
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        _log(f"usage error: {e}")
        return EXIT_USAGE
    except ModelMismatch as e:
        _log(f"model/config mismatch: {e}")
        return EXIT_MODEL
    except (ShapeMismatch, LabelOutOfRange) as e:
        _log(f"model/config mismatch: {e}")
        return EXIT_MODEL
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        _log(f"input error: {e.filename}: {e.strerror}")
        return EXIT_INPUT
    except (CaptureError, RecordFileError, ConfigError, InvalidSpec, EmptySplit) as e:
        _log(f"input error: {e}")
        return EXIT_INPUT
    except (HpnetError, DivergedLoss) as e:
        _log(f"runtime failure: {e}")
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        _log(f"runtime failure: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
