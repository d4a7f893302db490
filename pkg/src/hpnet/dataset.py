"""Labeled record files, capture ingestion, labeling rules and stratified splits.

Record file layout (little-endian)::

    b"AMLHP1\\n"  u16 K  u16 P  u32 count
    count x ( u16 label | 128 header bytes | P payload bytes )
"""

from __future__ import annotations

import fnmatch
import ipaddress
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .capture import iter_frames
from .config import dump_json, load_config
from .errors import (BadMagic, ClassTooSmall, ConfigError, FrameTooShort, LabelOutOfRange,
                     RecordFileError, TruncatedRecord, UnsupportedProtocol, VersionMismatch)
from .packets import (HEADER_LEN, LinkType, PacketRecord, anonymize,
                      build_header_vector, build_payload_vector, parse_packet, to_model_input)

RECORD_MAGIC = b"AMLHP1\n"
_MAGIC_STEM = b"AMLHP"
_FILE_HEAD = struct.Struct("<HHI")
HEAD_LEN = len(RECORD_MAGIC) + _FILE_HEAD.size
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class LabeledExample:
    header: np.ndarray   # uint8 (128,)
    payload: np.ndarray  # uint8 (P,)
    label: int


def record_dtype(P: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("header", "u1", (HEADER_LEN,)), ("payload", "u1", (P,))])


@dataclass
class RecordSet:
    """In-memory block of records: uint8 byte vectors plus integer labels."""

    headers: np.ndarray
    payloads: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.headers = np.asarray(self.headers, dtype=np.uint8).reshape(-1, HEADER_LEN)
        self.payloads = np.asarray(self.payloads, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.payloads.ndim != 2:
            self.payloads = self.payloads.reshape(len(self.labels), -1)
        if not (len(self.headers) == len(self.payloads) == len(self.labels)):
            raise ValueError("headers, payloads and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")

    @property
    def payload_len(self) -> int:
        return self.payloads.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "RecordSet":
        return RecordSet(self.headers[idx], self.payloads[idx], self.labels[idx], self.num_classes)

    def features(self) -> tuple[np.ndarray, np.ndarray]:
        """Float32 model inputs scaled to [0, 1]."""
        return to_model_input(self.headers, self.payloads)

    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def examples(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield LabeledExample(self.headers[i], self.payloads[i], int(self.labels[i]))

    @classmethod
    def concat(cls, parts: list["RecordSet"]) -> "RecordSet":
        return cls(np.concatenate([p.headers for p in parts]),
                   np.concatenate([p.payloads for p in parts]),
                   np.concatenate([p.labels for p in parts]), parts[0].num_classes)


# ---------------------------------------------------------------- record files

def _check_head(head: bytes, path) -> tuple[int, int, int]:
    if len(head) < len(RECORD_MAGIC) or head[:len(_MAGIC_STEM)] != _MAGIC_STEM:
        raise BadMagic(f"{path}: not a record file")
    if head[:len(RECORD_MAGIC)] != RECORD_MAGIC:
        raise VersionMismatch(f"{path}: record format {head[:len(RECORD_MAGIC)]!r}, "
                              f"expected {RECORD_MAGIC!r}")
    if len(head) < HEAD_LEN:
        raise TruncatedRecord(0, path)
    return _FILE_HEAD.unpack_from(head, len(RECORD_MAGIC))


def write_records(path, examples: Iterable[LabeledExample] | RecordSet, num_classes: int,
                  payload_len: int) -> int:
    """Stream examples to ``path``; returns the number written."""
    if isinstance(examples, RecordSet):
        if examples.payload_len != payload_len:
            raise ValueError("payload length disagrees with the record set")
        arr = np.empty(len(examples), dtype=record_dtype(payload_len))
        arr["label"], arr["header"], arr["payload"] = examples.labels, examples.headers, examples.payloads
        with open(path, "wb") as f:
            f.write(RECORD_MAGIC + _FILE_HEAD.pack(num_classes, payload_len, len(arr)))
            f.write(arr.tobytes())
        return len(arr)
    n = 0
    with open(path, "wb") as f:
        f.write(RECORD_MAGIC + _FILE_HEAD.pack(num_classes, payload_len, 0))
        for ex in examples:
            if not 0 <= ex.label < num_classes:
                raise LabelOutOfRange(f"label {ex.label} outside [0, {num_classes})")
            h = np.asarray(ex.header, dtype=np.uint8)
            p = np.asarray(ex.payload, dtype=np.uint8)
            if h.shape != (HEADER_LEN,) or p.shape != (payload_len,):
                raise ValueError(f"example {n} has shapes {h.shape}/{p.shape}")
            f.write(struct.pack("<H", ex.label) + h.tobytes() + p.tobytes())
            n += 1
        f.seek(len(RECORD_MAGIC))
        f.write(_FILE_HEAD.pack(num_classes, payload_len, n))
    return n


def read_header(path) -> tuple[int, int, int]:
    """``(K, P, count)`` of a record file."""
    with open(path, "rb") as f:
        return _check_head(f.read(HEAD_LEN), path)


def read_records(path) -> Iterator[LabeledExample]:
    """Stream examples one at a time (constant memory)."""
    with open(path, "rb") as f:
        K, P, count = _check_head(f.read(HEAD_LEN), path)
        stride = 2 + HEADER_LEN + P
        for i in range(count):
            rec = f.read(stride)
            if len(rec) != stride:
                raise TruncatedRecord(i, path)
            label = struct.unpack_from("<H", rec)[0]
            if label >= K:
                raise LabelOutOfRange(f"{path}: record {i} has label {label} >= K={K}")
            yield LabeledExample(np.frombuffer(rec, np.uint8, HEADER_LEN, 2),
                                 np.frombuffer(rec, np.uint8, P, 2 + HEADER_LEN), label)


def load_records(path) -> RecordSet:
    """Read a whole record file into memory."""
    blob = Path(path).read_bytes()
    K, P, count = _check_head(blob[:HEAD_LEN], path)
    dt = record_dtype(P)
    have = (len(blob) - HEAD_LEN) // dt.itemsize
    if have < count:
        raise TruncatedRecord(have, path)
    if len(blob) != HEAD_LEN + count * dt.itemsize:
        raise RecordFileError(f"{path}: {len(blob) - HEAD_LEN - count * dt.itemsize} "
                              f"unexpected trailing bytes")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=HEAD_LEN)
    return RecordSet(arr["header"].copy(), arr["payload"].copy(), arr["label"].astype(np.int64), K)


# ---------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    class_names: list[str]
    counts: list[int]
    payload_len: int = 64
    split_seed: int | None = None
    split_ratios: list[float] = field(default_factory=lambda: list(DEFAULT_RATIOS))
    split_counts: dict | None = None
    uneven_classes: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad manifest: {e}") from e

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(load_config(path))


def manifest_path_for(records_path) -> Path:
    p = Path(records_path)
    return p.with_name(p.stem + ".manifest.json")


def default_manifest(records: RecordSet, class_names=None) -> DatasetManifest:
    names = list(class_names) if class_names else [str(i) for i in range(records.num_classes)]
    return DatasetManifest(class_names=names, counts=records.counts(), payload_len=records.payload_len)


# ---------------------------------------------------------------- labeling rules

_PROTO = {"tcp": 6, "udp": 17, "icmp": 1}
DROP = "drop"


def _mac(s: str) -> bytes:
    b = bytes.fromhex(s.replace(":", "").replace("-", ""))
    if len(b) != 6:
        raise ConfigError(f"bad MAC address {s!r}")
    return b


@dataclass(frozen=True)
class LabelRule:
    """One first-match rule; every field that is set must match."""

    klass: str
    src: str | None = None
    dst: str | None = None
    sport: int | None = None
    dport: int | None = None
    proto: str | int | None = None
    src_mac: str | None = None
    dst_mac: str | None = None
    file: str | None = None

    def __post_init__(self):
        for n in ("src", "dst"):
            v = getattr(self, n)
            if v is not None:
                try:
                    ipaddress.ip_network(v, strict=False)
                except ValueError as e:
                    raise ConfigError(f"rule {n}={v!r}: {e}") from e
        for n in ("src_mac", "dst_mac"):
            if getattr(self, n) is not None:
                _mac(getattr(self, n))
        if isinstance(self.proto, str) and self.proto.lower() not in _PROTO:
            raise ConfigError(f"unknown protocol {self.proto!r}")

    def matches(self, rec: PacketRecord, filename: str) -> bool:
        ip, tp = rec.parsed_ipv4, rec.parsed_transport
        for n, addr in (("src", ip and ip.src_addr), ("dst", ip and ip.dst_addr)):
            net = getattr(self, n)
            if net is not None:
                if addr is None or ipaddress.ip_address(addr) not in ipaddress.ip_network(net, strict=False):
                    return False
        if self.sport is not None and (tp is None or tp.src_port != self.sport):
            return False
        if self.dport is not None and (tp is None or tp.dst_port != self.dport):
            return False
        if self.proto is not None:
            want = _PROTO[self.proto.lower()] if isinstance(self.proto, str) else int(self.proto)
            if ip is None or ip.protocol != want:
                return False
        for n, sl in (("dst_mac", slice(0, 6)), ("src_mac", slice(6, 12))):
            mac = getattr(self, n)
            if mac is not None:
                if rec.link_type != LinkType.ETHERNET or rec.raw_bytes[sl] != _mac(mac):
                    return False
        if self.file is not None and not (fnmatch.fnmatch(filename, self.file)
                                          or fnmatch.fnmatch(Path(filename).name, self.file)):
            return False
        return True


@dataclass
class LabelingRules:
    """Ordered first-match rules.

    Packets matching no rule are dropped (and counted) when ``strict`` is set or
    no ``default`` class is given; otherwise they receive the ``default`` class.
    """

    classes: list[str]
    rules: list[LabelRule] = field(default_factory=list)
    default: str | None = None
    strict: bool = True

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes) or DROP in self.classes:
            raise ConfigError("class names must be unique and may not be 'drop'")
        known = set(self.classes) | {DROP}
        for r in self.rules:
            if r.klass not in known:
                raise ConfigError(f"rule targets unknown class {r.klass!r}")
        if self.default is not None and self.default not in known:
            raise ConfigError(f"default class {self.default!r} is not declared")

    def label(self, rec: PacketRecord, filename: str = "") -> int | None:
        """Class index, ``None`` for an explicit drop, or ``-1`` when nothing matched."""
        for r in self.rules:
            if r.matches(rec, filename):
                return None if r.klass == DROP else self.classes.index(r.klass)
        if self.strict or self.default is None:
            return -1
        return None if self.default == DROP else self.classes.index(self.default)

    @classmethod
    def from_dict(cls, d: dict) -> "LabelingRules":
        d = d.get("labels", d)
        rules = []
        for i, r in enumerate(d.get("rule", d.get("rules", []))):
            r = dict(r)
            if "class" not in r:
                raise ConfigError(f"rule {i} has no class")
            r["klass"] = r.pop("class")
            try:
                rules.append(LabelRule(**r))
            except TypeError as e:
                raise ConfigError(f"rule {i}: {e}") from e
        if "classes" not in d:
            raise ConfigError("labeling config needs a classes list")
        return cls(classes=list(d["classes"]), rules=rules, default=d.get("default"),
                   strict=bool(d.get("strict", True)))

    @classmethod
    def load(cls, path) -> "LabelingRules":
        return cls.from_dict(load_config(path))


# ---------------------------------------------------------------- ingestion

@dataclass
class IngestStats:
    frames: int = 0
    emitted: int = 0
    too_short: int = 0
    unsupported: int = 0
    no_match: int = 0
    dropped: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def iter_capture_records(paths, mode: str = "permissive", stats: IngestStats | None = None):
    """Yield ``(filename, PacketRecord)`` for every parseable frame of every capture."""
    stats = stats if stats is not None else IngestStats()
    for path in paths:
        for fr in iter_frames(path):
            stats.frames += 1
            try:
                rec = parse_packet(fr.data, fr.link_type, fr.ts_sec, fr.ts_nsec)
            except FrameTooShort:
                stats.too_short += 1
                continue
            if mode == "strict" and (rec.parsed_ipv4 is None or rec.parsed_transport is None):
                stats.unsupported += 1
                continue
            yield str(path), rec


def record_vectors(rec: PacketRecord, P: int, mode: str = "permissive",
                   anonymize_ip: bool = True) -> tuple[np.ndarray, np.ndarray]:
    if anonymize_ip:
        rec = anonymize(rec)
    return build_header_vector(rec, mode), build_payload_vector(rec, P).data


def ingest_capture(paths, rules: LabelingRules, out_path, P: int = 64, anonymize_ip: bool = True,
                   mode: str = "permissive") -> tuple[DatasetManifest, IngestStats]:
    """Label, anonymize and serialize every packet of the given captures.

    Labels are assigned before anonymization, so rules may use real addresses.
    """
    if mode not in ("strict", "permissive"):
        raise ValueError(f"unknown mode {mode!r}")
    stats = IngestStats()
    counts = [0] * len(rules.classes)

    def gen():
        for filename, rec in iter_capture_records(paths, mode, stats):
            y = rules.label(rec, filename)
            if y is None:
                stats.dropped += 1
                continue
            if y < 0:
                stats.no_match += 1
                continue
            try:
                h, p = record_vectors(rec, P, mode, anonymize_ip)
            except UnsupportedProtocol:
                stats.unsupported += 1
                continue
            counts[y] += 1
            stats.emitted += 1
            yield LabeledExample(h, p, y)

    write_records(out_path, gen(), len(rules.classes), P)
    manifest = DatasetManifest(class_names=list(rules.classes), counts=counts, payload_len=P,
                               extra={"sources": [str(p) for p in paths], "anonymized": anonymize_ip,
                                      "mode": mode, "ingest": stats.as_dict()})
    return manifest, stats


# ---------------------------------------------------------------- split

def split_sizes(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    """Per-class (train, val, test) sizes.

    Test takes ``floor(r_test * n)`` and val takes ``floor((r_val + r_test) * n)``
    minus that, so val and test are floored and the remainder goes to train
    (10 -> 8/1/1, 9 -> 8/1/0).
    """
    _, r_val, r_test = ratios
    n_test = math.floor(r_test * n + 1e-9)
    n_val = math.floor((r_val + r_test) * n + 1e-9) - n_test
    return n - n_val - n_test, n_val, n_test


def _check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    return ratios


def split(records: RecordSet, seed: int, ratios=DEFAULT_RATIOS, class_names=None):
    """Stratified train/val/test partition.

    Returns ``(train, val, test, info)`` where ``info`` holds the per-class sizes
    and the classes whose split is not exactly proportional.
    """
    ratios = _check_ratios(ratios)
    names = list(class_names) if class_names else [str(i) for i in range(records.num_classes)]
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    sizes, uneven = {}, []
    for c in range(records.num_classes):
        idx = np.flatnonzero(records.labels == c)
        n = len(idx)
        if n < 3:
            raise ClassTooSmall(f"class {names[c]!r} has {n} examples; a split needs at least 3")
        n_tr, n_va, n_te = split_sizes(n, ratios)
        perm = rng.permutation(idx)
        parts[2].append(perm[:n_te])
        parts[1].append(perm[n_te:n_te + n_va])
        parts[0].append(perm[n_te + n_va:])
        sizes[names[c]] = [n_tr, n_va, n_te]
        if any(abs(s - r * n) > 1e-9 for s, r in zip((n_tr, n_va, n_te), ratios)):
            uneven.append(names[c])
    out = [records.subset(np.sort(np.concatenate(p))) for p in parts]
    info = {"split_seed": int(seed), "split_ratios": list(ratios), "split_counts": sizes,
            "uneven_classes": uneven}
    return out[0], out[1], out[2], info


def split_files(records_path, out_dir, seed: int, ratios=DEFAULT_RATIOS) -> DatasetManifest:
    """Split a record file into ``train/val/test.rec`` plus an updated manifest."""
    recs = load_records(records_path)
    mpath = manifest_path_for(records_path)
    manifest = DatasetManifest.load(mpath) if mpath.exists() else default_manifest(recs)
    if manifest.num_classes != recs.num_classes:
        raise ConfigError(f"{mpath}: {manifest.num_classes} classes but records declare {recs.num_classes}")
    train, val, test, info = split(recs, seed, ratios, manifest.class_names)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_records(out_dir / f"{name}.rec", part, recs.num_classes, recs.payload_len)
    manifest.split_seed = info["split_seed"]
    manifest.split_ratios = info["split_ratios"]
    manifest.split_counts = info["split_counts"]
    manifest.uneven_classes = info["uneven_classes"]
    for name, part in (("train", train), ("val", val), ("test", test)):
        replace(manifest, counts=part.counts()).save(out_dir / f"{name}.manifest.json")
    manifest.save(out_dir / "manifest.json")
    return manifest
