"""Deterministic synthetic traffic with per-class header rules and payload motifs.

Frames are real Ethernet/IPv4/TCP-or-UDP packets; the records come from
running them through the normal parse / anonymize / represent path.  Noise
replaces non-structural bytes (never version/IHL, total length, fragment
field, protocol or TCP data offset) so every frame stays parseable.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .capture import Frame
from .dataset import DatasetManifest, RecordSet, record_vectors
from .errors import InvalidSpec
from .packets import LinkType, parse_packet

ETH_SRC = bytes.fromhex("020000000001")
ETH_DST = bytes.fromhex("020000000002")

# offsets (from the start of each header) that noise may overwrite
_IP_NOISY = (1, 4, 5, 8, 10, 11)  # addresses stay clean so address rules can relabel captures
_TCP_NOISY = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 14, 15, 16, 17, 18, 19)
_UDP_NOISY = (0, 1, 2, 3, 4, 5, 6, 7)


@dataclass(frozen=True)
class ClassRule:
    """Generation rule for one class.

    Header side: destination port, TTL band, TOS, TCP flags/window/options and
    the TCP share of the protocol mix.  Payload side: a magic prefix and a token
    repeated every ``token_period`` bytes after it (0 disables the token).
    """

    name: str
    dport: int
    ttl: tuple[int, int] = (64, 64)
    tos: int = 0
    tcp_fraction: float = 1.0
    tcp_flags: int = 0x18
    tcp_window: int = 64240
    tcp_options: bytes = b""
    magic: bytes = b""
    token: bytes = b""
    token_period: int = 0
    payload_len: tuple[int, int] = (16, 96)

    def header_key(self) -> tuple:
        return (self.dport, self.ttl, self.tos, self.tcp_fraction, self.tcp_flags,
                self.tcp_window, self.tcp_options)

    def payload_key(self) -> tuple:
        return (self.magic, self.token, self.token_period)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("tcp_options", "magic", "token"):
            d[k] = d[k].hex()
        d["ttl"], d["payload_len"] = list(self.ttl), list(self.payload_len)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassRule":
        d = dict(d)
        try:
            for k in ("tcp_options", "magic", "token"):
                if k in d and isinstance(d[k], str):
                    d[k] = bytes.fromhex(d[k])
            for k in ("ttl", "payload_len"):
                if k in d:
                    d[k] = tuple(d[k])
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise InvalidSpec(f"bad class rule: {e}") from e


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple[ClassRule, ...]
    per_class_count: int = 1000
    noise_level: float = 0.0
    payload_len: int = 64

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        if not self.classes:
            raise InvalidSpec("at least one class is required")
        if self.per_class_count < 1:
            raise InvalidSpec("per_class_count must be >= 1")
        if not 0.0 <= self.noise_level <= 1.0:
            raise InvalidSpec("noise_level must lie in [0, 1]")
        if self.payload_len < 1:
            raise InvalidSpec("payload_len must be >= 1")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise InvalidSpec("class names must be unique")
        seen = {}
        for c in self.classes:
            key = (c.header_key(), c.payload_key())
            if key in seen:
                raise InvalidSpec(f"classes {seen[key]!r} and {c.name!r} have identical rules")
            seen[key] = c.name
            lo, hi = c.ttl
            if not 1 <= lo <= hi <= 255:
                raise InvalidSpec(f"{c.name}: bad TTL band {c.ttl}")
            if not 0 <= c.dport <= 0xFFFF or not 0 <= c.tos <= 0xFF:
                raise InvalidSpec(f"{c.name}: port or TOS out of range")
            if not 0.0 <= c.tcp_fraction <= 1.0:
                raise InvalidSpec(f"{c.name}: tcp_fraction must lie in [0, 1]")
            if len(c.tcp_options) > 40:
                raise InvalidSpec(f"{c.name}: TCP options exceed 40 bytes")
            plo, phi = c.payload_len
            if not 0 <= plo <= phi or len(c.magic) > plo:
                raise InvalidSpec(f"{c.name}: payload length band {c.payload_len} "
                                  f"cannot hold the {len(c.magic)}-byte magic")
            if c.token_period and (not c.token or len(c.token) > c.token_period):
                raise InvalidSpec(f"{c.name}: token must be non-empty and fit its period")

    def to_dict(self) -> dict:
        return {"per_class_count": self.per_class_count, "noise_level": self.noise_level,
                "payload_len": self.payload_len, "classes": [c.to_dict() for c in self.classes]}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = d.get("synthetic", d)
        try:
            classes = tuple(ClassRule.from_dict(c) for c in d["classes"])
            spec = cls(classes=classes, per_class_count=int(d.get("per_class_count", 1000)),
                       noise_level=float(d.get("noise_level", 0.0)),
                       payload_len=int(d.get("payload_len", 64)))
        except (KeyError, TypeError) as e:
            raise InvalidSpec(f"bad synthetic spec: {e}") from e
        spec.validate()
        return spec


def standard_spec(per_class_count: int = 1000, noise_level: float = 0.02) -> SyntheticSpec:
    """The five-class mixed task used for the learning and ablation checks.

    Classes 0-3 form a 2x2 grid of two header patterns and two payload motifs,
    so class pairs (0,1) and (2,3) differ only in the header and pairs (0,2)
    and (1,3) only in the payload.  Class 4 differs in both and mixes TCP and
    UDP.
    """
    web = dict(dport=80, ttl=(56, 64), tos=0x00, tcp_flags=0x18, tcp_window=64240)
    mqtt = dict(dport=1883, ttl=(120, 128), tos=0x28, tcp_flags=0x19, tcp_window=502,
                tcp_options=bytes.fromhex("0101080a00001a2b00003c4d"))
    motif_a = dict(magic=b"\x10\x2a\x00\x04MQTT\x04\x02", token=b"\xaa\x55", token_period=8)
    motif_b = dict(magic=b"POST /api/v1 ", token=b"\x00\x7f\x7f", token_period=11)
    classes = (
        ClassRule("web-a", **web, **motif_a),
        ClassRule("mqtt-a", **mqtt, **motif_a),
        ClassRule("web-b", **web, **motif_b),
        ClassRule("mqtt-b", **mqtt, **motif_b),
        ClassRule("coap-flood", dport=5683, ttl=(240, 255), tos=0xB8, tcp_fraction=0.5,
                  tcp_flags=0x02, tcp_window=1024, magic=b"\x40\x01\x30\x39\xb4",
                  token=b"\xff", token_period=4),
    )
    return SyntheticSpec(classes, per_class_count=per_class_count, noise_level=noise_level)


# ---------------------------------------------------------------- frame building

def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def _payload(rule: ClassRule, rng: np.random.Generator) -> bytes:
    lo, hi = rule.payload_len
    n = int(rng.integers(lo, hi + 1))
    buf = bytearray(rng.integers(0, 256, n, dtype=np.uint8).tobytes())
    buf[:len(rule.magic)] = rule.magic
    if rule.token_period:
        for pos in range(len(rule.magic), n, rule.token_period):
            end = min(n, pos + len(rule.token))
            buf[pos:end] = rule.token[:end - pos]
    return bytes(buf)


def build_frame(rule: ClassRule, klass: int, rng: np.random.Generator) -> tuple[bytes, dict]:
    """One clean Ethernet frame for ``rule`` and the byte spans noise may touch."""
    tcp = rng.random() < rule.tcp_fraction
    payload = _payload(rule, rng)
    sport = int(rng.integers(1024, 65536))
    if tcp:
        opts = rule.tcp_options + b"\x00" * (-len(rule.tcp_options) % 4)
        seq, ack = (int(v) for v in rng.integers(0, 2 ** 32, 2, dtype=np.uint64))
        l4 = struct.pack("!HHIIBBHHH", sport, rule.dport, seq, ack, (5 + len(opts) // 4) << 4,
                         rule.tcp_flags, rule.tcp_window, 0, 0) + opts
        proto, noisy_l4 = 6, _TCP_NOISY
    else:
        l4 = struct.pack("!HHHH", sport, rule.dport, 8 + len(payload), 0)
        proto, noisy_l4 = 17, _UDP_NOISY
    ttl = int(rng.integers(rule.ttl[0], rule.ttl[1] + 1))
    src = bytes([10, klass & 0xFF, int(rng.integers(0, 256)), int(rng.integers(1, 255))])
    dst = bytes([192, 168, 1, int(rng.integers(1, 255))])
    total = 20 + len(l4) + len(payload)
    ip = bytearray(struct.pack("!BBHHHBBH4s4s", 0x45, rule.tos, total, int(rng.integers(0, 65536)),
                               0x4000, ttl, proto, 0, src, dst))
    ip[10:12] = struct.pack("!H", _checksum(bytes(ip)))
    eth = ETH_DST + ETH_SRC + b"\x08\x00"
    frame = eth + bytes(ip) + l4 + payload
    o_ip, o_l4 = len(eth), len(eth) + 20
    o_pl = o_l4 + len(l4)
    noisy = [o_ip + i for i in _IP_NOISY] + [o_l4 + i for i in noisy_l4]
    if tcp:
        noisy += range(o_l4 + 20, o_pl)  # option bytes
    noisy += range(o_pl, len(frame))
    return frame, {"noisy": np.asarray(noisy, dtype=np.int64), "tcp": tcp}


def _corrupt(frame: bytes, positions: np.ndarray, level: float, rng: np.random.Generator) -> bytes:
    if level <= 0:
        return frame
    hit = positions[rng.random(len(positions)) < level]
    if not len(hit):
        return frame
    buf = bytearray(frame)
    for pos, val in zip(hit, rng.integers(0, 256, len(hit))):
        buf[pos] = int(val)
    return bytes(buf)


@dataclass
class SyntheticData:
    records: RecordSet
    manifest: DatasetManifest
    frames: list[Frame] = field(default_factory=list)


def synthesize(spec: SyntheticSpec, seed: int, keep_frames: bool = False) -> SyntheticData:
    """Generate ``per_class_count`` packets per class, interleaved by class, deterministically."""
    spec.validate()
    rng = np.random.default_rng(seed)
    K, n, P = spec.num_classes, spec.per_class_count, spec.payload_len
    headers = np.empty((K * n, 128), dtype=np.uint8)
    payloads = np.empty((K * n, P), dtype=np.uint8)
    labels = np.tile(np.arange(K), n)
    frames = []
    for i, c in enumerate(labels):
        frame, info = build_frame(spec.classes[c], int(c), rng)
        frame = _corrupt(frame, info["noisy"], spec.noise_level, rng)
        ts_sec, ts_nsec = 1_700_000_000 + i // 1000, (i % 1000) * 1_000_000
        rec = parse_packet(frame, LinkType.ETHERNET, ts_sec, ts_nsec)
        if rec.parsed_ipv4 is None or rec.parsed_transport is None:
            raise AssertionError(f"synthetic frame {i} did not parse")  # construction bug
        headers[i], payloads[i] = record_vectors(rec, P)
        if keep_frames:
            frames.append(Frame(ts_sec, ts_nsec, int(LinkType.ETHERNET), frame))
    records = RecordSet(headers, payloads, labels, K)
    manifest = DatasetManifest(class_names=[c.name for c in spec.classes], counts=records.counts(),
                               payload_len=P, extra={"synthetic_seed": int(seed),
                                                     "synthetic_spec": spec.to_dict()})
    return SyntheticData(records, manifest, frames)


# ---------------------------------------------------------------- oracle

def _rule_features(rule: ClassRule, P: int):
    """Header and payload (offset, value) checks implied by a rule.

    Payload checks stop at the rule's minimum payload length so that they
    only look at bytes every packet of the class actually carries.
    """
    tcp = [(62, rule.dport >> 8), (63, rule.dport & 0xFF), (73, rule.tcp_flags),
           (74, rule.tcp_window >> 8), (75, rule.tcp_window & 0xFF)]
    opts = rule.tcp_options + b"\x00" * (-len(rule.tcp_options) % 4)
    tcp += [(80 + i, b) for i, b in enumerate(opts)]
    tcp.append((72, (5 + len(opts) // 4) << 4))
    udp = [(122, rule.dport >> 8), (123, rule.dport & 0xFF)]
    limit = min(P, rule.payload_len[0])
    pay = [(i, b) for i, b in enumerate(rule.magic) if i < limit]
    if rule.token_period:
        for pos in range(len(rule.magic), limit, rule.token_period):
            pay += [(pos + j, b) for j, b in enumerate(rule.token) if pos + j < limit]
    return tcp, udp, pay


def oracle_scores(spec: SyntheticSpec, records: RecordSet) -> np.ndarray:
    """Fraction of each class's generation rules a record satisfies, shape (N, K).

    Checks: TTL band, TOS, the port/flag/window/option bytes of whichever
    transport the packet carries, and the payload magic and token bytes.  A
    transport the class never generates scores 0.  A clean packet satisfies
    all of its own class's checks, so with noise 0 the true class scores 1.
    """
    H = records.headers.astype(np.int64)
    Pb = records.payloads.astype(np.int64)
    N, P = len(records), records.payload_len
    is_tcp = (H[:, 60:80] != 0xFF).any(axis=1)
    scores = np.zeros((N, spec.num_classes))
    for k, rule in enumerate(spec.classes):
        tcp, udp, pay = _rule_features(rule, P)
        base = ((H[:, 8] >= rule.ttl[0]) & (H[:, 8] <= rule.ttl[1])).astype(float)
        base += H[:, 1] == rule.tos
        base += sum((Pb[:, off] == v).astype(float) for off, v in pay) if pay else 0.0
        n_base = 2 + len(pay)
        st = (base + sum((H[:, off] == v).astype(float) for off, v in tcp)) / (n_base + len(tcp))
        su = (base + sum((H[:, off] == v).astype(float) for off, v in udp)) / (n_base + len(udp))
        if rule.tcp_fraction == 0:
            st = np.zeros(N)
        if rule.tcp_fraction == 1:
            su = np.zeros(N)
        scores[:, k] = np.where(is_tcp, st, su)
    return scores


def oracle_predict(spec: SyntheticSpec, records: RecordSet) -> np.ndarray:
    """Rule-inverting classifier: highest match count, ties to the lowest class."""
    return np.argmax(oracle_scores(spec, records), axis=1)
