"""Well-formed and malformed captured frames, drawn by hypothesis or by a seeded RNG.

The frame recipes are written once against a small draw interface so that the
hypothesis strategies (shrinkable, used by the property tests) and the plain
RNG generator (fast, used by the large fuzz run) produce the same population.
"""

import random
import struct

from hypothesis import strategies as st

import framekit as fk

PROTOS = (6, 17, 1, 47)
MALFORMED = ("truncate", "flip", "ethertype", "random", "badlen")


class _HypothesisDraw:
    def __init__(self, draw):
        self.draw = draw

    def int(self, lo, hi):
        return self.draw(st.integers(lo, hi))

    def bytes(self, lo, hi):
        return self.draw(st.binary(min_size=lo, max_size=hi))

    def choice(self, seq):
        return self.draw(st.sampled_from(seq))


class _RandomDraw:
    def __init__(self, rng: random.Random):
        self.rng = rng

    def int(self, lo, hi):
        return self.rng.randint(lo, hi)

    def bytes(self, lo, hi):
        return self.rng.randbytes(self.rng.randint(lo, hi))

    def choice(self, seq):
        return self.rng.choice(seq)


def _well_formed(d):
    proto = d.choice(PROTOS)
    payload = d.bytes(0, 200)
    if proto == 6:
        n = 4 * d.int(0, 10)
        body = fk.tcp(payload, sport=d.int(0, 65535), dport=d.int(0, 65535),
                      flags=d.int(0, 255), options=d.bytes(n, n))
    elif proto == 17:
        body = fk.udp(payload, sport=d.int(0, 65535), dport=d.int(0, 65535))
    else:
        body = payload
    ip_opts = b"\x01" * (4 * d.int(0, 10))
    pkt = fk.ipv4(proto, body, src=d.bytes(4, 4), dst=d.bytes(4, 4), ttl=d.int(0, 255),
                  options=ip_opts)
    if d.choice((True, False)):
        return fk.eth(pkt), 1
    return pkt, 101


def _malformed(d):
    kind = d.choice(MALFORMED)
    if kind == "random":
        return d.bytes(1, 300), d.choice((1, 101))
    frame, link = _well_formed(d)
    frame = bytearray(frame)
    if kind == "truncate":
        frame = frame[:d.int(1, max(1, len(frame) - 1))]
    elif kind == "flip":
        for _ in range(d.int(1, 8)):
            frame[d.int(0, len(frame) - 1)] = d.int(0, 255)
    elif kind == "ethertype" and link == 1:
        frame[12:14] = struct.pack("!H", d.choice((0x0806, 0x86DD, 0x8100, 0x1234)))
    elif kind == "badlen":
        off = 14 if link == 1 else 0
        frame[off + 2:off + 4] = struct.pack("!H", d.int(0, 65535))
    return bytes(frame), link


@st.composite
def well_formed(draw):
    """(frame, link_type) for an Ethernet or raw-IP IPv4 packet with TCP, UDP or another protocol."""
    return _well_formed(_HypothesisDraw(draw))


@st.composite
def malformed(draw):
    """Truncated, byte-flipped, wrong-ethertype, bad-length or fully random frames."""
    return _malformed(_HypothesisDraw(draw))


any_frame = st.one_of(well_formed(), malformed())


def random_frames(n: int, seed: int):
    """``n`` frames from the same recipes, half well-formed and half malformed."""
    d = _RandomDraw(random.Random(seed))
    for i in range(n):
        yield _well_formed(d) if i % 2 == 0 else _malformed(d)
