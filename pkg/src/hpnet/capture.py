"""Reading and writing packet capture files (classic pcap and pcapng)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

from .errors import CaptureError, UnsupportedLinkType

SUPPORTED_LINKTYPES = (1, 101)

# classic pcap magic as read little-endian -> (byte order, nanosecond stamps)
_PCAP_MAGIC = {
    0xA1B2C3D4: ("<", False),
    0xD4C3B2A1: (">", False),
    0xA1B23C4D: ("<", True),
    0x4D3CB2A1: (">", True),
}
_PCAPNG_SHB = 0x0A0D0D0A
_PCAPNG_BOM = 0x1A2B3C4D
_IDB, _EPB = 1, 6


@dataclass(frozen=True)
class Frame:
    ts_sec: int
    ts_nsec: int
    link_type: int
    data: bytes


def _read_exact(f: BinaryIO, n: int, path, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CaptureError(f"{path}: truncated {what}")
    return b


def _check_linktype(lt: int, path):
    if lt not in SUPPORTED_LINKTYPES:
        raise UnsupportedLinkType(f"{path}: link type {lt} is not supported "
                                  f"(only Ethernet=1 and raw IPv4=101)")


def _iter_pcap(f: BinaryIO, head: bytes, path) -> Iterator[Frame]:
    order, nano = _PCAP_MAGIC[struct.unpack("<I", head[:4])[0]]
    rest = _read_exact(f, 20, path, "global header")
    _vmaj, _vmin, _tz, _sig, _snap, linktype = struct.unpack(order + "HHiIII", rest)
    linktype &= 0x0FFFFFFF  # upper bits may carry FCS info
    _check_linktype(linktype, path)
    index = 0
    while True:
        rec = f.read(16)
        if not rec:
            return
        if len(rec) != 16:
            raise CaptureError(f"{path}: truncated record header at packet {index}")
        sec, frac, caplen, _orig = struct.unpack(order + "IIII", rec)
        data = _read_exact(f, caplen, path, f"packet {index}")
        yield Frame(sec, frac if nano else frac * 1000, linktype, data)
        index += 1


def _tsresol_ns(opts: bytes, order: str) -> tuple[int, int]:
    """Timestamp units per second from an IDB option list, as (numerator, denominator) of ns/unit."""
    pos = 0
    while pos + 4 <= len(opts):
        code, ln = struct.unpack_from(order + "HH", opts, pos)
        pos += 4
        if code == 0:
            break
        if code == 9 and ln >= 1:
            r = opts[pos]
            if r & 0x80:
                units = 2 ** (r & 0x7F)
            else:
                units = 10 ** r
            return 10 ** 9, units
        pos += (ln + 3) & ~3
    return 1000, 1  # default: microseconds


def _iter_pcapng(f: BinaryIO, head: bytes, path) -> Iterator[Frame]:
    interfaces: list[tuple[int, tuple[int, int]]] = []
    order = "<"
    block = head
    index = 0
    while True:
        if block is None:
            block = f.read(8)
            if not block:
                return
            if len(block) != 8:
                raise CaptureError(f"{path}: truncated block header")
        btype = struct.unpack("<I", block[:4])[0]
        if btype == _PCAPNG_SHB:
            bom = _read_exact(f, 4, path, "section header")
            if struct.unpack("<I", bom)[0] == _PCAPNG_BOM:
                order = "<"
            elif struct.unpack(">I", bom)[0] == _PCAPNG_BOM:
                order = ">"
            else:
                raise CaptureError(f"{path}: bad pcapng byte-order magic")
            blen = struct.unpack(order + "I", block[4:8])[0]
            if blen < 28 or blen % 4:
                raise CaptureError(f"{path}: bad section header length {blen}")
            _read_exact(f, blen - 12, path, "section header")
            interfaces = []
            block = None
            continue
        btype, blen = struct.unpack(order + "II", block)
        if blen < 12 or blen % 4:
            raise CaptureError(f"{path}: bad block length {blen}")
        body = _read_exact(f, blen - 12, path, "block body")
        _read_exact(f, 4, path, "block trailer")
        if btype == _IDB:
            if len(body) < 8:
                raise CaptureError(f"{path}: short interface description block")
            linktype = struct.unpack_from(order + "H", body, 0)[0]
            _check_linktype(linktype, path)
            interfaces.append((linktype, _tsresol_ns(body[8:], order)))
        elif btype == _EPB:
            if len(body) < 20:
                raise CaptureError(f"{path}: short enhanced packet block")
            iface, hi, lo, caplen, _orig = struct.unpack_from(order + "IIIII", body, 0)
            if iface >= len(interfaces) or 20 + caplen > len(body):
                raise CaptureError(f"{path}: malformed enhanced packet block {index}")
            linktype, (num, den) = interfaces[iface]
            ns = ((hi << 32) | lo) * num // den
            yield Frame(ns // 10 ** 9, ns % 10 ** 9, linktype, body[20:20 + caplen])
            index += 1
        block = None


def iter_frames(path) -> Iterator[Frame]:
    """Yield every captured frame of a pcap or pcapng file, streaming."""
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as e:
        raise CaptureError(f"{path}: cannot open ({e.strerror})") from e
    with f:
        head = f.read(4)
        if not head:
            return
        if len(head) < 4:
            raise CaptureError(f"{path}: too short to be a capture file")
        magic = struct.unpack("<I", head)[0]
        if magic in _PCAP_MAGIC:
            yield from _iter_pcap(f, head, path)
        elif magic == _PCAPNG_SHB:
            yield from _iter_pcapng(f, head + _read_exact(f, 4, path, "section header"), path)
        else:
            raise CaptureError(f"{path}: unrecognised capture format (magic {head.hex()})")


def write_pcap(path, frames, link_type: int = 1, nanosecond: bool = False) -> int:
    """Write ``(ts_sec, ts_nsec, data)`` tuples or :class:`Frame` objects as classic pcap."""
    magic = 0xA1B23C4D if nanosecond else 0xA1B2C3D4
    n = 0
    with open(path, "wb") as f:
        f.write(struct.pack("<IHHiIII", magic, 2, 4, 0, 0, 262144, link_type))
        for fr in frames:
            if isinstance(fr, Frame):
                sec, nsec, data = fr.ts_sec, fr.ts_nsec, fr.data
            else:
                sec, nsec, data = fr
            frac = nsec if nanosecond else nsec // 1000
            f.write(struct.pack("<IIII", sec, frac, len(data), len(data)))
            f.write(data)
            n += 1
    return n
