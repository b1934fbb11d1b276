"""Framed binary wire protocol for taxel frames.

Layout of one frame on the wire::

    AA 55 | seq (u16 LE) | K (u8) | K x value (u16 LE) | CRC-8

The CRC is CRC-8 with polynomial 0x07, init 0x00, no reflection and no
final xor, computed over the bytes from ``seq`` through the last value.
Timestamps are not transmitted; the parser rebuilds them from the
sequence counter and the scan rate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .daq import SEQ_MOD, Frame

__all__ = ["SYNC", "crc8", "encode_frame", "encode_frames", "CorruptFrame", "Gap",
           "StreamParser", "parse_stream", "parse_bytes"]

SYNC = b"\xAA\x55"
HEADER_LEN = 5  # sync + seq + K
MAX_K = 255


def _make_table(poly: int = 0x07) -> tuple:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = ((crc << 1) ^ poly) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _make_table()


def crc8(data: bytes, crc: int = 0) -> int:
    for b in data:
        crc = _CRC_TABLE[crc ^ b]
    return crc


def encode_frame(frame: Frame) -> bytes:
    k = frame.k
    if k > MAX_K:
        raise ValueError(f"K={k} exceeds {MAX_K}; split into several logical arrays")
    if k == 0:
        raise ValueError("frame has no values")
    if any(v < 0 or v > 0xFFFF for v in frame.values):
        raise ValueError("values must fit in 16 bits")
    body = struct.pack(f"<HB{k}H", frame.seq, k, *frame.values)
    return SYNC + body + bytes([crc8(body)])


def encode_frames(frames) -> bytes:
    return b"".join(encode_frame(f) for f in frames)


@dataclass(frozen=True)
class CorruptFrame:
    """A candidate frame starting at ``offset`` was rejected.

    ``reason`` is one of ``crc``, ``length``, ``range`` or ``truncated``.
    """

    offset: int
    reason: str


@dataclass(frozen=True)
class Gap:
    """``missing`` frames were skipped (sequence difference minus one, mod 2^16)."""

    missing: int


class StreamParser:
    """Incremental, resynchronizing parser.

    Feed arbitrary chunks with :meth:`feed` and call :meth:`close` at end of
    stream.  Output is independent of how the input was chunked.

    If ``taxel_count`` is given, frames with any other K are rejected; this
    is what a receiver that knows its array size should do, and it closes
    the hole where a corrupted K byte happens to produce a valid CRC over a
    shorter frame.  ``max_code`` rejects out-of-range values the same way.
    """

    def __init__(self, taxel_count: int | None = None, scan_rate: float = 100.0,
                 max_code: int | None = None):
        self.taxel_count = taxel_count
        self.scan_rate = scan_rate
        self.max_code = max_code
        self._buf = bytearray()
        self._base = 0  # stream offset of _buf[0]
        self._last_seq = None
        self._n = 0
        self.stats = {"frames": 0, "corrupt": 0, "gaps": 0, "missing": 0}

    def feed(self, chunk: bytes) -> list:
        self._buf += chunk
        return self._drain(final=False)

    def close(self) -> list:
        events = self._drain(final=True)
        self._base += len(self._buf)
        self._buf.clear()
        return events

    def _drop(self, n: int) -> None:
        del self._buf[:n]
        self._base += n

    def _reject(self, events: list, reason: str) -> None:
        events.append(CorruptFrame(self._base, reason))
        self.stats["corrupt"] += 1
        self._drop(1)

    def _drain(self, final: bool) -> list:
        events = []
        buf = self._buf
        while True:
            i = buf.find(SYNC)
            if i < 0:
                # keep a trailing 0xAA, it may be the first half of a sync
                keep = 1 if buf and buf[-1] == SYNC[0] and not final else 0
                self._drop(len(buf) - keep)
                return events
            if i:
                self._drop(i)
            if len(buf) < HEADER_LEN:
                if final:
                    self._reject(events, "truncated")
                    continue
                return events
            k = buf[4]
            if k == 0 or (self.taxel_count is not None and k != self.taxel_count):
                self._reject(events, "length")
                continue
            need = HEADER_LEN + 2 * k + 1
            if len(buf) < need:
                if final:
                    self._reject(events, "truncated")
                    continue
                return events
            body = bytes(buf[2:need - 1])
            if crc8(body) != buf[need - 1]:
                self._reject(events, "crc")
                continue
            seq, _, *values = struct.unpack(f"<HB{k}H", body)
            if self.max_code is not None and max(values) > self.max_code:
                self._reject(events, "range")
                continue
            self._emit(events, seq, values)
            self._drop(need)

    def _emit(self, events: list, seq: int, values: list) -> None:
        if self._last_seq is not None:
            step = (seq - self._last_seq) % SEQ_MOD
            missing = (step - 1) % SEQ_MOD
            if missing:
                events.append(Gap(missing))
                self.stats["gaps"] += 1
                self.stats["missing"] += missing
            self._n += missing + 1
        self._last_seq = seq
        events.append(Frame(seq, self._n / self.scan_rate, values))
        self.stats["frames"] += 1


def parse_stream(chunks, **kwargs):
    """Yield frames and events from an iterable of byte chunks."""
    parser = StreamParser(**kwargs)
    for chunk in chunks:
        yield from parser.feed(chunk)
    yield from parser.close()


def parse_bytes(data: bytes, **kwargs) -> list:
    return list(parse_stream([data], **kwargs))
