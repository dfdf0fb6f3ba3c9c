"""Publisher/subscriber transport, CRC-checked record framing and session logs.

Frame layout (all integers little-endian)::

    "HWKR" | stream_id u8 | timestamp u64 | length u32 | payload | crc32 u32

The CRC covers every byte before it. A session log is ``"HWKL"``, a u32
header length, a UTF-8 JSON header, then frames back to back.
"""
from __future__ import annotations

import enum
import json
import queue
import struct
import threading
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

MAGIC = b"HWKR"
LOG_MAGIC = b"HWKL"
LOG_FORMAT_VERSION = 1
MAX_PAYLOAD = 2**32 - 1

_HEAD = struct.Struct("<4sBQI")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEAD.size  # 17
TRAILER_SIZE = _CRC.size


class Stream(enum.IntEnum):
    CAMERA = 0
    LIDAR = 1
    IMU = 2
    MMWAVE = 3
    POSITION = 4
    CAMERA_REAR = 5
    # dataset container records
    DATASET_HEADER = 16
    DATASET_SAMPLE = 17


REGISTERED_STREAMS = frozenset(int(s) for s in Stream)


class FrameError(ValueError):
    """Base class for frame decoding failures."""


class BadMagic(FrameError):
    pass


class CrcMismatch(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class UnknownStream(FrameError):
    pass


class PayloadTooLarge(ValueError):
    pass


class BusClosed(RuntimeError):
    pass


class CorruptHeader(ValueError):
    pass


@dataclass(frozen=True)
class TimestampedRecord:
    stream_id: int
    timestamp: int
    payload: bytes = b""

    def __post_init__(self):
        if self.stream_id not in REGISTERED_STREAMS:
            raise ValueError(f"unregistered stream id {self.stream_id}")
        if not 0 <= self.timestamp < 2**64:
            raise ValueError("timestamp must fit in an unsigned 64-bit integer")


def encode_frame(record: TimestampedRecord) -> bytes:
    n = len(record.payload)
    if n > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {n} bytes exceeds 2**32-1")
    body = _HEAD.pack(MAGIC, record.stream_id, record.timestamp, n) + bytes(record.payload)
    return body + _CRC.pack(zlib.crc32(body))


def decode_frame(buf, offset: int = 0):
    """Decode one frame at ``offset``. Returns ``(record, bytes_consumed)``."""
    view = memoryview(buf)[offset:]
    avail = len(view)
    head = bytes(view[:4])
    if head != MAGIC[: len(head)]:
        raise BadMagic(f"bad magic {head!r}")
    if avail < HEADER_SIZE:
        raise TruncatedFrame(f"need {HEADER_SIZE} header bytes, have {avail}")
    _, sid, ts, n = _HEAD.unpack_from(view)
    total = HEADER_SIZE + n + TRAILER_SIZE
    if avail < total:
        raise TruncatedFrame(f"frame needs {total} bytes, have {avail}")
    (crc,) = _CRC.unpack_from(view, HEADER_SIZE + n)
    if zlib.crc32(view[: HEADER_SIZE + n]) != crc:
        raise CrcMismatch("frame checksum mismatch")
    if sid not in REGISTERED_STREAMS:
        raise UnknownStream(f"unregistered stream id {sid}")
    return TimestampedRecord(sid, ts, bytes(view[HEADER_SIZE : HEADER_SIZE + n])), total


def iter_frames(buf, offset: int = 0):
    """Yield ``(record, end_offset)`` for consecutive frames; stops cleanly at the end."""
    while offset < len(buf):
        rec, used = decode_frame(buf, offset)
        offset += used
        yield rec, offset


def read_frames(stream) -> Iterator[TimestampedRecord]:
    """Decode frames from a binary file-like object (file, socket.makefile)."""
    while True:
        head = stream.read(HEADER_SIZE)
        if not head:
            return
        if len(head) < HEADER_SIZE:
            decode_frame(head)  # raises BadMagic or TruncatedFrame
        n = _HEAD.unpack(head)[3]
        rest = stream.read(n + TRAILER_SIZE)
        yield decode_frame(head + rest)[0]


# -- in-process bus -------------------------------------------------------------

_CLOSE = object()


class Subscription:
    def __init__(self, bus: "Bus", stream_ids, maxsize: int):
        self.stream_ids = frozenset(int(s) for s in stream_ids)
        self._queue: queue.Queue = queue.Queue(maxsize)
        self._bus = bus

    def get(self, timeout=None):
        """Next record, or None once the bus is closed and drained."""
        item = self._queue.get(timeout=timeout)
        if item is _CLOSE:
            self._queue.put(_CLOSE)
            return None
        return item

    def __iter__(self):
        while True:
            item = self.get()
            if item is None:
                return
            yield item


@dataclass
class BusStats:
    published: int = 0
    delivered: int = 0
    blocked_puts: int = 0


class Bus:
    """Lossless in-process pub/sub. Full subscriber queues block the publisher.

    Records keep per-stream publish order at every subscriber; there is no
    global cross-stream ordering guarantee.
    """

    def __init__(self, maxsize: int = 1024):
        self.maxsize = maxsize
        self.stats = BusStats()
        self._subs: list = []
        self._lock = threading.Lock()
        self._closed = False

    def subscribe(self, stream_ids) -> Subscription:
        with self._lock:
            if self._closed:
                raise BusClosed("bus is closed")
            sub = Subscription(self, stream_ids, self.maxsize)
            self._subs.append(sub)
            return sub

    def publish(self, record: TimestampedRecord) -> None:
        with self._lock:
            if self._closed:
                raise BusClosed("bus is closed")
            for sub in self._subs:
                if record.stream_id not in sub.stream_ids:
                    continue
                try:
                    sub._queue.put_nowait(record)
                except queue.Full:
                    self.stats.blocked_puts += 1
                    sub._queue.put(record)
                self.stats.delivered += 1
            self.stats.published += 1

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            subs = list(self._subs)
        for sub in subs:
            sub._queue.put(_CLOSE)

    @property
    def closed(self) -> bool:
        return self._closed


def publish(bus: Bus, record: TimestampedRecord) -> None:
    bus.publish(record)


def subscribe(bus: Bus, stream_ids) -> Subscription:
    return bus.subscribe(stream_ids)


def forward_socket(sock, bus: Bus) -> int:
    """Publish every frame arriving on a connected socket; returns the count."""
    n = 0
    with sock.makefile("rb") as f:
        for rec in read_frames(f):
            bus.publish(rec)
            n += 1
    return n


def send_records(sock, records: Iterable[TimestampedRecord]) -> int:
    n = 0
    for rec in records:
        sock.sendall(encode_frame(rec))
        n += 1
    return n


# -- session logs ---------------------------------------------------------------


@dataclass(frozen=True)
class LogHeader:
    format_version: int = LOG_FORMAT_VERSION
    scene_hash: str = ""
    config_hash: str = ""
    start_time: int = 0

    def encode(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()


@dataclass
class SessionLog:
    header: LogHeader
    records: list = field(default_factory=list)
    truncated: bool = False

    def stream(self, stream_id) -> list:
        return [r for r in self.records if r.stream_id == int(stream_id)]


def write_log(path, header: LogHeader, records: Iterable[TimestampedRecord]) -> int:
    """Write header then frames. Rejects per-stream timestamp regressions."""
    last: dict = {}
    count = 0
    head = header.encode()
    with open(path, "wb") as f:
        f.write(LOG_MAGIC + struct.pack("<I", len(head)) + head)
        for rec in records:
            prev = last.get(rec.stream_id)
            if prev is not None and rec.timestamp < prev:
                raise ValueError(f"stream {rec.stream_id} timestamp went backwards")
            last[rec.stream_id] = rec.timestamp
            f.write(encode_frame(rec))
            count += 1
    return count


def read_log(path) -> SessionLog:
    """Read a session log. A partial trailing frame sets ``truncated``; other damage raises."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != LOG_MAGIC:
        raise CorruptHeader("missing session log magic")
    (hlen,) = struct.unpack_from("<I", data, 4)
    try:
        header = LogHeader(**json.loads(data[8 : 8 + hlen].decode()))
    except (ValueError, TypeError) as exc:
        raise CorruptHeader(f"unreadable header: {exc}") from exc
    log = SessionLog(header)
    offset = 8 + hlen
    while offset < len(data):
        try:
            rec, used = decode_frame(data, offset)
        except TruncatedFrame:
            log.truncated = True
            break
        log.records.append(rec)
        offset += used
    return log
