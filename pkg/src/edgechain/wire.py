"""Frame and field codecs shared by the secure channel and node RPC.

A frame is ``type (1 byte) | length (4 bytes, big-endian) | body``.
Structured bodies are sequences of length-prefixed fields, each
``length (4 bytes, big-endian) | bytes``.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

HEADER = struct.Struct(">BI")
FIELD_LEN = struct.Struct(">I")
MAX_BODY = 64 * 1024 * 1024


class FrameError(ValueError):
    """Raised for frames that cannot be decoded."""


class FrameType(enum.IntEnum):
    HELLO = 1
    CERT_REPLY = 2
    KEY_TRANSPORT = 3
    KEY_CONFIRM = 4
    ACK = 5
    DATA = 6
    CLOSE = 7


@dataclass(frozen=True)
class Frame:
    frame_type: FrameType
    body: bytes = b""

    @property
    def length(self) -> int:
        return len(self.body)

    def encode(self) -> bytes:
        return HEADER.pack(int(self.frame_type), len(self.body)) + self.body


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame; the declared length must match the body."""
    if len(data) < HEADER.size:
        raise FrameError("truncated frame header")
    ftype, length = HEADER.unpack_from(data)
    body = data[HEADER.size:]
    if length != len(body):
        raise FrameError(f"declared length {length} != body length {len(body)}")
    try:
        frame_type = FrameType(ftype)
    except ValueError:
        raise FrameError(f"unknown frame type {ftype}") from None
    return Frame(frame_type, bytes(body))


def split_frames(buf: bytearray) -> list[Frame]:
    """Pop every complete frame off the front of a stream buffer."""
    frames = []
    while len(buf) >= HEADER.size:
        _, length = HEADER.unpack_from(buf)
        if length > MAX_BODY:
            raise FrameError(f"frame body of {length} bytes exceeds limit")
        end = HEADER.size + length
        if len(buf) < end:
            break
        frames.append(decode_frame(bytes(buf[:end])))
        del buf[:end]
    return frames


def encode_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += FIELD_LEN.pack(len(f))
        out += f
    return bytes(out)


def decode_fields(body: bytes, count: int | None = None) -> list[bytes]:
    """Inverse of :func:`encode_fields`. ``count`` pins the exact field count."""
    fields = []
    pos = 0
    view = memoryview(body)
    while pos < len(body):
        if pos + FIELD_LEN.size > len(body):
            raise FrameError("truncated field length")
        (n,) = FIELD_LEN.unpack_from(body, pos)
        pos += FIELD_LEN.size
        if pos + n > len(body):
            raise FrameError("truncated field body")
        fields.append(bytes(view[pos:pos + n]))
        pos += n
    if count is not None and len(fields) != count:
        raise FrameError(f"expected {count} fields, got {len(fields)}")
    return fields


def encode_uint(value: int, width: int = 8) -> bytes:
    return value.to_bytes(width, "big")


def decode_uint(data: bytes, width: int = 8) -> int:
    if len(data) != width:
        raise FrameError(f"expected {width}-byte integer, got {len(data)} bytes")
    return int.from_bytes(data, "big")
