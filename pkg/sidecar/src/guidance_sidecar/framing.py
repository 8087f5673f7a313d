"""Wire framing for the guidance protocol (version 1).

A message is a 4-byte little-endian unsigned length of the UTF-8 JSON header,
the header bytes, then a raw payload whose size is implied by the header:
every named slot is a row-major little-endian float32 tensor of shape
(h, w, 3), except ``depth`` which is (h, w, 1).
"""

from __future__ import annotations

import json
import struct

PROTOCOL_VERSION = 1

_LEN = struct.Struct("<I")

KNOWN_SLOTS = ("x", "eps", "canny", "depth")


class FramingError(RuntimeError):
    pass


class PeerClosed(FramingError):
    """The peer disconnected cleanly between messages."""


def slot_nbytes(slot: str, h: int, w: int) -> int:
    channels = 1 if slot == "depth" else 3
    return h * w * channels * 4


def encode_message(header: dict, payload: bytes = b"") -> bytes:
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(raw)) + raw + payload


def read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            if remaining == n:
                raise PeerClosed("connection closed")
            raise FramingError(
                f"stream ended mid-message ({remaining} of {n} bytes missing)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_header(stream) -> dict:
    (length,) = _LEN.unpack(read_exact(stream, 4))
    if length == 0 or length > 1 << 20:
        raise FramingError(f"implausible header length {length}")
    try:
        header = json.loads(read_exact(stream, length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FramingError(f"malformed header: {e}")
    if not isinstance(header, dict) or "msg" not in header:
        raise FramingError("header is not an object with a 'msg' field")
    return header
