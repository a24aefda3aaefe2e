"""Small CBOR codec (definite lengths only).

Covers the major types this stack needs: unsigned and negative integers,
byte strings, text strings, arrays, maps and the simple values
false/true/null. Integers and lengths are always written in their shortest
form, and ``loads`` rejects non-shortest encodings so that a decoded item
re-encodes to the exact input bytes.
"""

from __future__ import annotations

import struct
from typing import Any


class CBORError(ValueError):
    pass


def _head(major: int, value: int) -> bytes:
    mt = major << 5
    if value < 24:
        return bytes([mt | value])
    if value < 0x100:
        return bytes([mt | 24, value])
    if value < 0x10000:
        return bytes([mt | 25]) + struct.pack(">H", value)
    if value < 0x100000000:
        return bytes([mt | 26]) + struct.pack(">I", value)
    if value < 0x10000000000000000:
        return bytes([mt | 27]) + struct.pack(">Q", value)
    raise CBORError(f"integer {value} does not fit in 64 bits")


def dumps(obj: Any) -> bytes:
    out = bytearray()
    _encode(obj, out)
    return bytes(out)


def _encode(obj: Any, out: bytearray) -> None:
    if obj is False:
        out.append(0xF4)
    elif obj is True:
        out.append(0xF5)
    elif obj is None:
        out.append(0xF6)
    elif isinstance(obj, int):
        if obj >= 0:
            out += _head(0, obj)
        else:
            out += _head(1, -1 - obj)
    elif isinstance(obj, (bytes, bytearray, memoryview)):
        raw = bytes(obj)
        out += _head(2, len(raw))
        out += raw
    elif isinstance(obj, str):
        raw = obj.encode("utf-8")
        out += _head(3, len(raw))
        out += raw
    elif isinstance(obj, (list, tuple)):
        out += _head(4, len(obj))
        for item in obj:
            _encode(item, out)
    elif isinstance(obj, dict):
        out += _head(5, len(obj))
        for key, value in obj.items():
            _encode(key, out)
            _encode(value, out)
    else:
        raise CBORError(f"cannot encode {type(obj).__name__}")


def loads(data: bytes) -> Any:
    """Decode exactly one CBOR item; trailing bytes are an error."""
    obj, end = decode_item(data, 0)
    if end != len(data):
        raise CBORError(f"{len(data) - end} trailing bytes after item")
    return obj


def decode_item(data: bytes, pos: int) -> tuple[Any, int]:
    if pos >= len(data):
        raise CBORError(f"truncated input at offset {pos}")
    initial = data[pos]
    major, info = initial >> 5, initial & 0x1F
    pos += 1
    if major == 7:
        simple = {20: False, 21: True, 22: None}
        if info in simple:
            return simple[info], pos
        raise CBORError(f"unsupported simple/float value {info} at offset {pos - 1}")
    value, pos = _read_argument(data, pos, info)
    if major == 0:
        return value, pos
    if major == 1:
        return -1 - value, pos
    if major in (2, 3):
        end = pos + value
        if end > len(data):
            raise CBORError(f"string at offset {pos} runs past end of input")
        raw = bytes(data[pos:end])
        if major == 3:
            try:
                return raw.decode("utf-8"), end
            except UnicodeDecodeError as exc:
                raise CBORError(f"invalid UTF-8 text at offset {pos}") from exc
        return raw, end
    if major == 4:
        items = []
        for _ in range(value):
            item, pos = decode_item(data, pos)
            items.append(item)
        return items, pos
    if major == 5:
        mapping = {}
        for _ in range(value):
            key, pos = decode_item(data, pos)
            if isinstance(key, list):
                raise CBORError("array map keys are not supported")
            mapping[key], pos = decode_item(data, pos)
        return mapping, pos
    raise CBORError(f"unsupported major type {major} (tags) at offset {pos - 1}")


def _read_argument(data: bytes, pos: int, info: int) -> tuple[int, int]:
    if info < 24:
        return info, pos
    widths = {24: 1, 25: 2, 26: 4, 27: 8}
    if info not in widths:
        raise CBORError(f"indefinite or reserved length (info {info}) at offset {pos - 1}")
    width = widths[info]
    if pos + width > len(data):
        raise CBORError(f"truncated argument at offset {pos}")
    value = int.from_bytes(data[pos : pos + width], "big")
    minimum = 24 if width == 1 else 1 << (4 * width)
    if value < minimum:
        raise CBORError(f"non-shortest integer encoding at offset {pos - 1}")
    return value, pos + width
