"""Binary checkpoint format.

All integers little-endian::

    header  magic     8s   b"ACNNCKPT"
            version   u32  1
            sections  u32  number of sections
            body_len  u64  byte length of everything after the header
            crc32     u32  zlib.crc32 of the body
    section name_len  u16
            name      utf-8
            kind      u8   0 = JSON document, 1 = array
            length    u64  payload byte length
            payload
    array   dtype     u8   1 = float32, 2 = float64
            ndim      u8
            dims      u32 * ndim
            data      little-endian, row-major

The first section is ``meta`` (JSON: network spec and precision); each
following section is one parameter array named ``<layer index>.<param>``.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .network import Network, NetworkSpec

MAGIC = b"ACNNCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIIQI")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _section(name, kind, payload):
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)) + payload


def _array_payload(arr):
    arr = np.ascontiguousarray(arr)
    head = struct.pack("<BB", _CODES[arr.dtype], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def dumps(network):
    meta = {"spec": network.spec.to_dict(), "precision": network.precision}
    sections = [_section("meta", 0, json.dumps(meta, sort_keys=True).encode())]
    for i, name, arr in network.named_params():
        sections.append(_section(f"{i}.{name}", 1, _array_payload(arr)))
    body = b"".join(sections)
    return _HEADER.pack(MAGIC, VERSION, len(sections), len(body), zlib.crc32(body)) + body


def save(network, path):
    with open(path, "wb") as f:
        f.write(dumps(network))


def _parse_array(name, payload):
    if len(payload) < 2:
        raise CorruptCheckpointError(f"corrupt checkpoint: array {name} too short")
    code, ndim = struct.unpack_from("<BB", payload)
    if code not in _DTYPES:
        raise CorruptCheckpointError(f"corrupt checkpoint: array {name} has unknown dtype {code}")
    head = 2 + 4 * ndim
    if len(payload) < head:
        raise CorruptCheckpointError(f"corrupt checkpoint: array {name} header truncated")
    dims = struct.unpack_from(f"<{ndim}I", payload, 2)
    dtype = _DTYPES[code]
    if len(payload) - head != int(np.prod(dims)) * dtype.itemsize:
        raise CorruptCheckpointError(f"corrupt checkpoint: array {name} length disagrees with its shape")
    return np.frombuffer(payload, dtype=dtype, offset=head).reshape(dims)


def read_sections(data):
    """Validate the container and return ``(meta, {name: array})``."""
    if len(data) < _HEADER.size:
        raise CorruptCheckpointError("corrupt checkpoint: truncated header")
    magic, version, count, body_len, crc = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError("corrupt checkpoint: bad magic")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    body = data[_HEADER.size:]
    if len(body) != body_len:
        raise CorruptCheckpointError(f"corrupt checkpoint: body is {len(body)} bytes, header says {body_len}")
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("corrupt checkpoint: checksum mismatch")
    pos, meta, arrays = 0, None, {}
    for _ in range(count):
        if pos + 2 > len(body):
            raise CorruptCheckpointError("corrupt checkpoint: truncated section")
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        if pos + 9 > len(body):
            raise CorruptCheckpointError("corrupt checkpoint: truncated section")
        kind, length = struct.unpack_from("<BQ", body, pos)
        pos += 9
        if pos + length > len(body):
            raise CorruptCheckpointError(f"corrupt checkpoint: section {name} overruns the file")
        payload = body[pos:pos + length]
        pos += length
        if kind == 0:
            meta = json.loads(payload)
        elif kind == 1:
            arrays[name] = _parse_array(name, payload)
        else:
            raise CorruptCheckpointError(f"corrupt checkpoint: unknown section kind {kind}")
    if pos != len(body):
        raise CorruptCheckpointError("corrupt checkpoint: trailing bytes")
    if meta is None:
        raise CorruptCheckpointError("corrupt checkpoint: no meta section")
    return meta, arrays


def loads(data):
    meta, arrays = read_sections(data)
    network = Network(NetworkSpec.from_dict(meta["spec"]), meta["precision"], seed=0)
    expected = {f"{i}.{name}": arr for i, name, arr in network.named_params()}
    if set(expected) != set(arrays):
        raise CorruptCheckpointError("corrupt checkpoint: parameter sections do not match the network spec")
    for key, arr in expected.items():
        src = arrays[key]
        if src.shape != arr.shape or src.dtype.itemsize != arr.dtype.itemsize:
            raise CorruptCheckpointError(f"corrupt checkpoint: {key} has shape {src.shape}, expected {arr.shape}")
        arr[...] = src
    return network


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
