"""Binary weight files: magic "GGWT", version, per-layer records, CRC-32 trailer.

Layout (all integers little-endian):

    magic     4 bytes  b"GGWT"
    version   u32      currently 1
    n_records u32
    record:
        layer_index u32
        tag         u16 length + utf-8   e.g. "conv(in_ch=3,out_ch=8,kernel=5,stride=2)::weight"
        ndim        u8
        dims        u32 * ndim
        payload_len u64  (bytes)
        payload     float32 little-endian, row-major
    crc32     u32 over every preceding byte

Every layer contributes a zero-payload "::meta" record so a file alone is
enough to rebuild the architecture; parameter records follow in order.
Round-trips are bit-exact.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    FullyConnected,
    Layer,
    LeakyMaxBlock,
    MaxPool2x2,
    ReLU,
    ReLUTensorNorm,
    Sequential,
)

MAGIC = b"GGWT"
VERSION = 1

_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (Conv2d, BatchNorm2d, ReLU, ReLUTensorNorm, MaxPool2x2,
                FullyConnected, LeakyMaxBlock)
}


class WeightFileError(ValueError):
    """Corrupt, truncated, or incompatible weight file."""


def _format_tag(layer: Layer, param_name: str | None) -> str:
    hyper = ",".join(f"{k}={v}" for k, v in layer.hyper().items())
    suffix = param_name if param_name is not None else "meta"
    return f"{layer.kind}({hyper})::{suffix}"


def _parse_tag(tag: str) -> tuple[str, dict, str]:
    head, sep, suffix = tag.partition("::")
    if not sep or "(" not in head or not head.endswith(")"):
        raise WeightFileError(f"malformed record tag {tag!r}")
    kind, _, arg_str = head[:-1].partition("(")
    hyper = {}
    if arg_str:
        for item in arg_str.split(","):
            key, _, val = item.partition("=")
            if val in ("True", "False"):
                hyper[key] = val == "True"
            elif any(c in val for c in ".e") or "inf" in val:
                hyper[key] = float(val)
            else:
                hyper[key] = int(val)
    return kind, hyper, suffix


def save_weights(model: Sequential, path: str) -> None:
    records = []
    for i, layer in enumerate(model.layers):
        records.append((i, _format_tag(layer, None), np.zeros(0, dtype=np.float32)))
        for name, arr in layer.params.items():
            records.append((i, _format_tag(layer, name), arr))

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(records))
    for layer_index, tag, arr in records:
        tag_b = tag.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=np.float32)
        if arr.dtype != np.float32:
            raise WeightFileError(
                f"record {tag!r} is {arr.dtype}; weight files store float32 only")
        raw = payload.astype("<f4", copy=False).tobytes()
        buf += struct.pack("<IH", layer_index, len(tag_b))
        buf += tag_b
        buf += struct.pack("<B", payload.ndim)
        buf += struct.pack(f"<{payload.ndim}I", *payload.shape)
        buf += struct.pack("<Q", len(raw))
        buf += raw
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(buf)


def _take(buf: bytes, offset: int, n: int) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise WeightFileError("truncated weight file")
    return buf[offset:offset + n], offset + n


def load_weights(path: str) -> Sequential:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12 + 4:
        raise WeightFileError("truncated weight file")
    body, crc_raw = buf[:-4], buf[-4:]
    (stored_crc,) = struct.unpack("<I", crc_raw)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise WeightFileError("checksum mismatch; file is corrupt")
    if body[:4] != MAGIC:
        raise WeightFileError(f"bad magic {body[:4]!r}")
    version, n_records = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version} (expected {VERSION})")

    offset = 12
    layers: dict[int, Layer] = {}
    order: list[int] = []
    for _ in range(n_records):
        raw, offset = _take(body, offset, 6)
        layer_index, tag_len = struct.unpack("<IH", raw)
        raw, offset = _take(body, offset, tag_len)
        tag = raw.decode("utf-8")
        raw, offset = _take(body, offset, 1)
        ndim = raw[0]
        raw, offset = _take(body, offset, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        raw, offset = _take(body, offset, 8)
        (payload_len,) = struct.unpack("<Q", raw)
        raw, offset = _take(body, offset, payload_len)

        kind, hyper, suffix = _parse_tag(tag)
        if suffix == "meta":
            if kind not in _KINDS:
                raise WeightFileError(f"unknown layer kind {kind!r}")
            if layer_index in layers:
                raise WeightFileError(f"duplicate meta record for layer {layer_index}")
            layers[layer_index] = _KINDS[kind](**hyper)
            order.append(layer_index)
            continue
        layer = layers.get(layer_index)
        if layer is None:
            raise WeightFileError(f"parameter record before meta for layer {layer_index}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        if suffix not in layer.params:
            raise WeightFileError(f"layer {layer_index} has no parameter {suffix!r}")
        if layer.params[suffix].shape != arr.shape:
            raise WeightFileError(
                f"shape mismatch for layer {layer_index} {suffix!r}: "
                f"file {arr.shape}, model {layer.params[suffix].shape}")
        if isinstance(layer, LeakyMaxBlock):
            layer.set_param(suffix, arr)
        else:
            layer.params[suffix] = arr
    if offset != len(body):
        raise WeightFileError("trailing bytes after final record")
    if order != sorted(order) or (order and order != list(range(len(order)))):
        raise WeightFileError("layer records out of order")
    return Sequential([layers[i] for i in order])
