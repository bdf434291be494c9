"""SMDL model container.

Layout (all integers little-endian)::

    magic      4 bytes  b"SMDL"
    version    u8       1
    ndim       u8       followed by ndim x u32 input dims
    n_layers   u32      each: u8 kind, u32 channels, u32 kernel, u32 stride,
                        u32 padding, u32 out_features
    n_bounds   u32      each: u16 name length, utf-8 name, u32 layer index
    n_blobs    u32      each: u32 count, count x f32 values

Blobs hold every parameter in declaration order followed by every
batch-norm running mean/variance pair.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FramingError, ProtocolError
from .nn import LAYER_KINDS, LayerSpec, Network, build_network

MAGIC = b"SMDL"
VERSION = 1
_LAYER = struct.Struct("<BIIIII")


def network_to_bytes(net: Network) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<BB", VERSION, len(net.input_shape))
    out += struct.pack(f"<{len(net.input_shape)}I", *net.input_shape)
    out += struct.pack("<I", len(net.layers))
    for spec in net.specs:
        out += _LAYER.pack(LAYER_KINDS.index(spec.kind), spec.channels, spec.kernel,
                           spec.stride, spec.padding, spec.out_features)
    out += struct.pack("<I", len(net.boundaries))
    for name, idx in net.boundaries.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", idx)
    blobs = [p.data for p in net.parameters()] + net.buffers()
    out += struct.pack("<I", len(blobs))
    for blob in blobs:
        flat = np.ascontiguousarray(blob, dtype="<f4").reshape(-1)
        out += struct.pack("<I", flat.size) + flat.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FramingError("model file truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def network_from_bytes(buf: bytes) -> Network:
    r = _Reader(buf)
    if bytes(r.take(4)) != MAGIC:
        raise ProtocolError("not an SMDL model file")
    version, ndim = r.unpack("BB")
    if version != VERSION:
        raise ProtocolError(f"unsupported model file version {version}")
    input_shape = r.unpack(f"{ndim}I")
    (n_layers,) = r.unpack("I")
    specs = []
    for _ in range(n_layers):
        kind, channels, kernel, stride, padding, out_features = r.unpack("BIIIII")
        if kind >= len(LAYER_KINDS):
            raise ProtocolError(f"unknown layer kind code {kind}")
        specs.append(LayerSpec(LAYER_KINDS[kind], channels, kernel, stride, padding, out_features))
    (n_bounds,) = r.unpack("I")
    boundaries = {}
    for _ in range(n_bounds):
        (length,) = r.unpack("H")
        name = bytes(r.take(length)).decode("utf-8")
        (boundaries[name],) = r.unpack("I")
    net = build_network(specs, input_shape, 0, boundaries)
    (n_blobs,) = r.unpack("I")
    arrays = []
    templates = [p.data for p in net.parameters()] + net.buffers()
    if n_blobs != len(templates):
        raise ProtocolError(f"model file has {n_blobs} blobs, structure needs {len(templates)}")
    for tmpl in templates:
        (count,) = r.unpack("I")
        if count != tmpl.size:
            raise ProtocolError("parameter blob size does not match layer structure")
        arrays.append(np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(tmpl.shape))
    if r.pos != len(r.buf):
        raise FramingError("trailing bytes after model file")
    net.load_state(arrays)
    return net


def save_network(net: Network, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(network_to_bytes(net))
    return path


def load_network(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
