"""Versioned little-endian binary encoding of sketches.

Layout::

    magic      4 bytes  b"FCSK"
    version    u8       1
    kind tag   u8       0 exact, 1 tdigest, 2 ddsketch, 3 mean
    parameter  f64      compression / relative accuracy / 0.0
    count      u64      number of inserted values
    payload             kind-specific, see below

Payloads:

* exact    -- ``count`` f64 values in insertion order
* tdigest  -- min f64, max f64, centroid count u32, then (mean f64, weight f64)
  pairs sorted by mean
* ddsketch -- min f64, max f64, bucket count u32, then (index i32, count u64)
  pairs sorted by index
* mean     -- client count u32, then per client a u64 value count followed by
  that many f64 values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import DecodeError
from .base import ExactSketch, MeanOfClientQuantiles, QuantileSketch, SketchKind, SketchName
from .ddsketch import DDSketch
from .tdigest import TDigest

MAGIC = b"FCSK"
VERSION = 1

_TAGS = {
    SketchName.EXACT: 0,
    SketchName.TDIGEST: 1,
    SketchName.DDSKETCH: 2,
    SketchName.MEAN: 3,
}
_NAMES = {v: k for k, v in _TAGS.items()}

_HEADER = struct.Struct("<4sBBdQ")


@dataclass(frozen=True)
class SketchEnvelope:
    """Bytes a client would send to the server, tagged with the sender."""

    data: bytes
    client_id: str = ""

    @property
    def byte_length(self) -> int:
        return len(self.data)


def serialize(sketch: QuantileSketch, client_id="") -> SketchEnvelope:
    kind = sketch.kind
    parts = [_HEADER.pack(MAGIC, VERSION, _TAGS[kind.name], kind.parameter, sketch.count)]
    if kind.name is SketchName.EXACT:
        parts.append(np.asarray(sketch.values, dtype="<f8").tobytes())
    elif kind.name is SketchName.TDIGEST:
        means, weights = sketch.centroids()
        parts.append(struct.pack("<ddI", sketch.min, sketch.max, means.size))
        pairs = np.empty((means.size, 2), dtype="<f8")
        pairs[:, 0], pairs[:, 1] = means, weights
        parts.append(pairs.tobytes())
    elif kind.name is SketchName.DDSKETCH:
        keys = sorted(sketch.bins)
        parts.append(struct.pack("<ddI", sketch.min, sketch.max, len(keys)))
        rows = np.empty(len(keys), dtype=[("index", "<i4"), ("count", "<u8")])
        rows["index"] = keys
        rows["count"] = [sketch.bins[k] for k in keys]
        parts.append(rows.tobytes())
    else:
        clients = [c for c in sketch.clients if c.count]
        parts.append(struct.pack("<I", len(clients)))
        for c in clients:
            parts.append(struct.pack("<Q", c.count))
            parts.append(np.asarray(c.values, dtype="<f8").tobytes())
    return SketchEnvelope(b"".join(parts), str(client_id))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise DecodeError(f"truncated {what}: need {n} bytes", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def array(self, dtype, n, what):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * n, what), dtype=dt)


def deserialize(payload) -> QuantileSketch:
    """Inverse of :func:`serialize`; accepts an envelope or raw bytes."""
    data = payload.data if isinstance(payload, SketchEnvelope) else bytes(payload)
    r = _Reader(data)
    magic, version, tag, parameter, count = r.unpack(_HEADER.format, "header")
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DecodeError(f"unsupported format version {version}", 4)
    if tag not in _NAMES:
        raise DecodeError(f"unknown kind tag {tag}", 5)
    try:
        kind = SketchKind(_NAMES[tag], parameter)
    except ValueError as exc:
        raise DecodeError(f"invalid kind parameter: {exc}", 6) from None

    if kind.name is SketchName.EXACT:
        sketch = ExactSketch(r.array("<f8", count, "values"))
    elif kind.name is SketchName.TDIGEST:
        lo, hi, n = r.unpack("<ddI", "t-digest header")
        start = r.offset
        pairs = r.array("<f8", 2 * n, "centroids").reshape(n, 2)
        if n and np.any(np.diff(pairs[:, 0]) < 0):
            raise DecodeError("centroid means are not sorted", start)
        sketch = TDigest.from_centroids(kind.parameter, pairs[:, 0].copy(), pairs[:, 1].copy(), lo, hi)
    elif kind.name is SketchName.DDSKETCH:
        lo, hi, n = r.unpack("<ddI", "ddsketch header")
        rows = r.array([("index", "<i4"), ("count", "<u8")], n, "buckets")
        sketch = DDSketch(kind.parameter)
        sketch.bins = {int(k): int(c) for k, c in zip(rows["index"], rows["count"])}
        sketch.min, sketch.max = lo, hi
        sketch.count = int(rows["count"].sum())
    else:
        (n_clients,) = r.unpack("<I", "client count")
        sketch = MeanOfClientQuantiles()
        for _ in range(n_clients):
            (n,) = r.unpack("<Q", "client value count")
            client = ExactSketch(r.array("<f8", n, "client values"))
            sketch.clients.append(client)
            sketch.count += client.count

    if sketch.count != count:
        raise DecodeError(f"payload holds {sketch.count} values but header says {count}", 14)
    if r.offset != len(data):
        raise DecodeError(f"{len(data) - r.offset} trailing bytes", r.offset)
    return sketch
