"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic          8 bytes  b"RNNENCDC"
    version        u32
    config_len     u32
    config         config_len bytes, UTF-8 "key=value" lines
    n_records      u32
    n_records x:
        name_len   u16
        name       name_len bytes, UTF-8
        rows       u32
        cols       u32
        data       rows*cols float64 ('<f8'), row-major

Bias vectors are stored as (n, 1) records.  Extra records (e.g. optimizer
accumulators) may follow the model parameters; their names carry a prefix
containing '/'.
"""

import os
import struct

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelParams

MAGIC = b"RNNENCDC"
VERSION = 1


def _config_text(cfg, meta):
    lines = [f"{k}={v}" for k, v in cfg.to_dict().items()]
    lines += [f"meta.{k}={v}" for k, v in (meta or {}).items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config(blob):
    cfg, meta = {}, {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad config line {line!r}")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            cfg[key] = value
    return ModelConfig.from_dict(cfg), meta


def _records(p, extra):
    recs = list(p.named().items())
    recs += list((extra or {}).items())
    return recs


def payload_size(records):
    """Bytes taken by the record section for ``(name, array)`` records."""
    size = 4
    for name, a in records:
        size += 2 + len(name.encode("utf-8")) + 8 + 8 * a.size
    return size


def save(p, cfg, path, extra=None, meta=None):
    """Write parameters (plus optional extra named arrays) atomically."""
    header = _config_text(cfg, meta)
    records = _records(p, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(records)))
        for name, a in records:
            a = np.asarray(a, dtype="<f8")
            rows, cols = a.shape if a.ndim == 2 else (a.size, 1)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(a).tobytes())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path, with_extra=False):
    """Read a checkpoint; returns ``(params, config)`` or ``(params, config, extra, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, config_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    try:
        cfg, meta = _parse_config(r.take(config_len))
    except (UnicodeDecodeError, ValueError) as e:
        raise FormatError(f"{path}: bad config block: {e}") from None

    p = ModelParams.zeros(cfg)
    expected = p.named()
    seen = set()
    extra = {}
    (n_records,) = r.unpack("<I")
    for _ in range(n_records):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        rows, cols = r.unpack("<II")
        data = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").astype(np.float64)
        if name in expected:
            target = expected[name]
            want = target.shape if target.ndim == 2 else (target.size, 1)
            if (rows, cols) != want:
                raise FormatError(f"{path}: record {name} is {rows}x{cols}, config implies {want[0]}x{want[1]}")
            target[...] = data.reshape(target.shape)
            seen.add(name)
        elif "/" in name:
            extra[name] = data.reshape(rows, cols)
        else:
            raise FormatError(f"{path}: unexpected record {name!r}")
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    missing = set(expected) - seen
    if missing:
        raise FormatError(f"{path}: missing records {sorted(missing)}")
    if with_extra:
        return p, cfg, extra, meta
    return p, cfg
