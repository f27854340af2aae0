"""Binary depth-map (.dmap) and descriptor-field (.dfield) files.

Layout: one line of JSON header terminated by ``\\n``, then row-major
little-endian float64 data.

* ``.dmap``: header ``{"width", "height", "dim": 1}``; H*W depths, NaN where invalid.
* ``.dfield``: header ``{"width", "height", "dim": D, "confidence": true}``;
  H*W*D descriptor values followed by H*W confidences.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .correspondence import DepthMap, DescriptorField


class FormatError(ValueError):
    pass


def _write(path, header: dict, *arrays) -> None:
    head = json.dumps(header, sort_keys=True).encode("ascii") + b"\n"
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes(head + body)


def _read(path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header") from exc
    body = data[nl + 1:]
    if len(body) % 8:
        raise FormatError(f"{path}: truncated payload")
    return header, np.frombuffer(body, dtype="<f8").astype(float)


def write_depth(path, depth: DepthMap) -> None:
    vals = np.where(depth.valid, depth.values, np.nan)
    _write(path, {"width": depth.width, "height": depth.height, "dim": 1}, vals)


def read_depth(path) -> DepthMap:
    h, data = _read(path)
    w, ht = int(h["width"]), int(h["height"])
    if int(h.get("dim", 1)) != 1 or data.size != w * ht:
        raise FormatError(f"{path}: size mismatch")
    return DepthMap.from_array(data.reshape(ht, w))


def write_field(path, f: DescriptorField) -> None:
    _write(path, {"width": f.width, "height": f.height, "dim": f.dim, "confidence": True},
           f.descriptors, f.confidence)


def read_field(path) -> DescriptorField:
    h, data = _read(path)
    w, ht, d = int(h["width"]), int(h["height"]), int(h["dim"])
    if data.size != w * ht * (d + 1):
        raise FormatError(f"{path}: size mismatch")
    desc = data[: w * ht * d].reshape(ht, w, d)
    conf = data[w * ht * d:].reshape(ht, w)
    return DescriptorField(desc, conf)
