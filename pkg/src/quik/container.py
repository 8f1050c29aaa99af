"""Directory-based tensor container: ``manifest.json`` plus raw blob files.

Manifest layout::

    {
      "format": "quik-container",
      "version": 1,
      "metadata": {...},
      "tensors": [
        {"name": ..., "dtype": "f32" | "i8" | "i4p", "shape": [...],
         "file": "data.bin", "offset": 0, "length": 16},
        ...
      ]
    }

Blobs are little-endian; offsets are 8-byte aligned. ``i4p`` tensors are
2-D and use the nibble layout of :class:`~quik.packed.PackedIntMatrix`,
with ``shape`` giving the logical (rows, cols).
"""
from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np

from .errors import FormatError
from .packed import PackedIntMatrix, row_bytes

MANIFEST = "manifest.json"
BLOB = "data.bin"
ALIGN = 8
DTYPES = ("f32", "i8", "i4p")


def _dtype_code(value):
    if isinstance(value, PackedIntMatrix):
        return "i4p" if value.bits == 4 else "i8"
    value = np.asarray(value)
    if value.dtype == np.float32:
        return "f32"
    if value.dtype == np.int8:
        return "i8"
    raise FormatError(f"unsupported tensor dtype {value.dtype}; use float32, int8 or PackedIntMatrix")


def expected_length(dtype, shape):
    if dtype == "f32":
        return 4 * math.prod(shape)
    if dtype == "i8":
        return math.prod(shape)
    if dtype == "i4p":
        if len(shape) != 2:
            raise FormatError(f"i4p tensors must be 2-D, got shape {list(shape)}")
        return shape[0] * row_bytes(shape[1], 4)
    raise FormatError(f"unknown dtype code {dtype!r}")


def _payload(value):
    if isinstance(value, PackedIntMatrix):
        return value.tobytes(), [value.rows, value.cols]
    value = np.asarray(value)
    if value.dtype == np.float32:
        return np.ascontiguousarray(value, dtype="<f4").tobytes(), list(value.shape)
    return np.ascontiguousarray(value).tobytes(), list(value.shape)


def write_container(path, tensors, metadata=None):
    """Write ``tensors`` (an ordered mapping name -> array) into directory ``path``.

    Float32 arrays are stored as ``f32``, int8 arrays and 8-bit packed
    matrices as ``i8``, 4-bit packed matrices as ``i4p``. Manifest order
    follows the mapping's iteration order.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as blob:
        for name, value in tensors.items():
            if not isinstance(name, str) or not name:
                raise FormatError(f"invalid tensor name {name!r}")
            dtype = _dtype_code(value)
            raw, shape = _payload(value)
            if len(raw) != expected_length(dtype, shape):
                raise FormatError(f"{name}: {len(raw)} bytes do not match {dtype}{shape}")
            pad = (-offset) % ALIGN
            blob.write(b"\0" * pad)
            offset += pad
            blob.write(raw)
            entries.append(
                {"name": name, "dtype": dtype, "shape": shape, "file": BLOB,
                 "offset": offset, "length": len(raw)}
            )
            offset += len(raw)
    manifest = {"format": "quik-container", "version": 1, "metadata": metadata or {},
                "tensors": entries}
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, path / MANIFEST)
    return path


def read_manifest(path):
    path = Path(path)
    mpath = path / MANIFEST if path.is_dir() else path
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError(f"no manifest at {mpath}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise FormatError(f"{mpath}: manifest lacks a tensor list")
    names = [e.get("name") for e in manifest["tensors"]]
    if len(set(names)) != len(names):
        raise FormatError(f"{mpath}: duplicate tensor names")
    return manifest


def read_container(path):
    """Read a container. Returns ``(tensors, metadata)``.

    ``tensors`` preserves manifest order. ``f32`` entries come back as
    float32 arrays, ``i8`` as int8 arrays, ``i4p`` as PackedIntMatrix.
    """
    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest = read_manifest(path)
    tensors = {}
    blobs = {}
    for entry in manifest["tensors"]:
        try:
            name, dtype, shape = entry["name"], entry["dtype"], [int(s) for s in entry["shape"]]
            fname, offset, length = entry["file"], int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest entry {entry!r}: {exc}") from None
        if dtype not in DTYPES:
            raise FormatError(f"{name}: unknown dtype code {dtype!r}")
        if any(s < 0 for s in shape):
            raise FormatError(f"{name}: negative dimension in {shape}")
        if length != expected_length(dtype, shape):
            raise FormatError(f"{name}: manifest length {length} does not match {dtype}{shape}")
        if offset % ALIGN:
            raise FormatError(f"{name}: offset {offset} not {ALIGN}-byte aligned")
        if Path(fname).name != fname:
            raise FormatError(f"{name}: blob file {fname!r} must be a plain file name")
        if fname not in blobs:
            try:
                blobs[fname] = (root / fname).read_bytes()
            except FileNotFoundError:
                raise FormatError(f"{name}: blob file {fname} missing") from None
        buf = blobs[fname]
        if offset + length > len(buf):
            raise FormatError(
                f"{name}: blob {fname} truncated ({len(buf)} bytes, need {offset + length})"
            )
        raw = buf[offset:offset + length]
        if dtype == "f32":
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        elif dtype == "i8":
            tensors[name] = np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()
        else:
            try:
                tensors[name] = PackedIntMatrix.from_bytes(raw, shape[0], shape[1], 4)
            except ValueError as exc:
                raise FormatError(f"{name}: {exc}") from None
    return tensors, manifest.get("metadata", {})


def first_tensor(path, name=None):
    """Load one f32 tensor from a container, by name or the first in the manifest.

    ``path`` may also be written ``dir:name``.
    """
    spath = str(path)
    if name is None and ":" in spath and not Path(spath).exists():
        spath, name = spath.rsplit(":", 1)
    tensors, _ = read_container(spath)
    if not tensors:
        raise FormatError(f"{spath}: container is empty")
    if name is None:
        name = next(iter(tensors))
    if name not in tensors:
        raise FormatError(f"{spath}: no tensor named {name!r}")
    return tensors[name]
