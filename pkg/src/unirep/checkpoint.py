"""Single-file binary checkpoints.

Layout (little-endian)::

    b"UDRC" | u32 version | u32 header length | JSON header | array payload

The header lists every array (name, dtype, shape, byte offset, crc32) in
payload order, plus the config hash, blueprint signature, step counter,
moment counts and class-pairing permutations. JSON is written with sorted
keys so that save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, FormatError

MAGIC = b"UDRC"
VERSION = 1
SCHEMA = "unirep.checkpoint/1"
_PREFIX = struct.Struct("<4sII")


def blueprint_signature(model):
    bp = model.blueprint
    return {
        "preset": bp.preset,
        "input_shape": list(bp.input_shape),
        "filters": list(bp.filters),
        "units": [st.units for st in bp.stages],
        "class_counts": list(bp.class_counts),
        "norm": bp.norm_strategy.label,
        "sharing": model.sharing.mode.value,
        "shared_blocks": list(model.sharing.shared_blocks),
        "dtype": np.dtype(model.dtype).name,
    }


def _model_arrays(model, velocity=None):
    arrays = [(f"param:{pid}", arr) for pid, arr in sorted(model.bank.arrays.items())]
    for site, d, m in model.bank.moment_collections():
        arrays.append((f"moment:{site}@{d}:mu", m.mu))
        arrays.append((f"moment:{site}@{d}:sigma2", m.sigma2))
    if velocity is not None:
        arrays.extend((f"velocity:{pid}", v) for pid, v in sorted(velocity.items()))
    return arrays


def save_checkpoint(path, model, config_hash="", velocity=None, step=0, extra=None):
    arrays = _model_arrays(model, velocity)
    table, chunks, offset = [], [], 0
    for name, arr in arrays:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        table.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "schema": SCHEMA,
        "config_hash": config_hash,
        "blueprint": blueprint_signature(model),
        "step": int(step),
        "arrays": table,
        "moment_counts": {f"{site}@{d}": m.count for site, d, m in model.bank.moment_collections()},
        "class_perm": {str(d): [int(v) for v in perm] for d, perm in sorted(model.class_perm.items())},
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path):
    """Parse a checkpoint into ``(header, {name: array})`` with located format errors."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"truncated prefix: missing byte at offset {len(raw)}", offset=len(raw))
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    hend = _PREFIX.size + hlen
    if len(raw) < hend:
        raise FormatError(f"truncated header: missing byte at offset {len(raw)}", offset=len(raw))
    try:
        header = json.loads(raw[_PREFIX.size:hend])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}", offset=_PREFIX.size) from exc
    if header.get("schema") != SCHEMA:
        raise FormatError(f"unknown schema {header.get('schema')!r}", offset=_PREFIX.size)
    arrays = {}
    end = hend
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        start = hend + entry["offset"]
        end = start + n
        if len(raw) < end:
            raise FormatError(f"truncated array {entry['name']}: missing byte at offset {len(raw)}", offset=len(raw))
        chunk = raw[start:end]
        if zlib.crc32(chunk) != entry["crc32"]:
            raise FormatError(f"checksum mismatch in array {entry['name']} starting at offset {start}", offset=start)
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    if len(raw) != end:
        raise FormatError(f"{len(raw) - end} trailing bytes", offset=end)
    return header, arrays


def load_checkpoint(path, model, expected_hash=None):
    """Restore ``model`` in place; returns ``(header, velocity)``."""
    header, arrays = read_checkpoint(path)
    sig = blueprint_signature(model)
    if header["blueprint"] != sig:
        diff = sorted(k for k in sig if header["blueprint"].get(k) != sig[k])
        raise CompatibilityError(f"checkpoint blueprint differs from model in {diff}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CompatibilityError(
            f"config hash mismatch: checkpoint {header['config_hash'][:12]} vs config {expected_hash[:12]}"
        )
    for pid, arr in model.bank.arrays.items():
        src = arrays.get(f"param:{pid}")
        if src is None or src.shape != arr.shape:
            raise CompatibilityError(f"checkpoint lacks parameter {pid} with shape {arr.shape}")
        arr[...] = src
    counts = header["moment_counts"]
    for site, d, m in model.bank.moment_collections():
        key = f"{site}@{d}"
        m.mu[...] = arrays[f"moment:{key}:mu"]
        m.sigma2[...] = arrays[f"moment:{key}:sigma2"]
        m.count = int(counts[key])
    model.class_perm = {int(d): np.asarray(p, dtype=np.int64) for d, p in header["class_perm"].items()}
    velocity = {name[len("velocity:"):]: a for name, a in arrays.items() if name.startswith("velocity:")}
    return header, velocity


def checkpoint_io(model, path, direction, **kwargs):
    """``direction="write"`` saves ``model`` to ``path``; ``"read"`` restores it and returns the model."""
    if direction == "write":
        save_checkpoint(path, model, **kwargs)
        return path
    if direction == "read":
        load_checkpoint(path, model, **kwargs)
        return model
    raise ValueError(f"direction must be 'read' or 'write', got {direction!r}")
