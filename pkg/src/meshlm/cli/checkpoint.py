"""Binary checkpoint format and the shared named-tensor encoding.

Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
then raw tensor blobs. Tensors are stored as little-endian 32-bit floats in
registry order regardless of host, with per-tensor CRC32 checksums validated
on load; a 64-bit model converts on load. Diagnostics dumps reuse the same
encoding under a different magic.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_MAGIC = b"MLMCKPT1"
DUMP_MAGIC = b"MLMDUMP1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt or mismatched checkpoint data."""


def write_blob_file(path: str | Path, magic: bytes, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, array in tensors:
        raw = np.ascontiguousarray(array, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(array.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(raw),
                "crc32": f"{zlib.crc32(raw) & 0xFFFFFFFF:08x}",
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = dict(header)
    header["tensors"] = entries
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def read_blob_file(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(payload) < 16 or payload[:8] != magic:
        raise CheckpointError(f"{path}: bad magic")
    (header_len,) = struct.unpack("<Q", payload[8:16])
    if 16 + header_len > len(payload):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(payload[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    blob_start = 16 + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        start = blob_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor '{entry['name']}'")
        raw = payload[start:end]
        if f"{zlib.crc32(raw) & 0xFFFFFFFF:08x}" != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch on tensor '{entry['name']}'")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return header, tensors


def save_checkpoint(model, config: dict, path: str | Path) -> None:
    """Write the model's full parameter registry plus a config echo."""
    tensors = []
    params_meta = []
    for ref in model.registry.refs():
        array = ref.param.detach().to(torch.float32).cpu().numpy()
        tensors.append((ref.name, array))
        params_meta.append(
            {
                "name": ref.name,
                "group": ref.group.value,
                "shape": list(ref.param.shape),
                "trainable": ref.trainable,
                "locked": ref.locked,
            }
        )
    header = {
        "kind": "checkpoint",
        "format_version": FORMAT_VERSION,
        "config": config,
        "params": params_meta,
    }
    write_blob_file(path, CHECKPOINT_MAGIC, header, tensors)


def read_checkpoint_header(path: str | Path) -> dict:
    header, _ = read_blob_file(path, CHECKPOINT_MAGIC)
    return header


def load_checkpoint(path: str | Path, dtype: str | None = None):
    """Rebuild the network recorded in a checkpoint, bit-exactly.

    ``dtype`` overrides the stored config dtype (gradient-check runs load
    float32 blobs into a float64 model).
    """
    from . import config as config_mod

    header, tensors = read_blob_file(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    cfg = header["config"]
    if dtype is not None:
        cfg = dict(cfg)
        cfg["dtype"] = dtype
    net = config_mod.build_from_config(cfg)
    for ref in net.registry.refs():
        if ref.name not in tensors:
            raise CheckpointError(f"{path}: missing tensor '{ref.name}'")
        values = tensors[ref.name]
        if list(values.shape) != list(ref.param.shape):
            raise CheckpointError(
                f"{path}: shape mismatch on '{ref.name}': {values.shape} vs {tuple(ref.param.shape)}"
            )
        with torch.no_grad():
            ref.param.copy_(torch.from_numpy(values).to(ref.param.dtype))
    extra = set(tensors) - {r.name for r in net.registry.refs()}
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)[:3]}")
    return cfg, net
