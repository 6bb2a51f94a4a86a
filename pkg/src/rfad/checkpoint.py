"""Binary coreset checkpoints with a JSON metadata sidecar.

Layout: ``b"RFADCKPT"``, uint32 version, uint32 header length, UTF-8 JSON
header, then little-endian float64 buffers in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import ZcaTransform
from .distill import Coreset
from .errors import BadMagicError, TruncatedFileError, VersionMismatchError
from .networks import NetworkSpec

MAGIC = b"RFADCKPT"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def _buffers(coreset: Coreset) -> dict[str, np.ndarray]:
    bufs = {
        "base_images": coreset.base_images,
        "transform": coreset.transform,
        "labels": coreset.labels,
        "mask": coreset.mask.astype(np.float64),
        "log_tau": np.asarray([coreset.log_tau]),
        "class_ids": coreset.class_ids.astype(np.float64),
        "source_indices": coreset.source_indices.astype(np.float64),
    }
    if coreset.whiten is not None:
        bufs["whiten_mean"] = coreset.whiten.mean
        bufs["whiten_W"] = coreset.whiten.W
    return bufs


def encode_checkpoint(coreset: Coreset, config_hash: str = "") -> bytes:
    bufs = _buffers(coreset)
    header = {
        "network_spec": coreset.network_spec.to_dict(),
        "config_hash": config_hash,
        "num_classes": coreset.num_classes,
        "learn_labels": coreset.learn_labels,
        "learn_transform": coreset.learn_transform,
        "whiten": None if coreset.whiten is None else {"lam": coreset.whiten.lam, "pixel_std": coreset.whiten.pixel_std},
        "buffers": [[name, list(np.shape(a))] for name, a in bufs.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype=_LE_F64).tobytes() for a in bufs.values()]
    return b"".join(parts)


def decode_checkpoint(raw: bytes, source="checkpoint") -> tuple[Coreset, dict]:
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{source}: not a coreset checkpoint")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise TruncatedFileError(f"{source}: expected {off + 8} header bytes, got {len(raw)}")
    version, hlen = struct.unpack("<II", raw[off : off + 8])
    if version != VERSION:
        raise VersionMismatchError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
    off += 8
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen
    bufs = {}
    for name, shape in header["buffers"]:
        n = int(np.prod(shape)) * 8
        if len(raw) < off + n:
            raise TruncatedFileError(f"{source}: expected {off + n} bytes, got {len(raw)}")
        bufs[name] = np.frombuffer(raw, dtype=_LE_F64, count=n // 8, offset=off).reshape(shape).astype(np.float64)
        off += n
    mask = bufs["mask"] != 0
    whiten = None
    if header["whiten"] is not None:
        whiten = ZcaTransform(bufs["whiten_mean"], bufs["whiten_W"], header["whiten"]["lam"], header["whiten"]["pixel_std"])
    coreset = Coreset(
        base_images=bufs["base_images"],
        transform=bufs["transform"],
        labels=bufs["labels"],
        mask=mask,
        frozen_values=bufs["base_images"][mask].copy(),
        log_tau=float(bufs["log_tau"][0]),
        num_classes=header["num_classes"],
        class_ids=bufs["class_ids"].astype(np.int64),
        source_indices=bufs["source_indices"].astype(np.int64),
        network_spec=NetworkSpec.from_dict(header["network_spec"]),
        learn_labels=header["learn_labels"],
        learn_transform=header["learn_transform"],
        whiten=whiten,
    )
    return coreset, header


def save_checkpoint(path, coreset: Coreset, config_hash: str = "", metadata: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(coreset, config_hash))
    if metadata is not None:
        sidecar_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True, default=_json_default))
    return path


def load_checkpoint(path) -> tuple[Coreset, dict]:
    path = Path(path)
    coreset, header = decode_checkpoint(path.read_bytes(), source=path)
    side = sidecar_path(path)
    header["metadata"] = json.loads(side.read_text()) if side.exists() else None
    return coreset, header


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)
