"""Model archive: a JSON header followed by named little-endian float32 arrays.

Layout::

    b"BGAM" | u32 version | u32 header length | header (UTF-8 JSON) | payload

The header lists every parameter's name, shape and byte offset in the
payload, the per-step class counts, the background flags, caller metadata
and a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .segnet import ModelConfig, SegmentationModel

MAGIC = b"BGAM"
VERSION = 1


class ArchiveError(IOError):
    """The archive is unreadable, truncated or fails its checksum."""


def dumps(model: SegmentationModel, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": VERSION,
        "num_steps": model.num_steps,
        "class_counts": model.class_counts,
        "background_mode": model.background_mode,
        "use_filter": model.use_filter,
        "model_config": asdict(model.config),
        "params": entries,
        "meta": meta or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload


def save(model: SegmentationModel, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, meta))


def read_header(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ArchiveError("not a model archive")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"corrupt archive header: {exc}") from None
    payload = raw[12 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ArchiveError("payload checksum mismatch")
    return header, payload


def loads(raw: bytes) -> tuple[SegmentationModel, dict]:
    header, payload = read_header(raw)
    cfg = header["model_config"]
    cfg["enc_widths"] = tuple(cfg["enc_widths"])
    counts = header["class_counts"]
    model = SegmentationModel.create(
        counts[0],
        seed=0,
        config=ModelConfig(**cfg),
        background_mode=header["background_mode"],
        use_filter=header["use_filter"],
    )
    for n in counts[1:]:
        model.add_step_head(n)
    params = dict(model.named_parameters())
    if set(params) != {e["name"] for e in header["params"]}:
        raise ArchiveError("parameter names do not match the declared architecture")
    for e in header["params"]:
        p = params[e["name"]]
        size = int(np.prod(e["shape"])) * 4
        chunk = payload[e["offset"] : e["offset"] + size]
        if tuple(e["shape"]) != p.shape or len(chunk) != size:
            raise ArchiveError(f"parameter {e['name']} has a bad shape or is truncated")
        p.data = np.frombuffer(chunk, dtype="<f4").reshape(p.shape).astype(np.float32)
    return model, header["meta"]


def load(path) -> tuple[SegmentationModel, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read {path}: {exc}") from None
    return loads(raw)
