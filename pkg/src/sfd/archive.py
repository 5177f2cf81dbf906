"""Named-tensor archive used for encoder weights, checkpoints and feature dumps.

The container is safetensors. Every archive carries string metadata with

* ``format``  -- always ``"sfd-archive"``
* ``version`` -- container version, currently ``"1"``
* ``sha256``  -- digest over tensor names, dtypes, shapes and raw bytes
* ``meta``    -- JSON document owned by the writer (config, step, ...)

Loading verifies the digest, so a truncated or edited file never yields
partial state.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import torch
from safetensors import SafetensorError
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .errors import ArchiveError, ChecksumError, VersionError

FORMAT = "sfd-archive"
VERSION = "1"


def tensor_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(t.reshape(-1).view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def state_digest(module: torch.nn.Module) -> str:
    """Hash of every parameter and buffer of ``module``; used for frozen-weight audits."""
    return tensor_digest(module.state_dict())


def _canonical(data: bytes) -> bytes:
    """Re-emit the header with sorted keys; safetensors writes metadata in hash order."""
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + data[8 + n:]


def save_archive(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    flat = {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}
    header = {
        "format": FORMAT,
        "version": VERSION,
        "sha256": tensor_digest(flat),
        "meta": json.dumps(meta or {}, sort_keys=True),
    }
    data = _canonical(st_save(flat, metadata=header))
    path.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename so readers never observe a half-written archive
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(data: bytes) -> dict[str, str]:
    if len(data) < 8:
        raise ChecksumError("archive truncated: missing header")
    n = int.from_bytes(data[:8], "little")
    if 8 + n > len(data):
        raise ChecksumError("archive truncated: header extends past end of file")
    try:
        header = json.loads(data[8:8 + n])
    except ValueError as e:
        raise ChecksumError(f"archive header unreadable: {e}") from None
    return header.get("__metadata__") or {}


def load_archive(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """Return ``(tensors, meta)``; raises ChecksumError/VersionError on bad files."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"archive not found: {path}")
    data = path.read_bytes()
    header = read_header(data)
    if header.get("format") != FORMAT:
        raise ArchiveError(f"{path} is not an {FORMAT} file")
    if header.get("version") != VERSION:
        raise VersionError(f"{path}: archive version {header.get('version')!r}, expected {VERSION!r}")
    try:
        tensors = st_load(data)
    except (SafetensorError, ValueError, RuntimeError) as e:
        raise ChecksumError(f"{path}: corrupt tensor payload ({e})") from None
    if tensor_digest(tensors) != header.get("sha256"):
        raise ChecksumError(f"{path}: checksum mismatch")
    return tensors, json.loads(header.get("meta", "{}"))
