"""Versioned checkpoint container: magic, JSON header, torch parameter blob.

Layout::

    b"FIGSEPCK" | uint16 version | uint32 header length | header (UTF-8 JSON) | blob
"""

from __future__ import annotations

import io
import json
import struct

import torch

MAGIC = b"FIGSEPCK"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind, header, state_dict):
    head = json.dumps({"kind": kind, **header}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(state_dict, buf)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        fh.write(buf.getvalue())


def load_checkpoint(path, kind=None):
    """Return ``(header, state_dict)``; checks magic, version and kind."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        magic, version, n = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a figsep checkpoint")
        if version > VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version} is newer than {VERSION}")
        header = json.loads(fh.read(n).decode("utf-8"))
        state = torch.load(io.BytesIO(fh.read()), map_location="cpu", weights_only=True)
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')}")
    return header, state
