"""Checkpoint files: a text manifest plus a little-endian float32 payload.

Manifest lines look like::

    name=encoder.visual.blocks.0.attn.q.weight shape=32,32 frozen=1 offset=0 kind=param

``offset`` counts float32 elements from the start of the payload.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .nn import Module

MANIFEST = "manifest.txt"
PAYLOAD = "weights.f32"


class CheckpointError(IOError):
    pass


def _entries(model: Module):
    for name, p in model.named_parameters():
        yield name, p.data, p.frozen, "param"
    for name, b in model.named_buffers():
        yield name, b, True, "buffer"


def save_checkpoint(model: Module, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines, chunks, offset = [], [], 0
    for name, arr, frozen, kind in _entries(model):
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"name={name} shape={shape} frozen={int(frozen)} offset={offset} kind={kind}")
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").reshape(-1))
        offset += arr.size
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    (directory / PAYLOAD).write_bytes(payload.tobytes())
    return directory


def read_manifest(directory) -> list:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"missing checkpoint manifest {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            kv = dict(tok.split("=", 1) for tok in line.split())
            shape = tuple(int(s) for s in kv["shape"].split(",") if s != "")
            entries.append(dict(name=kv["name"], shape=shape, frozen=kv["frozen"] == "1",
                                offset=int(kv["offset"]), kind=kv.get("kind", "param")))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}:{lineno}: malformed manifest line: {line!r}") from exc
    return entries


def load_checkpoint(model: Module, directory) -> Module:
    directory = Path(directory)
    entries = read_manifest(directory)
    raw = (directory / PAYLOAD).read_bytes() if (directory / PAYLOAD).exists() else None
    if raw is None:
        raise CheckpointError(f"missing checkpoint payload {directory / PAYLOAD}")
    expected = sum(int(np.prod(e["shape"])) for e in entries) * 4
    if len(raw) != expected:
        raise CheckpointError(f"payload size mismatch: expected {expected} bytes, found {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f4")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for e in entries:
        n = int(np.prod(e["shape"]))
        arr = payload[e["offset"]:e["offset"] + n].reshape(e["shape"])
        if e["kind"] == "buffer":
            if e["name"] not in buffers:
                raise CheckpointError(f"checkpoint buffer {e['name']} not in model")
            model.set_buffer(e["name"], arr.copy())
            continue
        p = params.get(e["name"])
        if p is None:
            raise CheckpointError(f"checkpoint parameter {e['name']} not in model")
        if p.shape != e["shape"]:
            raise CheckpointError(f"shape mismatch for {e['name']}: model {p.shape}, checkpoint {e['shape']}")
        p.data = arr.astype(p.dtype)
        p.freeze(e["frozen"])
    return model
