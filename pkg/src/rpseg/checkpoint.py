"""Checkpoint serialization.

Layout: the magic line ``RPSEG1``, a text manifest (config block plus one
``param`` line per array giving name, shape and float offset), then a single
blob of row-major little-endian float32 values.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore

MAGIC = b"RPSEG1\n"


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def save_checkpoint(path, store: ParamStore, config_text: str = "") -> None:
    config_bytes = config_text.encode("utf-8")
    manifest = [f"config {len(config_bytes)}\n".encode("ascii"), config_bytes, b"\n"]
    offset = 0
    blobs = []
    for name, p in store.items():
        shape = ",".join(str(d) for d in p.data.shape)
        manifest.append(f"param {name} {shape} {offset}\n".encode("ascii"))
        flat = np.ascontiguousarray(p.data, dtype="<f4").reshape(-1)
        blobs.append(flat.tobytes())
        offset += flat.size
    manifest.append(f"blob {offset}\n".encode("ascii"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for chunk in manifest:
            fh.write(chunk)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, str]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def read_line():
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated manifest")
        line = raw[pos:end].decode("utf-8")
        pos = end + 1
        return line

    header = read_line().split()
    if len(header) != 2 or header[0] != "config":
        raise CheckpointError(f"{path}: missing config block")
    n_config = int(header[1])
    config_text = raw[pos:pos + n_config].decode("utf-8")
    pos += n_config + 1  # trailing newline after the config block

    entries = []
    while True:
        parts = read_line().split()
        if not parts:
            raise CheckpointError(f"{path}: empty manifest line")
        if parts[0] == "blob":
            total = int(parts[1])
            break
        if parts[0] != "param" or len(parts) != 4:
            raise CheckpointError(f"{path}: bad manifest line {' '.join(parts)!r}")
        name = parts[1]
        shape = tuple(int(d) for d in parts[2].split(",")) if parts[2] else ()
        entries.append((name, shape, int(parts[3])))

    blob = np.frombuffer(raw, dtype="<f4", count=total, offset=pos)
    if blob.size != total:
        raise CheckpointError(f"{path}: truncated parameter blob")
    store = ParamStore(dtype)
    for name, shape, offset in entries:
        size = int(np.prod(shape)) if shape else 1
        if offset + size > total:
            raise CheckpointError(f"{path}: parameter {name!r} runs past the blob")
        store.add(name, blob[offset:offset + size].reshape(shape).astype(dtype))
    return store, config_text
