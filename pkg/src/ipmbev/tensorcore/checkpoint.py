"""Checkpoint archives: ``.npz`` with a versioned JSON header.

Keys: ``param/<path>``, ``buffer/<path>``, ``optim/...`` and ``__header__``.
Parameters are stored as float32.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, optimizer=None, meta: dict | None = None) -> None:
    arrays = {}
    for k, v in model.state_dict().items():
        arrays[k] = np.asarray(v, dtype=np.float32)
    if optimizer is not None:
        for k, v in optimizer.state_dict().items():
            arrays[k] = np.asarray(v, dtype=np.float32) if v.dtype.kind == "f" else v
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    return header, arrays
