"""Named-tensor checkpoints and content digests.

Checkpoints are plain JSON: a ``tensors`` map of flat float arrays keyed by
parameter name, the producing config, and optional extra fields. JSON doubles
round-trip float64 exactly, so save/load is bit-preserving.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def canonical_json(obj) -> str:
    """Serialise with sorted keys and no whitespace, for digest stability."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensors_digest(tensors: dict[str, np.ndarray]) -> str:
    """Digest over names, shapes, and little-endian float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.astype("<f8").tobytes())
    return h.hexdigest()


def model_digest(module) -> str:
    """Digest of a torch module's parameters and buffers."""
    tensors = {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}
    return tensors_digest(tensors)


def save_tensors(path, tensors: dict[str, np.ndarray], config: dict, extra: dict | None = None):
    payload = {
        "config": config,
        "tensors": {
            name: {
                "shape": list(np.asarray(arr).shape),
                "data": np.asarray(arr, dtype=np.float64).ravel().tolist(),
            }
            for name, arr in tensors.items()
        },
        "digest": tensors_digest(tensors),
    }
    if extra:
        payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload))
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return (tensors, config, extra fields) from a checkpoint file."""
    payload = json.loads(Path(path).read_text())
    tensors = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["tensors"].items()
    }
    extra = {k: v for k, v in payload.items() if k not in ("tensors", "config")}
    return tensors, payload.get("config", {}), extra
