"""Named-parameter checkpoints.

A checkpoint is a directory holding ``params.bin`` (raw float64
little-endian values, concatenated) and ``manifest.txt`` with one line per
parameter: ``name<TAB>shape<TAB>offset<TAB>count`` (offset/count in values).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
BLOB = "params.bin"


def save_checkpoint(path, named_params, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, p in named_params:
            arr = np.ascontiguousarray(p.data if hasattr(p, "data") else p, dtype="<f8")
            fh.write(arr.tobytes())
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}\t{arr.size}")
            offset += arr.size
    header = [f"# {k}={v}" for k, v in sorted((extra or {}).items())]
    (path / MANIFEST).write_text("\n".join(header + lines) + "\n")
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = np.fromfile(path / BLOB, dtype="<f8")
    out: dict[str, np.ndarray] = {}
    for line in (path / MANIFEST).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        name, shape, offset, count = line.split("\t")
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        off, cnt = int(offset), int(count)
        if off + cnt > blob.size:
            raise ValueError(f"checkpoint {path}: entry {name} overruns params.bin")
        out[name] = blob[off:off + cnt].reshape(dims).astype(np.float64)
    return out


def apply_checkpoint(module, state: dict[str, np.ndarray], strict: bool = True):
    params = dict(module.named_parameters())
    if strict:
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    for name, p in params.items():
        if name in state:
            if state[name].shape != p.data.shape:
                raise ValueError(f"checkpoint {name}: shape {state[name].shape} != {p.data.shape}")
            p.data = state[name].copy()
