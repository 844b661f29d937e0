"""Named-tensor checkpoints: numpy ``.npz`` with little-endian float64 arrays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import StructuralError
from .layers import Params

FORMAT_VERSION = 1
_META = "__meta__"


def save_params(path: str | Path, params: Params, meta: dict | None = None) -> None:
    header = {"format_version": FORMAT_VERSION, **(meta or {})}
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in params.items()}
    arrays[_META] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_params(path: str | Path) -> tuple[Params, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if _META not in z.files:
            raise StructuralError(f"{path}: not a parameter checkpoint")
        meta = json.loads(z[_META].tobytes().decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise StructuralError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        params = {k: z[k].astype(np.float64) for k in z.files if k != _META}
    return params, meta
