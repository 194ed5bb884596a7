"""Checkpoint containers: a zip of tensor files plus a JSON manifest.

The manifest records the kind of checkpoint (backbone, classifier, codec,
pose feature encoder), the producing config digest, schedule arrays and any
scalar metadata; each tensor (parameter blobs, codec weights, schedule
coefficients) is stored as an individual container entry. Zip entries are
written with a fixed timestamp so identical content produces identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .tensorio import tensor_bytes, tensor_from_bytes

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(
    path: str | Path,
    kind: str,
    manifest: dict,
    tensors: dict[str, np.ndarray],
    state_dicts: dict[str, dict[str, torch.Tensor]] | None = None,
) -> None:
    """Write a checkpoint file.

    ``tensors`` maps names to plain arrays; ``state_dicts`` maps a module
    label to its ``state_dict()``, flattened into per-parameter entries.
    """
    state_dicts = state_dicts or {}
    entries: dict[str, np.ndarray] = dict(tensors)
    modules: dict[str, list[str]] = {}
    for label, sd in state_dicts.items():
        modules[label] = []
        for key, value in sd.items():
            entry = f"params/{label}/{key}"
            entries[entry] = value.detach().cpu().numpy()
            modules[label].append(key)
    meta = {
        "kind": kind,
        "manifest": manifest,
        "tensors": sorted(tensors),
        "modules": modules,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name in sorted(entries):
            _write_entry(zf, f"tensors/{name}.tnsr", tensor_bytes(entries[name]))
    Path(path).write_bytes(buf.getvalue())


class Checkpoint:
    """Read-side view of a checkpoint file."""

    def __init__(self, kind: str, manifest: dict, tensors: dict[str, np.ndarray], modules: dict):
        self.kind = kind
        self.manifest = manifest
        self._tensors = tensors
        self._modules = modules

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            with zipfile.ZipFile(path) as zf:
                meta = json.loads(zf.read("manifest.json"))
                tensors = {}
                for name in zf.namelist():
                    if name.startswith("tensors/") and name.endswith(".tnsr"):
                        key = name[len("tensors/") : -len(".tnsr")]
                        tensors[key] = tensor_from_bytes(zf.read(name))
        except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls(meta["kind"], meta["manifest"], tensors, meta["modules"])

    def tensor(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def state_dict(self, label: str) -> dict[str, torch.Tensor]:
        if label not in self._modules:
            raise CheckpointError(f"checkpoint has no module {label!r}")
        return {
            key: torch.from_numpy(self._tensors[f"params/{label}/{key}"].copy())
            for key in self._modules[label]
        }
