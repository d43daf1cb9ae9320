"""The "pearl-ckpt-v1" parameter format.

A checkpoint `<stem>` is a pair of files: `<stem>.bin` holds the tensors as
consecutive little-endian float32 arrays, `<stem>.json` is the manifest
listing each entry's name, shape and byte offset plus free-form metadata.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor, nn

from pearl_lab.errors import ArtifactError, ShapeError

FORMAT_TAG = "pearl-ckpt-v1"
_DTYPE = np.dtype("<f4")


def checkpoint_paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def checkpoint_exists(stem: str | Path) -> bool:
    manifest, blob = checkpoint_paths(stem)
    return manifest.exists() and blob.exists()


def save_checkpoint(
    stem: str | Path, tensors: Mapping[str, Tensor], meta: Mapping[str, Any] | None = None
) -> Path:
    manifest_path, blob_path = checkpoint_paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().numpy().astype(_DTYPE)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes(order="C"))
        offset += array.nbytes
    blob_path.write_bytes(b"".join(chunks))
    manifest = {"format": FORMAT_TAG, "entries": entries, "meta": dict(meta or {})}
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest_path


def load_checkpoint(stem: str | Path) -> tuple[dict[str, Tensor], dict[str, Any]]:
    manifest_path, blob_path = checkpoint_paths(stem)
    if not checkpoint_exists(stem):
        raise ArtifactError(f"checkpoint {stem} not found (need .json and .bin)")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise ArtifactError(
            f"{manifest_path}: format {manifest.get('format')!r}, expected {FORMAT_TAG!r}"
        )
    blob = blob_path.read_bytes()
    tensors: dict[str, Tensor] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        stop = start + count * _DTYPE.itemsize
        if stop > len(blob):
            raise ArtifactError(f"{blob_path}: entry {entry['name']!r} overruns the buffer")
        array = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=start)
        tensors[entry["name"]] = torch.from_numpy(array.reshape(shape).copy())
    return tensors, manifest.get("meta", {})


def save_module(stem: str | Path, module: nn.Module, meta: Mapping[str, Any]) -> Path:
    return save_checkpoint(stem, dict(module.state_dict()), meta)


def load_into_module(module: nn.Module, tensors: Mapping[str, Tensor]) -> None:
    """Copy checkpoint tensors into `module`; names and shapes must match exactly."""
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    extra = sorted(set(tensors) - set(state))
    if missing or extra:
        raise ShapeError(
            f"checkpoint does not fit module: missing {missing}, unexpected {extra}"
        )
    for name, value in state.items():
        if tuple(tensors[name].shape) != tuple(value.shape):
            raise ShapeError(
                f"checkpoint entry {name!r} has shape {tuple(tensors[name].shape)}, "
                f"module expects {tuple(value.shape)}"
            )
    module.load_state_dict(
        {name: tensors[name].to(value.dtype) for name, value in state.items()}
    )
