"""Checkpoint archive: a zip of named tensors plus a JSON manifest.

The manifest records the format version, the model configuration, and a
sha256 digest per tensor payload. Loading validates the version, that the
manifest and archive agree entry for entry, and every digest; any mismatch
raises CheckpointError. Archives that lack adapter / head / cross-attention
tensors are legal inputs for seeding continual pre-training: missing groups
are freshly initialized by the loader in train.py.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_NAME = "glare-checkpoint"
FORMAT_VERSION = 1


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_archive(path, tensors: dict, model_meta: dict, extra: dict | None = None):
    """Write tensors (torch tensors or numpy arrays) with a manifest."""
    entries = {}
    payloads = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        data = _npy_bytes(arr)
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
        payloads[name] = data
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "model": model_meta,
        "tensors": entries,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, data in payloads.items():
            zf.writestr(f"tensors/{name}.npy", data)


def load_archive(path):
    """Read and validate an archive; returns (manifest, {name: np.ndarray})."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    with zf:
        names = set(zf.namelist())
        if "manifest.json" not in names:
            raise CheckpointError(f"{path}: missing manifest.json")
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (ValueError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
        if manifest.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: not a {FORMAT_NAME} archive")
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported version {manifest.get('version')!r}")
        for key in ("model", "tensors", "extra"):
            if key not in manifest:
                raise CheckpointError(f"{path}: manifest missing key {key!r}")

        listed = {f"tensors/{name}.npy" for name in manifest["tensors"]}
        stored = {n for n in names if n != "manifest.json"}
        if listed != stored:
            raise CheckpointError(
                f"{path}: manifest/archive tensor mismatch "
                f"(+{sorted(stored - listed)[:3]} -{sorted(listed - stored)[:3]})")

        tensors = {}
        for name, meta in manifest["tensors"].items():
            try:
                data = zf.read(f"tensors/{name}.npy")
            except zipfile.BadZipFile as exc:
                raise CheckpointError(f"{path}: corrupt entry {name}: {exc}") from exc
            if hashlib.sha256(data).hexdigest() != meta.get("sha256"):
                raise CheckpointError(f"{path}: checksum mismatch for {name}")
            arr = np.load(io.BytesIO(data), allow_pickle=False)
            if list(arr.shape) != meta["shape"] or str(arr.dtype) != meta["dtype"]:
                raise CheckpointError(f"{path}: shape/dtype mismatch for {name}")
            tensors[name] = arr
    return manifest, tensors


def state_dict_tensors(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, prefix: str, tensors: dict):
    """Load all prefixed arrays into a module's state dict (strict)."""
    state = {}
    plen = len(prefix) + 1
    for name, arr in tensors.items():
        if name.startswith(prefix + "."):
            state[name[plen:]] = torch.from_numpy(arr.copy())
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint misses tensors for {prefix}: {sorted(missing)[:4]}")
    module.load_state_dict(state, strict=True)


def has_group(tensors: dict, prefix: str) -> bool:
    return any(name.startswith(prefix + ".") for name in tensors)
