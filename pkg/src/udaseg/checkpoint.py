"""Checkpoint container and its on-disk format.

A checkpoint is `<name>.json` (parameter names, shapes, offsets, architecture
descriptor, stage metadata) plus `<name>.bin` holding the little-endian
float32 parameters back to back in manifest order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import SvolError


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    arch: dict
    meta: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.arch, sort_keys=True).encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Parameters under `prefix.` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def state_dict(self, prefix: str | None = None) -> dict[str, torch.Tensor]:
        params = self.subset(prefix) if prefix else self.params
        return {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in params.items()}


def from_modules(arch: dict, meta: dict | None = None, **modules: torch.nn.Module) -> Checkpoint:
    params = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            params[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().astype(np.float32).copy()
    return Checkpoint(params, dict(arch), dict(meta or {}))


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    manifest_path, payload_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    digest = ckpt.digest()
    manifest = {"format": "udaseg-ckpt-1", "dtype": "f32", "params": entries, "arch": ckpt.arch,
                "meta": ckpt.meta, "sha256": digest}
    payload_path.write_bytes(payload)
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return digest


def load_checkpoint(path) -> Checkpoint:
    manifest_path, payload_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
        payload = np.frombuffer(payload_path.read_bytes(), dtype="<f4")
    except FileNotFoundError as exc:
        raise SvolError(f"missing checkpoint component: {exc.filename}") from exc
    params = {}
    for e in manifest["params"]:
        end = e["offset"] + e["count"]
        if end > payload.size:
            raise SvolError(f"checkpoint payload too short for parameter {e['name']}")
        params[e["name"]] = payload[e["offset"]:end].reshape(e["shape"]).copy()
    ckpt = Checkpoint(params, manifest["arch"], manifest.get("meta", {}))
    if manifest.get("sha256") and ckpt.digest() != manifest["sha256"]:
        raise SvolError(f"checkpoint {manifest_path} fails its integrity hash")
    return ckpt
