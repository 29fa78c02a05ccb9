"""Checkpoint persistence: a directory holding a JSON manifest plus one
binary parameter blob per layer, with content hashes for chain integrity.

Everything written here is byte-deterministic, so rerunning a stage with the
same seed and inputs reproduces identical files and hashes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "HashMismatch",
    "sha256_file",
    "write_json",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
    "verify_hash",
]


class HashMismatch(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_checkpoint(dirpath, manifest: dict, state_dicts: dict[str, dict]) -> str:
    """Write parameter blobs (keyed component.layer) and a manifest that
    records each blob's hash.  Returns the checkpoint's own hash."""
    dirpath = Path(dirpath)
    params = dirpath / "params"
    params.mkdir(parents=True, exist_ok=True)
    blob_hashes = {}
    for comp, sd in state_dicts.items():
        for name, tensor in sd.items():
            key = f"{comp}.{name}"
            fname = params / (key + ".npy")
            np.save(fname, tensor.detach().cpu().numpy())
            blob_hashes[key] = sha256_file(fname)
    manifest = dict(manifest)
    manifest["blobs"] = blob_hashes
    write_json(dirpath / "manifest.json", manifest)
    return checkpoint_hash(dirpath)


def checkpoint_hash(dirpath) -> str:
    return sha256_file(Path(dirpath) / "manifest.json")


def load_checkpoint(dirpath, verify: bool = True) -> tuple[dict, dict[str, dict]]:
    """Returns (manifest, {component: state_dict})."""
    dirpath = Path(dirpath)
    manifest = json.loads((dirpath / "manifest.json").read_text())
    out: dict[str, dict] = {}
    for key, digest in manifest["blobs"].items():
        fname = dirpath / "params" / (key + ".npy")
        if verify and sha256_file(fname) != digest:
            raise HashMismatch(f"parameter blob {key} was modified")
        comp, name = key.split(".", 1)
        out.setdefault(comp, {})[name] = torch.from_numpy(np.load(fname))
    return manifest, out


def verify_hash(path, expected: str, what: str) -> None:
    actual = sha256_file(path)
    if actual != expected:
        raise HashMismatch(f"{what}: recorded hash {expected[:12]}.. != on-disk {actual[:12]}..")
