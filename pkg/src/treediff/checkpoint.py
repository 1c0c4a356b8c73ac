"""Checkpoint persistence: a JSON manifest plus a named-array archive.

The container is a plain ``.npz`` (zip of ``.npy`` members), readable by any
numpy without this package; round trips are bit-exact on every array.
"""
from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CompatibilityError, IntegrityError

_MANIFEST_KEY = "__manifest__"
STAGES = ("tree", "diffusion", "classifier")


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], manifest: dict[str, Any]) -> Path:
    """Write ``arrays`` plus ``manifest`` atomically to ``path``."""
    path = Path(path)
    if manifest.get("stage") not in STAGES:
        raise ValueError(f"manifest.stage must be one of {STAGES}")
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(arrays)
    if _MANIFEST_KEY in payload:
        raise ValueError(f"array name {_MANIFEST_KEY!r} is reserved")
    payload[_MANIFEST_KEY] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(
    path: str | Path,
    expected_config_hash: str | None = None,
    allow_mismatch: bool = False,
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint back; refuses config-hash mismatches unless overridden."""
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as archive:
            if _MANIFEST_KEY not in archive.files:
                raise IntegrityError(f"checkpoint {path} has no manifest")
            manifest = json.loads(archive[_MANIFEST_KEY].tobytes().decode())
            arrays = {name: archive[name] for name in archive.files if name != _MANIFEST_KEY}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"checkpoint {path} is corrupt: {exc}") from exc
    if expected_config_hash is not None and manifest.get("config_hash") != expected_config_hash:
        if not allow_mismatch:
            raise CompatibilityError(
                f"checkpoint {path} was built for config {manifest.get('config_hash')}, "
                f"expected {expected_config_hash} (pass allow_mismatch to override)"
            )
    return arrays, manifest


def module_arrays(module: torch.nn.Module, prefix: str = "param") -> dict[str, np.ndarray]:
    """Snapshot a module's state dict as named numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}/{name}"] = tensor.detach().cpu().numpy().copy()
    return out


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "param") -> None:
    """Restore a module's state dict from arrays produced by ``module_arrays``."""
    state = {}
    lead = prefix + "/"
    for name, value in arrays.items():
        if name.startswith(lead):
            state[name[len(lead):]] = torch.from_numpy(np.asarray(value))
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise IntegrityError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
    module.load_state_dict(state)


def rng_arrays(rng) -> dict[str, np.ndarray]:
    """Capture an Rng handle's generator states for exact resumption."""
    return {
        "rng/torch": rng.torch.get_state().numpy(),
        "rng/numpy": np.frombuffer(json.dumps(rng.numpy.bit_generator.state).encode(), dtype=np.uint8),
    }


def restore_rng(rng, arrays: dict[str, np.ndarray]) -> None:
    rng.torch.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
    rng.numpy.bit_generator.state = json.loads(arrays["rng/numpy"].tobytes().decode())
