"""Checkpoint directories: ``weights.f32`` (little-endian float32) + ``manifest.json``."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from privcxr.nn.model import ModelConfig, ResNet9

FORMAT = "privcxr-checkpoint-v1"
WEIGHTS = "weights.f32"
MANIFEST = "manifest.json"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ResNet9, path: str | Path, lineage: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if lineage is None:
        lineage = getattr(model, "lineage", {}) or {}
    blob = model.get_flat().astype("<f4").tobytes()
    manifest = {
        "format": FORMAT,
        "model_config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "parameter_count": model.num_parameters,
        "parameters": [[name, list(p.data.shape)] for name, p in model.named_parameters()],
        "dtype": "<f4",
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
        "seed_lineage": lineage,
    }
    (path / WEIGHTS).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    mpath = Path(path) / MANIFEST
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint manifest {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest {mpath}: {exc}") from exc
    required = ("format", "model_config", "config_hash", "parameter_count", "weights_sha256")
    missing = [k for k in required if k not in manifest]
    if missing or manifest.get("format") != FORMAT:
        raise CheckpointError(f"manifest {mpath} is not a {FORMAT} manifest (missing {missing})")
    return manifest


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> ResNet9:
    """Rebuild the model stored at ``path``.

    With ``expected`` given, every ModelConfig field must match; the first
    mismatching field is named in the error.
    """
    path = Path(path)
    manifest = read_manifest(path)
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model_config in manifest: {exc}") from exc
    if config.config_hash() != manifest["config_hash"]:
        raise CheckpointError("config_hash does not match the stored model_config")
    if expected is not None:
        for key, want in expected.to_dict().items():
            have = manifest["model_config"].get(key)
            if have != want:
                raise CheckpointError(f"{key}: checkpoint has {have!r}, expected {want!r}")
    try:
        blob = (path / WEIGHTS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing weights file in {path}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest["weights_sha256"]:
        raise CheckpointError("weights checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    model = ResNet9(config, None)
    if flat.size != manifest["parameter_count"] or flat.size != model.num_parameters:
        raise CheckpointError(
            f"parameter_count: checkpoint has {flat.size}, model needs {model.num_parameters}"
        )
    model.set_flat(flat)
    model.lineage = manifest.get("seed_lineage", {})
    return model
