"""Single-file checkpoint archive: a zip holding ``manifest.json`` and the
torch state dict."""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import torch

from .errors import LoadError, PersistenceError
from .policy import HierarchicalPolicy, PolicyConfig


def save_checkpoint(path, model: HierarchicalPolicy, extra: dict | None = None) -> Path:
    path = Path(path)
    state = model.state_dict()
    manifest = {
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "modules": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
                    for k, v in state.items()],
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=1))
            zf.writestr("state.pt", buf.getvalue())
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expect: PolicyConfig | None = None) -> tuple[HierarchicalPolicy, dict]:
    manifest = read_manifest(path)
    cfg = PolicyConfig.from_dict(manifest["config"])
    if cfg.hash() != manifest["config_hash"]:
        raise LoadError(f"{path}: manifest config hash does not match its config")
    if expect is not None and expect.hash() != cfg.hash():
        raise LoadError(f"{path}: checkpoint config {cfg.hash()} != requested {expect.hash()}")
    with zipfile.ZipFile(path) as zf:
        state = torch.load(io.BytesIO(zf.read("state.pt")), weights_only=True)
    model = HierarchicalPolicy(cfg)
    # restore each tensor at its stored precision (fusion weights stay float64)
    for name, p in model.named_parameters():
        if name in state:
            p.data = p.data.to(state[name].dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    model.eval()
    return model, manifest
