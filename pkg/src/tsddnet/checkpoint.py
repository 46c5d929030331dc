"""Parameter blobs with a versioned JSON header; loading rejects mismatched headers."""

from __future__ import annotations

import datetime as _dt
import json
from pathlib import Path

import torch
from torch import nn

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(module: nn.Module, path: str | Path, header: dict, metadata: dict | None = None) -> Path:
    """Write ``<path>.pt`` (state dict) and ``<path>.json`` (header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path.with_suffix(".pt"))
    meta = {"format_version": FORMAT_VERSION, "header": header,
            "created": metadata.get("created") if metadata and "created" in metadata
            else _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    if metadata:
        meta["metadata"] = {k: v for k, v in metadata.items() if k != "created"}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return path.with_suffix(".pt")


def read_header(path: str | Path) -> dict:
    p = Path(path).with_suffix(".json")
    if not p.is_file():
        raise CheckpointError(f"missing checkpoint header {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def load_checkpoint(module: nn.Module, path: str | Path, header: dict) -> dict:
    """Load parameters into ``module`` after checking the stored header equals ``header``."""
    meta = read_header(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    stored = json.loads(json.dumps(meta["header"]))
    expected = json.loads(json.dumps(header))
    if stored != expected:
        raise CheckpointError(f"{path}: header mismatch\n stored:   {stored}\n expected: {expected}")
    state = torch.load(Path(path).with_suffix(".pt"), map_location="cpu", weights_only=True)
    module.load_state_dict(state)
    return meta
