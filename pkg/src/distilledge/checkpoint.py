"""Checkpoint format: one-line JSON header + raw little-endian float32 payload.

The header carries the model config, seed, and a parameter table (name,
shape, byte offset into the payload). Save -> load -> save round-trips are
bit-exact. Files use the ``.ckpt`` extension.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .models import ModelConfig, SequenceClassifier

FORMAT_NAME = "distilledge.ckpt"
FORMAT_VERSION = 1


def _header_and_payload(model: SequenceClassifier, extra: dict | None) -> tuple[dict, bytes]:
    entries = []
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        data = p.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "params": entries,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    return header, b"".join(chunks)


def save_checkpoint(path: str | Path, model: SequenceClassifier, extra: dict | None = None) -> None:
    header, payload = _header_and_payload(model, extra)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(payload)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, torch.Tensor], dict]:
    """Parse a checkpoint into (config, name->float32 tensor, header)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({exc})") from None
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
    expected = sum(int(np.prod(e["shape"] or [1])) * 4 for e in header["params"])
    if header["payload_bytes"] != expected or len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    state = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape or (1,)))
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        state[entry["name"]] = torch.from_numpy(arr.copy()).reshape(shape)
    config = ModelConfig.from_dict(header["config"])
    return config, state, header


def load_model(path: str | Path) -> SequenceClassifier:
    """Rebuild a SequenceClassifier from a checkpoint; shape mismatches raise."""
    config, state, _ = load_checkpoint(path)
    model = SequenceClassifier(config)
    own = dict(model.named_parameters())
    if set(own) != set(state):
        raise CheckpointError(
            f"{path}: parameter set mismatch (have {sorted(state)}, need {sorted(own)})"
        )
    with torch.no_grad():
        for name, p in own.items():
            if tuple(state[name].shape) != tuple(p.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: "
                    f"{tuple(state[name].shape)} vs config {tuple(p.shape)}"
                )
            p.copy_(state[name])
    model.eval()
    return model


def model_fingerprint(model: SequenceClassifier) -> str:
    """Stable hash of config + parameter bytes (metadata excluded)."""
    header, payload = _header_and_payload(model, extra=None)
    core = {k: header[k] for k in ("format", "version", "config", "params")}
    h = hashlib.sha256()
    h.update(json.dumps(core, sort_keys=True).encode("utf-8"))
    h.update(payload)
    return h.hexdigest()
