"""Versioned binary checkpoints with bit-exact restore.

Layout::

    b"SIAMCKPT" | u32 format_version | u64 meta_len | u64 payload_len
    | meta (UTF-8 JSON) | payload (little-endian tensors) | sha256 of all preceding bytes

The metadata lists every tensor's name, dtype, shape and byte offset, plus the
model spec, counters, RNG state and the config/model digests.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from siamlab.errors import IntegrityError
from siamlab.model import EncoderSpec, PredictorSpec, build_model

MAGIC = b"SIAMCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")


@dataclass(frozen=True)
class CheckpointHandle:
    path: Path
    format_version: int
    config_digest: str
    model_digest: str
    global_step: int
    epoch: int


def digest_of(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj`` (key order does not matter)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def model_digest(model) -> str:
    return digest_of(model.spec_dict())


def _tensor_items(state):
    model = state.model
    for name, p in model.named_parameters():
        yield f"param/{name}", p.detach()
    for name, b in model.named_buffers():
        yield f"buffer/{name}", b.detach()
    for i, v in enumerate(state.momentum_buffers):
        yield f"momentum/{i}", v.detach()


def save_checkpoint(state, path, train_config=None) -> CheckpointHandle:
    """Write ``state`` atomically to ``path`` and return a handle."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in _tensor_items(state):
        arr = t.cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    meta = {
        "format_version": FORMAT_VERSION,
        "config_digest": state.config_digest,
        "model_digest": model_digest(state.model),
        "model_spec": state.model.spec_dict(),
        "train_config": asdict(train_config) if train_config is not None else None,
        "global_step": state.global_step,
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "tensors": entries,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes), len(payload)) + meta_bytes + payload
    blob = body + hashlib.sha256(body).digest()
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return CheckpointHandle(path, FORMAT_VERSION, state.config_digest, meta["model_digest"], state.global_step, state.epoch)


def _read_verified(path: Path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + 32:
        raise IntegrityError(f"{path}: file too short to be a checkpoint")
    magic, version, meta_len, payload_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a siamlab checkpoint")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = _HEADER.size + meta_len + payload_len + 32
    if len(blob) != expected:
        raise IntegrityError(f"{path}: truncated or padded ({len(blob)} bytes, expected {expected})")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    meta = json.loads(body[_HEADER.size : _HEADER.size + meta_len])
    return meta, body[_HEADER.size + meta_len :]


def read_metadata(path) -> dict:
    return _read_verified(Path(path))[0]


def load_checkpoint(path, expected_config_digest: Optional[str] = None, expected_model_digest: Optional[str] = None):
    """Restore a :class:`~siamlab.trainer.TrainState` from ``path``.

    Everything is validated (version, length, checksum, digests) before any
    tensor is materialized; a failure raises :class:`IntegrityError`.
    """
    from siamlab.trainer import TrainState

    meta, payload = _read_verified(Path(path))
    if expected_config_digest is not None and meta["config_digest"] != expected_config_digest:
        raise IntegrityError(f"{path}: config digest {meta['config_digest'][:12]} does not match {expected_config_digest[:12]}")
    if expected_model_digest is not None and meta["model_digest"] != expected_model_digest:
        raise IntegrityError(f"{path}: checkpoint was written for a different model spec")
    spec = meta["model_spec"]
    enc = EncoderSpec(**spec["encoder"])
    pred = PredictorSpec(**spec["predictor"])
    tensors = {}
    for e in meta["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.dtype(e["dtype"]), copy=True))
    dtype = tensors[next(n for n in tensors if n.startswith("param/"))].dtype
    model = build_model(enc, pred, seed=0, dtype=dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[f"param/{name}"])
        for name, b in model.named_buffers():
            b.copy_(tensors[f"buffer/{name}"])
    momentum = [tensors[f"momentum/{i}"] for i in range(sum(1 for n in tensors if n.startswith("momentum/")))]
    state = TrainState(model, momentum, meta["global_step"], meta["epoch"], meta["rng_state"], meta["config_digest"])
    return state


def checkpoint_handle(path) -> CheckpointHandle:
    meta = read_metadata(path)
    return CheckpointHandle(Path(path), meta["format_version"], meta["config_digest"], meta["model_digest"], meta["global_step"], meta["epoch"])
