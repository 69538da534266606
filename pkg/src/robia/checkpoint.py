"""Single-file checkpoint container for stereo models.

Layout: a short magic string, a little-endian uint32 format version, a
uint32 header length, a JSON header, then the raw tensor payload.  The
header records the model configuration, the optional excitation-layer
configuration, free-form metadata, a blake2b digest of the payload, and
one entry per tensor (name, kind, dtype, shape, byte offset).  Loading
rebuilds the network from the embedded configuration and copies every
parameter and buffer back bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np

from .model import ModelConfig, StereoNet
from .moe import MoEConfig, insert_moe

MAGIC = b"RBIA\n"
FORMAT_VERSION = 1


def _moe_config_of(model: StereoNet) -> MoEConfig | None:
    for _, module in model.named_modules():
        site = getattr(module, "moe", None)
        if site is not None:
            return site.cfg
    return None


def _named_tensors(model: StereoNet):
    for name, param in model.named_parameters():
        yield name, "param", param.data
    for name, buf in model.named_buffers():
        yield name, "buffer", buf


def save_model(path, model: StereoNet, metadata: dict | None = None) -> None:
    """Write ``model`` (parameters, buffers, config) to ``path``."""
    entries = []
    chunks = []
    offset = 0
    for name, kind, arr in _named_tensors(model):
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append(
            {
                "name": name,
                "kind": kind,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    moe_cfg = _moe_config_of(model)
    header = {
        "model": model.config.to_dict(),
        "moe": dataclasses.asdict(moe_cfg) if moe_cfg is not None else None,
        "metadata": dict(metadata or {}),
        "payload_blake2b": hashlib.blake2b(payload).hexdigest(),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(FORMAT_VERSION).tobytes())
        fh.write(np.uint32(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        fh.write(payload)


def load_model(path) -> tuple[StereoNet, dict]:
    """Read a checkpoint and return ``(model, metadata)``.

    The model is reconstructed from the embedded configuration (the
    excitation layer is re-inserted when the checkpoint carries one) and
    every tensor is restored bit-exactly.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a robia checkpoint")
    pos = len(MAGIC)
    version = int(np.frombuffer(blob, np.uint32, count=1, offset=pos)[0])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 4
    header_len = int(np.frombuffer(blob, np.uint32, count=1, offset=pos)[0])
    pos += 4
    header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    payload = blob[pos + header_len :]

    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) < expected:
        raise ValueError(f"{path}: truncated payload "
                         f"({len(payload)} of {expected} bytes)")
    digest = hashlib.blake2b(payload).hexdigest()
    if digest != header["payload_blake2b"]:
        raise ValueError(f"{path}: payload digest mismatch, file is corrupt")

    # Param dtype is uniform per model; pick it off the first entry.
    entries = header["tensors"]
    if not entries:
        raise ValueError(f"{path}: checkpoint holds no tensors")
    model_dtype = np.dtype(entries[0]["dtype"])

    model = StereoNet(ModelConfig.from_dict(header["model"]), dtype=model_dtype)
    if header["moe"] is not None:
        insert_moe(model, MoEConfig(**header["moe"]))

    targets = {name: p.data for name, p in model.named_parameters()}
    targets.update({name: b for name, b in model.named_buffers()})
    seen = set()
    for entry in entries:
        name = entry["name"]
        if name not in targets:
            raise ValueError(f"{path}: unknown tensor {name!r} in checkpoint")
        arr = np.frombuffer(
            payload,
            dtype=np.dtype(entry["dtype"]),
            count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"],
        ).reshape(entry["shape"])
        dst = targets[name]
        if tuple(arr.shape) != tuple(dst.shape):
            raise ValueError(
                f"{path}: shape mismatch for {name!r}: "
                f"{tuple(arr.shape)} vs {tuple(dst.shape)}"
            )
        dst[...] = arr.astype(dst.dtype, copy=False)
        seen.add(name)
    missing = sorted(set(targets) - seen)
    if missing:
        raise ValueError(f"{path}: checkpoint is missing tensors {missing}")

    model.eval()
    return model, header["metadata"]
