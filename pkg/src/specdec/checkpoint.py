"""Checkpoint container shared by the base model and the speculator.

Layout: an 8-byte little-endian header length, a JSON header
{format_version, config, tensors: name -> {dtype, shape, offset}}, then the
raw little-endian float32 tensor payloads. Serialization is canonical
(sorted names, compact JSON) so save(load(f)) reproduces f byte for byte.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4")}


def save_checkpoint(path: Union[str, Path], config: dict,
                    tensors: Dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    directory = {}
    offset = 0
    for name in names:
        t = tensors[name]
        if t.dtype != np.float32:
            raise TypeError(f"tensor {name!r} must be float32, got {t.dtype}")
        directory[name] = {"dtype": "f32", "shape": list(t.shape), "offset": offset}
        offset += t.size * 4
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": config, "tensors": directory},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version: "
                             f"{header.get('format_version')}")
        payload = f.read()
    tensors = {}
    for name, meta in header["tensors"].items():
        dt = _DTYPES[meta["dtype"]]
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return header["config"], tensors


def checkpoint_summary(path: Union[str, Path]) -> dict:
    """Shapes, parameter count and content hashes for `inspect`."""
    config, tensors = load_checkpoint(path)
    entries = {}
    total = 0
    for name in sorted(tensors):
        t = tensors[name]
        total += t.size
        entries[name] = {
            "shape": list(t.shape),
            "params": int(t.size),
            "sha256": hashlib.sha256(t.tobytes()).hexdigest()[:16],
        }
    with open(path, "rb") as f:
        file_hash = hashlib.sha256(f.read()).hexdigest()
    return {"config": config, "tensors": entries,
            "param_count": int(total), "file_sha256": file_hash}


def save_base_model(path: Union[str, Path], model) -> None:
    from dataclasses import asdict
    config = {"kind": "base_model", **asdict(model.config)}
    tensors = {"base." + k: v for k, v in model.weights.items()}
    save_checkpoint(path, config, tensors)


def load_base_model(path: Union[str, Path]):
    from .model import BaseModel, BaseModelConfig
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "base_model":
        raise ValueError(f"not a base model checkpoint: {config.get('kind')}")
    cfg = BaseModelConfig(**{k: v for k, v in config.items() if k != "kind"})
    weights = {k[len("base."):]: v for k, v in tensors.items()}
    return BaseModel(cfg, weights)


def save_speculator(path: Union[str, Path], speculator) -> None:
    from dataclasses import asdict
    config = {"kind": "speculator", **asdict(speculator.config)}
    save_checkpoint(path, config, dict(speculator.weights))


def load_speculator(path: Union[str, Path]):
    from .speculator import MLPSpeculator, SpeculatorConfig
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "speculator":
        raise ValueError(f"not a speculator checkpoint: {config.get('kind')}")
    cfg = SpeculatorConfig(**{k: v for k, v in config.items() if k != "kind"})
    return MLPSpeculator(cfg, tensors)
