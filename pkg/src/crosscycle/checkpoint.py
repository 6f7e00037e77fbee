"""Checkpoint container.

Layout::

    b"XCKPT001"                       8-byte magic
    header_len                        uint64, little-endian
    header                            UTF-8 JSON, header_len bytes
    blocks                            repeated, in header["blocks"] order:
        name_len  uint16 LE, name UTF-8
        ndim      uint8, dims uint32 LE * ndim
        data      float32 LE, prod(dims) values, C order

``header["content_hash"]`` is the SHA-256 of the concatenated block bytes.
"""
from __future__ import annotations

import base64
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import Hyperparameters

MAGIC = b"XCKPT001"


class CheckpointError(RuntimeError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def _encode_block(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode()
    arr = np.asarray(array, dtype="<f4")  # tobytes() below emits C order; keeps 0-d shapes
    out = [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.tobytes())
    return b"".join(out)


def write_checkpoint(path: str | Path, header: dict, blocks: dict[str, np.ndarray]) -> str:
    body = b"".join(_encode_block(n, a) for n, a in blocks.items())
    header = dict(header)
    header["blocks"] = list(blocks)
    header["content_hash"] = hashlib.sha256(body).hexdigest()
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        f.write(body)
    tmp.replace(path)
    return header["content_hash"]


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16:16 + hlen])
    body = data[16 + hlen:]
    if hashlib.sha256(body).hexdigest() != header.get("content_hash"):
        raise CheckpointError(f"{path}: content hash mismatch (file corrupt)")
    blocks, off = {}, 0
    while off < len(body):
        (nlen,) = struct.unpack_from("<H", body, off); off += 2
        name = body[off:off + nlen].decode(); off += nlen
        (ndim,) = struct.unpack_from("<B", body, off); off += 1
        dims = struct.unpack_from(f"<{ndim}I", body, off); off += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        blocks[name] = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    if list(blocks) != header["blocks"]:
        raise CheckpointError(f"{path}: block table does not match header")
    return header, blocks


def encode_rng_state(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode()


def decode_rng_state(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def model_blocks(models) -> dict[str, np.ndarray]:
    return {f"model/{name}": p.detach().cpu().numpy() for name, p in models.named_parameters()}


def optimizer_blocks(prefix: str, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        for key, value in sorted(opt.state.get(p, {}).items()):
            out[f"{prefix}/{i}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return out


def load_model_blocks(models, blocks: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, p in models.named_parameters():
            key = f"model/{name}"
            if key not in blocks:
                raise CheckpointError(f"missing parameter block {key}")
            if tuple(blocks[key].shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {key}")
            p.copy_(torch.from_numpy(blocks[key]).to(p.dtype))


def load_optimizer_blocks(prefix: str, opt: torch.optim.Optimizer, blocks: dict[str, np.ndarray]) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    opt.state.clear()
    for name, arr in blocks.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/")
        p = params[int(idx)]
        t = torch.from_numpy(arr.copy())
        opt.state.setdefault(p, {})[key] = t if key == "step" else t.to(p.dtype)


def load_config(path: str | Path) -> Hyperparameters:
    header, _ = read_checkpoint(path)
    return Hyperparameters.from_dict(header["config"])
