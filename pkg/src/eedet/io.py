"""Versioned binary containers: JSON header + little-endian tensor blobs.

Layout: magic (8 bytes) | version (uint32 LE) | header length (uint32 LE) |
header JSON (UTF-8, sorted keys) | blobs in manifest order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"EEDCKPT\0"
CKPT_VERSION = 1

_DTYPES = {"float32": "<f4", "int8": "<i1", "int32": "<i4", "uint8": "<u1", "int64": "<i8", "float64": "<f8"}


class FormatError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_container(path, magic: bytes, version: int, header: dict, tensors: list[tuple[str, np.ndarray, str]]):
    """``tensors`` is a list of (name, array, kind); arrays are written in the given order."""
    manifest = []
    blobs = []
    offset = 0
    for name, arr, kind in tensors:
        dt = np.dtype(arr.dtype).name
        if dt not in _DTYPES:
            raise FormatError(f"unsupported dtype {dt} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        manifest.append({"name": name, "kind": kind, "dtype": dt, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = _dumps({**header, "tensors": manifest})
    data = magic + struct.pack("<II", version, len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(data)
    return data


def read_container(path, magic: bytes):
    data = Path(path).read_bytes()
    if data[:len(magic)] != magic:
        raise FormatError(f"{path}: bad magic")
    start = len(magic) + 8
    if len(data) < start:
        raise FormatError(f"{path}: truncated preamble")
    version, hlen = struct.unpack_from("<II", data, len(magic))
    try:
        header = json.loads(data[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from e
    body = data[start + hlen:]
    tensors = {}
    expected = 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) * np.dtype(_DTYPES[t["dtype"]]).itemsize
        if n != t["nbytes"] or t["offset"] != expected:
            raise FormatError(f"{path}: manifest mismatch for {t['name']}")
        if t["offset"] + n > len(body):
            raise FormatError(f"{path}: blob for {t['name']} is truncated")
        arr = np.frombuffer(body, dtype=_DTYPES[t["dtype"]], count=int(np.prod(t["shape"])), offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(t["dtype"])
        expected += n
    if expected != len(body):
        raise FormatError(f"{path}: blob length {len(body)} != manifest total {expected}")
    return version, header, tensors


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# model checkpoints

def model_tensors(model):
    out = [(name, p.data.astype(np.float32), "param") for name, p in model.named_parameters()]
    out += [(name, b.astype(np.float32), "buffer") for name, _, _, b in model.named_buffers()]
    return out


def save_checkpoint(path, model, state=None, optimizer=None):
    """Write the model (and optional optimizer moments) with its architecture config."""
    header = {"format": "eedet-checkpoint", "config": model.config_dict(),
              "qat": bool(model.qat), "bits": int(getattr(model, "input_bits", 32)) if model.qat else 32,
              "state": state or {}}
    tensors = model_tensors(model)
    if optimizer is not None:
        tensors += [(n, v.astype(np.float32), "optim") for n, v in optimizer.state_tensors().items()]
    return write_container(path, CKPT_MAGIC, CKPT_VERSION, header, tensors)


def model_from_config(cfg: dict):
    from .model import BackboneConfig, EEBranchConfig, HeadConfig, build_model
    bb = BackboneConfig(**cfg["backbone"])
    ee = EEBranchConfig(**cfg["ee"]) if cfg.get("ee") else None
    heads = HeadConfig(**cfg["heads"])
    return build_model(bb, ee, heads)


def load_checkpoint(path):
    """Returns (model, header, optimizer tensors)."""
    version, header, tensors = read_container(path, CKPT_MAGIC)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    model = model_from_config(header["config"])
    if header.get("qat"):
        model.enable_qat(header.get("bits", 8))
    params = dict(model.named_parameters())
    bufs = {name: (owner, attr) for name, owner, attr, _ in model.named_buffers()}
    for t in header["tensors"]:
        name, kind = t["name"], t["kind"]
        arr = tensors[name]
        if kind == "param":
            if name not in params or params[name].data.shape != arr.shape:
                raise FormatError(f"checkpoint tensor {name} does not fit the architecture")
            params[name].data = arr.copy()
            params[name].zero_grad()
        elif kind == "buffer":
            owner, attr = bufs[name]
            owner.set_buffer(attr, arr.copy())
    missing = set(params) - {t["name"] for t in header["tensors"] if t["kind"] == "param"}
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    optim = {t["name"]: tensors[t["name"]] for t in header["tensors"] if t["kind"] == "optim"}
    return model, header, optim


def checkpoint_param_elements(path) -> int:
    _, header, _ = read_container(path, CKPT_MAGIC)
    return sum(int(np.prod(t["shape"])) for t in header["tensors"] if t["kind"] == "param")
