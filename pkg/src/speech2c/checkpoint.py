"""Single-file binary checkpoints: magic, version, JSON header, float64 tensor blobs.

Layout::

    b"S2CCKPT\\0" | u32 version | u64 header length | header (UTF-8 JSON) | blobs

The header lists every tensor's name and shape in file order, followed by the
Adam moments (m then v per name) when optimizer state is stored.  Blobs are
little-endian float64, row-major, back to back.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import AdamState, Tensor, parameter
from .errors import FormatError

MAGIC = b"S2CCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    params: dict  # name -> np.ndarray
    step: int = 0
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)
    opt: Optional[AdamState] = None

    def tensors(self) -> dict:
        """Fresh trainable Tensors holding copies of the stored values."""
        return {k: parameter(v.copy()) for k, v in self.params.items()}


def _arrays(params: dict) -> dict:
    return {k: np.asarray(v.data if isinstance(v, Tensor) else v, dtype="<f8", order="C") for k, v in params.items()}


def save_checkpoint(path, params: dict, step: int = 0, fingerprint: str = "", meta: Optional[dict] = None,
                    opt: Optional[AdamState] = None) -> None:
    arrays = _arrays(params)
    names = sorted(arrays)
    header = {
        "step": int(step),
        "fingerprint": fingerprint,
        "meta": meta or {},
        "tensors": [[k, list(arrays[k].shape)] for k in names],
        "opt": None,
    }
    blobs = [arrays[k].tobytes() for k in names]
    if opt is not None:
        opt_names = sorted(opt.m)
        header["opt"] = {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
                         "names": opt_names}
        for k in opt_names:
            blobs.append(np.asarray(opt.m[k], dtype="<f8", order="C").tobytes())
            blobs.append(np.asarray(opt.v[k], dtype="<f8", order="C").tobytes())
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated {what} at byte offset {self.pos} "
                              f"(need {n} bytes, {len(self.raw) - self.pos} left)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, shape, what: str) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").reshape(shape).astype(np.float64)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    magic, version, head_len = _PREFIX.unpack(r.take(_PREFIX.size, "file prefix"))
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 8")
    head_at = r.pos
    try:
        header = json.loads(r.take(head_len, "header").decode("utf-8"))
        specs = [(str(n), tuple(int(d) for d in s)) for n, s in header["tensors"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: corrupt header at byte offset {head_at} ({e})") from None
    params = {name: r.array(shape, f"tensor {name!r}") for name, shape in specs}
    opt = None
    if header.get("opt"):
        o = header["opt"]
        opt = AdamState(o["beta1"], o["beta2"], o["eps"], o["step"])
        shapes = dict(specs)
        for k in o["names"]:
            if k not in shapes:
                raise FormatError(f"{path}: optimizer state for unknown tensor {k!r}")
            opt.m[k] = r.array(shapes[k], f"adam m[{k!r}]")
            opt.v[k] = r.array(shapes[k], f"adam v[{k!r}]")
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes at byte offset {r.pos}")
    return Checkpoint(params, header["step"], header.get("fingerprint", ""), header.get("meta", {}), opt)
