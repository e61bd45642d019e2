"""Self-describing binary checkpoints.

Layout: an 8-byte magic, a little-endian uint32 header length, a JSON header,
then one contiguous payload of raw little-endian tensor bytes.  The header
echoes the full configuration, names every tensor (parameters and optimizer
moments) with shape/dtype/offset, and records the training step.  All
ordering is canonical (sorted names, sorted JSON keys), so saving what was
just loaded reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .optim import AdamState

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"SPCCKPT1"


def _tensor_entries(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float32:
            dtype = "float32"
        elif arr.dtype == np.float64:
            dtype = "float64"
        else:
            raise ValueError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        raw = arr.astype(f"<{arr.dtype.char}{arr.dtype.itemsize}", copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "bytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_checkpoint(
    path: str | Path,
    params: dict[str, Tensor],
    config: dict,
    step: int,
    opt_state: AdamState | None = None,
) -> None:
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    opt_header: dict | None = None
    if opt_state is not None:
        for k, v in opt_state.m.items():
            arrays[f"opt.m/{k}"] = v
        for k, v in opt_state.v.items():
            arrays[f"opt.v/{k}"] = v
        opt_header = {
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "step_count": opt_state.step_count,
        }
    entries, payload = _tensor_entries(arrays)
    header = {
        "config": config,
        "step": int(step),
        "optimizer": opt_header,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict, int, AdamState | None]:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()

    arrays: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        start, nbytes = e["offset"], e["bytes"]
        if start + nbytes > len(payload):
            raise ValueError(f"{path}: tensor '{e['name']}' overruns the payload")
        dt = "<f4" if e["dtype"] == "float32" else "<f8"
        arrays[e["name"]] = (
            np.frombuffer(payload[start : start + nbytes], dtype=dt)
            .reshape(e["shape"])
            .astype(e["dtype"], copy=False)
            .copy()
        )

    params = {
        k[len("param/") :]: Tensor(v, requires_grad=True)
        for k, v in arrays.items()
        if k.startswith("param/")
    }
    opt_state = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt_state = AdamState(
            beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step_count=o["step_count"]
        )
        for k, v in arrays.items():
            if k.startswith("opt.m/"):
                opt_state.m[k[len("opt.m/") :]] = v
            elif k.startswith("opt.v/"):
                opt_state.v[k[len("opt.v/") :]] = v
    return params, header["config"], header["step"], opt_state
