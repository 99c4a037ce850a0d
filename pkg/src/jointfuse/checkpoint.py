"""Named-array archive: an 8-byte magic, a little-endian u64 header length,
a JSON header listing every array (name, dtype, shape, offset, nbytes)
plus free-form metadata, then the raw C-order array bytes."""
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"JFARCH01"


def save_arrays(path, arrays, meta=None):
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_header(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path} is not a parameter archive")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n)), len(MAGIC) + 8 + n


def load_arrays(path):
    header, start = read_header(path)
    data = Path(path).read_bytes()
    arrays = {}
    for e in header["arrays"]:
        buf = data[start + e["offset"]: start + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def module_arrays(module, prefix):
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module(module, arrays, prefix):
    state = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items()
             if k.startswith(prefix + "/")}
    module.load_state_dict(state)


def optimizer_arrays(optimizer, prefix="optim"):
    out = {}
    for i, (key, st) in enumerate(optimizer.state_dict()["state"].items()):
        for name, value in st.items():
            out[f"{prefix}/{key}/{name}"] = torch.as_tensor(value)
    return out


def load_optimizer(optimizer, arrays, prefix="optim"):
    sd = optimizer.state_dict()
    state = {}
    for k, v in arrays.items():
        if not k.startswith(prefix + "/"):
            continue
        _, key, name = k.split("/", 2)
        state.setdefault(int(key), {})[name] = torch.from_numpy(v)
    sd["state"] = state
    optimizer.load_state_dict(sd)
