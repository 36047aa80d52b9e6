"""Binary container for model checkpoints and attacked-image datasets.

Layout: magic ``EQCK``, version u32 LE, header length u32 LE, UTF-8 JSON
header, then raw little-endian float32 blocks. The header carries arbitrary
metadata plus an array index mapping name -> {offset, shape, dtype}; offsets
are relative to the end of the header. Round-trips are bit-exact.
"""

import json
import struct

import numpy as np

from . import models as nn

MAGIC = b"EQCK"
VERSION = 1


def write_container(path, arrays, meta):
    index = {}
    blocks = []
    offset = 0
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        index[name] = {"offset": offset, "shape": list(arr.shape), "dtype": "<f4"}
        blocks.append(arr32.tobytes())
        offset += arr32.nbytes
    header = json.dumps({"meta": meta, "index": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for b in blocks:
            f.write(b)


def read_container(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not an EQCK container")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    arrays = {}
    for name, entry in header["index"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(body, dtype=entry["dtype"], count=count, offset=off)
        arrays[name] = arr.reshape(shape).astype(np.float64)
    return arrays, header["meta"]


def save_model(path, model, train_meta=None):
    arrays = {name: p.data for name, p in model.parameters()}
    meta = {"kind": "model", "descriptor": model.descriptor.to_json(),
            "train": train_meta or {}}
    write_container(path, arrays, meta)


def load_model(path):
    arrays, meta = read_container(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: container does not hold a model")
    desc = nn.ModelDescriptor.from_json(meta["descriptor"])
    model = nn.build_model(desc, seed=0)
    for name, p in model.parameters():
        if name not in arrays:
            raise ValueError(f"{path}: missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        p.data = arrays[name]
    return model, meta


def save_images(path, images, manifest):
    write_container(path, {"images": images}, {"kind": "images", **manifest})


def load_images(path):
    arrays, meta = read_container(path)
    if meta.get("kind") != "images":
        raise ValueError(f"{path}: container does not hold images")
    return arrays["images"], meta
