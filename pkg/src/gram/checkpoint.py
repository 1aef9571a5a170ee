"""Byte-reproducible model checkpoints.

Layout: the magic line ``GRAMCKPT``, one line of JSON header (format version,
task, epoch, seed, metadata and an array table with dtype, shape and byte
offset), then the raw little-endian array bytes back to back.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .model import ModelState

MAGIC = b"GRAMCKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(state: ModelState):
    for k in sorted(state.params):
        yield f"params/{k}", state.params[k]
    for k in sorted(state.grad_sq):
        yield f"grad_sq/{k}", state.grad_sq[k]
    for k in sorted(state.delta_sq):
        yield f"delta_sq/{k}", state.delta_sq[k]
    if state.ancestors is not None:
        yield "ancestors", state.ancestors.astype("<i8")
        yield "ancestor_mask", state.ancestor_mask.astype("|u1")


def save_checkpoint(state: ModelState, path: str | os.PathLike) -> None:
    table = []
    blobs = []
    offset = 0
    for name, arr in _arrays(state):
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        data = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "version": VERSION,
        "task": state.task,
        "epoch": state.epoch,
        "seed": state.seed,
        "meta": state.meta,
        "arrays": table,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for data in blobs:
            fh.write(data)


def load_checkpoint(path: str | os.PathLike) -> ModelState:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        body = fh.read()
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    def group(prefix):
        return {n.split("/", 1)[1]: a.astype(np.float64) for n, a in arrays.items() if n.startswith(prefix + "/")}

    anc = arrays.get("ancestors")
    mask = arrays.get("ancestor_mask")
    return ModelState(
        params=group("params"),
        task=header["task"],
        ancestors=None if anc is None else anc.astype(np.int64),
        ancestor_mask=None if mask is None else mask.astype(bool),
        grad_sq=group("grad_sq"),
        delta_sq=group("delta_sq"),
        epoch=header["epoch"],
        seed=header["seed"],
        meta=header["meta"],
    )
