"""Checkpoint file format shared by training and decoding.

A checkpoint is a single file: one line of compact JSON (config, tensor
names, shapes, byte offsets) followed by the raw little-endian float32
parameter blocks in header order. Offsets are relative to the byte after
the header's terminating newline.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import IncompatibleCheckpointError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

FORMAT_NAME = "flexdepth-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ModelParams) -> Path:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    entries = []
    blocks = []
    offset = 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blocks.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "tensors": entries,
    }
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
            fh.write(b"\n")
            for raw in blocks:
                fh.write(raw)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    header = json.loads(line.decode("utf-8"))
    if header.get("format") != FORMAT_NAME:
        raise IncompatibleCheckpointError(f"{path} is not a {FORMAT_NAME} file")
    return header


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != FORMAT_NAME:
            raise IncompatibleCheckpointError(f"{path} is not a {FORMAT_NAME} file")
        blob = fh.read()
    config = ModelConfig.from_dict(header["config"])
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = Tensor(data.copy(), requires_grad=True)
    return ModelParams(config, tensors)
