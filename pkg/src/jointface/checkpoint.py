"""Versioned checkpoint container.

File layout::

    b"JFCKPT\\n"
    <header byte length, decimal>\\n
    <header: UTF-8 JSON>
    <payload: raw little-endian tensors, concatenated>

The header lists every tensor with its name, shape, dtype and byte offset
into the payload, plus the format version, model kind and config, the run
config hash, the iteration count and the optimizer scalars. Momentum
buffers are stored as tensors named ``velocity/<param>``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptManifest, ShapeIncompatible
from .model import AttributeNet, JointModel, ModelConfig
from .optim import SGDState

MAGIC = b"JFCKPT\n"
FORMAT_VERSION = 1
KINDS = {"joint": JointModel, "attribute": AttributeNet}


@dataclass
class Checkpoint:
    kind: str
    model_config: ModelConfig
    params: dict
    iteration: int = 0
    config_hash: str = ""
    optimizer: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def build_model(self, seed: int = 0):
        model = KINDS[self.kind](self.model_config, seed=seed)
        load_parameters(model, self.params)
        return model

    def sgd_state(self) -> SGDState:
        opt = dict(self.optimizer)
        opt["decay_iters"] = tuple(opt.get("decay_iters", ()))
        return SGDState(velocity={k: v.copy() for k, v in self.velocity.items()}, **opt)


def model_kind(model) -> str:
    for kind, cls in KINDS.items():
        if type(model) is cls:
            return kind
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(path, model, state: SGDState | None = None, config_hash: str = "", iteration: int | None = None) -> Path:
    tensors = [(name, p.data) for name, p in model.parameters().items()]
    optimizer = {}
    if state is not None:
        optimizer = {"base_lr": state.base_lr, "decay_factor": state.decay_factor,
                     "decay_iters": list(state.decay_iters), "momentum": state.momentum,
                     "weight_decay": state.weight_decay, "iteration": state.iteration}
        tensors += [(f"velocity/{k}", v) for k, v in state.velocity.items()]
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        a = np.asarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "version": FORMAT_VERSION,
        "kind": model_kind(model),
        "model_config": model.cfg.to_dict(),
        "config_hash": config_hash,
        "iteration": int(iteration if iteration is not None else (state.iteration if state else 0)),
        "optimizer": optimizer,
        "tensors": entries,
    }
    head = json.dumps(header, indent=1).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(head)}\n".encode())
        fh.write(head)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CorruptManifest(f"{path}: not a checkpoint file")
    nl = raw.index(b"\n", len(MAGIC))
    try:
        hlen = int(raw[len(MAGIC):nl])
        header = json.loads(raw[nl + 1:nl + 1 + hlen])
    except ValueError as exc:
        raise CorruptManifest(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise ShapeIncompatible(f"{path}: checkpoint version {header.get('version')} is not supported")
    payload = memoryview(raw)[nl + 1 + hlen:]
    params, velocity = {}, {}
    for e in header["tensors"]:
        if e["offset"] + e["nbytes"] > len(payload):
            raise CorruptManifest(f"{path}: payload truncated at tensor {e['name']}")
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        if e["name"].startswith("velocity/"):
            velocity[e["name"][len("velocity/"):]] = arr
        else:
            params[e["name"]] = arr
    return Checkpoint(header["kind"], ModelConfig.from_dict(header["model_config"]), params,
                      header.get("iteration", 0), header.get("config_hash", ""), header.get("optimizer", {}),
                      velocity, header["version"])


def load_parameters(model, params: dict, allow_missing=()) -> list:
    """Copy ``params`` into ``model``; return names left at their initial values.

    Every model parameter must be present with an identical shape, except
    names in ``allow_missing`` which may be absent or differ in shape.
    """
    skipped = []
    own = model.parameters()
    for name, p in own.items():
        src = params.get(name)
        if src is None or src.shape != p.shape:
            if name in allow_missing:
                skipped.append(name)
                continue
            got = None if src is None else src.shape
            raise ShapeIncompatible(f"parameter {name}: checkpoint has {got}, model expects {p.shape}")
        p.data = np.array(src, dtype=p.data.dtype)
    extra = set(params) - set(own)
    if extra:
        raise ShapeIncompatible(f"checkpoint has parameters unknown to the model: {sorted(extra)}")
    return skipped
