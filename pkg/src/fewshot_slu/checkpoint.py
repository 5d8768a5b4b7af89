"""Versioned binary checkpoint container.

Layout::

    b"FSLUCKPT"                 magic
    uint32 little-endian        format version
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON (sorted keys): config, labels,
                                optimizer scalars, RNG cursor, training log,
                                tensor table (name, shape, offset, nbytes)
    payload                     tensors as little-endian float64, in table order

Nothing time- or path-dependent is written, so identical training runs
produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .encoder import AdamState, EmbeddingProvider, EncoderConfig, ParamSet
from .learners import TrainConfig, TrainState

MAGIC = b"FSLUCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_items(state: TrainState) -> list[tuple[str, np.ndarray]]:
    items = [(f"param/{k}", v) for k, v in state.params.tensors.items()]
    items += [(f"adam.m/{k}", np.asarray(v)) for k, v in state.opt.m.items()]
    items += [(f"adam.v/{k}", np.asarray(v)) for k, v in state.opt.v.items()]
    return sorted(items, key=lambda kv: kv[0])


def to_bytes(state: TrainState, train_config: TrainConfig, seed: int) -> bytes:
    table, blobs, offset = [], [], 0
    for name, arr in _tensor_items(state):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    params = state.params
    header = {
        "format": "fewshot-slu-checkpoint",
        "learner": train_config.learner,
        "train_config": asdict(train_config),
        "encoder": params.config.to_json(),
        "embedding_checksum": params.provider.checksum(),
        "intent_labels": list(params.intent_labels),
        "slot_labels": list(params.slot_labels),
        "optimizer": {
            "step": state.opt.step,
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "eps": state.opt.eps,
        },
        "rng_cursor": {"run_seed": seed, "epochs_done": state.epoch},
        "log": state.log,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(blobs)


def save(path: str | Path, state: TrainState, train_config: TrainConfig, seed: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(state, train_config, seed))
    tmp.replace(path)


def read_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + n].decode("utf-8"))
    return header, raw[start + n :]


def load(path: str | Path, provider: EmbeddingProvider) -> tuple[TrainState, dict]:
    """Restore training state; ``provider`` must be the table used in training."""
    header, payload = read_header(path)
    if header["embedding_checksum"] != provider.checksum():
        raise CheckpointError(f"{path}: embedding table differs from the one used in training")
    tensors, m, v = {}, {}, {}
    for entry in header["tensors"]:
        buf = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        group, name = entry["name"].split("/", 1)
        {"param": tensors, "adam.m": m, "adam.v": v}[group][name] = arr
    params = ParamSet(
        EncoderConfig(**header["encoder"]),
        provider,
        tensors,
        tuple(header["intent_labels"]),
        tuple(header["slot_labels"]),
    )
    opt = header["optimizer"]
    state = TrainState(
        params,
        AdamState(opt["step"], m, v, opt["beta1"], opt["beta2"], opt["eps"]),
        header["rng_cursor"]["epochs_done"],
        list(header["log"]),
    )
    return state, header
