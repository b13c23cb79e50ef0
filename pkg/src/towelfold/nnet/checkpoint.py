"""Versioned single-file checkpoint container.

Layout (all integers little-endian)::

    bytes 0-3    magic b"TFCK"
    bytes 4-7    uint32 format version (currently 1)
    bytes 8-15   uint64 length L of the JSON header
    next L bytes UTF-8 JSON header, keys sorted
    remainder    raw array payload, C order, concatenated

The header holds ``model_spec``, ``optimizer`` (Adam step counter and
hyper-parameters), ``rng_state`` (numpy bit generator state), free-form
``meta`` and an ``arrays`` list of ``{name, dtype, shape, offset, nbytes}``
records. Array names are ``param/<p>``, ``adam_m/<p>`` and ``adam_v/<p>``.
The file contains no timestamps, so identical training runs produce
byte-identical checkpoints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DatasetError
from .model import KeypointNet, ModelSpec
from .optim import AdamState

MAGIC = b"TFCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    optimizer: dict = field(default_factory=dict)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def model(self) -> KeypointNet:
        return KeypointNet(self.spec, {k: v.copy() for k, v in self.params.items()})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.adam is not None and ckpt.adam.m:
        arrays += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
        arrays += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]

    records, blobs, offset = [], [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        records.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    optimizer = dict(ckpt.optimizer)
    if ckpt.adam is not None:
        optimizer["step"] = ckpt.adam.step
    header = {
        "format_version": FORMAT_VERSION,
        "model_spec": ckpt.spec.to_dict(),
        "optimizer": optimizer,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": records,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read checkpoint ({exc})") from exc
    if raw[:4] != MAGIC or len(raw) < 16:
        raise DatasetError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise DatasetError(f"{path}: corrupt checkpoint header ({exc})") from exc
    payload = memoryview(raw)[16 + hlen:]

    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for rec in header["arrays"]:
        kind, name = rec["name"].split("/", 1)
        buf = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        groups[kind][name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    optimizer = header.get("optimizer", {})
    adam = None
    if groups["adam_m"]:
        adam = AdamState(step=int(optimizer.get("step", 0)), m=groups["adam_m"], v=groups["adam_v"])
    return Checkpoint(
        spec=ModelSpec(**header["model_spec"]),
        params=groups["param"],
        adam=adam,
        optimizer=optimizer,
        rng_state=header.get("rng_state"),
        meta=header.get("meta", {}),
    )
