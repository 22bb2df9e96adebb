"""Versioned checkpoint container.

File layout: magic, u32 format version, u64 manifest length, canonical JSON
manifest, then raw little-endian array payloads in manifest order. The
manifest is re-serialized canonically on save, so load -> save reproduces a
byte-identical file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .data import NormStats
from .errors import CheckpointError

MAGIC = b"ODSM"
FORMAT_VERSION = 1

_DTYPES = {"<f8": "<f8", "<i8": "<i8"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_fingerprint(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """Trained model state plus everything needed to rebuild and run it."""

    config: dict  # TrainConfig as a plain dict
    schema: dict  # ArchSchema as a plain dict
    params: dict[str, np.ndarray]
    norm_stats: NormStats
    history: list[dict]
    format_version: int = FORMAT_VERSION

    @property
    def fingerprint(self) -> str:
        return config_fingerprint({"config": self.config, "schema": self.schema})


def _norm_stats_to_manifest(stats: NormStats) -> dict:
    return {
        "states": list(stats.states),
        "channels": list(stats.channels),
        "train_months": list(stats.train_months),
        "dropped_channels": list(stats.dropped_channels),
    }


def _norm_stats_arrays(stats: NormStats) -> dict[str, np.ndarray]:
    return {
        "__norm__.mean": np.asarray(stats.mean, dtype="<f8"),
        "__norm__.std": np.asarray(stats.std, dtype="<f8"),
        "__norm__.degenerate": stats.degenerate.astype("<i8"),
    }


def save(ckpt: Checkpoint, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name])
        if arr.dtype == np.float64:
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype in (np.int64, np.bool_):
            arr = arr.astype("<i8")
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        arrays[name] = arr
    for name, arr in _norm_stats_arrays(ckpt.norm_stats).items():
        arrays[name] = arr

    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        nbytes = arr.nbytes
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype.str),
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes

    manifest = {
        "format_version": ckpt.format_version,
        "config": ckpt.config,
        "schema": ckpt.schema,
        "config_fingerprint": ckpt.fingerprint,
        "history": ckpt.history,
        "norm_stats": _norm_stats_to_manifest(ckpt.norm_stats),
        "params": entries,
    }
    blob = canonical_json(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.format_version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(arrays):
            fh.write(arrays[name].tobytes())


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        payload = fh.read()

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype}")
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype).reshape(
            entry["shape"]
        )
        arrays[entry["name"]] = arr.copy()

    ns = manifest["norm_stats"]
    stats = NormStats(
        states=tuple(ns["states"]),
        channels=tuple(ns["channels"]),
        mean=arrays.pop("__norm__.mean"),
        std=arrays.pop("__norm__.std"),
        degenerate=arrays.pop("__norm__.degenerate").astype(bool),
        train_months=tuple(ns["train_months"]),
        dropped_channels=tuple(ns["dropped_channels"]),
    )
    params = {
        name: (arr.astype(np.int64) if arr.dtype.str == "<i8" else arr)
        for name, arr in arrays.items()
    }
    ckpt = Checkpoint(
        config=manifest["config"],
        schema=manifest["schema"],
        params=params,
        norm_stats=stats,
        history=manifest["history"],
        format_version=manifest["format_version"],
    )
    if manifest.get("config_fingerprint") != ckpt.fingerprint:
        raise CheckpointError("config fingerprint mismatch; file corrupted")
    return ckpt
