"""Versioned binary container for model parameters and training checkpoints.

Layout: an 8-byte magic string, a little-endian uint32 format version, a
length-prefixed JSON header (dimensions, model kind, tree seed, array
manifest), then the parameter arrays concatenated as little-endian float64
in the order declared by the manifest.  Checkpoints append a second array
block (the running parameter average) and a training-state record (epoch and
RNG stream states).

A structured-text export of named arrays is provided for debugging.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .deep import DeepParams
from .shallow import ShallowParams

MAGIC = b"DOCNADE1"
FORMAT_VERSION = 1

MODEL_KINDS = ("docnade", "supdocnade", "deepdocnade", "supdeepdocnade")
SHALLOW_KINDS = ("docnade", "supdocnade")
DEEP_KINDS = ("deepdocnade", "supdeepdocnade")
SUPERVISED_KINDS = ("supdocnade", "supdeepdocnade")


@dataclass
class ModelMeta:
    """Everything beyond the raw arrays needed to use a model."""

    kind: str
    head: str
    n_visual: int
    n_regions: int
    n_annotation: int
    n_classes: int
    n_features: int
    hidden_sizes: tuple[int, ...]
    tree_seed: int | None = None  # shallow models only
    anno_weight: float = 1.0
    dropout_rate: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return self.n_visual * self.n_regions + self.n_annotation

    def to_json(self) -> dict:
        out = asdict(self)
        out["hidden_sizes"] = list(self.hidden_sizes)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ModelMeta":
        data = dict(data)
        data["hidden_sizes"] = tuple(data["hidden_sizes"])
        return cls(**data)


def _pack_arrays(arrays: list[tuple[str, np.ndarray]]) -> tuple[list, bytes]:
    manifest = [[name, list(arr.shape)] for name, arr in arrays]
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    return manifest, blob


def _unpack_arrays(manifest: list, blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    offset = 0
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        out[name] = arr.astype(np.float64)  # own, writable copy
        offset += n * 8
    return out


def _params_from_arrays(meta: ModelMeta, arrays: dict[str, np.ndarray]):
    if meta.kind in SHALLOW_KINDS:
        return ShallowParams(
            arrays["W"], arrays["c"], arrays["V"], arrays["b"], arrays["U"], arrays["d"]
        )
    layers = len(meta.hidden_sizes)
    return DeepParams(
        [arrays[f"W{n}"] for n in range(1, layers + 1)],
        [arrays[f"c{n}"] for n in range(1, layers + 1)],
        arrays.get("P"),
        arrays["V_out"],
        arrays["b_out"],
        arrays["U"],
        arrays["d"],
    )


def _write_container(path, header: dict, blobs: list[bytes]) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def _read_container(path) -> tuple[dict, list[bytes]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a model container (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blobs = []
        while True:
            raw = fh.read(8)
            if not raw:
                break
            (blob_len,) = struct.unpack("<Q", raw)
            blobs.append(fh.read(blob_len))
    return header, blobs


def save_model(path, params, meta: ModelMeta) -> None:
    manifest, blob = _pack_arrays(params.arrays())
    header = {"meta": meta.to_json(), "manifest": manifest}
    _write_container(path, header, [blob])


def load_model(path) -> tuple[Any, ModelMeta]:
    header, blobs = _read_container(path)
    meta = ModelMeta.from_json(header["meta"])
    arrays = _unpack_arrays(header["manifest"], blobs[0])
    return _params_from_arrays(meta, arrays), meta


def save_checkpoint(path, params, averaged, meta: ModelMeta, epoch: int, rng_states: dict) -> None:
    manifest, blob = _pack_arrays(params.arrays())
    _, avg_blob = _pack_arrays(averaged.arrays())
    header = {
        "meta": meta.to_json(),
        "manifest": manifest,
        "state": {"epoch": epoch, "rng_states": rng_states},
    }
    _write_container(path, header, [blob, avg_blob])


def load_checkpoint(path) -> tuple[Any, Any, ModelMeta, int, dict]:
    header, blobs = _read_container(path)
    meta = ModelMeta.from_json(header["meta"])
    params = _params_from_arrays(meta, _unpack_arrays(header["manifest"], blobs[0]))
    averaged = _params_from_arrays(meta, _unpack_arrays(header["manifest"], blobs[1]))
    state = header["state"]
    return params, averaged, meta, state["epoch"], state["rng_states"]


def export_text(path, params, meta: ModelMeta) -> None:
    """Human-readable dump of every parameter array, for debugging."""
    with open(path, "w") as fh:
        fh.write(f"# model kind={meta.kind} head={meta.head}\n")
        for name, arr in params.arrays():
            fh.write(f"# array {name} shape={'x'.join(map(str, arr.shape))}\n")
            flat = np.atleast_2d(arr)
            for row in flat:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")
