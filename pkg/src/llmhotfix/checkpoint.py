"""HFX1 container for base checkpoints and adapter files.

Layout::

    b"HFX1" | uint32 LE metadata length | UTF-8 JSON metadata | payload

The payload is every manifest tensor in manifest order: ``f64`` tensors as
little-endian float64, ``i8`` tensors (quantization codes) as int8.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numba
import numpy as np

MAGIC = b"HFX1"
FORMAT_VERSION = 1
_DTYPES = {"f64": np.dtype("<f8"), "i8": np.dtype("i1")}

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


class CheckpointError(ValueError):
    pass


class CompatibilityError(ValueError):
    """An adapter was paired with a base model it was not trained on."""


@numba.njit(cache=True)
def _fnv1a_update(h, buf):
    for b in buf:
        h ^= numba.uint64(b)
        h *= numba.uint64(0x100000001B3)
    return h


def fnv1a64(chunks) -> str:
    """FNV-1a 64 over the concatenation of byte chunks, as 16 hex digits."""
    if isinstance(chunks, (bytes, bytearray, memoryview)):
        chunks = [chunks]
    h = _FNV_OFFSET
    for c in chunks:
        # numba hands back a Python int; re-wrap so the next call stays unsigned
        h = np.uint64(_fnv1a_update(h, np.frombuffer(c, dtype=np.uint8)))
    return f"{int(h) & 0xFFFFFFFFFFFFFFFF:016x}"


def _tensor_bytes(arr: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()


def model_arrays(model) -> tuple[list[dict], list[np.ndarray]]:
    """Manifest entries and arrays for a base model (quantized matrices as codes + scales)."""
    manifest, arrays = [], []
    for name, p in model.params.items():
        q = model.quantized.get(name)
        if q is None:
            manifest.append({"name": name, "shape": list(p.shape), "dtype": "f64"})
            arrays.append(p.data)
        else:
            manifest.append({"name": name + ".codes", "shape": list(q.codes.shape), "dtype": "i8"})
            manifest.append({"name": name + ".scale", "shape": list(q.scale.shape), "dtype": "f64"})
            arrays += [q.codes, q.scale]
    return manifest, arrays


def model_fingerprint(model) -> str:
    manifest, arrays = model_arrays(model)
    return fnv1a64(_tensor_bytes(a, m["dtype"]) for m, a in zip(manifest, arrays))


def write_checkpoint(path: str | Path, meta: dict, manifest: list[dict], arrays: list[np.ndarray]) -> None:
    meta = dict(meta, format_version=FORMAT_VERSION, tensors=manifest)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for m, a in zip(manifest, arrays):
            if list(a.shape) != list(m["shape"]):
                raise CheckpointError(f"{m['name']}: shape {a.shape} disagrees with manifest {m['shape']}")
            fh.write(_tensor_bytes(a, m["dtype"]))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], str]:
    """Return ``(metadata, arrays by name, payload fingerprint)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        meta = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    payload = memoryview(raw)[8 + n:]
    expected = sum(int(np.prod(m["shape"])) * _DTYPES[m["dtype"]].itemsize for m in meta["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest implies {expected}")
    arrays, off = {}, 0
    for m in meta["tensors"]:
        dt = _DTYPES[m["dtype"]]
        count = int(np.prod(m["shape"]))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(m["shape"])
        arrays[m["name"]] = arr.astype(np.float64 if m["dtype"] == "f64" else np.int8)
        off += count * dt.itemsize
    return meta, arrays, fnv1a64(payload)


# -- typed wrappers -------------------------------------------------------------------

def save_model(path: str | Path, model, extra: dict | None = None) -> str:
    """Write a base checkpoint; returns its fingerprint."""
    manifest, arrays = model_arrays(model)
    bits = {q.bits for q in model.quantized.values()}
    meta = {
        "kind": "base",
        "config": model.config.to_dict(),
        "quant_bits": bits.pop() if bits else None,
        "source_fingerprint": model.source_fingerprint,
        **(extra or {}),
    }
    write_checkpoint(path, meta, manifest, arrays)
    return model.fingerprint


def load_model(path: str | Path):
    """Read a base checkpoint; returns ``(model, metadata)``."""
    from .model import ModelConfig, TransformerLM
    from .peft import QuantizedMatrix

    meta, arrays, fp = read_checkpoint(path)
    if meta.get("kind") != "base":
        raise CheckpointError(f"{path}: expected a base checkpoint, found {meta.get('kind')!r}")
    config = ModelConfig(**meta["config"])
    params, quantized = {}, {}
    for name in [m["name"] for m in meta["tensors"]]:
        if name.endswith(".codes"):
            base = name[: -len(".codes")]
            q = QuantizedMatrix(arrays[name], arrays[base + ".scale"], meta["quant_bits"])
            quantized[base] = q
            params[base] = q.dequantize()
        elif not name.endswith(".scale") or name[: -len(".scale")] + ".codes" not in arrays:
            params[name] = arrays[name]
    model = TransformerLM(config, params)
    model.quantized = quantized
    model.source_fingerprint = meta.get("source_fingerprint")
    model._fingerprint = fp
    return model, meta


def save_adapter(path: str | Path, state) -> None:
    names = list(state.tensors)
    manifest = [{"name": n, "shape": list(state.tensors[n].shape), "dtype": "f64"} for n in names]
    meta = {"kind": "adapter", "spec": state.spec.to_dict(), "base_fingerprint": state.base_fingerprint}
    write_checkpoint(path, meta, manifest, [state.tensors[n].data for n in names])


def load_adapter(path: str | Path):
    from .peft import AdapterSpec, AdapterState
    from .tensor import Tensor

    meta, arrays, _ = read_checkpoint(path)
    if meta.get("kind") != "adapter":
        raise CheckpointError(f"{path}: expected an adapter file, found {meta.get('kind')!r}")
    spec = AdapterSpec.from_dict(meta["spec"])
    tensors = {m["name"]: Tensor(arrays[m["name"]], name=m["name"]) for m in meta["tensors"]}
    return AdapterState(spec, tensors, meta.get("base_fingerprint"))
