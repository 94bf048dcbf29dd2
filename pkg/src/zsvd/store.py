"""Binary tensor container, model files and report emission.

Tensor file layout (all integers little-endian)::

    b"ZSTN" | u32 version | u32 count
    per tensor:
        u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | u64 dims[ndim]
        payload (little-endian, C order) | u32 crc32(descriptor + payload)

dtype codes: 0 = float64, 1 = float32, 2 = int8.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    ChecksumError,
    DuplicateNameError,
    FormatError,
    LengthMismatchError,
    MagicMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .model import ACTIVATIONS, CompressedModel, DenseLayer, FactoredLayer, ModelSpec, ToyModel
from .quant import QuantTensor, dequantize, quantize_symmetric  # noqa: F401  (re-exported)
from .toynet import CalibSet

MAGIC = b"ZSTN"
VERSION = 1
MAX_NDIM = 8
REPORT_SCHEMA = "zsvd-report/1"

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("i1")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int8"): 2}


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if code != 2 and not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} has non-finite entries")
        if arr.ndim > MAX_NDIM:
            raise ValueError(f"tensor {name!r}: ndim {arr.ndim} > {MAX_NDIM}")
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise ValueError(f"invalid tensor name {name!r}")
        desc = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
        desc += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        out += [desc, payload, struct.pack("<I", zlib.crc32(desc + payload))]
    return b"".join(out)


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    _atomic_write(path, encode_tensors(tensors))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends inside {what} at offset {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    rd = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicMismatchError("not a tensor file (bad magic)")
    rd.pos = 4
    version, count = rd.unpack("<II", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"tensor file version {version} not supported (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for idx in range(count):
        start = rd.pos
        (name_len,) = rd.unpack("<H", f"tensor {idx} name length")
        try:
            name = rd.take(name_len, f"tensor {idx} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor {idx}: name is not valid UTF-8") from exc
        code, ndim = rd.unpack("<BB", f"tensor {idx} dtype")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        if ndim > MAX_NDIM:
            raise FormatError(f"tensor {name!r}: ndim {ndim} exceeds {MAX_NDIM}")
        dims = rd.unpack(f"<{ndim}Q", f"tensor {name!r} dims")
        dtype = _DTYPES[code]
        size = 1
        for d in dims:
            size *= d
        nbytes = size * dtype.itemsize
        if nbytes > len(buf) - rd.pos:
            raise LengthMismatchError(
                f"tensor {name!r}: payload of {nbytes} bytes exceeds remaining {len(buf) - rd.pos}"
            )
        payload = rd.take(nbytes, f"tensor {name!r} payload")
        (crc,) = rd.unpack("<I", f"tensor {name!r} checksum")
        if zlib.crc32(buf[start:rd.pos - 4]) != crc:
            raise ChecksumError(f"tensor {name!r}: checksum mismatch")
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        if code != 2 and not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r} has non-finite entries")
        out[name] = arr
    if rd.pos != len(buf):
        raise LengthMismatchError(f"{len(buf) - rd.pos} trailing bytes after last tensor")
    return out


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


# -- models ------------------------------------------------------------------


def _meta(spec: ModelSpec) -> dict[str, np.ndarray]:
    return {
        "meta.dims": np.array(spec.dims, dtype=np.float64),
        "meta.activation": np.array([ACTIVATIONS.index(spec.activation)], dtype=np.float64),
        "meta.seed": np.array([spec.seed], dtype=np.float64),
    }


def _spec_from(t: Mapping[str, np.ndarray]) -> ModelSpec:
    try:
        dims = tuple(int(d) for d in t["meta.dims"])
        act = ACTIVATIONS[int(t["meta.activation"][0])]
        seed = int(t["meta.seed"][0])
    except (KeyError, IndexError, ValueError) as exc:
        raise FormatError(f"model metadata missing or invalid: {exc}") from exc
    return ModelSpec(dims, act, seed)


def _put(t: dict, key: str, mat, scale_key: str) -> None:
    if isinstance(mat, QuantTensor):
        t[f"{key}_q"] = mat.q
        t[scale_key] = mat.scales
    else:
        t[key] = np.asarray(mat, dtype=np.float64)


def _get(t: Mapping[str, np.ndarray], key: str, scale_key: str):
    if f"{key}_q" in t:
        if scale_key not in t:
            raise FormatError(f"{key}_q present without {scale_key}")
        return QuantTensor(t[f"{key}_q"], t[scale_key])
    return t[key]


def model_tensors(model: ToyModel) -> dict[str, np.ndarray]:
    t = _meta(model.spec)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, FactoredLayer):
            _put(t, f"layer{i}.wu", layer.wu, f"layer{i}.wu_scales")
            _put(t, f"layer{i}.wv", layer.wv, f"layer{i}.scales")
        else:
            _put(t, f"layer{i}.dense", layer.weight, f"layer{i}.dense_scales")
        t[f"layer{i}.bias"] = np.asarray(layer.bias, dtype=np.float64)
    return t


def model_from_tensors(t: Mapping[str, np.ndarray]) -> CompressedModel:
    spec = _spec_from(t)
    layers = []
    for i, (m, n) in enumerate(spec.shapes()):
        try:
            bias = t[f"layer{i}.bias"]
            if f"layer{i}.dense" in t or f"layer{i}.dense_q" in t:
                layer = DenseLayer(_get(t, f"layer{i}.dense", f"layer{i}.dense_scales"), bias)
            else:
                layer = FactoredLayer(
                    _get(t, f"layer{i}.wu", f"layer{i}.wu_scales"),
                    _get(t, f"layer{i}.wv", f"layer{i}.scales"),
                    bias,
                )
        except KeyError as exc:
            raise FormatError(f"layer {i}: missing tensor {exc}") from exc
        if layer.shape != (m, n) or bias.shape != (m,):
            raise FormatError(f"layer {i}: stored shape {layer.shape} does not match spec {(m, n)}")
        if isinstance(layer, FactoredLayer) and layer.wu.shape[1] != layer.wv.shape[0]:
            raise FormatError(f"layer {i}: factor ranks disagree")
        layers.append(layer)
    return CompressedModel(spec, layers)


def save_compressed(path, model: ToyModel) -> None:
    write_tensors(path, model_tensors(model))


def load_compressed(path) -> CompressedModel:
    return model_from_tensors(read_tensors(path))


save_model = save_compressed


def load_model(path) -> ToyModel:
    cm = load_compressed(path)
    return ToyModel(cm.spec, cm.layers)


def save_calib(path, calib: CalibSet) -> None:
    write_tensors(path, {
        "calib.inputs": calib.inputs,
        "calib.labels": calib.labels.astype(np.float64),
    })


def load_calib(path) -> CalibSet:
    t = read_tensors(path)
    try:
        inputs, labels = t["calib.inputs"], t["calib.labels"]
    except KeyError as exc:
        raise FormatError(f"calibration file missing {exc}") from exc
    if np.any(labels != np.round(labels)):
        raise FormatError("calibration labels must be integers")
    return CalibSet(inputs, labels.astype(np.int64))


# -- reports -----------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_report(report: Mapping) -> str:
    body = {"schema": REPORT_SCHEMA, **report}
    return json.dumps(_jsonable(body), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(path, report: Mapping) -> None:
    _atomic_write(path, dump_report(report).encode("utf-8"))


def read_report(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"unsupported report schema {data.get('schema')!r}")
    return data
