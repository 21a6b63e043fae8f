"""Binary containers (.dmoe models, .cal calibration features) and JSON helpers.

.dmoe layout::

    0..7     b"DERNMOE1"
    8..15    u64 little-endian header length L
    16..16+L UTF-8 JSON header (space padded so the payload starts 64-byte aligned)
    payload  little-endian float32 tensors, row-major, at 64-byte aligned offsets
             relative to the payload start
"""

from __future__ import annotations

import json
import math
import re
import struct
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    MalformedHeaderError,
    NumericalError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .model import ExpertWeights, MoeLayer, MoeModel

MODEL_MAGIC = b"DERNMOE1"
CALIB_MAGIC = b"DERNCAL1"
ALIGN = 64
_LE_F32 = np.dtype("<f4")
_TENSOR_NAME = re.compile(r"^layers\.(\d+)\.(router|experts\.(\d+)\.(gate|up|down))$")


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _check_magic(head: bytes, magic: bytes, what: str) -> None:
    if len(head) < len(magic):
        raise MalformedHeaderError(f"{what} file too short for magic")
    if head[: len(magic)] == magic:
        return
    stem = magic[:-1]
    if head[: len(stem)] == stem:
        raise UnsupportedVersionError(
            f"unsupported {what} format version {head[len(stem):len(magic)]!r}"
        )
    raise MalformedHeaderError(f"bad {what} magic {head[:len(magic)]!r}")


def model_to_bytes(m: MoeModel) -> bytes:
    tensors = []
    blobs = []
    offset = 0

    def add(name: str, arr: np.ndarray) -> None:
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "f32"})
        blobs.append(data + b"\0" * _pad(len(data)))
        offset += len(data) + _pad(len(data))

    for li, layer in enumerate(m.layers):
        add(f"layers.{li}.router", layer.router)
        for ei, e in enumerate(layer.experts):
            add(f"layers.{li}.experts.{ei}.gate", e.w_gate)
            add(f"layers.{li}.experts.{ei}.up", e.w_up)
            add(f"layers.{li}.experts.{ei}.down", e.w_down)

    header = {
        "meta": dict(sorted(m.meta.items())),
        "tensors": tensors,
        "top_k": [layer.top_k for layer in m.layers],
    }
    hb = json.dumps(header, separators=(",", ":")).encode("utf-8")
    hb += b" " * _pad(16 + len(hb))
    return MODEL_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def save_model(m: MoeModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(m))


def _parse_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < 16:
        raise MalformedHeaderError("file too short for a model header")
    _check_magic(buf, MODEL_MAGIC, "model")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise MalformedHeaderError(f"header length {hlen} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise MalformedHeaderError("header lacks a 'tensors' list")
    if not isinstance(header.get("top_k"), list):
        raise MalformedHeaderError("header lacks a 'top_k' list")
    return header, 16 + hlen


def model_from_bytes(buf: bytes) -> MoeModel:
    header, start = _parse_header(buf)
    payload = memoryview(buf)[start:]

    tensors: dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        try:
            name, shape, off, dtype = t["name"], t["shape"], t["offset"], t["dtype"]
        except (TypeError, KeyError) as exc:
            raise MalformedHeaderError(f"bad tensor entry {t!r}") from exc
        if dtype != "f32":
            raise UnsupportedVersionError(f"tensor {name}: unsupported dtype {dtype!r}")
        if (
            not isinstance(shape, list)
            or len(shape) != 2
            or not all(isinstance(s, int) and s >= 0 for s in shape)
            or not isinstance(off, int)
            or off < 0
        ):
            raise MalformedHeaderError(f"tensor {name}: bad shape/offset")
        if off % ALIGN:
            raise MalformedHeaderError(f"tensor {name}: offset {off} not {ALIGN}-byte aligned")
        if not isinstance(name, str) or not _TENSOR_NAME.match(name):
            raise MalformedHeaderError(f"unrecognised tensor name {name!r}")
        if name in tensors:
            raise MalformedHeaderError(f"duplicate tensor {name}")
        nbytes = shape[0] * shape[1] * 4
        if off + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"tensor {name} needs bytes [{off}, {off + nbytes}) but payload has {len(payload)}"
            )
        arr = np.frombuffer(payload[off : off + nbytes], dtype=_LE_F32).reshape(shape)
        tensors[name] = arr.astype(np.float32)

    top_ks = header["top_k"]
    layers = []
    used = 0
    for li, top_k in enumerate(top_ks):
        router = tensors.get(f"layers.{li}.router")
        if router is None:
            raise ShapeMismatchError(f"layer {li}: router tensor missing")
        n = router.shape[0]
        experts = []
        for ei in range(n):
            parts = [tensors.get(f"layers.{li}.experts.{ei}.{p}") for p in ("gate", "up", "down")]
            if any(p is None for p in parts):
                raise ShapeMismatchError(
                    f"layer {li}: router has {n} rows but expert {ei} tensors are missing"
                )
            try:
                experts.append(ExpertWeights(*parts))
            except DimensionError as exc:
                raise ShapeMismatchError(f"layer {li} expert {ei}: {exc}") from None
        used += 1 + 3 * n
        try:
            layers.append(MoeLayer(experts, router, int(top_k)))
        except (DimensionError, TypeError, ValueError) as exc:
            raise ShapeMismatchError(f"layer {li}: {exc}") from None
    if used != len(tensors):
        raise ShapeMismatchError(
            f"header lists {len(tensors)} tensors but {len(top_ks)} layers account for {used}"
        )
    meta = header.get("meta", {})
    if not isinstance(meta, dict):
        raise MalformedHeaderError("'meta' must be an object")
    try:
        return MoeModel(layers, meta)
    except DimensionError as exc:
        raise ShapeMismatchError(str(exc)) from None
    except NumericalError as exc:
        raise FormatError(str(exc)) from None


def load_model(path) -> MoeModel:
    return model_from_bytes(Path(path).read_bytes())


def save_calibration(tokens: np.ndarray, path) -> None:
    x = np.ascontiguousarray(tokens, dtype=_LE_F32)
    if x.ndim != 2:
        raise DimensionError("calibration tokens must be an (m, d) array")
    m, d = x.shape
    Path(path).write_bytes(CALIB_MAGIC + struct.pack("<QQ", m, d) + x.tobytes())


def load_calibration(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 24:
        raise MalformedHeaderError("calibration file too short for header")
    _check_magic(buf, CALIB_MAGIC, "calibration")
    m, d = struct.unpack("<QQ", buf[8:24])
    need = m * d * 4
    if len(buf) - 24 < need:
        raise TruncatedPayloadError(f"calibration payload has {len(buf) - 24} bytes, needs {need}")
    if len(buf) - 24 > need:
        raise ShapeMismatchError(f"calibration payload has {len(buf) - 24 - need} trailing bytes")
    return np.frombuffer(buf, dtype=_LE_F32, count=m * d, offset=24).reshape(m, d).astype(np.float32)


def round_sig(x: float, digits: int = 9) -> float:
    if not math.isfinite(x):
        raise NumericalError(f"non-finite value {x!r} in output")
    return float(f"{x:.{digits}g}")


def jsonable(obj, digits: int = 9):
    """Recursively convert numpy values and round floats to ``digits`` significant digits."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return round_sig(float(obj), digits)
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(jsonable(obj), indent=2) + "\n")
