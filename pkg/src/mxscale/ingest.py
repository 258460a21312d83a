"""Tensor containers and per-tensor error reports.

Container layout (all integers little-endian)::

    0    8   magic b"MXTCONT1"
    8    8   index length L (u64)
    16   L   UTF-8 JSON index: {"tensors": [{"name", "dtype", "shape",
             "offset", "nbytes"}, ...]}; offsets relative to payload start
    16+L     payload: raw little-endian tensor buffers

Files without the magic are tried as safetensors (u64 header length, JSON
header, buffers), which has the same "JSON index + raw buffers" shape.
Supported dtypes: float32, bfloat16 (plus float16 for safetensors input).
"""

from __future__ import annotations

import json
import logging
import mmap
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .blockquant import QuantConfig, quantize_dequantize
from .experiments import mse

log = logging.getLogger(__name__)

MAGIC = b"MXTCONT1"
DTYPES = {"float32": 4, "bfloat16": 2}
_SAFETENSORS_DTYPES = {"F32": "float32", "BF16": "bfloat16", "F16": "float16"}
_ITEMSIZE = {"float32": 4, "bfloat16": 2, "float16": 2}


class ContainerError(ValueError):
    pass


class MalformedHeaderError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class UnknownDtypeError(ContainerError):
    pass


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: str
    shape: tuple
    offset: int
    nbytes: int

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


def float32_to_bfloat16_bits(x) -> np.ndarray:
    """Round-to-nearest-even truncation of float32 to the top 16 bits."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounding = ((bits >> 16) & 1) + 0x7FFF
    return ((bits + rounding) >> 16).astype(np.uint16)


def bfloat16_bits_to_float32(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return b.view(np.float32)


class TensorContainer:
    """Read-only view of a container file; tensors decode lazily by name."""

    def __init__(self, entries: list, payload, kind: str = "mxscale"):
        self.entries = entries
        self.payload = payload
        self.kind = kind
        self._by_name = {e.name: e for e in entries}

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> TensorEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no tensor named {name!r}") from None

    def raw(self, name: str) -> np.ndarray:
        e = self.entry(name)
        if e.dtype == "float32":
            return np.frombuffer(self.payload, "<f4", e.numel, e.offset).reshape(e.shape)
        if e.dtype == "float16":
            return np.frombuffer(self.payload, "<f2", e.numel, e.offset).reshape(e.shape)
        bits = np.frombuffer(self.payload, "<u2", e.numel, e.offset)
        return bfloat16_bits_to_float32(bits).reshape(e.shape)

    def tensor(self, name: str) -> np.ndarray:
        """Tensor widened to float64."""
        return self.raw(name).astype(np.float64)

    def close(self):
        if isinstance(self.payload, memoryview):
            self.payload.release()


def _validate(entries: list, payload_size: int):
    spans = sorted((e.offset, e.offset + e.nbytes, e.name) for e in entries)
    for e in entries:
        if e.offset < 0 or e.nbytes != e.numel * _ITEMSIZE[e.dtype]:
            raise MalformedHeaderError(f"{e.name}: size does not match shape/dtype")
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise MalformedHeaderError(f"tensors {a!r} and {b!r} overlap")
    if spans and spans[-1][1] > payload_size:
        raise TruncatedPayloadError(
            f"payload has {payload_size} bytes, index needs {spans[-1][1]}")


def _parse_index(raw: bytes) -> list:
    try:
        doc = json.loads(raw.decode("utf-8"))
        items = doc["tensors"]
        entries = []
        for it in items:
            if it["dtype"] not in DTYPES:
                raise UnknownDtypeError(f"{it['name']}: unknown dtype {it['dtype']!r}")
            entries.append(TensorEntry(str(it["name"]), it["dtype"],
                                       tuple(int(d) for d in it["shape"]),
                                       int(it["offset"]), int(it["nbytes"])))
    except UnknownDtypeError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad index: {exc}") from exc
    return entries


def _parse_safetensors(data) -> TensorContainer:
    if len(data) < 8:
        raise MalformedHeaderError("file too short for a header")
    (hlen,) = struct.unpack_from("<Q", data, 0)
    if 8 + hlen > len(data):
        raise TruncatedPayloadError("header length exceeds file size")
    try:
        header = json.loads(bytes(data[8: 8 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"bad safetensors header: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("safetensors header is not an object")
    entries = []
    for name, info in header.items():
        if name == "__metadata__":
            continue
        try:
            dtype = _SAFETENSORS_DTYPES.get(info["dtype"])
            if dtype is None:
                raise UnknownDtypeError(f"{name}: unsupported dtype {info['dtype']!r}")
            start, end = (int(v) for v in info["data_offsets"])
            entries.append(TensorEntry(name, dtype, tuple(int(d) for d in info["shape"]),
                                       start, end - start))
        except UnknownDtypeError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"{name}: bad entry ({exc})") from exc
    payload = memoryview(data)[8 + hlen:]
    _validate(entries, len(payload))
    return TensorContainer(entries, payload, kind="safetensors")


def load_container(path: Union[str, Path]) -> TensorContainer:
    """Open a container (or safetensors) file for lazy tensor access."""
    path = Path(path)
    with open(path, "rb") as fh:
        size = path.stat().st_size
        data = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) if size else b""
    if data[:8] != MAGIC:
        return _parse_safetensors(data)
    if len(data) < 16:
        raise TruncatedPayloadError("file ends inside the header")
    (ilen,) = struct.unpack_from("<Q", data, 8)
    if 16 + ilen > len(data):
        raise TruncatedPayloadError("index length exceeds file size")
    entries = _parse_index(bytes(data[16: 16 + ilen]))
    payload = memoryview(data)[16 + ilen:]
    _validate(entries, len(payload))
    return TensorContainer(entries, payload)


def save_container(path: Union[str, Path], tensors: Mapping[str, np.ndarray],
                   dtype: Union[str, Mapping[str, str]] = "float32") -> Path:
    """Write tensors in the container layout; ``dtype`` may be per-tensor."""
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        dt = dtype if isinstance(dtype, str) else dtype.get(name, "float32")
        if dt not in DTYPES:
            raise UnknownDtypeError(f"{name}: unknown dtype {dt!r}")
        arr = np.asarray(arr)
        if dt == "float32":
            buf = arr.astype("<f4").tobytes()
        else:
            buf = float32_to_bfloat16_bits(arr).astype("<u2").tobytes()
        index.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    raw_index = json.dumps({"tensors": index}).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(raw_index)) + raw_index)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def population_std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=0))


def tensor_report(container: TensorContainer, configs: Mapping[str, QuantConfig],
                  names: Optional[list] = None) -> list:
    """One row per tensor: name, numel, population sigma, MSE per config.

    Tensors are flattened row-major before blocking. Rows come sorted by sigma.
    """
    rows = []
    for name in names or container.names:
        x = container.tensor(name).ravel()
        if x.size == 0:
            log.warning("skipping empty tensor %s", name)
            continue
        row = {"tensor": name, "numel": int(x.size), "sigma": population_std(x)}
        for label, cfg in configs.items():
            row[label] = mse(x, quantize_dequantize(x, cfg))
        rows.append(row)
    rows.sort(key=lambda r: (r["sigma"], r["tensor"]))
    return rows
