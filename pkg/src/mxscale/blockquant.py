"""Microscaling quantize / dequantize over flat tensors.

Each block of ``N`` consecutive elements shares one scale
``s = Q_scale(max|x| / C)``; elements are stored as ``Q_elem(x / s)``.
An optional per-tensor factor ``s_T`` stretches the whole tensor into the
combined range of the element and scale formats before blocking.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from .formats import FormatError, LevelTable, code_level, get_format


@dataclass(frozen=True)
class QuantConfig:
    block_size: int
    element_format: LevelTable
    scale_format: LevelTable
    per_tensor_scaling: bool = False
    scale_divisor: Optional[float] = None

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.element_format.is_exact:
            raise ValueError("element format cannot be exact")
        if self.scale_divisor is not None and not self.scale_divisor > 0:
            raise ValueError("scale_divisor must be > 0")

    @classmethod
    def make(cls, element: Union[str, LevelTable], scale: Union[str, LevelTable],
             block_size: int, per_tensor_scaling: bool = False,
             scale_divisor: Optional[float] = None) -> "QuantConfig":
        return cls(block_size, get_format(element), get_format(scale),
                   per_tensor_scaling, scale_divisor)

    @property
    def divisor(self) -> float:
        """Scale divisor C; defaults to the element format maximum."""
        if self.scale_divisor is None:
            return self.element_format.max_value
        return float(self.scale_divisor)

    @property
    def label(self) -> str:
        tag = f"{self.element_format.name}-{self.scale_format.name}-n{self.block_size}"
        return tag + ("-pts" if self.per_tensor_scaling else "")

    def to_dict(self) -> dict:
        return {
            "block_size": self.block_size,
            "element_format": self.element_format.name,
            "scale_format": self.scale_format.name,
            "per_tensor_scaling": self.per_tensor_scaling,
            "scale_divisor": self.divisor,
        }


@dataclass
class QuantizedTensor:
    """Packed microscaling output.

    ``codes`` holds one element code per input element (unpacked; see
    :func:`to_bytes` for the packed layout). ``scales`` holds the per-block
    scale values, ``scale_codes`` their codes (``None`` for exact scales).
    """

    codes: np.ndarray
    scales: np.ndarray
    scale_codes: Optional[np.ndarray]
    tensor_scale: float
    length: int
    block_size: int
    element_format: str
    scale_format: str

    @property
    def num_blocks(self) -> int:
        return len(self.scales)

    @property
    def trailing_length(self) -> int:
        """Length of the last block (``block_size`` when the tensor divides evenly)."""
        rem = self.length % self.block_size
        return rem if rem else min(self.block_size, self.length)


def _block_view(x: np.ndarray, n: int) -> np.ndarray:
    """(blocks, n) view of ``x``, zero-padding a ragged tail."""
    pad = (-len(x)) % n
    if pad:
        x = np.concatenate([x, np.zeros(pad, dtype=x.dtype)])
    return x.reshape(-1, n)


def _as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")
    return x


def derive_scale(block, cfg: QuantConfig) -> float:
    """Shared scale of one block: ``Q_scale(max|x| / C)``."""
    block = _as_vector(block)
    if len(block) == 0:
        raise ValueError("empty block")
    return float(derive_scales(np.array([np.max(np.abs(block))]), cfg)[0])


def derive_scales(amax: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Vectorized :func:`derive_scale` over per-block absolute maxima."""
    raw = np.asarray(amax, dtype=np.float64) / cfg.divisor
    # formats without a zero (e8m0) map an all-zero block to their smallest level
    return np.asarray(round_scales(raw, cfg.scale_format))


def round_scales(raw: np.ndarray, table: LevelTable) -> np.ndarray:
    if table.is_exact:
        return np.asarray(raw, dtype=np.float64)
    return table.levels[table.round_index(raw)]


def per_tensor_scale(t, cfg: QuantConfig) -> float:
    """Global pre-multiplier ``max(elem) * max(scale) / max|t|``.

    An exact scale format contributes a factor of 1. All-zero tensors get 1.
    """
    t = _as_vector(t)
    amax = float(np.max(np.abs(t))) if len(t) else 0.0
    if amax == 0.0:
        return 1.0
    scale_max = 1.0 if cfg.scale_format.is_exact else cfg.scale_format.max_value
    return cfg.element_format.max_value * scale_max / amax


@dataclass
class _Blocked:
    level_idx: np.ndarray  # (blocks, N) indices into element levels
    scales: np.ndarray     # (blocks,)
    tensor_scale: float
    length: int


def _quantize_blocks(x: np.ndarray, cfg: QuantConfig) -> _Blocked:
    s_t = per_tensor_scale(x, cfg) if cfg.per_tensor_scaling else 1.0
    xs = x * s_t if s_t != 1.0 else x
    blocks = _block_view(xs, cfg.block_size)
    scales = derive_scales(np.max(np.abs(blocks), axis=1), cfg)
    safe = np.where(scales > 0.0, scales, 1.0)
    y = blocks / safe[:, None]
    y[scales == 0.0] = 0.0
    idx = cfg.element_format.round_index(y)
    return _Blocked(idx, scales, s_t, len(x))


def quantize_tensor(x, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize a flat (or flattened, row-major) tensor block by block."""
    x = _as_vector(x)
    qb = _quantize_blocks(x, cfg)
    elem = cfg.element_format
    codes = elem.codes[qb.level_idx].ravel()[: len(x)]
    scale_codes = None
    if not cfg.scale_format.is_exact:
        scale_codes = cfg.scale_format.codes[cfg.scale_format.round_index(qb.scales)]
    return QuantizedTensor(
        codes=codes.astype(np.uint16 if elem.bits > 8 else np.uint8),
        scales=qb.scales,
        scale_codes=scale_codes,
        tensor_scale=qb.tensor_scale,
        length=len(x),
        block_size=cfg.block_size,
        element_format=elem.name,
        scale_format=cfg.scale_format.name,
    )


def dequantize_tensor(q: QuantizedTensor, cfg: QuantConfig) -> np.ndarray:
    """Reconstruct ``s^(j) * q_i^(j) / s_T`` for every element."""
    expected = -(-q.length // cfg.block_size)
    if q.num_blocks != expected or q.block_size != cfg.block_size:
        raise ValueError(
            f"block count mismatch: tensor has {q.num_blocks} blocks of "
            f"{q.block_size}, config expects {expected} blocks of {cfg.block_size}"
        )
    if len(q.codes) != q.length:
        raise ValueError("code count does not match tensor length")
    values = code_level(q.codes.astype(np.int64), cfg.element_format)
    per_elem = np.repeat(q.scales, cfg.block_size)[: q.length]
    out = values * per_elem
    if q.tensor_scale != 1.0:
        out = out / q.tensor_scale
    return out


def quantize_dequantize(x, cfg: QuantConfig) -> np.ndarray:
    """Fake-quantize: dequantize(quantize(x)) without materializing codes."""
    x = _as_vector(x)
    qb = _quantize_blocks(x, cfg)
    out = (cfg.element_format.levels[qb.level_idx] * qb.scales[:, None]).ravel()[: len(x)]
    if qb.tensor_scale != 1.0:
        out = out / qb.tensor_scale
    return out


def error_breakdown(x, cfg: QuantConfig) -> dict:
    """Squared-error sums split by element role.

    Returns sums over ``not_max`` elements, the ``is_max`` element of each
    block (first arg-max), and all elements of ``zero_scale`` blocks, plus
    per-block error sums for standard-error estimates.
    """
    x = _as_vector(x)
    qb = _quantize_blocks(x, cfg)
    n = cfg.block_size
    blocks = _block_view(x, n)
    xhat = cfg.element_format.levels[qb.level_idx] * qb.scales[:, None]
    if qb.tensor_scale != 1.0:
        xhat = xhat / qb.tensor_scale
    sq = (xhat - blocks) ** 2
    zero = qb.scales == 0.0
    arg = np.argmax(np.abs(blocks), axis=1)
    rows = np.arange(len(sq))
    max_err = sq[rows, arg]
    block_sum = sq.sum(axis=1)
    is_max = float(max_err[~zero].sum())
    zero_scale = float(block_sum[zero].sum())
    not_max = float(block_sum[~zero].sum() - is_max)
    return {
        "not_max": max(not_max, 0.0),
        "is_max": is_max,
        "zero_scale": zero_scale,
        "block_sums": block_sum,
        "zero_blocks": int(zero.sum()),
        "n": len(x),
    }


def storage_bytes_per_element(block_size: int, element_bits: int, scale_bits: int) -> float:
    """Bytes per element including the amortized block scale."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    return element_bits / 8 + scale_bits / (8 * block_size)


def halving_storage_increase(block_size: int, element_bits: int, scale_bits: int) -> float:
    """Relative storage growth when the block size goes from N to N/2."""
    if block_size < 2 or block_size % 2:
        raise ValueError("block_size must be even and >= 2")
    # exact rational s / (e*N + s), rounded once
    return float(Fraction(scale_bits, element_bits * block_size + scale_bits))


# Binary layout -------------------------------------------------------------
#
#   offset  size  field
#   0       4     magic b"MXQT"
#   4       2     version (u16) = 1
#   6       4     block size N (u32)
#   10      8     element count (u64)
#   18      1     element code width in bits (4, 8 or 16)
#   19      1     scale code width in bits (8, 16, or 64 for raw f64 scales)
#   20      8     tensor scale s_T (f64)
#   28      1+n   element format name (u8 length + ASCII)
#   ..      1+n   scale format name (u8 length + ASCII)
#   ..            element codes, packed little-endian (two 4-bit codes per
#                 byte, low nibble first)
#   ..            scale codes, one per block (u8 / u16 / f64)
#
# All integers little-endian.

MAGIC = b"MXQT"
VERSION = 1


def _code_width(bits: int) -> int:
    return 4 if bits <= 4 else 8 if bits <= 8 else 16


def to_bytes(q: QuantizedTensor, cfg: QuantConfig) -> bytes:
    ew = _code_width(cfg.element_format.bits)
    sw = 64 if q.scale_codes is None else _code_width(cfg.scale_format.bits)
    sw = max(sw, 8)
    names = b""
    for nm in (q.element_format, q.scale_format):
        raw = nm.encode("ascii")
        names += struct.pack("<B", len(raw)) + raw
    head = MAGIC + struct.pack("<HIQBBd", VERSION, q.block_size, q.length,
                               ew, sw, q.tensor_scale) + names
    codes = q.codes.astype(np.uint16)
    if ew == 4:
        c = codes.astype(np.uint8)
        if len(c) % 2:
            c = np.concatenate([c, np.zeros(1, np.uint8)])
        body = (c[0::2] | (c[1::2] << 4)).astype(np.uint8).tobytes()
    else:
        body = codes.astype("<u1" if ew == 8 else "<u2").tobytes()
    if sw == 64:
        tail = q.scales.astype("<f8").tobytes()
    else:
        tail = q.scale_codes.astype("<u1" if sw == 8 else "<u2").tobytes()
    return head + body + tail


def from_bytes(data: bytes, cfg: Optional[QuantConfig] = None) -> QuantizedTensor:
    """Parse :func:`to_bytes` output. Formats resolve via the registry unless
    ``cfg`` supplies the tables."""
    if data[:4] != MAGIC:
        raise ValueError("bad magic; not a quantized tensor")
    version, n_block, length, ew, sw, s_t = struct.unpack_from("<HIQBBd", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    pos = 28
    names = []
    for _ in range(2):
        (ln,) = struct.unpack_from("<B", data, pos)
        names.append(data[pos + 1: pos + 1 + ln].decode("ascii"))
        pos += 1 + ln
    elem = cfg.element_format if cfg else get_format(names[0])
    scale = cfg.scale_format if cfg else get_format(names[1])
    if (elem.name, scale.name) != tuple(names):
        raise FormatError(f"format mismatch: file has {names}")
    n_blocks = -(-length // n_block)
    if ew == 4:
        nbytes = (length + 1) // 2
        packed = np.frombuffer(data, np.uint8, nbytes, pos)
        codes = np.empty(2 * nbytes, np.uint8)
        codes[0::2] = packed & 0x0F
        codes[1::2] = packed >> 4
        codes = codes[:length]
    else:
        dt = np.dtype("<u1" if ew == 8 else "<u2")
        nbytes = length * dt.itemsize
        codes = np.frombuffer(data, dt, length, pos).copy()
    pos += nbytes
    if sw == 64:
        scales = np.frombuffer(data, "<f8", n_blocks, pos).astype(np.float64)
        scale_codes = None
        pos += 8 * n_blocks
    else:
        dt = np.dtype("<u1" if sw == 8 else "<u2")
        scale_codes = np.frombuffer(data, dt, n_blocks, pos).astype(np.int64)
        scales = np.asarray(code_level(scale_codes, scale), dtype=np.float64)
        pos += dt.itemsize * n_blocks
    if pos != len(data):
        raise ValueError(f"trailing or missing bytes: parsed {pos} of {len(data)}")
    return QuantizedTensor(codes, scales, scale_codes, s_t, length, n_block,
                           names[0], names[1])


def to_json(q: QuantizedTensor, cfg: QuantConfig) -> str:
    """Human-readable debug dump including dequantized values."""
    return json.dumps({
        "config": cfg.to_dict(),
        "length": q.length,
        "tensor_scale": q.tensor_scale,
        "scales": q.scales.tolist(),
        "scale_codes": None if q.scale_codes is None else q.scale_codes.tolist(),
        "codes": q.codes.tolist(),
        "values": dequantize_tensor(q, cfg).tolist(),
    }, indent=2)
