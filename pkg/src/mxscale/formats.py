"""Low-precision number formats as enumerated level tables.

A :class:`FloatFormatSpec` describes a code space (minifloat, symmetric
integer, or the unquantized ``exact`` idealization). :func:`enumerate_levels`
turns it into a :class:`LevelTable`: the sorted set of representable values
together with the round-to-nearest decision boundaries between them, which
is all the quantizer and the analytical model need.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np

KINDS = ("minifloat", "integer-symmetric", "exact")
CONVENTIONS = ("all-finite", "extended-finite", "ieee")
ROUNDINGS = ("nearest-even-code", "nearest-ties-away")


class FormatError(ValueError):
    """Raised for malformed format specs or unknown format names."""


@dataclass(frozen=True)
class FloatFormatSpec:
    """Declarative description of a number format.

    ``finite_convention`` selects which codes are non-numeric:

    * ``all-finite``: every code is a number.
    * ``extended-finite``: only the all-ones exponent+mantissa code is
      non-numeric (OCP E4M3 style).
    * ``ieee``: the whole all-ones exponent field is reserved (BF16).

    With ``subnormals=False`` the zero exponent field encodes ordinary
    normal values and the format has no zero (E8M0).
    """

    name: str
    kind: str = "minifloat"
    exponent_bits: int = 0
    mantissa_bits: int = 0
    signed: bool = True
    bias: int | None = None
    finite_convention: str = "all-finite"
    subnormals: bool = True
    int_max: int = 0
    rounding: str = "nearest-even-code"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FormatError(f"unknown format kind {self.kind!r}")
        if self.finite_convention not in CONVENTIONS:
            raise FormatError(f"unknown finite convention {self.finite_convention!r}")
        if self.rounding not in ROUNDINGS:
            raise FormatError(f"unknown rounding mode {self.rounding!r}")
        if self.kind == "minifloat":
            if self.exponent_bits < 0 or self.mantissa_bits < 0:
                raise FormatError("bit counts must be non-negative")
            if self.exponent_bits + self.mantissa_bits == 0:
                raise FormatError(f"{self.name}: format has zero magnitude bits")
            if self.exponent_bits == 0 and not self.subnormals:
                raise FormatError(f"{self.name}: fixed-point format needs subnormals")
        elif self.kind == "integer-symmetric":
            if self.int_max < 1:
                raise FormatError(f"{self.name}: int_max must be >= 1")

    @property
    def exponent_bias(self) -> int:
        if self.bias is not None:
            return self.bias
        return 2 ** (self.exponent_bits - 1) - 1 if self.exponent_bits > 0 else 0

    @property
    def bits(self) -> int:
        if self.kind == "exact":
            return 64
        if self.kind == "integer-symmetric":
            return int(math.ceil(math.log2(self.int_max + 1))) + 1
        return self.exponent_bits + self.mantissa_bits + (1 if self.signed else 0)

    @classmethod
    def from_dict(cls, doc: dict) -> "FloatFormatSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise FormatError(f"unknown format fields: {sorted(extra)}")
        if "name" not in doc:
            raise FormatError("format document needs a 'name'")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True, eq=False)
class LevelTable:
    """Sorted representable values with round-to-nearest boundaries.

    ``boundaries[j]`` is the midpoint between ``levels[j]`` and
    ``levels[j + 1]``. ``codes[j]`` is the bit pattern of ``levels[j]``.
    An exact table (``is_exact``) has no levels; rounding is the identity.
    """

    spec: FloatFormatSpec
    levels: np.ndarray = field(repr=False)
    codes: np.ndarray = field(repr=False)
    boundaries: np.ndarray = field(repr=False)
    max_value: float
    min_positive: float
    rounding: str = "nearest-even-code"

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def is_exact(self) -> bool:
        return self.spec.kind == "exact"

    @property
    def bits(self) -> int:
        return self.spec.bits

    @property
    def has_zero(self) -> bool:
        return not self.is_exact and bool(np.any(self.levels == 0.0))

    @property
    def nonnegative_levels(self) -> np.ndarray:
        return self.levels[self.levels >= 0.0]

    def round_index(self, x) -> np.ndarray:
        """Index into ``levels`` of the nearest level to each ``x``."""
        x = np.asarray(x, dtype=np.float64)
        b = self.boundaries
        idx = np.searchsorted(b, x, side="left")
        # x == b[idx] is a tie between idx and idx + 1; searchsorted picked idx.
        inner = np.minimum(idx, len(b) - 1)
        tie = (idx < len(b)) & (x == b[inner])
        if np.any(tie):
            lo = idx[tie] if idx.ndim else idx
            hi = lo + 1
            if self.rounding == "nearest-ties-away":
                pick_hi = np.abs(self.levels[hi]) > np.abs(self.levels[lo])
            else:
                pick_hi = (_magnitude_code(self, hi) % 2) == 0
            if idx.ndim:
                idx = idx.copy()
                idx[tie] = np.where(pick_hi, hi, lo)
            else:
                idx = np.asarray(hi if pick_hi else lo)
        return idx

    def describe(self) -> dict:
        return {
            "name": self.name,
            "kind": self.spec.kind,
            "bits": self.bits,
            "max_value": self.max_value,
            "min_positive": self.min_positive,
            "levels": [] if self.is_exact else self.levels.tolist(),
            "boundaries": [] if self.is_exact else self.boundaries.tolist(),
            "codes": [] if self.is_exact else self.codes.tolist(),
        }


def _magnitude_code(table: LevelTable, idx):
    codes = table.codes[idx]
    spec = table.spec
    if spec.kind == "integer-symmetric":
        return np.abs(table.levels[idx]).astype(np.int64)
    if spec.signed:
        return codes & ((1 << (spec.exponent_bits + spec.mantissa_bits)) - 1)
    return codes


def _minifloat_codes(spec: FloatFormatSpec) -> tuple[np.ndarray, np.ndarray]:
    e_bits, m_bits = spec.exponent_bits, spec.mantissa_bits
    n_mag = 1 << (e_bits + m_bits)
    mag_codes = np.arange(n_mag, dtype=np.int64)
    exp = mag_codes >> m_bits
    mant = mag_codes & ((1 << m_bits) - 1)
    frac = mant / float(1 << m_bits)
    bias = spec.exponent_bias
    if spec.subnormals:
        values = np.where(
            exp == 0,
            np.ldexp(frac, 1 - bias),
            np.ldexp(1.0 + frac, (exp - bias).astype(np.int64)),
        )
    else:
        values = np.ldexp(1.0 + frac, (exp - bias).astype(np.int64))
    keep = np.ones(n_mag, dtype=bool)
    if spec.finite_convention == "extended-finite":
        keep[-1] = False
    elif spec.finite_convention == "ieee" and e_bits > 0:
        keep &= exp != (1 << e_bits) - 1
    mag_codes, values = mag_codes[keep], values[keep]
    if not spec.signed:
        return values, mag_codes
    sign_bit = 1 << (e_bits + m_bits)
    neg = values > 0.0
    all_values = np.concatenate([-values[neg], values])
    all_codes = np.concatenate([mag_codes[neg] | sign_bit, mag_codes])
    return all_values, all_codes


def enumerate_levels(spec: FloatFormatSpec) -> LevelTable:
    """Enumerate every code of ``spec`` into a sorted, deduplicated table."""
    if spec.kind == "exact":
        empty = np.empty(0)
        return LevelTable(spec, empty, empty.astype(np.int64), empty,
                          math.inf, 0.0, spec.rounding)
    if spec.kind == "integer-symmetric":
        levels = np.arange(-spec.int_max, spec.int_max + 1, dtype=np.float64)
        width = spec.bits
        codes = levels.astype(np.int64) & ((1 << width) - 1)
    else:
        levels, codes = _minifloat_codes(spec)
        order = np.argsort(levels, kind="stable")
        levels, codes = levels[order], codes[order]
        # -0 never appears; duplicates only arise from degenerate specs.
        levels, first = np.unique(levels, return_index=True)
        codes = codes[first]
    if len(levels) < 2:
        raise FormatError(f"{spec.name}: fewer than two representable values")
    positive = levels[levels > 0.0]
    levels.setflags(write=False)
    codes.setflags(write=False)
    boundaries = 0.5 * (levels[:-1] + levels[1:])
    boundaries.setflags(write=False)
    return LevelTable(
        spec=spec,
        levels=levels,
        codes=codes,
        boundaries=boundaries,
        max_value=float(np.max(np.abs(levels))),
        min_positive=float(positive[0]),
        rounding=spec.rounding,
    )


def round_to_level(x, table: LevelTable):
    """Round ``x`` to the nearest level of ``table``, saturating at the ends.

    Ties follow ``table.rounding``. Exact tables return ``x`` unchanged.
    Scalars come back as Python floats, arrays as float64 arrays.
    """
    if table.is_exact:
        out = np.asarray(x, dtype=np.float64)
    else:
        out = table.levels[table.round_index(x)]
    return float(out) if np.ndim(out) == 0 else out


def level_code(x_level, table: LevelTable):
    """Integer code of a representable value (inverse of :func:`code_level`)."""
    if table.is_exact:
        raise FormatError("exact format has no codes")
    x = np.asarray(x_level, dtype=np.float64)
    idx = np.searchsorted(table.levels, x)
    idx_c = np.minimum(idx, len(table.levels) - 1)
    if np.any(table.levels[idx_c] != x):
        raise FormatError(f"value(s) not representable in {table.name}")
    out = table.codes[idx_c]
    return int(out) if out.ndim == 0 else out


@lru_cache(maxsize=None)
def _code_lookup(table: LevelTable) -> tuple[np.ndarray, np.ndarray]:
    size = 1 << table.bits
    lut = np.full(size, np.nan)
    valid = np.zeros(size, dtype=bool)
    lut[table.codes] = table.levels
    valid[table.codes] = True
    return lut, valid


def code_level(code, table: LevelTable):
    """Value encoded by ``code`` in ``table``."""
    if table.is_exact:
        raise FormatError("exact format has no codes")
    lut, valid = _code_lookup(table)
    c = np.asarray(code, dtype=np.int64)
    if np.any((c < 0) | (c >= len(lut))) or not np.all(valid[np.clip(c, 0, len(lut) - 1)]):
        raise FormatError(f"code(s) out of range for {table.name}")
    out = lut[c]
    return float(out) if out.ndim == 0 else out


# Registry ------------------------------------------------------------------

_SPECS = {
    "e2m1": FloatFormatSpec("e2m1", exponent_bits=2, mantissa_bits=1, signed=True),
    "e4m3": FloatFormatSpec("e4m3", exponent_bits=4, mantissa_bits=3, signed=True,
                            finite_convention="extended-finite"),
    "ue4m3": FloatFormatSpec("ue4m3", exponent_bits=4, mantissa_bits=3, signed=False,
                             finite_convention="extended-finite"),
    "ue5m3": FloatFormatSpec("ue5m3", exponent_bits=5, mantissa_bits=3, signed=False),
    "ue4m4": FloatFormatSpec("ue4m4", exponent_bits=4, mantissa_bits=4, signed=False,
                             bias=7),
    "ue5m1": FloatFormatSpec("ue5m1", exponent_bits=5, mantissa_bits=1, signed=False),
    "ue4m2": FloatFormatSpec("ue4m2", exponent_bits=4, mantissa_bits=2, signed=False),
    "e8m0": FloatFormatSpec("e8m0", exponent_bits=8, mantissa_bits=0, signed=False,
                            subnormals=False, finite_convention="extended-finite"),
    "bf16": FloatFormatSpec("bf16", exponent_bits=8, mantissa_bits=7, signed=True,
                            finite_convention="ieee"),
    "int4": FloatFormatSpec("int4", kind="integer-symmetric", int_max=7),
    "exact": FloatFormatSpec("exact", kind="exact"),
}

FORMAT_NAMES = tuple(_SPECS)


def get_spec(name: str) -> FloatFormatSpec:
    try:
        return _SPECS[name.lower()]
    except KeyError:
        raise FormatError(
            f"unknown format {name!r}; known: {', '.join(FORMAT_NAMES)}"
        ) from None


@lru_cache(maxsize=None)
def _table_for(spec: FloatFormatSpec) -> LevelTable:
    return enumerate_levels(spec)


def get_format(name_or_spec: Union[str, FloatFormatSpec, LevelTable]) -> LevelTable:
    """Resolve a registry name, spec, or table into a (cached) LevelTable.

    Strings ending in ``.json`` are loaded as custom spec documents.
    """
    if isinstance(name_or_spec, LevelTable):
        return name_or_spec
    if isinstance(name_or_spec, FloatFormatSpec):
        return _table_for(name_or_spec)
    if name_or_spec.lower().endswith(".json"):
        return _table_for(load_spec(name_or_spec))
    return _table_for(get_spec(name_or_spec))


def load_spec(path: Union[str, Path]) -> FloatFormatSpec:
    """Load a custom format from a JSON document of FloatFormatSpec fields."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return FloatFormatSpec.from_dict(doc)
