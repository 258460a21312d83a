"""Monte-Carlo measurement of quantization error on synthetic tensors."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .blockquant import QuantConfig, error_breakdown, quantize_dequantize

FAMILIES = ("normal", "laplace", "uniform", "student-t", "triangular", "logistic")

CURVE_SCHEMA = "mxscale.mse_curve/1"
PAIR_SCHEMA = "mxscale.block_pairs/1"
DEFAULT_SIGMAS = np.logspace(-5.0, 1.0, 48)
CURVE_COLUMNS = ("sigma", "mse", "mse_not_max", "mse_is_max", "mse_zero_scale",
                 "n", "seed", "stderr")


@dataclass(frozen=True)
class DistributionSpec:
    """Zero-mean symmetric family, standardized to unit population variance."""

    family: str = "normal"
    seed: int = 0
    dof: float = 5.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; known: {', '.join(FAMILIES)}")
        if self.family == "student-t" and not self.dof > 2:
            raise ValueError("student-t needs dof > 2 for finite variance")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = {"family": self.family, "seed": self.seed}
        if self.family == "student-t":
            d["dof"] = self.dof
        return d


def _unit_draws(dist: DistributionSpec, n: int) -> np.ndarray:
    rng = np.random.default_rng(dist.seed)
    f = dist.family
    if f == "normal":
        return rng.standard_normal(n)
    if f == "laplace":
        return rng.laplace(0.0, 1.0 / math.sqrt(2.0), n)
    if f == "uniform":
        r = math.sqrt(3.0)
        return rng.uniform(-r, r, n)
    if f == "student-t":
        return rng.standard_t(dist.dof, n) * math.sqrt((dist.dof - 2.0) / dist.dof)
    if f == "triangular":
        c = math.sqrt(6.0)
        return rng.triangular(-c, 0.0, c, n)
    # logistic: variance s^2 pi^2 / 3
    return rng.logistic(0.0, math.sqrt(3.0) / math.pi, n)


def sample_tensor(dist: DistributionSpec, n: int, sigma_target: float = 1.0) -> np.ndarray:
    """``n`` i.i.d. draws scaled so the population std equals ``sigma_target``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return sigma_target * _unit_draws(dist, n)


def mse(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


@dataclass
class MseCurve:
    """(sigma, MSE) series with optional per-role contributions.

    ``source`` is ``"monte-carlo"`` or ``"theory"``. Contributions, when
    present, sum to ``mse``.
    """

    sigma: np.ndarray
    mse: np.ndarray
    not_max: Optional[np.ndarray] = None
    is_max: Optional[np.ndarray] = None
    zero_scale: Optional[np.ndarray] = None
    stderr: Optional[np.ndarray] = None
    n: int = 0
    seed: Optional[int] = None
    source: str = "monte-carlo"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.mse = np.asarray(self.mse, dtype=np.float64)
        if self.sigma.shape != self.mse.shape:
            raise ValueError("sigma and mse must have equal length")
        if np.any(np.diff(self.sigma) <= 0):
            raise ValueError("sigmas must be strictly increasing")
        if np.any(self.mse < 0):
            raise ValueError("mse must be non-negative")
        if self.source not in ("monte-carlo", "theory"):
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def has_contributions(self) -> bool:
        return self.not_max is not None

    def relative_stderr(self) -> Optional[np.ndarray]:
        if self.stderr is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.mse > 0, self.stderr / self.mse, np.inf)

    def rows(self) -> list:
        out = []
        for i, s in enumerate(self.sigma):
            out.append({
                "sigma": float(s),
                "mse": float(self.mse[i]),
                "mse_not_max": None if self.not_max is None else float(self.not_max[i]),
                "mse_is_max": None if self.is_max is None else float(self.is_max[i]),
                "mse_zero_scale": None if self.zero_scale is None else float(self.zero_scale[i]),
                "n": self.n,
                "seed": self.seed,
                "stderr": None if self.stderr is None else float(self.stderr[i]),
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {CURVE_SCHEMA}\n")
        buf.write(f"# source: {self.source}\n")
        buf.write(f"# metadata: {json.dumps(self.metadata, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in self.rows():
            w.writerow(["" if row[c] is None else _fmt(row[c]) for c in CURVE_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"schema": CURVE_SCHEMA, "source": self.source,
                           "metadata": self.metadata, "points": self.rows()}, indent=2)

    @classmethod
    def from_csv(cls, text: str) -> "MseCurve":
        source, meta, lines = "monte-carlo", {}, []
        for line in text.splitlines():
            if line.startswith("# source:"):
                source = line.split(":", 1)[1].strip()
            elif line.startswith("# metadata:"):
                meta = json.loads(line.split(":", 1)[1])
            elif not line.startswith("#"):
                lines.append(line)
        rows = list(csv.DictReader(lines))
        return cls._from_rows(rows, source, meta)

    @classmethod
    def from_json(cls, text: str) -> "MseCurve":
        doc = json.loads(text)
        return cls._from_rows(doc["points"], doc["source"], doc.get("metadata", {}))

    @classmethod
    def _from_rows(cls, rows, source, meta) -> "MseCurve":
        def col(name, cast=float):
            vals = [r.get(name) for r in rows]
            if not vals or any(v in (None, "") for v in vals):
                return None
            return np.array([cast(v) for v in vals])

        n = col("n", int)
        seed = col("seed", int)
        return cls(
            sigma=col("sigma"), mse=col("mse"), not_max=col("mse_not_max"),
            is_max=col("mse_is_max"), zero_scale=col("mse_zero_scale"),
            stderr=col("stderr"), n=int(n[0]) if n is not None else 0,
            seed=int(seed[0]) if seed is not None else None,
            source=source, metadata=meta,
        )


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _measure(x: np.ndarray, cfg: QuantConfig) -> tuple:
    parts = error_breakdown(x, cfg)
    n = parts["n"]
    sums = parts["block_sums"]
    total = parts["not_max"] + parts["is_max"] + parts["zero_scale"]
    # per-block sums are independent; scale their std to the per-element mean
    se = float(np.std(sums, ddof=1) / math.sqrt(len(sums)) * len(sums) / n) if len(sums) > 1 else 0.0
    return (total / n, parts["not_max"] / n, parts["is_max"] / n,
            parts["zero_scale"] / n, se)


def mse_sigma_sweep(dist: DistributionSpec, cfg: QuantConfig,
                    sigmas: Optional[Sequence[float]] = None,
                    n_per_point: int = 2 ** 22, threads: int = 1) -> MseCurve:
    """MSE at each sigma, reusing one base draw (common random numbers).

    Every sigma sees the same unit-variance draw scaled by sigma, so results
    do not depend on ``threads`` or on evaluation order.
    """
    sigmas = np.asarray(DEFAULT_SIGMAS if sigmas is None else sigmas, dtype=np.float64)
    if np.any(np.diff(sigmas) <= 0):
        raise ValueError("sigma grid must be strictly increasing")
    base = sample_tensor(dist, n_per_point, 1.0)

    def point(s):
        return _measure(s * base, cfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            res = list(pool.map(point, sigmas))
    else:
        res = [point(s) for s in sigmas]
    arr = np.array(res)
    return MseCurve(
        sigma=sigmas, mse=arr[:, 0], not_max=arr[:, 1], is_max=arr[:, 2],
        zero_scale=arr[:, 3], stderr=arr[:, 4], n=n_per_point, seed=dist.seed,
        source="monte-carlo",
        metadata={"distribution": dist.to_dict(), **cfg.to_dict()},
    )


@dataclass
class BlockPairComparison:
    """Per-large-block MSE under a small and a large block size."""

    mse_small: np.ndarray
    mse_large: np.ndarray

    @property
    def fraction_above_diagonal(self) -> float:
        if len(self.mse_small) == 0:
            return 0.0
        return float(np.mean(self.mse_small > self.mse_large))

    @property
    def mean_difference(self) -> float:
        return float(np.mean(self.mse_small - self.mse_large))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {PAIR_SCHEMA}\n")
        buf.write(f"# fraction_above_diagonal: {self.fraction_above_diagonal!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("block_index", "mse_small", "mse_large"))
        for i, (a, b) in enumerate(zip(self.mse_small, self.mse_large)):
            w.writerow((i, repr(float(a)), repr(float(b))))
        return buf.getvalue()


def _per_block_mean(sq: np.ndarray, n: int) -> np.ndarray:
    nb = -(-len(sq) // n)
    padded = np.zeros(nb * n)
    padded[: len(sq)] = sq
    counts = np.full(nb, n, dtype=np.float64)
    if len(sq) % n:
        counts[-1] = len(sq) % n
    return padded.reshape(nb, n).sum(axis=1) / counts


def per_block_mse_pair(x, cfg_small: QuantConfig, cfg_large: QuantConfig) -> BlockPairComparison:
    """Quantize ``x`` at two block sizes and compare errors per large block."""
    ns, nl = cfg_small.block_size, cfg_large.block_size
    if nl % ns:
        raise ValueError(f"large block size {nl} is not a multiple of {ns}")
    x = np.asarray(x, dtype=np.float64).ravel()
    sq_small = (quantize_dequantize(x, cfg_small) - x) ** 2
    sq_large = (quantize_dequantize(x, cfg_large) - x) ** 2
    return BlockPairComparison(_per_block_mean(sq_small, nl), _per_block_mean(sq_large, nl))


def find_crossover(a: MseCurve, b: MseCurve) -> list:
    """Sigmas where ``a - b`` changes sign, interpolated in log-log space.

    Returns every crossing in increasing order; an empty list means none.
    """
    if a.sigma.shape != b.sigma.shape or not np.allclose(a.sigma, b.sigma, rtol=1e-12, atol=0):
        raise ValueError("curves are on different sigma grids")
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where((a.mse > 0) & (b.mse > 0), np.log(a.mse / b.mse), a.mse - b.mse)
    sign = np.sign(d)
    ls = np.log(a.sigma)
    out = []
    last_i, last_s = None, 0.0
    for i, s in enumerate(sign):
        if s == 0:
            continue
        if last_i is not None and s != last_s:
            if i - last_i > 1:
                # zero run between opposite signs: report its middle
                out.append(float(math.exp(0.5 * (ls[last_i + 1] + ls[i - 1]))))
            else:
                frac = d[last_i] / (d[last_i] - d[i])
                out.append(float(math.exp(ls[last_i] + frac * (ls[i] - ls[last_i]))))
        last_i, last_s = i, s
    return out


def log_grid(lo: float, hi: float, points: int) -> np.ndarray:
    if not (0 < lo < hi) or points < 2:
        raise ValueError("log grid needs 0 < lo < hi and >= 2 points")
    return np.logspace(math.log10(lo), math.log10(hi), points)


def compare_curves(theory: MseCurve, mc: MseCurve) -> dict:
    """Residual summaries between a theory curve and a Monte-Carlo curve."""
    if not np.allclose(theory.sigma, mc.sigma, rtol=1e-12, atol=0):
        raise ValueError("curves are on different sigma grids")
    rel = np.abs(theory.mse - mc.mse) / np.where(mc.mse > 0, mc.mse, np.inf)
    with np.errstate(divide="ignore"):
        log_res = np.log(theory.mse) - np.log(mc.mse)
    return {
        "relative_deviation": rel,
        "sum_sq_residual": float(np.sum((theory.mse - mc.mse) ** 2)),
        "sum_sq_log_residual": float(np.sum(log_res[np.isfinite(log_res)] ** 2)),
    }
