"""Analytical MSE of microscaling quantization for Gaussian tensors.

Two regimes are modeled for ``X ~ N(0, sigma^2)`` split into blocks of ``N``:

* exact (unquantized) scales ``s = x_max / m``: only the ``N - 1``
  non-maximum elements of each block carry error;
* quantized scales ``s = Q_scale(x_max / m)``: the total error splits into
  the non-maximum elements, the block maximum itself (no longer exact) and
  blocks whose scale rounds to zero.

Everything is evaluated in the normalized variable ``t = x_max / sigma`` so
the ``sigma^2`` prefactor factors out cleanly. Integrals over element
bins use closed-form Gaussian partial moments; the outer integral over the
block maximum uses composite Gauss-Legendre quadrature with breakpoints at
every scale-bin and element-decision edge, so each panel is smooth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import optimize, special

from .formats import LevelTable, get_format

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# Standard normal helpers ---------------------------------------------------

def std_normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    out = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return float(out) if out.ndim == 0 else out


def std_normal_cdf(x):
    out = special.ndtr(np.asarray(x, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def _normal_mass(v, w):
    """Phi(w) - Phi(v) for v <= w without cancellation in either tail."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    upper = special.ndtr(-v) - special.ndtr(-w)
    lower = special.ndtr(w) - special.ndtr(v)
    mid = 0.5 * (special.erf(w / SQRT2) - special.erf(v / SQRT2))
    return np.where(v > 0.0, upper, np.where(w < 0.0, lower, mid))


def _xphi(x):
    """x * phi(x) with the limits at +-inf taken as 0."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        out = x * INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return np.where(np.isfinite(x), out, 0.0)


def gaussian_sq_moment(v, w, c):
    """Integral of (u - c)^2 phi(u) over [v, w]; limits may be infinite."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    m0 = _normal_mass(v, w)
    phi_v = std_normal_pdf(np.where(np.isfinite(v), v, 0.0)) * np.isfinite(v)
    phi_w = std_normal_pdf(np.where(np.isfinite(w), w, 0.0)) * np.isfinite(w)
    out = (1.0 + c * c) * m0 + _xphi(v) - _xphi(w) - 2.0 * c * (phi_v - phi_w)
    return np.maximum(out, 0.0)


def _truncated_second_moment(t):
    """E[U^2 | |U| < t] for standard normal U."""
    t = np.asarray(t, dtype=np.float64)
    small = t < 1.0
    ts = np.where(small, t, 0.0)
    t2 = ts * ts
    num = np.zeros_like(ts)
    den = np.zeros_like(ts)
    term = np.ones_like(ts)
    for k in range(18):
        num += term / (2 * k + 3)
        den += term / (2 * k + 1)
        term = term * (-t2 / (2.0 * (k + 1)))
    series = t2 * num / den
    tl = np.where(small, 1.0, t)
    with np.errstate(invalid="ignore"):
        direct = 1.0 - 2.0 * _xphi(tl) / special.erf(tl / SQRT2)
    out = np.where(small, series, np.where(np.isinf(t), 1.0, direct))
    return float(out) if out.ndim == 0 else out


# Block-maximum distribution ------------------------------------------------

def _log_xmax_pdf_std(t, n: int):
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_between = np.log(special.erf(t / SQRT2))
    if n == 1:
        log_between = np.zeros_like(t)
    return math.log(2.0 * n) + (n - 1) * log_between - 0.5 * t * t - 0.5 * math.log(2 * math.pi)


def xmax_pdf(theta, sigma: float, n: int):
    """Density of the absolute maximum of ``n`` i.i.d. N(0, sigma^2) draws."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.where(theta >= 0.0,
                   np.exp(_log_xmax_pdf_std(np.abs(theta) / sigma, n)) / sigma, 0.0)
    return float(out) if out.ndim == 0 else out


def xmax_cdf(theta, sigma: float, n: int):
    t = np.maximum(np.asarray(theta, dtype=np.float64), 0.0) / sigma
    out = special.erf(t / SQRT2) ** n
    return float(out) if out.ndim == 0 else out


def xmax_sf(theta, sigma: float, n: int):
    """1 - xmax_cdf, accurate in the upper tail."""
    t = np.maximum(np.asarray(theta, dtype=np.float64), 0.0) / sigma
    with np.errstate(divide="ignore"):
        out = -np.expm1(n * np.log1p(-special.erfc(t / SQRT2)))
    return float(out) if out.ndim == 0 else out


def _xmax_interval_mass(lo, hi, sigma: float, n: int):
    """P(lo <= x_max < hi), choosing the CDF or survival side per interval."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    by_cdf = xmax_cdf(hi, sigma, n) - xmax_cdf(lo, sigma, n)
    by_sf = xmax_sf(lo, sigma, n) - xmax_sf(hi, sigma, n)
    use_sf = xmax_cdf(lo, sigma, n) > 0.5
    return np.maximum(np.where(use_sf, by_sf, by_cdf), 0.0)


# Problem description -------------------------------------------------------

@dataclass(frozen=True)
class Quadrature:
    """Outer-integral settings: ``panels`` equal panels of ``order``
    Gauss-Legendre nodes over the region where the block-maximum density
    exceeds ``pdf_floor`` times its peak (plus extra panels at breakpoints)."""

    panels: int = 128
    order: int = 16
    pdf_floor: float = 1e-18
    max_breakpoints: int = 50_000

    def __post_init__(self):
        if self.panels * self.order < 64:
            raise ValueError("quadrature needs at least 64 nodes")

    @property
    def nodes(self) -> int:
        return self.panels * self.order

    def refined(self, factor: int = 2) -> "Quadrature":
        return Quadrature(self.panels * factor, self.order, self.pdf_floor,
                          self.max_breakpoints)


@dataclass(frozen=True)
class TheoryProblem:
    """Inputs to the analytical model.

    ``zero_bin="consistent"`` places the all-zero event at
    ``x_max < m * s_min / 2`` (what ``s = Q(x_max / m)`` implies);
    ``"literal"`` uses ``x_max < s_min / 2`` for comparison.
    ``not_max_model="level-truncated"`` truncates the non-maximum elements at
    ``m * s_k`` for every scale level; ``"conditional"`` integrates the
    actual truncation point ``x_max`` inside each scale bin.
    """

    block_size: int
    element_table: LevelTable
    scale_table: LevelTable
    sigma: float
    quadrature: Quadrature = field(default_factory=Quadrature)
    zero_bin: str = "consistent"
    not_max_model: str = "conditional"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.block_size < 1:
            raise ValueError("block size must be >= 1")
        if self.zero_bin not in ("consistent", "literal"):
            raise ValueError(f"unknown zero_bin {self.zero_bin!r}")
        if self.not_max_model not in ("level-truncated", "conditional"):
            raise ValueError(f"unknown not_max_model {self.not_max_model!r}")
        lv = self.element_table.levels
        if self.element_table.is_exact or not np.array_equal(lv, -lv[::-1]):
            raise ValueError("element table must be a symmetric quantized format")

    @classmethod
    def make(cls, element, scale, block_size: int, sigma: float, **kw) -> "TheoryProblem":
        return cls(block_size, get_format(element), get_format(scale), sigma, **kw)

    @property
    def m(self) -> float:
        return self.element_table.max_value

    @property
    def exact_scales(self) -> bool:
        return self.scale_table.is_exact

    def with_sigma(self, sigma: float) -> "TheoryProblem":
        return TheoryProblem(self.block_size, self.element_table, self.scale_table,
                             sigma, self.quadrature, self.zero_bin, self.not_max_model)


@dataclass(frozen=True)
class ContributionBreakdown:
    not_max: float
    is_max: float
    zero_scale: float

    @property
    def total(self) -> float:
        return self.not_max + self.is_max + self.zero_scale

    def shares(self) -> dict:
        tot = self.total
        if tot == 0.0:
            return {"not_max": 0.0, "is_max": 0.0, "zero_scale": 0.0}
        return {"not_max": self.not_max / tot, "is_max": self.is_max / tot,
                "zero_scale": self.zero_scale / tot}


# Element bins --------------------------------------------------------------

def _half_bins(table: LevelTable):
    """Nonnegative element levels with their (unclipped) Voronoi limits.

    The zero bin is halved to [0, b_0]; the top bin extends to +inf.
    """
    q = table.nonnegative_levels
    pos_bounds = table.boundaries[table.boundaries > 0.0]
    lo = np.concatenate([[0.0], pos_bounds])
    hi = np.concatenate([pos_bounds, [np.inf]])
    return q, lo, hi


def element_bins(table: LevelTable):
    """(q_j, a_j, b_j) over all levels, outer limits clipped to +-m."""
    m = table.max_value
    q = table.levels
    a = np.concatenate([[-m], table.boundaries])
    b = np.concatenate([table.boundaries, [m]])
    return q, a, b


def bin_mse_conditional(q_j, a_j, b_j, alpha, sigma, n, m: float = 6.0):
    """Error of the elements falling in one element bin, given ``alpha = s/sigma``.

    ``sigma^2 / (2 Phi(m alpha) - 1) * (N - 1)/N * int (u - q alpha)^2 phi(u) du``
    over ``u`` in ``[alpha a_j, alpha b_j]``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0.0):
        raise ValueError("alpha must be > 0")
    a_j = np.asarray(a_j, dtype=np.float64)
    b_j = np.asarray(b_j, dtype=np.float64)
    inner = np.where(b_j > a_j,
                     gaussian_sq_moment(alpha * a_j, alpha * b_j, alpha * q_j), 0.0)
    norm = special.erf(m * alpha / SQRT2)
    out = sigma ** 2 / norm * (n - 1) / n * inner
    return float(out) if np.ndim(out) == 0 else out


def _cond_elem_err(t, alpha, half_bins):
    """E[(U - alpha Q(U/alpha))^2 | |U| < t] for standard normal U.

    Vectorized over matching arrays ``t`` (truncation) and ``alpha``
    (scale / sigma); saturation beyond the top level is included.
    """
    q, lo, hi = half_bins
    t = np.asarray(t, dtype=np.float64)[:, None]
    alpha = np.asarray(alpha, dtype=np.float64)[:, None]
    v = np.minimum(alpha * lo[None, :], t)
    with np.errstate(invalid="ignore"):
        w = np.minimum(alpha * hi[None, :], t)
    w = np.where(np.isnan(w), t, w)
    part = np.where(w > v, gaussian_sq_moment(v, w, alpha * q[None, :]), 0.0)
    norm = special.erf(t[:, 0] / SQRT2)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = 2.0 * part.sum(axis=1) / norm
    return np.where(norm > 0.0, out, 0.0)


# Scale bins ----------------------------------------------------------------

def scale_bins(table: LevelTable):
    """(s_k, a_k, b_k) over nonnegative scale levels; a_0 = 0, top b = inf."""
    s = table.nonnegative_levels
    mids = 0.5 * (s[:-1] + s[1:])
    a = np.concatenate([[0.0], mids])
    b = np.concatenate([mids, [np.inf]])
    return s, a, b


def scale_pdf(s, sigma: float, n: int, m: float):
    """Density of the unquantized scale ``x_max / m``."""
    s = np.asarray(s, dtype=np.float64)
    return m * xmax_pdf(m * s, sigma, n)


def scale_bin_mass(k: int, sigma: float, n: int, m: float, scale_table: LevelTable) -> float:
    """Probability that the quantized scale equals the k-th nonnegative level."""
    _, a, b = scale_bins(scale_table)
    return float(_xmax_interval_mass(m * a[k], m * b[k], sigma, n))


def scale_bin_masses(sigma: float, n: int, m: float, scale_table: LevelTable) -> np.ndarray:
    _, a, b = scale_bins(scale_table)
    return _xmax_interval_mass(m * a, m * b, sigma, n)


def zero_scale_boundary(problem: TheoryProblem) -> float:
    """Block maximum below which the scale rounds to zero (0 if no zero level)."""
    table = problem.scale_table
    if table.is_exact or not table.has_zero:
        return 0.0
    half = 0.5 * table.min_positive
    return half if problem.zero_bin == "literal" else problem.m * half


def zero_scale_probability(problem: TheoryProblem) -> float:
    return float(xmax_cdf(zero_scale_boundary(problem), problem.sigma, problem.block_size))


# Outer quadrature ----------------------------------------------------------

def _domain(n: int, floor: float) -> tuple[float, float]:
    """t-range where the normalized block-maximum density exceeds floor * peak."""
    if n == 1:
        t_peak = 0.0
    else:
        t_peak = optimize.minimize_scalar(
            lambda t: -_log_xmax_pdf_std(t, n), bounds=(1e-6, 12.0),
            method="bounded", options={"xatol": 1e-10}).x
    level = float(_log_xmax_pdf_std(t_peak, n)) + math.log(floor)

    def f(t):
        return float(_log_xmax_pdf_std(t, n)) - level

    t_hi = optimize.brentq(f, t_peak, 60.0, xtol=1e-12)
    if n == 1 or f(1e-300) >= 0.0:
        t_lo = 0.0
    else:
        t_lo = optimize.brentq(f, 1e-300, t_peak, xtol=1e-300, rtol=1e-12)
    return t_lo, t_hi


_GL_CACHE: dict = {}


def _gauss_legendre(order: int):
    if order not in _GL_CACHE:
        _GL_CACHE[order] = np.polynomial.legendre.leggauss(order)
    return _GL_CACHE[order]


def _nodes(edges: np.ndarray, order: int):
    x, w = _gauss_legendre(order)
    lo, hi = edges[:-1], edges[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return t, wt


def _breakpoints(problem: TheoryProblem, t_lo: float, t_hi: float) -> np.ndarray:
    """Scale-bin edges and element-decision edges, in t units, inside the domain."""
    sigma, m = problem.sigma, problem.m
    s, a, b = scale_bins(problem.scale_table)
    lo_k, hi_k = m * a / sigma, m * b / sigma
    keep = (hi_k > t_lo) & (lo_k < t_hi)
    s, lo_k, hi_k = s[keep], lo_k[keep], hi_k[keep]
    if len(s) > problem.quadrature.max_breakpoints:
        return np.empty(0)
    beta = problem.element_table.boundaries
    beta = beta[beta > 0.0]
    # element decisions within scale bin k: x_max / s_k == beta
    elem = (s[:, None] * beta[None, :]) / sigma
    inside = (elem > lo_k[:, None]) & (elem < hi_k[:, None]) & (s[:, None] > 0)
    pts = np.concatenate([lo_k, hi_k[np.isfinite(hi_k)], elem[inside]])
    return pts[(pts > t_lo) & (pts < t_hi)]


def _outer_grid(problem: TheoryProblem, with_breakpoints: bool):
    quad = problem.quadrature
    t_lo, t_hi = _domain(problem.block_size, quad.pdf_floor)
    edges = np.linspace(t_lo, t_hi, quad.panels + 1)
    if with_breakpoints:
        edges = np.unique(np.concatenate([edges, _breakpoints(problem, t_lo, t_hi)]))
    t, wt = _nodes(edges, quad.order)
    density = np.exp(_log_xmax_pdf_std(t, problem.block_size))
    return t, wt * density


def _check(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise ArithmeticError(f"non-finite {what} from quadrature")
    return value


# Exact scales -------------------------------------------------------------

def mse_exact_scales(problem: TheoryProblem) -> float:
    """Per-element MSE with unquantized scales ``s = x_max / m``."""
    if not problem.exact_scales:
        raise ValueError("mse_exact_scales needs an exact scale format")
    n = problem.block_size
    if n == 1:
        return 0.0
    t, w = _outer_grid(problem, with_breakpoints=False)
    err = _cond_elem_err(t, t / problem.m, _half_bins(problem.element_table))
    val = problem.sigma ** 2 * (n - 1) / n * float(np.dot(w, err))
    return _check(val, "exact-scale MSE")


# Quantized scales ----------------------------------------------------------

def mse_not_max(problem: TheoryProblem) -> float:
    """Error carried by the N - 1 non-maximum elements of nonzero-scale blocks."""
    if problem.exact_scales:
        raise ValueError("mse_not_max needs a quantized scale format")
    n, sigma, m = problem.block_size, problem.sigma, problem.m
    if n == 1:
        return 0.0
    halves = _half_bins(problem.element_table)
    if problem.not_max_model == "conditional":
        t, w = _outer_grid(problem, with_breakpoints=True)
        s = _quantized_scale_at(problem, t)
        nz = s > 0.0
        err = _cond_elem_err(t[nz], s[nz] / sigma, halves)
        val = sigma ** 2 * (n - 1) / n * float(np.dot(w[nz], err))
        return _check(val, "not-max MSE")
    s, a, b = scale_bins(problem.scale_table)
    p = _xmax_interval_mass(m * a, m * b, sigma, n)
    use = (s > 0.0) & (p > 0.0)
    alpha = s[use] / sigma
    err = _cond_elem_err(m * alpha, alpha, halves)
    val = sigma ** 2 * (n - 1) / n * float(np.dot(p[use], err))
    return _check(val, "not-max MSE")


def _quantized_scale_at(problem: TheoryProblem, t: np.ndarray) -> np.ndarray:
    raw = problem.sigma * t / problem.m
    table = problem.scale_table
    return table.levels[table.round_index(raw)]


def err_max(x, s_k, element_table: LevelTable):
    """Squared error of the block maximum ``x`` quantized with scale ``s_k``."""
    x = np.asarray(x, dtype=np.float64)
    s_k = np.asarray(s_k, dtype=np.float64)
    if np.any(s_k <= 0.0):
        raise ValueError("scale must be > 0")
    q = element_table.levels[element_table.round_index(x / s_k)]
    out = (q * s_k - x) ** 2
    return float(out) if out.ndim == 0 else out


def mse_is_max(problem: TheoryProblem) -> float:
    """Error of the block maximum itself, weighted 1/N."""
    if problem.exact_scales:
        raise ValueError("mse_is_max needs a quantized scale format")
    sigma = problem.sigma
    t, w = _outer_grid(problem, with_breakpoints=True)
    s = _quantized_scale_at(problem, t)
    nz = s > 0.0
    err = err_max(sigma * t[nz], s[nz], problem.element_table)
    val = float(np.dot(w[nz], err)) / problem.block_size
    return _check(val, "is-max MSE")


def mse_zero_scale(problem: TheoryProblem) -> float:
    """``P(s = 0) * E[X^2 | |X| < theta_0]`` for zero-scale blocks."""
    if problem.exact_scales:
        raise ValueError("mse_zero_scale needs a quantized scale format")
    theta0 = zero_scale_boundary(problem)
    if theta0 == 0.0:
        return 0.0
    sigma = problem.sigma
    t0 = theta0 / sigma
    prob = xmax_cdf(theta0, sigma, problem.block_size)
    return _check(prob * sigma ** 2 * float(_truncated_second_moment(t0)), "zero-scale MSE")


def mse_quantized_scales(problem: TheoryProblem) -> ContributionBreakdown:
    return ContributionBreakdown(
        not_max=mse_not_max(problem),
        is_max=mse_is_max(problem),
        zero_scale=mse_zero_scale(problem),
    )


def evaluate(problem: TheoryProblem) -> ContributionBreakdown:
    """Breakdown for either regime; exact scales put everything in not_max."""
    if problem.exact_scales:
        return ContributionBreakdown(mse_exact_scales(problem), 0.0, 0.0)
    return mse_quantized_scales(problem)


def theory_curve(element, scale, block_size: int, sigmas: Sequence[float],
                 quadrature: Optional[Quadrature] = None, zero_bin: str = "consistent",
                 not_max_model: str = "conditional"):
    """Evaluate the model over a sigma grid into an :class:`MseCurve`."""
    from .experiments import MseCurve

    sigmas = np.asarray(sigmas, dtype=np.float64)
    base = TheoryProblem.make(element, scale, block_size, float(sigmas[0]),
                              quadrature=quadrature or Quadrature(),
                              zero_bin=zero_bin, not_max_model=not_max_model)
    parts = [evaluate(base.with_sigma(float(s))) for s in sigmas]
    return MseCurve(
        sigma=sigmas,
        mse=np.array([p.total for p in parts]),
        not_max=np.array([p.not_max for p in parts]),
        is_max=np.array([p.is_max for p in parts]),
        zero_scale=np.array([p.zero_scale for p in parts]),
        source="theory",
        metadata={
            "element_format": base.element_table.name,
            "scale_format": base.scale_table.name,
            "block_size": block_size,
            "zero_bin": zero_bin,
            "not_max_model": not_max_model,
            "quadrature_nodes": base.quadrature.nodes,
        },
    )


def sweep_block_sizes(element, scale, block_sizes: Iterable[int], sigmas, **kw) -> dict:
    return {n: theory_curve(element, scale, n, sigmas, **kw) for n in block_sizes}
