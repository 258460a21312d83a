import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from mxscale.blockquant import QuantConfig
from mxscale.experiments import DistributionSpec, find_crossover, log_grid, mse_sigma_sweep
from mxscale.formats import FORMAT_NAMES, FloatFormatSpec, get_format, round_to_level
from mxscale.theory import (ContributionBreakdown, Quadrature, TheoryProblem, bin_mse_conditional,
                            element_bins, err_max, evaluate, gaussian_sq_moment,
                            mse_exact_scales, mse_is_max, mse_not_max, mse_zero_scale,
                            scale_bin_mass, scale_bin_masses, scale_bins, scale_pdf,
                            std_normal_cdf, std_normal_pdf, sweep_block_sizes, theory_curve,
                            xmax_cdf, xmax_pdf, xmax_sf, zero_scale_probability)

E2M1 = get_format("e2m1")
UE4M3 = get_format("ue4m3")


def problem(scale="ue4m3", n=16, sigma=1.0, elem="e2m1", **kw):
    return TheoryProblem.make(elem, scale, n, sigma, **kw)


def mc(scale, n, sigmas, elem="e2m1", samples=2 ** 20, seed=1):
    return mse_sigma_sweep(DistributionSpec(seed=seed), QuantConfig.make(elem, scale, n),
                           sigmas, samples)


# Normal helpers

def test_normal_values():
    assert std_normal_cdf(0.0) == 0.5
    assert std_normal_pdf(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)
    assert std_normal_cdf(1.96) == pytest.approx(0.9750021048517795, abs=1e-12)
    assert std_normal_cdf(-30.0) == pytest.approx(stats.norm.cdf(-30.0), rel=1e-10)


@given(st.floats(-8, 8), st.floats(-8, 8), st.floats(-5, 5))
def test_gaussian_sq_moment_against_quadrature(v, w, c):
    v, w = min(v, w), max(v, w)
    ref, _ = integrate.quad(lambda u: (u - c) ** 2 * stats.norm.pdf(u), v, w, epsabs=1e-14)
    assert gaussian_sq_moment(v, w, c) == pytest.approx(ref, rel=1e-9, abs=1e-13)


def test_gaussian_sq_moment_infinite_limit():
    assert gaussian_sq_moment(-np.inf, np.inf, 0.0) == pytest.approx(1.0, rel=1e-14)
    assert gaussian_sq_moment(0.0, np.inf, 1.0) == pytest.approx(1.0 - 2 * std_normal_pdf(0.0),
                                                                 rel=1e-14)


# Block maximum

def test_xmax_pdf_n1_is_half_normal():
    th = np.linspace(0, 5, 11)
    assert np.allclose(xmax_pdf(th, 2.0, 1), 2 / 2.0 * stats.norm.pdf(th / 2.0), rtol=1e-13)
    assert xmax_pdf(-1.0, 1.0, 4) == 0.0


@pytest.mark.parametrize("n", [1, 8, 32])
@pytest.mark.parametrize("sigma", [0.01, 1.0])
def test_xmax_pdf_normalized(n, sigma):
    total, _ = integrate.quad(xmax_pdf, 0, 12 * sigma, args=(sigma, n), epsabs=1e-13,
                              epsrel=1e-13, limit=200)
    assert abs(total - 1.0) <= 1e-10


@pytest.mark.parametrize("n", [2, 8, 32])
def test_xmax_cdf_matches_order_statistic(n):
    th = np.array([0.3, 1.0, 2.2, 3.5])
    assert np.allclose(xmax_cdf(th, 1.0, n), (2 * stats.norm.cdf(th) - 1) ** n, rtol=1e-12)
    assert np.allclose(xmax_sf(th, 1.0, n), 1 - (2 * stats.norm.cdf(th) - 1) ** n, rtol=1e-9)
    d = 1e-6
    assert np.allclose((xmax_cdf(th + d, 1.0, n) - xmax_cdf(th - d, 1.0, n)) / (2 * d),
                       xmax_pdf(th, 1.0, n), rtol=1e-6)


def test_xmax_sf_upper_tail():
    assert xmax_sf(12.0, 1.0, 16) == pytest.approx(16 * 2 * stats.norm.sf(12.0), rel=1e-6)


def test_xmax_mode_increases_with_n():
    th = np.linspace(0, 6, 60001)
    modes = [th[np.argmax(xmax_pdf(th, 1.0, n))] for n in (2, 4, 8, 16, 32, 64)]
    assert all(a < b for a, b in zip(modes, modes[1:]))


# Element-bin distortion

def test_bin_mse_zero_width():
    assert bin_mse_conditional(1.0, 1.0, 1.0, 0.5, 1.0, 8) == 0.0


def test_bin_sum_reproduces_truncated_gaussian_distortion():
    q, a, b = element_bins(E2M1)
    parts = bin_mse_conditional(q, a, b, 1.0, 1.0, 10 ** 12, m=6.0)

    def sq_err(u):
        return (u - round_to_level(u, E2M1)) ** 2 * stats.norm.pdf(u)

    pts = list(E2M1.boundaries)
    ref, _ = integrate.quad(sq_err, -6, 6, points=pts, epsabs=1e-14, limit=200)
    ref /= 2 * stats.norm.cdf(6) - 1
    assert float(np.sum(parts)) == pytest.approx(ref, rel=1e-9)


@pytest.mark.parametrize("c", [0.1, 3.0, 1e3])
def test_bin_mse_sigma_squared(c):
    q, a, b = element_bins(E2M1)
    base = bin_mse_conditional(q, a, b, 0.4, 1.0, 8)
    assert np.allclose(bin_mse_conditional(q, a, b, 0.4, c, 8), c * c * base, rtol=1e-13)


# Exact scales

def test_exact_scales_match_mc():
    th = mse_exact_scales(problem("exact", 16, 1.0))
    ref = mc("exact", 16, [1.0]).mse[0]
    assert th == pytest.approx(ref, rel=0.01)


@pytest.mark.parametrize("c", [2.0, 10.0])
@pytest.mark.parametrize("sigma", [1e-2, 1.0])
def test_exact_scales_homogeneous(c, sigma):
    a = mse_exact_scales(problem("exact", 16, sigma))
    b = mse_exact_scales(problem("exact", 16, c * sigma))
    assert b == pytest.approx(c * c * a, rel=1e-9)


def test_exact_scales_increase_with_n():
    vals = [mse_exact_scales(problem("exact", n, 1.0)) for n in (2, 4, 8, 16, 32, 64)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_exact_scales_n1_is_zero():
    assert mse_exact_scales(problem("exact", 1, 1.0)) == 0.0


# Scale bins

@pytest.mark.parametrize("sigma", [1e-4, 1e-2, 1.0])
def test_scale_bin_masses_sum_to_one(sigma):
    assert abs(float(np.sum(scale_bin_masses(sigma, 8, 6.0, UE4M3))) - 1.0) <= 1e-8


@pytest.mark.parametrize("name", ["ue4m3", "ue5m3", "ue5m1", "e8m0", "bf16"])
@pytest.mark.parametrize("sigma", [1e-5, 3e-3, 1.0, 30.0])
@pytest.mark.parametrize("n", [1, 8, 64])
def test_probability_closure(name, sigma, n):
    masses = scale_bin_masses(sigma, n, 6.0, get_format(name))
    assert abs(float(np.sum(masses)) - 1.0) <= 1e-8


def test_scale_bin_mass_matches_pdf_quadrature():
    s, a, b = scale_bins(UE4M3)
    sigma, n = 0.01, 8
    for k in range(0, len(s), 7):
        hi = min(b[k], 1.0)
        ref, _ = integrate.quad(scale_pdf, a[k], hi, args=(sigma, n, 6.0), epsabs=1e-15,
                                epsrel=1e-12, limit=200)
        assert scale_bin_mass(k, sigma, n, 6.0, UE4M3) == pytest.approx(ref, rel=1e-8, abs=1e-15)


def test_zero_scale_probability_limits():
    assert zero_scale_probability(problem(n=8, sigma=1e-5)) > 0.999
    assert zero_scale_probability(problem(n=8, sigma=1.0)) < 1e-12
    for s in (1e-4, 1e-3, 3e-3):
        p8 = zero_scale_probability(problem(n=8, sigma=s))
        p32 = zero_scale_probability(problem(n=32, sigma=s))
        assert p32 <= p8


# Quantized-scale terms

def test_not_max_dominates_large_sigma():
    for s in (0.5, 1.0, 4.0):
        b = evaluate(problem(n=16, sigma=s))
        assert b.shares()["not_max"] > 0.9
        assert b.not_max >= 0


def test_refined_scale_table_recovers_exact_scales():
    fine = get_format(FloatFormatSpec("ue5m16", exponent_bits=5, mantissa_bits=16, signed=False))
    q = evaluate(problem(fine, 16, 1.0))
    e = mse_exact_scales(problem("exact", 16, 1.0))
    assert abs(q.not_max / e - 1) < 0.01
    assert q.is_max / q.total < 1e-6
    assert abs(q.total / e - 1) < 0.01


def test_err_max_zero_on_grid():
    for s in (0.5, 2.0 ** -9, 3.0):
        for lvl in E2M1.levels:
            assert err_max(s * lvl, s, E2M1) == 0.0
    assert err_max(7.0, 1.0, E2M1) == 1.0
    with pytest.raises(ValueError):
        err_max(1.0, 0.0, E2M1)


def test_is_max_share_grows_as_n_shrinks():
    grid = log_grid(1e-3, 1.0, 37)
    share = {}
    for n in (4, 8, 16, 32):
        c = theory_curve("e2m1", "ue4m3", n, grid)
        share[n] = c.is_max / c.mse
    peaks = [share[n].max() for n in (4, 8, 16, 32)]
    assert all(a > b for a, b in zip(peaks, peaks[1:]))
    at = np.searchsorted(grid, 2e-2)
    assert share[4][at] > share[8][at] > share[16][at] > share[32][at]


def test_is_max_share_reversed_inside_zero_rounding_region():
    # at 5e-3 small blocks are mostly zero-rounded, which squeezes their
    # is_max share below that of large blocks; MC shows the same
    th = {n: evaluate(problem(n=n, sigma=5e-3)).shares() for n in (4, 32)}
    assert th[4]["zero_scale"] > 0.8 and th[4]["is_max"] < th[32]["is_max"]
    for n in (4, 32):
        ref = mc("ue4m3", n, [5e-3])
        assert th[n]["is_max"] == pytest.approx(ref.is_max[0] / ref.mse[0], rel=0.03)


def test_zero_scale_regime():
    b = evaluate(problem(n=8, sigma=1e-5))
    assert b.zero_scale == pytest.approx(1e-10, rel=0.01)
    assert b.shares()["zero_scale"] > 0.99
    assert mse_zero_scale(problem(n=8, sigma=1.0)) < 1e-12


def test_breakdown_additivity():
    for s in (1e-4, 3e-3, 2e-2, 1.0):
        p = problem(n=8, sigma=s)
        b = evaluate(p)
        assert b.total == b.not_max + b.is_max + b.zero_scale
        assert b.not_max == mse_not_max(p) and b.is_max == mse_is_max(p)
    assert ContributionBreakdown(0.0, 0.0, 0.0).shares() == {"not_max": 0.0, "is_max": 0.0,
                                                              "zero_scale": 0.0}


def test_n1_puts_everything_in_is_max():
    b = evaluate(problem(n=1, sigma=0.1))
    assert b.not_max == 0.0 and b.is_max > 0
    ref = mc("ue4m3", 1, [0.1]).mse[0]
    assert b.total == pytest.approx(ref, rel=0.01)


def test_quadrature_refinement_stable():
    for scale in ("ue4m3", "ue5m1", "exact"):
        for s in (1e-3, 1e-2, 1.0):
            p = problem(scale, 16, s)
            fine = TheoryProblem(p.block_size, p.element_table, p.scale_table, s,
                                 p.quadrature.refined())
            assert evaluate(fine).total == pytest.approx(evaluate(p).total, rel=1e-3)


@pytest.mark.parametrize("n", [2, 4, 8, 16, 32, 64, 128, 256])
def test_outputs_finite_and_nonnegative(n):
    grid = log_grid(1e-6, 100, 9)
    for scale in ("ue4m3", "exact"):
        c = theory_curve("e2m1", scale, n, grid)
        for arr in (c.mse, c.not_max, c.is_max, c.zero_scale):
            assert np.all(np.isfinite(arr)) and np.all(arr >= 0)


def test_problem_validation():
    with pytest.raises(ValueError):
        problem(sigma=0.0)
    with pytest.raises(ValueError):
        problem(n=0)
    with pytest.raises(ValueError):
        problem(zero_bin="other")
    with pytest.raises(ValueError):
        problem(not_max_model="other")
    with pytest.raises(ValueError):
        problem(elem="ue4m3")
    with pytest.raises(ValueError):
        Quadrature(panels=3, order=16)
    with pytest.raises(ValueError):
        mse_exact_scales(problem("ue4m3"))
    with pytest.raises(ValueError):
        mse_is_max(problem("exact"))


# Theory against Monte Carlo

@pytest.mark.parametrize("elem", ["e2m1", "int4"])
@pytest.mark.parametrize("scale", [n for n in FORMAT_NAMES
                                   if n not in ("e2m1", "int4", "e4m3")])
def test_oracle_equivalence_registry(elem, scale):
    grid = log_grid(1e-5, 10, 10)
    th = theory_curve(elem, scale, 16, grid)
    ref = mc(scale, 16, grid, elem=elem, seed=2)
    gate = ref.relative_stderr() <= 0.01
    assert gate.sum() >= 5
    rel = np.abs(th.mse - ref.mse) / ref.mse
    assert np.all(rel[gate] <= 0.05)


def test_consistent_zero_bin_beats_literal_against_mc():
    s = 1e-3
    ref = mc("ue4m3", 16, [s]).mse[0]
    cons = theory_curve("e2m1", "ue4m3", 16, [s]).mse[0]
    lit = theory_curve("e2m1", "ue4m3", 16, [s], zero_bin="literal").mse[0]
    assert abs(cons / ref - 1) < 0.01
    assert abs(lit / ref - 1) > 0.5


def test_level_truncated_not_max_model_agrees_away_from_spike():
    for s in (0.1, 1.0):
        a = theory_curve("e2m1", "ue4m3", 16, [s]).mse[0]
        b = theory_curve("e2m1", "ue4m3", 16, [s], not_max_model="level-truncated").mse[0]
        assert b == pytest.approx(a, rel=1e-3)


def test_crossovers_near_expected():
    grid = log_grid(1e-4, 10, 121)
    curves = sweep_block_sizes("e2m1", "ue4m3", (8, 16), grid)
    assert find_crossover(curves[8], curves[16]) == [pytest.approx(2e-2, rel=0.25)]
    c8, c16 = (theory_curve("int4", "ue4m3", n, grid) for n in (8, 16))
    assert find_crossover(c8, c16) == [pytest.approx(1.5e-2, rel=0.25)]
    c8, c16 = (theory_curve("e2m1", "ue4m2", n, grid) for n in (8, 16))
    assert find_crossover(c8, c16) == [pytest.approx(3.8e-2, rel=0.1)]


def test_ue5m3_pointwise_below_ue4m3():
    grid = log_grid(1e-4, 1e-1, 25)
    a = theory_curve("e2m1", "ue5m3", 8, grid).mse
    b = theory_curve("e2m1", "ue4m3", 8, grid).mse
    assert np.all(a <= b * (1 + 1e-9))


def test_curve_metadata_and_schema():
    c = theory_curve("e2m1", "ue4m3", 16, [0.01, 0.1])
    assert c.source == "theory" and c.has_contributions
    assert c.metadata["block_size"] == 16 and c.metadata["quadrature_nodes"] >= 2048
    assert "mse_zero_scale" in c.to_csv().splitlines()[3]
