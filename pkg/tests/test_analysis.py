import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from pepsim import analysis
from pepsim.analysis import RegionOfInterest, Spectrum, beta_limit, histogram, make_bin_edges, subtract, upper_limit_counts
from pepsim.physics import ElectronBudget
from pepsim.simulate import EventTable

N_NEW = 2.157e27
BUDGET = ElectronBudget(1.0, N_NEW * 1.602176634e-19)
EDGES = make_bin_edges(1.0, 20.0, 0.05)


def events(energies, vetoed=None):
    energies = np.asarray(energies, dtype=float)
    n = len(energies)
    return EventTable(
        time=np.zeros(n),
        energy=energies,
        cell_id=np.zeros(n, dtype=np.int64),
        origin=np.ones(n, dtype=np.int8),
        vetoed=np.zeros(n, dtype=bool) if vetoed is None else np.asarray(vetoed, dtype=bool),
        correlated=np.zeros(n, dtype=bool),
        hit_dt=np.full(n, np.nan),
    )


def roi_spectrum(count, exposure, edges=EDGES, energy=7.6):
    return histogram(events(np.full(count, energy)), edges, exposure=exposure)


# -------------------------------------------------------------- histogram


def test_histogram_empty():
    spec = histogram(events([]), EDGES)
    assert spec.total == 0 and spec.overflow == 0
    assert len(spec.counts) == len(EDGES) - 1


def test_histogram_edge_is_lower_inclusive():
    spec = histogram(events([7.4, 7.45, 1.0, 20.0, 0.5]), EDGES)
    assert spec.counts[np.searchsorted(EDGES, 7.4)] == 1
    assert spec.counts[np.searchsorted(EDGES, 7.45)] == 1
    assert spec.counts[0] == 1
    assert spec.overflow == 2  # 20.0 is outside the right-open last bin, 0.5 below range


def test_histogram_uniform_chisquare():
    rng = np.random.default_rng(0)
    edges = np.linspace(0.0, 10.0, 11)
    spec = histogram(events(rng.uniform(0, 10, 10_000)), edges)
    assert stats.chisquare(spec.counts).pvalue > 0.001


def test_histogram_skips_vetoed_unless_asked():
    ev = events([7.6, 7.6, 7.6], vetoed=[True, False, True])
    assert histogram(ev, EDGES).total == 1
    assert histogram(ev, EDGES, include_vetoed=True).total == 3


def test_histogram_rejects_unsorted_edges():
    with pytest.raises(ValueError):
        histogram(events([1.0]), [1.0, 3.0, 2.0])


@given(st.lists(st.floats(0.0, 25.0), max_size=300), st.integers(1, 7))
def test_histogram_shard_independent(energies, shards):
    ev = events(energies)
    a = histogram(ev, EDGES)
    b = histogram(ev, EDGES, shards=shards)
    assert np.array_equal(a.counts, b.counts) and a.overflow == b.overflow


def test_bin_edges_must_divide_range():
    with pytest.raises(ValueError):
        make_bin_edges(1.0, 2.0, 0.3)
    assert len(EDGES) == 381
    assert EDGES[128] == 7.4 and EDGES[138] == 7.9


# -------------------------------------------------------------- spectrum


@given(st.lists(st.floats(1.0, 19.99), max_size=400), st.sampled_from([1, 2, 5, 10]))
def test_rebin_preserves_roi_counts(energies, factor):
    spec = histogram(events(energies), EDGES)
    assert spec.rebin(factor).total == spec.total
    assert spec.rebin(factor).roi_counts((7.0, 8.0)) == spec.roi_counts((7.0, 8.0))


def test_roi_must_align_with_edges():
    with pytest.raises(ValueError, match="bin edge"):
        roi_spectrum(3, 1.0).roi_counts((7.41, 7.9))


def test_spectrum_csv_roundtrip():
    rng = np.random.default_rng(3)
    spec = histogram(events(rng.uniform(1, 20, 1000)), EDGES, exposure=40.0, detector_area=6.0)
    text = spec.to_csv()
    assert text.splitlines()[0] == "bin_low_keV,bin_high_keV,counts"
    back = Spectrum.from_csv(text, 40.0, 6.0)
    assert np.array_equal(back.counts, spec.counts)
    assert np.array_equal(back.bin_edges, spec.bin_edges)
    assert back.to_csv() == text


def test_spectrum_addition_needs_same_binning():
    a = roi_spectrum(2, 1.0)
    assert (a + a).total == 4
    with pytest.raises(ValueError):
        a + roi_spectrum(2, 1.0, edges=make_bin_edges(1.0, 20.0, 0.1))


def test_roi_validation():
    with pytest.raises(ValueError):
        RegionOfInterest(7.9, 7.4)
    assert tuple(RegionOfInterest(7.4, 7.9)) == (7.4, 7.9)


# --------------------------------------------------------------- subtract


def test_subtract_identical():
    spec = roi_spectrum(50, 10.0)
    assert subtract(spec, spec, (7.4, 7.9)) == (0.0, 10.0)


def test_subtract_worked_example():
    excess, sigma = subtract(roi_spectrum(120, 40.0), roi_spectrum(210, 70.0), (7.4, 7.9))
    assert excess == pytest.approx(0.0, abs=1e-12)
    assert sigma == pytest.approx(math.sqrt(188.5714286), rel=1e-9)
    assert sigma == pytest.approx(13.73, abs=0.005)


def test_subtract_no_background():
    excess, sigma = subtract(roi_spectrum(16, 40.0), roi_spectrum(0, 70.0), (7.4, 7.9))
    assert (excess, sigma) == (16.0, 4.0)


def test_subtract_zero_exposure():
    with pytest.raises(ValueError):
        subtract(roi_spectrum(1, 40.0), roi_spectrum(1, 0.0), (7.4, 7.9))


@given(st.integers(0, 500), st.integers(0, 500), st.floats(1.0, 100.0), st.floats(1.0, 100.0))
def test_subtract_antisymmetric(n_on, n_off, t_on, t_off):
    a, b = roi_spectrum(n_on, t_on), roi_spectrum(n_off, t_off)
    fwd, _ = subtract(a, b, (7.4, 7.9))
    rev, _ = subtract(b, a, (7.4, 7.9))
    # swapping the periods inverts r: excess' = -excess / r
    assert rev == pytest.approx(-fwd * t_off / t_on, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- limits


@pytest.mark.parametrize("excess, sigma, expected", [(0, 10, 30), (-5, 10, 30), (4, 13.73, 45.19)])
def test_upper_limit_counts(excess, sigma, expected):
    assert upper_limit_counts(excess, sigma, 3) == pytest.approx(expected)


def test_upper_limit_negative_sigma():
    with pytest.raises(ValueError):
        upper_limit_counts(1.0, -1.0)


def test_beta_limit_worked_example():
    res = beta_limit(30.0, BUDGET, 0.1, 0.03, 0.99)
    assert res.beta2_over_2_upper == pytest.approx(4.68e-24, rel=1e-3)
    assert res.recompute() == res.beta2_over_2_upper
    assert res.factors == (0.1, 0.03, 0.99)
    assert res.n_new == pytest.approx(N_NEW)


def test_beta_limit_zero_counts():
    assert beta_limit(0.0, BUDGET, 0.1, 0.03, 0.99).beta2_over_2_upper == 0.0


@pytest.mark.parametrize("bad", [dict(capture_factor=0.0), dict(acceptance=0.0), dict(det_eff=0.0)])
def test_beta_limit_zero_denominator(bad):
    kw = dict(capture_factor=0.1, acceptance=0.03, det_eff=0.99) | bad
    with pytest.raises(ValueError):
        beta_limit(10.0, BUDGET, **kw)
    with pytest.raises(ValueError):
        beta_limit(10.0, ElectronBudget(0.0, 1.0), 0.1, 0.03, 0.99)


@given(st.floats(0.1, 1e4), st.floats(1.5, 100.0))
def test_beta_limit_linear_in_counts(n, k):
    a = beta_limit(n, BUDGET, 0.1, 0.03, 0.99).beta2_over_2_upper
    b = beta_limit(k * n, BUDGET, 0.1, 0.03, 0.99).beta2_over_2_upper
    assert b == pytest.approx(k * a, rel=1e-12)


@given(st.floats(1e-3, 1.0), st.floats(1.01, 10.0))
def test_beta_limit_decreasing_in_factors(x, k):
    base = beta_limit(10.0, BUDGET, x, x, x).beta2_over_2_upper
    assert beta_limit(10.0, BUDGET, k * x, x, x).beta2_over_2_upper < base
    assert beta_limit(10.0, BUDGET, x, k * x, x).beta2_over_2_upper < base
    assert beta_limit(10.0, BUDGET, x, x, k * x).beta2_over_2_upper < base
    assert beta_limit(10.0, ElectronBudget(2.0, BUDGET.duration), x, x, x).beta2_over_2_upper < base


def test_limit_result_roundtrip():
    res = beta_limit(45.2, BUDGET, 0.1, 0.03, 0.99, excess=4.0, sigma=13.73)
    assert analysis.LimitResult.from_dict(res.to_dict()) == res


# ----------------------------------------------------------------- gains


def test_gain_table_vip():
    rep = analysis.gain_table_vip()
    assert rep.row("geometry").sensitivity_gain == pytest.approx(1.43, abs=0.01)
    assert rep.row("detector efficiency").sensitivity_gain == pytest.approx(2.06, abs=0.01)
    assert rep.row("current").sensitivity_gain == 2.5
    assert rep.total_signal == pytest.approx(7.366, abs=1e-3)
    assert 7 <= rep.total_sensitivity <= 8


def test_gain_table_identity():
    rep = analysis.gain_table_vip(analysis.VIP2_FACTORS, analysis.VIP2_FACTORS)
    assert all(r.sensitivity_gain == 1.0 for r in rep.rows)


def test_gain_table_upgrade():
    rep = analysis.gain_table_upgrade()
    assert rep.row("new SDDs").sensitivity_gain == pytest.approx(1.33, abs=0.02)
    assert rep.row("passive shielding").sensitivity_gain == pytest.approx(math.sqrt(20))
    assert rep.row("RRS").sensitivity_gain == pytest.approx(math.sqrt(3))
    assert rep.total_sensitivity == pytest.approx(10.28, abs=0.01)
    doc = rep.to_dict()
    assert doc["rows"][1]["background_reduction"] == pytest.approx(math.sqrt(20))


@given(st.lists(st.tuples(st.floats(0.01, 100), st.floats(0.01, 100)), min_size=1, max_size=6))
def test_gain_totals_are_products(pairs):
    rep = analysis.gain_table_upgrade([(f"r{i}", s, b) for i, (s, b) in enumerate(pairs)])
    assert rep.total_sensitivity == pytest.approx(math.prod(r.sensitivity_gain for r in rep.rows), rel=1e-12)
    assert rep.total_signal == pytest.approx(math.prod(s for s, _ in pairs), rel=1e-12)
    for r in rep.rows:
        assert r.sensitivity_gain == pytest.approx(r.signal_factor / math.sqrt(r.background_factor), rel=1e-12)


def test_gain_table_rejects_nonpositive():
    with pytest.raises(ValueError):
        analysis.gain_table_upgrade([("x", 1.0, 0.0)])
    with pytest.raises(ValueError):
        analysis.gain_table_vip({"a": 1.0}, {"b": 1.0})


# ------------------------------------------------------------- projection


@pytest.mark.parametrize(
    "gain, ratio, expected",
    [(1.0, 1.0, 1.4e-29), (10.0, 1.0, 1.4e-30), (10.0, 3 * 365 / 40, 2.68e-31)],
)
def test_project_limit(gain, ratio, expected):
    assert analysis.project_limit(1.4e-29, gain, ratio) == pytest.approx(expected, rel=0.01)


def test_project_limit_rejects_nonpositive():
    with pytest.raises(ValueError):
        analysis.project_limit(1e-29, 0.0, 1.0)
