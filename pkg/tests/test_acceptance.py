"""Acceptance gate. Each criterion prints one PASS/FAIL line."""

import math
import statistics
import time

import numpy as np
import pytest

from pepsim import analysis, cli, config as cfg, geometry, physics, pipeline, simulate
from pepsim.rng import THREADS_ENV

# Independent oracle: NIST mu/rho (cm^2/g) log-log interpolated by hand.
NIST_CU = {6.0: 115.6, 7.7: 58.3528048, 8.05: 51.6597094}
NIST_SI = {6.0: 147.0, 7.7: 72.1340982, 8.05: 63.5232092}


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{name}: {detail}"

    return report


@pytest.fixture(autouse=True)
def _no_thread_cap(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)


def test_a1_table1_gains(verdict):
    t0 = time.perf_counter()
    doc = cli.cmd_gains("vip")
    dt = time.perf_counter() - t0
    g = {r["name"]: r["sensitivity_gain"] for r in doc["rows"]}
    ok = (
        abs(g["geometry"] - 1.43) <= 0.01
        and abs(g["detector efficiency"] - 2.06) <= 0.01
        and g["current"] == 2.5
        and 7 <= doc["total_sensitivity"] <= 8
        and dt < 1
    )
    verdict("A1", ok, f"rows {g['geometry']:.4f}, {g['detector efficiency']:.4f}, {g['current']}; total {doc['total_sensitivity']:.3f}; {dt:.3f}s")


def test_a2_table2_gains(verdict):
    t0 = time.perf_counter()
    doc = cli.cmd_gains("upgrade")
    dt = time.perf_counter() - t0
    g = [r["sensitivity_gain"] for r in doc["rows"]]
    ok = (
        abs(g[0] - 1.33) <= 0.02
        and abs(g[1] - 4.47) <= 0.01
        and abs(g[2] - 1.732) <= 0.001
        and doc["total_sensitivity"] >= 10
        and dt < 1
    )
    verdict("A2", ok, f"rows {g[0]:.4f}, {g[1]:.4f}, {g[2]:.4f}; total {doc['total_sensitivity']:.3f}; {dt:.3f}s")


def test_a3_solid_angle(verdict):
    t0 = time.perf_counter()
    res = geometry.solid_angle_fraction(geometry.vip2_2016(), 10_000_000, seed=2016, workers=1)
    dt = time.perf_counter() - t0
    ok = 0.06 <= res.solid_angle_fraction <= 0.08 and dt < 60
    verdict("A3", ok, f"solid angle {res.solid_angle_fraction:.5f} +- {res.mc_standard_error:.1e}; {dt:.1f}s")


def test_a4_acceptance_after_calibration(verdict):
    thickness = geometry.calibrate_strip_thickness(n_samples=1_000_000)
    res = geometry.geometric_acceptance(geometry.vip2_2016(thickness), 7.70, 2_000_000, seed=4)
    ok = 0.02 <= res.acceptance_with_attenuation <= 0.04
    verdict("A4", ok, f"calibrated thickness {thickness:.4f} mm; acceptance {res.acceptance_with_attenuation:.5f}")


def test_a5_calibrated_limit(verdict):
    t0 = time.perf_counter()
    base = cfg.preset("vip2-2016")
    limits = []
    for seed in range(50):
        c = base.with_seed(seed)
        limits.append(pipeline.analyze(c, *simulate.simulate_run(c)).beta2_over_2_upper)
    dt = time.perf_counter() - t0
    median = statistics.median(limits)
    ok = 1.4e-29 / 3 <= median <= 1.4e-29 * 3 and dt < 300
    verdict("A5", ok, f"median limit {median:.3e} over 50 seeds (min {min(limits):.2e}, max {max(limits):.2e}); {dt:.0f}s")


def test_a6_projection(verdict):
    p = analysis.project_limit(1.4e-29, 10, 27.4)
    verdict("A6", 1e-31 <= p <= 5e-31, f"projected {p:.3e}")


def test_a7_coverage(verdict):
    t0 = time.perf_counter()
    injected = 1e-26
    base = cfg.preset("vip2-2016", run={"injected_beta2_over_2": injected})
    covered = 0
    n = 200
    for seed in range(n):
        c = base.with_seed(seed)
        covered += pipeline.analyze(c, *simulate.simulate_run(c)).beta2_over_2_upper >= injected
    dt = time.perf_counter() - t0
    ok = covered / n >= 0.99 and dt < 600
    verdict("A7", ok, f"coverage {covered}/{n} = {covered / n:.3f}; {dt:.0f}s")


def test_a8_determinism_across_workers(verdict):
    t0 = time.perf_counter()
    c = cfg.preset("vip2-2016", seed=8, run={"injected_beta2_over_2": 1e-28})
    outputs = []
    for workers in (1, 2, 8):
        on, off = simulate.simulate_run(c, workers=workers)
        outputs.append((on.to_csv(), off.to_csv()))
    dt = time.perf_counter() - t0
    ok = outputs[0] == outputs[1] == outputs[2] and dt < 120
    verdict("A8", ok, f"{len(outputs[0][0].splitlines()) - 1} + {len(outputs[0][1].splitlines()) - 1} events identical for 1/2/8 workers; {dt:.1f}s")


def test_a9_physics_oracles(verdict):
    worst = 0.0
    path_cm = 10e-4
    for e in (6.0, 7.7, 8.05):
        got = physics.attenuation_fraction(e, physics.copper(), path_cm)
        want = math.exp(-NIST_CU[e] * physics.COPPER_DENSITY * path_cm)
        worst = max(worst, abs(got / want - 1))
        got = simulate.detection_efficiency(e, 450.0)
        want = 1 - math.exp(-NIST_SI[e] * physics.SILICON_DENSITY * 450e-4)
        worst = max(worst, abs(got / want - 1))
    sdd = simulate.detection_efficiency(8.05, 450.0)
    ok = worst <= 0.02 and sdd >= 0.98
    verdict("A9", ok, f"worst relative deviation {worst:.2e}; det_eff(8.05 keV, 450 um) = {sdd:.5f}")
