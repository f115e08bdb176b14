"""Event streams to spectra to a beta^2/2 limit, driven by an ExperimentConfig."""

from __future__ import annotations

from .analysis import LimitResult, Spectrum, beta_limit, histogram, subtract, upper_limit_counts
from .simulate import EventTable, run_factors


def spectra(config, events_on: EventTable, events_off: EventTable) -> tuple[Spectrum, Spectrum]:
    edges = config.analysis.bin_edges
    area = config.layout().detector_area_cm2
    inc = config.analysis.include_vetoed
    plan = config.run
    return (
        histogram(events_on, edges, inc, plan.duration_current, area),
        histogram(events_off, edges, inc, plan.duration_nocurrent, area),
    )


def limit_from_spectra(config, spec_on: Spectrum, spec_off: Spectrum) -> LimitResult:
    a = config.analysis
    excess, sigma = subtract(spec_on, spec_off, a.roi)
    n_up = upper_limit_counts(excess, sigma, a.confidence_sigma)
    acceptance, det_eff, capture, _ = run_factors(config)
    return beta_limit(
        n_up, config.run.budget, capture, acceptance.acceptance_with_attenuation, det_eff,
        excess=excess, sigma=sigma, confidence_sigma=a.confidence_sigma,
    )


def analyze(config, events_on: EventTable, events_off: EventTable) -> LimitResult:
    return limit_from_spectra(config, *spectra(config, events_on, events_off))
