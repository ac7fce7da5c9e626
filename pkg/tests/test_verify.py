"""Invariant suites report sensible verdicts and catch injected faults."""

import pytest

from blockbridge.verify import (
    kappa_simplex_suite,
    mask_enumeration_suite,
    noise_frequency_suite,
    packed_equivalence_suite,
    run_suites,
)


def test_kappa_suite_passes():
    report = kappa_simplex_suite()
    assert report["passed"]
    assert report["worst_sum_err"] <= 1e-12


def test_mask_suite_passes_and_fault_detected():
    assert mask_enumeration_suite()["passed"]
    faulted = mask_enumeration_suite(inject_fault=True)
    assert not faulted["passed"]
    assert faulted["violations"] > 0


def test_noise_suite_small_sample():
    report = noise_frequency_suite(n_samples=50_000)
    assert report["passed"], report


def test_packed_suite_small():
    report = packed_equivalence_suite(instances=8)
    assert report["passed"]
    assert report["max_abs_diff"] <= 1e-10


def test_run_suites_selection_and_unknown():
    report = run_suites(["kappa", "mask"])
    assert report["passed"]
    assert [s["name"] for s in report["suites"]] == ["kappa", "mask"]
    with pytest.raises(KeyError):
        run_suites(["bogus"])
