"""Acceptance criteria 1-10; each test prints one PASS/FAIL line.

Training runs go to ``$SCDMD_LAB_OUT/acceptance`` when the variable is set,
otherwise to a temporary directory.  The criteria 4-6 share one sweep.
"""

import os
from pathlib import Path

import pytest

from scdmd_lab.harness import acceptance as acc
from scdmd_lab.harness.report import write_report
from scdmd_lab.harness.runner import OUT_ENV

RESULTS = {}


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    root = os.environ.get(OUT_ENV)
    return Path(root) / "acceptance" if root else tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def sweep(out):
    return acc.nonar_sweep(out)


@pytest.fixture
def check(acceptance_lines):
    def _check(res):
        RESULTS[res.id] = res
        acceptance_lines[res.id] = res.line()
        print(res.line())
        assert res.passed, res.summary

    return _check


def test_criterion_01_gradients(check):
    check(acc.criterion_1())


def test_criterion_02_teacher(check):
    check(acc.criterion_2())


def test_criterion_03_losses_and_metrics(check):
    check(acc.criterion_3())


@pytest.mark.slow
def test_criterion_04_defect(check, sweep):
    check(acc.criterion_4(sweep))


@pytest.mark.slow
def test_criterion_05_consistency(check, sweep):
    check(acc.criterion_5(sweep))


@pytest.mark.slow
def test_criterion_06_quality_vs_steps(check, sweep):
    check(acc.criterion_6(sweep))


@pytest.mark.slow
def test_criterion_07_ar_ablation(check, out):
    check(acc.criterion_7(out))


def test_criterion_08_sampler_laws(check):
    check(acc.criterion_8())


@pytest.mark.slow
def test_criterion_09_determinism(check, out):
    check(acc.criterion_9(out))


def test_criterion_10_ablation_identities(check):
    check(acc.criterion_10())


def test_report_written(out):
    report = write_report(out, list(RESULTS.values()))
    assert report.exists()
