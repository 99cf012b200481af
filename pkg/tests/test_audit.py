import math

import numpy as np
import pytest

from adlm import audit
from adlm import mechanism as mech


def test_constant_statistic_has_zero_sensitivity():
    res = audit.bruteforce_sensitivity(lambda x: np.zeros(2), audit.grid_points((0.0, 1.0), 2), 3)
    assert res.value == 0.0


def test_mean_of_scaled_features():
    res = audit.bruteforce_sensitivity(lambda x: x.mean(axis=0), audit.grid_points((0.0, 1 / math.sqrt(2)), 2), 3)
    assert res.value == pytest.approx(2 * (1 / math.sqrt(2)) / 3)


@pytest.mark.parametrize("d,n", [(1, 2), (2, 3), (3, 3), (2, 4)])
def test_relevance_bound_tight(d, n):
    check = audit.check_relevance_sensitivity(d, n)
    assert check.bounded and check.attained
    assert check.observed == pytest.approx(2 * d / n)


def test_extremal_pair_is_neighbor():
    check = audit.bruteforce_sensitivity(audit.relevance_statistic, audit.grid_points((-1.0, 1.0), 2), 3)
    pair = check.pair
    assert pair.differing_row == 2
    diff = np.abs(audit.relevance_statistic(pair.first) - audit.relevance_statistic(pair.second)).sum()
    assert diff == pytest.approx(check.value)


def test_neighbor_pair_validation():
    with pytest.raises(ValueError):
        audit.NeighborPair(np.zeros((2, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        audit.NeighborPair(np.zeros((2, 1)), np.zeros((3, 1)))


def test_first_layer_and_loss_bounded():
    assert audit.check_h0_sensitivity(2, 2, 3).bounded
    assert audit.check_h0_sensitivity(3, 1, 2).bounded
    assert audit.check_loss_sensitivity(2, 2, 3).bounded
    assert audit.check_loss_sensitivity(1, 3, 2).bounded


def test_enumeration_budget():
    with pytest.raises(audit.EnumerationBudgetExceeded):
        audit.bruteforce_sensitivity(audit.relevance_statistic, audit.grid_points((-1.0, 0.0, 1.0), 4), 6,
                                     max_pairs=1000)


def test_analytic_equal_inputs():
    rep = audit.analytic_ratio_check(np.ones(3), np.ones(3), 0.1, 0.01)
    assert rep.max_log_ratio == 0.0 and rep.passed


@pytest.mark.parametrize("eps", [0.1, 1.0, 3.0])
def test_analytic_at_equality(eps):
    delta = 2.5
    rep = audit.analytic_ratio_check(0.0, delta, delta / eps, eps)
    assert rep.max_log_ratio == pytest.approx(eps, rel=1e-12)
    assert rep.passed


@pytest.mark.parametrize("eps", [0.1, 1.0])
def test_analytic_catches_half_scale(eps):
    rep = audit.analytic_ratio_check(0.0, 1.0, 1.0 / (2 * eps), eps)
    assert rep.max_log_ratio == pytest.approx(2 * eps, rel=1e-12)
    assert rep.status == audit.FAIL


def test_multicoordinate_ratio_adds_up():
    a, b = audit.extremal_pair(6.0, 3)
    rep = audit.analytic_ratio_check(a, b, 6.0 / 0.5, 0.5)
    assert rep.max_log_ratio == pytest.approx(0.5)


def test_monte_carlo_identical_inputs():
    pair = audit.NeighborPair(np.array([[0.0], [0.0]]), np.array([[0.0], [1e-300]]))
    rep = audit.monte_carlo_ratio(audit.laplace_output(1.0), pair, 1.0, 100_000, seed=3)
    # no bin is provably different; point estimates stay inside their confidence slack
    assert rep.passed and rep.params["max_lower_bound"] <= 0.0
    assert rep.max_log_ratio <= rep.slack


def test_monte_carlo_laplace_passes():
    pair = audit.NeighborPair(np.zeros((2, 1)), np.array([[0.0], [1.0]]))
    rep = audit.monte_carlo_ratio(audit.laplace_output(1.0), pair, 1.0, 100_000, seed=1)
    assert rep.passed
    assert rep.max_log_ratio <= 1.0 + rep.slack


def test_monte_carlo_no_noise_flagged():
    pair = audit.NeighborPair(np.zeros((2, 1)), np.array([[0.0], [1.0]]))
    rep = audit.monte_carlo_ratio(audit.laplace_output(0.0), pair, 1.0, 100_000)
    assert rep.status in (audit.FAIL, audit.INCONCLUSIVE)
    assert rep.max_log_ratio == math.inf


def test_monte_carlo_half_scale_detected():
    pair = audit.NeighborPair(np.zeros((2, 1)), np.array([[0.0], [1.0]]))
    rep = audit.monte_carlo_ratio(audit.laplace_output(0.5), pair, 1.0, 200_000, seed=2)
    assert rep.status == audit.FAIL


def test_monte_carlo_requires_enough_trials():
    pair = audit.NeighborPair(np.zeros((2, 1)), np.array([[0.0], [1.0]]))
    with pytest.raises(ValueError):
        audit.monte_carlo_ratio(audit.laplace_output(1.0), pair, 1.0, 1000)


def test_stage_checks_and_mutations():
    budget = mech.PrivacyBudget.split(1.0)
    ok = audit.stage_checks(budget, 16, 4, 5, 3, 100, 10)
    assert all(r.passed for r in ok)
    for r in ok:
        assert r.max_log_ratio == pytest.approx(1 / 3, rel=1e-9)
    broken = audit.stage_checks(budget, 16, 4, 5, 3, 100, 10, scale_factor=0.5)
    assert not any(r.passed for r in broken)


def test_stage_checks_with_adaptive_allocation(rng):
    budget = mech.PrivacyBudget.split(0.9)
    alloc = mech.budget_ratios(rng.uniform(-1, 1, 16), budget.eps2)
    reps = audit.stage_checks(budget, 16, 4, 5, 3, 100, 10, allocation=alloc)
    assert reps[1].passed and reps[1].max_log_ratio == pytest.approx(budget.eps2, rel=1e-9)


def test_run_audit_report(tmp_path):
    report = audit.run_audit(d=16, h0_units=4, top_units=5, n_classes=3, batch_size=10, n_records=100)
    assert report.passed
    assert report.tightness["relevance"]
    text = report.to_json()
    assert '"passed": true' in text
