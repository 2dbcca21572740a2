import math

import numpy as np
import pytest

from qtraj.discrete import Strategy
from qtraj.harness import (
    GoodnessOfFit, HarnessException, donsker_statistics, empirical_moments, exponential_wait_test, ks_distance,
    ks_noise, ks_null_threshold, poisson_count_test, run_convergence,
)
from qtraj.model import ObservableSpec
from qtraj.qcore import EXCITED

from conftest import idle_model


def test_ks_distance():
    assert ks_distance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert ks_distance([0.0, 0.0], [1.0, 1.0]) == 1.0
    with pytest.raises(HarnessException, match="nonempty"):
        ks_distance([], [1.0])


def test_ks_threshold():
    assert ks_null_threshold(100, 100) == pytest.approx(1.6276 * math.sqrt(0.02), rel=1e-3)
    assert ks_null_threshold(400, 400) == pytest.approx(0.5 * ks_null_threshold(100, 100))
    assert 0.0 < ks_noise(100, 100) < ks_null_threshold(100, 100)


def test_empirical_moments():
    v = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    mean, cov = empirical_moments(v)
    assert np.array_equal(mean, [0.0, 0.0, 0.0])
    assert cov[0, 0] == pytest.approx(2.0)

    with pytest.raises(HarnessException, match="at least two"):
        empirical_moments(v[:1])


def test_idle_convergence():
    report = run_convergence(
        idle_model(), ObservableSpec.diagonal(), Strategy.constant(0.0), [8, 4], [0.5, 0.25], 50, seed=1,
        reference_dt=1e-2, rho0=EXCITED,
    )
    assert report.n_list == [4, 8]
    assert report.times == [0.25, 0.5]
    assert len(report.checkpoints) == 4
    assert report.reference['integrator'] == 'jump'
    for c in report.checkpoints:
        assert c.mean_gap < 1e-12
        assert c.covariance_gap < 1e-12
    assert set(report.reference_samples) == {0.25, 0.5}
    assert set(report.discrete_samples) == {(4, 0.25), (4, 0.5), (8, 0.25), (8, 0.5)}


def test_convergence_report(desk):
    obs = ObservableSpec.nondiagonal()
    strategy = Strategy.constant(0.5)
    first = run_convergence(desk, obs, strategy, [16, 32], [0.5], 300, seed=2, reference_dt=1e-3, threads=1)
    again = run_convergence(desk, obs, strategy, [16, 32], [0.5], 300, seed=2, reference_dt=1e-3, threads=2)
    assert first.to_dict() == again.to_dict()

    doc = first.to_dict()
    assert doc['reference']['integrator'] == 'diffusive'
    assert doc['ks_null_threshold'] == pytest.approx(ks_null_threshold(300, 300))
    assert set(doc['checkpoints'][0]['ks']) == {'x', 'y', 'z'}
    assert len(first.trend()) == 2
    assert all(0.0 <= d <= 1.0 for d in first.trend())
    assert first.distance(32, 0.5) == first.trend()[1]
    with pytest.raises(HarnessException, match="No checkpoint"):
        first.distance(64, 0.5)


def test_convergence_arguments(desk):
    obs = ObservableSpec.nondiagonal()
    with pytest.raises(HarnessException, match="deterministic or Markovian"):
        run_convergence(desk, obs, Strategy.history(lambda k, h: 0.0), [4], [0.5], 10, seed=0)
    with pytest.raises(HarnessException, match="At least one n"):
        run_convergence(desk, obs, Strategy.constant(0.0), [], [0.5], 10, seed=0)
    with pytest.raises(HarnessException, match="two samples"):
        run_convergence(desk, obs, Strategy.constant(0.0), [4], [0.5], 1, seed=0)


def test_donsker_statistics(desk):
    rows = donsker_statistics(desk, ObservableSpec.nondiagonal(), Strategy.constant(0.2), [16, 64], 400, seed=3)
    assert [r.n for r in rows] == [16, 64]
    for r in rows:
        assert abs(r.w_mean) <= 4 * r.w_se
        assert r.qv_error >= 0.0
        assert set(r.to_dict()) == {'n', 'samples', 'w_mean', 'w_se', 'qv_error', 'qv_error_se'}


def test_poisson_count_test():
    rng = np.random.default_rng(4)
    assert poisson_count_test(rng.poisson(6.0, 2000), 6.0).pvalue > 1e-3
    assert poisson_count_test(rng.poisson(9.0, 2000), 6.0).pvalue < 1e-6

    with pytest.raises(HarnessException, match="positive mean"):
        poisson_count_test([], 6.0)
    with pytest.raises(HarnessException, match="Too few"):
        poisson_count_test([0, 1], 6.0)


def test_exponential_wait_test():
    rng = np.random.default_rng(5)
    assert exponential_wait_test(rng.exponential(1.0, 2000)).passed(1e-3)
    assert not exponential_wait_test(rng.exponential(2.0, 2000)).passed(1e-3)

    with pytest.raises(HarnessException, match="at least one wait"):
        exponential_wait_test([])


def test_goodness_of_fit():
    assert GoodnessOfFit(0.1, 0.5).passed()
    assert not GoodnessOfFit(3.0, 0.001).passed()
