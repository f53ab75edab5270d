import numpy as np
import pytest

from conftest import oracle_wasserstein
from memflow.errors import DomainError, GridMismatchError, OutOfRangeError, UnsupportedCouplingError
from memflow.measure_flow import (EmpiricalMeasure, EmpiricalMeasureFlow, flow_distance_theta,
                                  identity_pairing_profile, make_cache, moment_norm, optimal_assignment,
                                  theta_weighted, w2_profile, wasserstein)
from memflow.segment_path import GridSpec, point_path


def _measure(rng, M, L=6, d=2, tau=0.8, h=0.1):
    return EmpiricalMeasure(tau, h, rng.standard_normal((M, L, d)))


@pytest.mark.parametrize("k", [1.0, 2.0])
@pytest.mark.parametrize("M", [1, 3, 5])
def test_wasserstein_matches_permutation_oracle(k, M):
    rng = np.random.default_rng(10 * M + int(k))
    for _ in range(5):
        mu, nu = _measure(rng, M), _measure(rng, M)
        assert wasserstein(mu, nu, k) == oracle_wasserstein(mu.atoms, nu.atoms, 0.8, 0.1, k)
        assert wasserstein(mu, nu, k, N=0.2) == oracle_wasserstein(mu.atoms, nu.atoms, 0.8, 0.1, k, 3)


def test_dirac_distance_is_norm_of_difference():
    a = point_path([1.0, 2.0], 0.5, 0.1, 1.0)
    b = point_path([1.0, -1.0], 0.5, 0.1, 1.0)
    assert wasserstein(EmpiricalMeasure.dirac(a), EmpiricalMeasure.dirac(b)) == 3.0


def test_permutation_invariance_and_assignment():
    rng = np.random.default_rng(3)
    mu = _measure(rng, 6)
    perm = rng.permutation(6)
    nu = EmpiricalMeasure(mu.tau, mu.h, mu.atoms[perm])
    cols, dist = optimal_assignment(mu, nu)
    assert dist == 0.0
    assert np.array_equal(perm[cols], np.arange(6))


def test_errors():
    rng = np.random.default_rng(4)
    mu = _measure(rng, 3)
    with pytest.raises(UnsupportedCouplingError):
        wasserstein(mu, _measure(rng, 4))
    with pytest.raises(GridMismatchError):
        wasserstein(mu, _measure(rng, 3, tau=0.5))
    with pytest.raises(DomainError):
        wasserstein(mu, mu, k=0)
    with pytest.raises(OutOfRangeError):
        wasserstein(mu, mu, N=5.0)
    with pytest.raises(DomainError):
        moment_norm(mu, -1)
    assert moment_norm(mu, 0) == 1.0


def _flows(seed, M=6, d=1):
    g = GridSpec(0.1, 0.3, 2.0)
    rng = np.random.default_rng(seed)
    F = EmpiricalMeasureFlow.from_paths(g, 0.7, rng.standard_normal((M, g.n_nodes, d)))
    G = EmpiricalMeasureFlow.from_paths(g, 0.7, rng.standard_normal((M, g.n_nodes, d)))
    return g, F, G


@pytest.mark.parametrize("theta", [0.0, 0.5, 3.0])
def test_pruned_flow_distance_is_exact(theta):
    g, F, G = _flows(5)
    prof = w2_profile(F, G)
    assert flow_distance_theta(F, G, theta) == theta_weighted(prof, g.times(), theta)
    assert np.all(identity_pairing_profile(F, G) >= prof)


def test_flow_distance_independent_of_workers():
    _, F, G = _flows(6, M=20, d=2)
    ref = flow_distance_theta(F, G, 0.4)
    cache = make_cache(F, G)
    assert flow_distance_theta(F, G, 0.4, cache, workers=4) == ref
    assert flow_distance_theta(F, G, 0.4, cache, workers=8) == ref
    assert np.array_equal(w2_profile(F, G, workers=3), w2_profile(F, G))
    with pytest.raises(DomainError):
        flow_distance_theta(F, G, -1.0)


def test_constant_flow_distance():
    g = GridSpec(0.1, 0.3, 1.0)
    a = EmpiricalMeasure(0.7, 0.1, np.zeros((2, g.window, 1)))
    b = EmpiricalMeasure(0.7, 0.1, np.ones((2, g.window, 1)))
    F, G = EmpiricalMeasureFlow.constant_flow(g, a), EmpiricalMeasureFlow.constant_flow(g, b)
    assert flow_distance_theta(F, G, 1.0) == 1.0
    assert flow_distance_theta(F, F, 1.0) == 0.0
