import math
from dataclasses import replace

import numpy as np
import pytest

from memflow.coefficients import (ASSUMPTION_IDS, Constants, builtin_model, check_assumption, cutoff, evaluate,
                                  kato_admissible, lpq_norm, memory_kernel, random_pair_sampler, truncate_b1,
                                  zero_model)
from memflow.errors import DomainError, ModelError, NumericError, ShapeError
from memflow.measure_flow import EmpiricalMeasure
from memflow.segment_path import GridSpec, WeightedSegment, point_path

GRID = GridSpec(0.01, 4.0, 1.0)


def test_memory_kernel_integrates_constants():
    lam = 2.0
    w = memory_kernel(lam, GRID)
    # left-endpoint rule plus exact tail, so error is O(h)
    assert abs(w.sum() - 1.0 / lam) < GRID.h
    assert w[-1] == 0.0
    assert memory_kernel(lam, GRID, tail_correction=False).sum() < w.sum()


def test_linear_drift_closed_form():
    m = builtin_model("linear_memory_meanfield", {"a": 1.5, "beta": 0.5, "gamma": 0.3}, GRID)
    xi = point_path(2.0, 0.5, GRID.h, GRID.T_hist)
    mu = EmpiricalMeasure(0.5, GRID.h, np.full((3, GRID.window, 1), -1.0))
    ev = evaluate(m, 0.0, xi, mu)
    ksum = memory_kernel(2.0, GRID).sum()
    assert ev.b[0] == pytest.approx(-1.5 * 2.0 + 0.5 * 2.0 * ksum - 0.3, rel=1e-13)
    assert ev.sigma.shape == (1, 1) and ev.sigma[0, 0] == 1.0


def test_constants_of_linear_model():
    m = builtin_model("linear_memory_meanfield", {"a": 1.0, "gamma": 0.3, "sigma0": 0.2}, GRID)
    c = m.constants
    assert (c.K1, c.K2, c.H(3.0)) == (0.0, 0.5 * 0.09, 2 * 0.09)
    assert c.K == pytest.approx(0.04 + 25.0, rel=1e-14)
    assert m.flags.distribution_dependent and not m.flags.tamed
    cubic = builtin_model("cubic_monotone_memory", None, GRID)
    assert cubic.flags.tamed and cubic.constants.K1 == 0.0


def test_model_errors():
    with pytest.raises(ModelError):
        builtin_model("nope", None, GRID)
    with pytest.raises(ModelError):
        builtin_model("linear_memory_meanfield", {"bogus": 1}, GRID)
    with pytest.raises(ModelError):
        builtin_model("linear_memory_meanfield", {"beta": 0.1, "lam": 0.3}, GRID)
    with pytest.raises(ModelError):
        builtin_model("singular_b0_toy", {"beta": 0.4, "p": 4.0, "q": 4.0}, GRID)
    with pytest.raises(ModelError):
        builtin_model("singular_b0_toy", {"p": 3.0, "q": 3.0}, GRID)
    assert builtin_model("singular_b0_toy", {"beta": 0.4, "p": 2.2, "q": 8.0}, GRID).profile.admissible
    with pytest.raises(ModelError):
        Constants(alpha=1.5)


def test_evaluate_errors():
    m = builtin_model("linear_memory_meanfield", {"gamma": 0.3}, GRID)
    xi = point_path(1.0, 0.5, GRID.h, GRID.T_hist)
    with pytest.raises(DomainError):
        evaluate(m, 0.0, xi, None)
    with pytest.raises(ShapeError):
        evaluate(m, 0.0, point_path([1.0, 1.0], 0.5, GRID.h, GRID.T_hist), None)
    bad = replace(zero_model(), drift_b0=lambda t, x: np.full_like(x, np.nan))
    with pytest.raises(NumericError):
        evaluate(bad, 0.0, point_path(1.0, 0.5, GRID.h, GRID.T_hist), None)


def test_singular_drift():
    m = builtin_model("singular_b0_toy", None, GRID)
    x = np.array([[0.25], [-0.25], [0.0], [2.0]])
    b0 = m.drift_b0(0.0, x)
    assert b0[0, 0] == pytest.approx(0.25 ** -0.2) and b0[1, 0] == -b0[0, 0]
    assert b0[2, 0] == 0.0 and b0[3, 0] == 0.0
    seg = np.repeat(x[:, None, :], GRID.window, axis=1)
    capped = m.scheme_drift(0.0, seg, None, 1e-4)
    assert np.all(np.abs(capped[:, 0] + seg[:, -1, 0]) <= 100.0 + 1e-12)


def test_kato():
    assert kato_admissible(4, 4, 1)
    assert not kato_admissible(4, 4, 2)
    assert not kato_admissible(2, 10, 1)
    assert not kato_admissible(math.inf, 10, 1)


def test_lpq_norm_of_constant():
    res = lpq_norm(lambda r, x: np.ones(1), 2, 2, 0.0, 1.0, (-1, 1), dx=0.05)
    assert res.value == pytest.approx(math.sqrt(2.0), rel=1e-12)
    with pytest.raises(DomainError):
        lpq_norm(lambda r, x: 1.0, 2, 2, 1.0, 0.0, (0, 1))
    with pytest.raises(DomainError):
        lpq_norm(lambda r, x: 1.0, 2, 2, 0.0, 1.0, (0, 1), dx=0.3)


def test_lpq_norm_of_power_singularity():
    # int_{-1}^{1} |x|^{-p beta} dx = 2 / (1 - p beta)
    m = builtin_model("singular_b0_toy", {"beta": 0.2}, GRID)
    res = lpq_norm(m.profile.f0, 4.0, 4.0, 0.0, 1.0, (0, 0), dx=0.001)
    exact = (2.0 / (1.0 - 0.8)) ** 0.25
    assert res.value == pytest.approx(exact, rel=0.05)
    assert res.argmax_center == (0.0,)


def test_cutoff_and_truncation():
    assert cutoff(1.5) == 0.5
    assert cutoff(0.3) == 1.0 and cutoff(2.0) == 0.0
    u = np.linspace(1, 2, 101)
    assert np.all(np.diff(cutoff(u)) <= 0)
    m = builtin_model("linear_memory_meanfield", {"beta": 0.5}, GRID)
    t = truncate_b1(m, 1.0, GRID.h)
    small = np.full((1, GRID.window, 1), 0.5)
    big = np.full((1, GRID.window, 1), 3.0)
    assert t.drift_b1(0, small, None)[0, 0] == m.drift_b1(0, small, None)[0, 0]
    assert t.drift_b1(0, big, None)[0, 0] == 0.0
    with pytest.raises(DomainError):
        truncate_b1(m, 0.0, GRID.h)


@pytest.mark.parametrize("model,params", [
    ("linear_memory_meanfield", {"beta": 0.5, "gamma": 0.3}),
    ("cubic_monotone_memory", {"beta": 0.3}),
])
def test_builtin_models_satisfy_assumptions(model, params):
    g = GridSpec(0.05, 2.0, 1.0)
    m = builtin_model(model, params, g)
    for aid in ("H'", "A1", "A3'"):
        if model.startswith("cubic") and aid == "A3'":
            continue
        rep = check_assumption(m, aid, random_pair_sampler(m, g, np.random.default_rng(0)), 200, g.h)
        assert rep.passed, rep.to_dict()
    rep = check_assumption(m, "A1", random_pair_sampler(m, g, np.random.default_rng(0)), 20, g.h)
    assert set(rep.extras["modulus"]) == {"0.1", "0.01", "0.001"}


def test_violation_is_reported_with_witness():
    g = GridSpec(0.05, 1.0, 1.0)
    m = builtin_model("linear_memory_meanfield", None, g)
    expanding = replace(m, drift_b0=lambda t, x: 5.0 * x)
    rep = check_assumption(expanding, "H'", random_pair_sampler(m, g, np.random.default_rng(1)), 50, g.h)
    assert not rep.passed and rep.max_violation > 0
    assert {"index", "xi0", "eta0"} <= set(rep.witness)
    with pytest.raises(DomainError):
        check_assumption(m, "H9", [], 1, g.h)


def test_assumption_ids_are_known():
    assert set(ASSUMPTION_IDS) == {"A1", "A2-profile", "A3'", "H2", "H'"}


def test_segment_drift_uses_history():
    m = builtin_model("linear_memory_meanfield", {"beta": 1.0, "a": 0.0}, GRID)
    v = np.zeros(GRID.window)
    v[0] = 1.0
    xi = WeightedSegment(0.5, GRID.h, v)
    assert evaluate(m, 0.0, xi, None).b[0] == memory_kernel(2.0, GRID)[0]
