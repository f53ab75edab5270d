import math

import numpy as np
import pytest

from memflow.coefficients import builtin_model, zero_model
from memflow.coupling import (CouplingConfig, TestFunction, decay_fit, gradient_estimate_check,
                              log_harnack_defect, replay_log_weights, run_coupling, trend_test, zeta_bar_bound)
from memflow.errors import DomainError, ShapeError
from memflow.sde_engine import NoisePlan, simulate_interacting
from memflow.segment_path import GridSpec


def _const(values, grid):
    v = np.asarray(values, dtype=float)
    return np.repeat(v[:, None, None], grid.window, axis=1)


def _linear(grid, **kw):
    return builtin_model("linear_memory_meanfield", kw, grid)


def test_identical_systems_have_unit_weights():
    g = GridSpec(0.05, 0.5, 2.0)
    m = _linear(g)
    x = _const(np.linspace(-1, 1, 12), g)
    run = run_coupling(m, x, x, None, None, CouplingConfig.for_model(m, g), NoisePlan(0, g.h))
    assert np.all(run.log_weight == 0.0)
    assert np.all(np.exp(run.log_weight) == 1.0)
    assert np.array_equal(run.X, run.Y)
    assert np.all(run.ess == 12.0) and np.all(run.entropy == 0.0)


def test_gap_follows_deterministic_recursion():
    g = GridSpec(0.01, 0.5, 2.0)
    a, kappa = 1.0, 3.0
    m = _linear(g, a=a, sigma0=0.7)
    run = run_coupling(m, _const([1.0] * 3, g), _const([0.0] * 3, g), None, None,
                       CouplingConfig(g, 0.5, kappa, 0.25), NoisePlan(1, g.h))
    gap = (run.X - run.Y)[:, g.window - 1:, 0]
    exact = (1.0 - (a + kappa) * g.h) ** np.arange(g.n_steps + 1)
    assert np.max(np.abs(gap - exact)) < 1e-12
    zeta = kappa * exact[:-1] / 0.7
    assert np.max(np.abs(run.zeta_tilde[0, :, 0] - zeta)) < 1e-12


def test_ledger_replays_exactly():
    g = GridSpec(0.05, 0.3, 1.0)
    m = _linear(g, gamma=0.3)
    init_mu, init_nu = _const(np.linspace(0, 1, 10), g), _const(np.linspace(1, 2, 10), g)
    plan = NoisePlan(2, g.h)
    _, fmu = simulate_interacting(m, init_mu, g, plan, phase="flow_mu")
    _, fnu = simulate_interacting(m, init_nu, g, plan, phase="flow_nu")
    run = run_coupling(m, init_mu, init_nu, fmu, fnu, CouplingConfig.for_model(m, g), plan)
    assert np.array_equal(replay_log_weights(run), run.log_weight)
    assert np.any(run.zeta_bar != 0)
    assert zeta_bar_bound(run, m, fmu, fnu)["max_ratio"] <= 1.0
    with pytest.raises(DomainError):
        run_coupling(m, init_mu, init_nu, None, None, CouplingConfig.for_model(m, g), plan)


def test_pairing_uses_optimal_assignment():
    g = GridSpec(0.1, 0.2, 0.5)
    m = _linear(g)
    run = run_coupling(m, _const([0.0, 5.0], g), _const([5.1, 0.1], g), None, None,
                       CouplingConfig.for_model(m, g), NoisePlan(0, g.h))
    assert list(run.pairing) == [1, 0]
    assert run.w2_initial == pytest.approx(0.1, rel=1e-12)


def test_config_and_input_errors():
    g = GridSpec(0.1, 0.2, 0.5)
    with pytest.raises(DomainError):
        CouplingConfig(g, 0.5, 0.4, 0.2)
    with pytest.raises(DomainError):
        CouplingConfig(g, 0.5, 2.0, 0.5)
    m = _linear(g)
    cfg = CouplingConfig.for_model(m, g)
    assert (cfg.kappa, cfg.tau0) == (2.0, 0.25)
    with pytest.raises(ShapeError):
        run_coupling(m, _const([0.0], g), _const([0.0, 1.0], g), None, None, cfg, NoisePlan(0, g.h))
    with pytest.raises(DomainError):
        run_coupling(zero_model(), _const([0.0], g), _const([0.0], g), None, None, cfg, NoisePlan(0, g.h))


def test_decay_fit_degenerate_and_exact():
    g = GridSpec(0.01, 0.5, 4.0)
    m = _linear(g, a=1.0)
    x = _const([1.0] * 4, g)
    same = run_coupling(m, x, x, None, None, CouplingConfig.for_model(m, g), NoisePlan(0, g.h))
    fit = decay_fit(same)
    assert fit.degenerate and fit.slope == -math.inf
    run = run_coupling(m, x, _const([0.0] * 4, g), None, None, CouplingConfig(g, 0.5, 2.0, 0.25), NoisePlan(0, g.h))
    fit = decay_fit(run, n_boot=20)
    assert fit.slope == pytest.approx(2 * math.log(1 - 3.0 * g.h) / g.h, abs=1e-10)
    assert fit.ci[1] < 0 and fit.rate == fit.slope / 2


def test_test_functions():
    f = TestFunction.from_descriptor({"kind": "exp_linear", "params": {"c": 2.0}})
    x = np.array([[0.5], [-1.0]])
    assert np.array_equal(f.log(x), np.array([1.0, -2.0]))
    assert f.grad_sup is None and f.grad_log_sup == 2.0
    b = TestFunction.from_descriptor({"kind": "bounded_smooth"})
    assert np.all(b(x) > 1) and b.grad_sup == 1.0
    with pytest.raises(DomainError):
        TestFunction.from_descriptor({"kind": "linear"}).log(x)
    with pytest.raises(DomainError):
        TestFunction("cubic")


def test_harnack_constant_function_and_jensen():
    g = GridSpec(0.05, 0.3, 1.0)
    m = _linear(g)
    x = _const(np.linspace(-1, 1, 50), g)
    run = run_coupling(m, x, x, None, None, CouplingConfig.for_model(m, g), NoisePlan(0, g.h))
    c = log_harnack_defect(run, TestFunction.from_descriptor({"kind": "constant", "params": {"value": 3.0}}), 1.0)
    assert abs(c.defect) < 1e-15 and c.grad_term == 0.0
    jensen = log_harnack_defect(run, TestFunction.from_descriptor({"kind": "exp_linear"}), 1.0)
    assert jensen.defect <= 0.0 and jensen.W2sq_term == 0.0


def test_trend_test():
    t = np.arange(20.0)
    assert not trend_test(t, t)["nonincreasing"]
    assert trend_test(t, -t)["nonincreasing"]


def test_gradient_of_linear_model():
    g = GridSpec(0.05, 0.3, 3.0)
    a = 1.0
    m = _linear(g, a=a, sigma0=0.5)
    f = TestFunction.from_descriptor({"kind": "linear"})
    xi = np.full((g.window, 1), 0.5)
    chk = gradient_estimate_check(m, f, xi, [np.ones_like(xi)], g, 200, NoisePlan(0, g.h))
    fd = np.array([r.fd_gradient for r in chk.rows])
    assert np.max(np.abs(fd - (1 - a * g.h) ** np.arange(g.n_steps + 1))) < 1e-9
    assert chk.fitted_rate <= -0.25
    with pytest.raises(ShapeError):
        gradient_estimate_check(m, f, np.zeros((3, 1)), [], g, 10, NoisePlan(0, g.h))
    const = gradient_estimate_check(m, TestFunction("constant"), xi, [np.ones_like(xi)], g, 10, NoisePlan(0, g.h),
                                    times=[0.0, 1.0])
    assert all(r.fd_gradient == 0.0 for r in const.rows)
