import math

import numpy as np
import pytest

from memflow.coefficients import builtin_model, zero_model
from memflow.errors import BlowUpError, DomainError, GridMismatchError, ShapeError
from memflow.measure_flow import EmpiricalMeasure, EmpiricalMeasureFlow
from memflow.sde_engine import (NoisePlan, exp_moment, moment_curve, phase_code, simulate_frozen,
                                simulate_interacting)
from memflow.segment_path import GridSpec, point_path


def _points(values, grid, tau=0.5):
    return [point_path(v, tau, grid.h, grid.T_hist) for v in values]


def test_zero_model_keeps_paths_constant():
    g = GridSpec(0.1, 0.5, 2.0)
    ens = simulate_frozen(zero_model(), None, _points([1.0, -2.0], g), g, NoisePlan(0, g.h))
    assert np.all(ens.paths[0] == 1.0) and np.all(ens.paths[1] == -2.0)


def test_deterministic_euler_closed_form():
    g = GridSpec(0.01, 0.1, 5.0)
    a = 1.3
    m = builtin_model("linear_memory_meanfield", {"a": a, "sigma0": 0.0}, g)
    ens = simulate_frozen(m, None, _points([2.0], g), g, NoisePlan(0, g.h))
    n = np.arange(g.n_steps + 1)
    exact = 2.0 * (1.0 - a * g.h) ** n
    assert np.max(np.abs(ens.present()[0, :, 0] - exact)) <= 1e-12


def test_increment_variance():
    g = GridSpec(0.05, 0.05, 0.05)
    m = builtin_model("linear_memory_meanfield", {"a": 0.0, "sigma0": 2.0}, g)
    ens = simulate_frozen(m, None, np.zeros((20000, g.window, 1)), g, NoisePlan(7, g.h))
    x = ens.present()[:, -1, 0]
    se = 4.0 * g.h * math.sqrt(2.0 / 20000)
    assert abs(np.var(x, ddof=1) - 4.0 * g.h) < 5 * se


def test_frozen_equals_interacting_when_distribution_free():
    g = GridSpec(0.05, 0.5, 1.0)
    m = builtin_model("linear_memory_meanfield", {"beta": 0.4}, g)
    init = _points(np.linspace(-1, 1, 16), g)
    plan = NoisePlan(3, g.h)
    ens_i, flow = simulate_interacting(m, init, g, plan)
    ens_f = simulate_frozen(m, None, init, g, plan)
    assert np.array_equal(ens_i.values, ens_f.values)
    assert flow.M == 16


def test_frozen_at_own_flow_reproduces_interacting():
    g = GridSpec(0.05, 0.5, 1.0)
    m = builtin_model("linear_memory_meanfield", {"gamma": 0.4}, g)
    init = _points(np.linspace(-1, 1, 8), g)
    plan = NoisePlan(3, g.h)
    ens_i, flow = simulate_interacting(m, init, g, plan)
    ens_f = simulate_frozen(m, flow, init, g, plan)
    assert np.array_equal(ens_i.values, ens_f.values)


def test_noise_is_independent_of_workers_and_blocks(monkeypatch):
    g = GridSpec(0.01, 0.1, 1.0)
    m = builtin_model("cubic_monotone_memory", {"beta": 0.2}, g)
    init = _points(np.linspace(-2, 2, 9), g)
    plan = NoisePlan(11, g.h)
    ref = simulate_frozen(m, None, init, g, plan).values
    assert np.array_equal(simulate_frozen(m, None, init, g, plan, workers=4).values, ref)
    import memflow.sde_engine as eng
    monkeypatch.setattr(eng, "_NOISE_BLOCK_ELEMS", 27)
    assert np.array_equal(simulate_frozen(m, None, init, g, plan, workers=3).values, ref)
    win = simulate_frozen(m, None, init, g, plan, keep="window")
    assert np.array_equal(win.values, ref[:, -g.window:])
    # a particle's noise does not depend on which other particles run
    single = simulate_frozen(m, None, init[4:5], g, plan, particle_offset=4).values
    assert np.array_equal(single[0], ref[4])


def test_noise_plan():
    p = NoisePlan(5, 0.1, 2)
    assert np.array_equal(p.increments(3, 4, "x"), p.stream([3], "x").draw(4)[0])
    assert not np.array_equal(p.increments(3, 4, "x"), p.increments(3, 4, "y"))
    assert phase_code(7) == 7 and phase_code("a") == phase_code("a")
    with pytest.raises(DomainError):
        NoisePlan(-1, 0.1)
    with pytest.raises(DomainError):
        phase_code(-2)


def test_input_errors():
    g = GridSpec(0.1, 0.5, 1.0)
    m = builtin_model("linear_memory_meanfield", {"gamma": 0.2}, g)
    with pytest.raises(DomainError):
        simulate_frozen(m, None, _points([1.0], g), g, NoisePlan(0, g.h))
    with pytest.raises(GridMismatchError):
        simulate_frozen(zero_model(), None, _points([1.0], g), g, NoisePlan(0, 0.2))
    with pytest.raises(GridMismatchError):
        simulate_frozen(zero_model(), None, _points([1.0], g, tau=0.9), g, NoisePlan(0, g.h))
    with pytest.raises(ShapeError):
        simulate_frozen(zero_model(), None, np.zeros((2, 3, 1)), g, NoisePlan(0, g.h))
    short = EmpiricalMeasureFlow.from_paths(GridSpec(0.1, 0.5, 0.5), 0.5, np.zeros((1, 11, 1)))
    with pytest.raises(GridMismatchError):
        simulate_frozen(m, short, _points([1.0], g), g, NoisePlan(0, g.h))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_names_particle_and_step():
    g = GridSpec(0.1, 0.1, 5.0)
    m = builtin_model("cubic_monotone_memory", {"tamed": False, "sigma0": 0.0}, g)
    with pytest.raises(BlowUpError) as info:
        simulate_frozen(m, None, _points([0.0, 100.0], g), g, NoisePlan(0, g.h))
    assert info.value.particle == 1 and info.value.step >= 1
    tamed = builtin_model("cubic_monotone_memory", {"sigma0": 0.0}, g)
    ens = simulate_frozen(tamed, None, _points([0.0, 100.0], g), g, NoisePlan(0, g.h))
    assert np.all(np.isfinite(ens.values))


def test_moment_curves_edge_cases():
    g = GridSpec(0.1, 0.2, 1.0)
    ens = simulate_frozen(zero_model(), None, _points([3.0], g), g, NoisePlan(0, g.h))
    mc = moment_curve(ens, 2)
    assert np.all(mc.estimate == 9.0) and np.all(mc.stderr == 0.0)
    assert np.all(moment_curve(ens, 0).sup_estimate == 1.0)
    with pytest.raises(DomainError):
        moment_curve(ens, -1)
    em = exp_moment(ens, 0.0, 1.0)
    assert np.all(em.estimate == 1.0)
    em = exp_moment(ens, 0.3, 0.0)
    assert np.all(em.estimate == math.exp(0.3))
    assert exp_moment(ens, 1000.0, 1.0).overflow


def test_window_and_full_moments_agree_on_final_step():
    g = GridSpec(0.05, 0.3, 1.0)
    m = builtin_model("linear_memory_meanfield", None, g)
    init = _points(np.linspace(-1, 1, 50), g)
    full = simulate_frozen(m, None, init, g, NoisePlan(2, g.h))
    win = simulate_frozen(m, None, init, g, NoisePlan(2, g.h), keep="window")
    assert moment_curve(full, 2).estimate[-1] == moment_curve(win, 2).estimate[-1]
    with pytest.raises(DomainError):
        win.paths


def test_save(tmp_path):
    g = GridSpec(0.1, 0.2, 0.3)
    ens = simulate_frozen(zero_model(), None, _points([1.0, 2.0], g), g, NoisePlan(0, g.h))
    ens.save(tmp_path, "zero", 0)
    assert (tmp_path / "particle_00001.csv").exists() and (tmp_path / "manifest.json").exists()


def test_constant_flow_measure_argument():
    g = GridSpec(0.1, 0.2, 1.0)
    m = builtin_model("linear_memory_meanfield", {"a": 0.0, "gamma": 1.0, "sigma0": 0.0}, g)
    flow = EmpiricalMeasureFlow.constant_flow(g, EmpiricalMeasure(0.5, g.h, np.full((4, g.window, 1), 2.0)))
    ens = simulate_frozen(m, flow, _points([0.0], g), g, NoisePlan(0, g.h))
    assert ens.present()[0, -1, 0] == pytest.approx(2.0 * 1.0, rel=1e-12)
