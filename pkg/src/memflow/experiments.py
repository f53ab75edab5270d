"""Experiment runners shared by the command line and the test-suite.

Every runner takes a resolved config and returns an :class:`ExperimentResult`
of headline metrics, named property checks and tabular series.  Nothing here
touches the clock or the worker count, so results are reproducible from
``(config, seed)`` alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import coefficients as co
from .coupling import (CouplingConfig, TestFunction, decay_fit, log_harnack_defect, replay_log_weights,
                       run_coupling)
from .errors import ConfigError, DomainError
from .measure_flow import EmpiricalMeasure, EmpiricalMeasureFlow
from .picard import PicardConfig, contraction_report, solve_fixed_point
from .sde_engine import MOMENT_COLUMNS, NoisePlan, exp_moment, moment_curve, simulate_frozen, simulate_interacting
from .segment_path import GridSpec, segment_weights, shift_bound_violations, window_norms


@dataclass
class ExperimentResult:
    metrics: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def add_series(self, name: str, columns, rows) -> None:
        self.series[name] = (tuple(columns), [tuple(r) for r in rows])

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


@dataclass
class Context:
    cfg: dict
    coeffs: co.CoefficientSet
    grid: GridSpec
    plan: NoisePlan
    workers: int = 1

    @property
    def params(self) -> dict:
        return self.cfg["params"]

    @property
    def M(self) -> int:
        return self.cfg["M"]


def build_model(cfg: dict) -> tuple[co.CoefficientSet, GridSpec]:
    g = cfg["grid"]
    grid = GridSpec(float(g["h"]), float(g["T_hist"]), float(g["T"]))
    d = int(g["d"])
    mid = cfg["model"]["id"]
    params = dict(cfg["model"].get("params", {}))
    if mid == "zero":
        unknown = set(params) - {"tau"}
        if unknown:
            raise ConfigError(f"config field model/params: unknown keys {sorted(unknown)} for the zero model")
        return co.zero_model(d, float(params.get("tau", 0.5))), grid
    if "d" in params and int(params["d"]) != d:
        raise ConfigError("config field model/params/d: disagrees with grid/d")
    if mid == "cubic_monotone_memory":
        params["d"] = d
    elif d != 1:
        raise ConfigError(f"config field grid/d: model {mid} is one-dimensional")
    return co.builtin_model(mid, params, grid), grid


def make_context(cfg: dict, workers: int = 1) -> Context:
    coeffs, grid = build_model(cfg)
    return Context(cfg, coeffs, grid, NoisePlan(int(cfg["seed"]), grid.h, coeffs.d), workers)


def initial_atoms(block: dict, M: int, grid: GridSpec, d: int, plan: NoisePlan, tag: str) -> np.ndarray:
    """``(M, window, d)`` constant-history initial segments drawn from ``block``."""
    mean = np.broadcast_to(np.asarray(block.get("mean", 0.0), dtype=float), (d,))
    x = np.repeat(mean[None, :], M, axis=0)
    if block.get("kind", "point") == "gaussian" and block.get("std", 0.0) > 0:
        x = x + float(block["std"]) * plan.generator(0, f"initial:{tag}").standard_normal((M, d))
    return np.repeat(x[:, None, :], grid.window, axis=1)


def _simulate(ctx: Context, init, phase="main", keep="full"):
    if ctx.coeffs.flags.distribution_dependent:
        ens, _ = simulate_interacting(ctx.coeffs, init, ctx.grid, ctx.plan, phase=phase, keep=keep,
                                      workers=ctx.workers)
        return ens
    return simulate_frozen(ctx.coeffs, None, init, ctx.grid, ctx.plan, phase=phase, keep=keep, workers=ctx.workers)


def _epr(res: ExperimentResult, ctx: Context, *path_sets) -> None:
    p = float(ctx.params.get("shift_bound_p", 2))
    v = sum(shift_bound_violations(P, ctx.coeffs.tau, ctx.grid, p) for P in path_sets)
    res.metrics["shift_bound_violations"] = int(v)
    res.checks["shift_bound"] = v == 0


def run_simulate(ctx: Context) -> ExperimentResult:
    res = ExperimentResult()
    init = initial_atoms(ctx.cfg["initial"], ctx.M, ctx.grid, ctx.coeffs.d, ctx.plan, "mu")
    if ctx.params["mode"] == "interacting":
        ens, _ = simulate_interacting(ctx.coeffs, init, ctx.grid, ctx.plan, workers=ctx.workers)
    else:
        flow = None
        if ctx.coeffs.flags.distribution_dependent:
            flow = EmpiricalMeasureFlow.constant_flow(ctx.grid, EmpiricalMeasure(ctx.coeffs.tau, ctx.grid.h, init))
        ens = simulate_frozen(ctx.coeffs, flow, init, ctx.grid, ctx.plan, workers=ctx.workers)
    mc = moment_curve(ens, float(ctx.params["moment_k"]))
    x = ens.present()[:, -1]
    res.metrics.update({"M": ens.M, "final_mean": np.mean(x, axis=0).tolist(),
                        "final_var": np.var(x, axis=0, ddof=1).tolist() if ens.M > 1 else [0.0] * ens.d,
                        "moment_k": float(ctx.params["moment_k"]), "final_moment": float(mc.estimate[-1]),
                        "final_sup_moment": float(mc.sup_estimate[-1])})
    _epr(res, ctx, ens.paths)
    if ctx.coeffs.name == "zero":
        res.checks["constant_trajectories"] = bool(np.all(ens.paths == ens.paths[:, :1]))
    res.add_series("moments", MOMENT_COLUMNS, mc.rows())
    res.artifacts["ensemble"] = ens
    return res


def _linear_mean_target(coeffs, m0, times):
    p = coeffs.params
    if coeffs.name != "linear_memory_meanfield" or float(p["beta"]) != 0.0:
        return None
    return m0 * np.exp((float(p["gamma"]) - float(p["a"])) * times)


def run_picard(ctx: Context) -> ExperimentResult:
    res = ExperimentResult()
    prm = ctx.params
    init = initial_atoms(ctx.cfg["initial"], ctx.M, ctx.grid, ctx.coeffs.d, ctx.plan, "mu")
    gamma = EmpiricalMeasure(ctx.coeffs.tau, ctx.grid.h, init)
    pc = PicardConfig(ctx.grid, ctx.M, float(prm["tol"]), int(prm["max_iter"]), prm["theta"], prm["common_noise"])
    flow, trace = solve_fixed_point(ctx.coeffs, gamma, pc, ctx.plan, workers=ctx.workers)
    res.metrics.update(trace.to_dict())
    res.checks["converged"] = trace.converged
    if trace.converged:
        res.checks["certificate_below_tol"] = trace.certificate < pc.tol
    ratios = [r for r in trace.ratios if r is not None]
    res.checks["ratios_below_one"] = all(r < 1 for r in ratios)
    _epr(res, ctx, flow.paths)
    res.add_series("trace", ("iter", "d", "ratio"), trace.rows())

    t = ctx.grid.times()
    pv = flow.present_values()[:, :, 0]
    mean = np.mean(pv, axis=1)
    se = np.std(pv, axis=1, ddof=1) / math.sqrt(ctx.M) if ctx.M > 1 else np.zeros_like(mean)
    target = _linear_mean_target(ctx.coeffs, float(np.mean(init[:, -1, 0])), t)
    if target is not None:
        z = np.abs(mean - target) / (3 * (se + 2 * ctx.grid.h))
        res.metrics["mean_ode_max_score"] = float(np.max(z))
        res.checks["mean_matches_ode"] = bool(np.all(z <= 1))
        res.add_series("mean", ("t", "mean", "stderr", "ode"), zip(t, mean, se, target))
    else:
        res.add_series("mean", ("t", "mean", "stderr"), zip(t, mean, se))
    if prm["report_thetas"] and len(trace.flows) >= 3:
        rep = contraction_report(trace, prm["report_thetas"], workers=ctx.workers)
        res.metrics["smallest_contractive_theta"] = rep.smallest_contractive_theta
        res.metrics["degenerate"] = rep.degenerate
        res.add_series("contraction", ("theta", "max_ratio", "iterations_to_tol"),
                       [(r.theta, r.max_ratio, r.iterations_to_tol) for r in rep.rows])
    return res


def _harnack_times(ctx: Context, given):
    grid = ctx.grid
    if given:
        return [grid.step_index(t) * grid.h for t in given]
    return [j * grid.h for j in sorted({grid.n_steps // 4, grid.n_steps // 2, grid.n_steps})]


def run_couple(ctx: Context) -> ExperimentResult:
    res = ExperimentResult()
    prm = ctx.params
    c, grid = ctx.coeffs, ctx.grid
    A = initial_atoms(ctx.cfg["initial"], ctx.M, grid, c.d, ctx.plan, "mu")
    B = initial_atoms(prm["nu_initial"], ctx.M, grid, c.d, ctx.plan, "nu")
    fmu = fnu = None
    if c.flags.distribution_dependent:
        _, fmu = simulate_interacting(c, A, grid, ctx.plan, phase="flow_mu", workers=ctx.workers)
        _, fnu = simulate_interacting(c, B, grid, ctx.plan, phase="flow_nu", workers=ctx.workers)
    cfg = CouplingConfig.for_model(c, grid, prm["kappa"], prm["tau0"], float(prm["p"]))
    run = run_coupling(c, A, B, fmu, fnu, cfg, ctx.plan, workers=ctx.workers)
    res.metrics.update(run.summary())
    res.checks["ledger_replay"] = bool(np.array_equal(replay_log_weights(run), run.log_weight))
    fit = decay_fit(run, cfg.p, n_boot=int(prm["bootstrap"]), seed=int(ctx.cfg["seed"]))
    res.metrics["decay"] = fit.to_dict()
    if not fit.degenerate:
        res.checks["gap_decay"] = bool(fit.slope <= -cfg.tau0 and fit.ci[1] < 0)
    _epr(res, ctx, run.X, run.Y)
    res.add_series("coupling", ("t", "gap_p_weighted", "ess", "entropy_estimate"), run.rows())
    f = TestFunction.from_descriptor(prm["f"], c.d)
    rows = []
    for t in _harnack_times(ctx, prm["harnack_times"]):
        hd = log_harnack_defect(run, f, t)
        rows.append((hd.t, hd.lhs, hd.logPtf, hd.defect, hd.stderr, hd.W2sq_term, hd.grad_term, hd.entropy, hd.ess))
    res.add_series("harnack", ("t", "lhs", "logPtf", "defect", "stderr", "W2sq_term", "grad_term", "entropy",
                               "ess"), rows)
    res.artifacts["run"] = run
    return res


def _walk_segments(rng, P, grid, d, std):
    steps = rng.standard_normal((P, grid.window, d)) * math.sqrt(grid.h) * std
    walk = np.cumsum(steps[:, ::-1], axis=1)[:, ::-1]
    return walk + std * rng.standard_normal((P, 1, d))


def _batch_norms(x, tau, h):
    w = segment_weights(tau, h, x.shape[1])
    return np.max(np.sqrt(np.sum(x * x, axis=-1)) * w, axis=1)


def lipschitz_ratio_bound(coeffs: co.CoefficientSet, T: float) -> float:
    c = coeffs.constants
    return 2.0 * math.exp((c.K1 + c.K2) * T)


def run_lipschitz(ctx: Context) -> ExperimentResult:
    res = ExperimentResult()
    prm = ctx.params
    c, grid = ctx.coeffs, ctx.grid
    P, std = int(prm["pairs"]), float(prm["pair_std"])
    rng = ctx.plan.generator(0, "lipschitz:pairs")
    xi = _walk_segments(rng, P, grid, c.d, std)
    delta = _walk_segments(rng, P, grid, c.d, std)
    ex = _simulate(ctx, xi, phase="lipschitz")
    gap0 = _batch_norms(delta, c.tau, grid.h)
    rows, ratios, paths = [], {}, [ex.paths]
    for s in prm["scales"]:
        ey = _simulate(ctx, xi + s * delta, phase="lipschitz")
        paths.append(ey.paths)
        sup_gap = np.max(window_norms(ex.paths - ey.paths, c.tau, grid), axis=1)
        r = sup_gap / (s * gap0)
        ratios[s] = r
        rows += [(i, s, s * gap0[i], sup_gap[i], r[i]) for i in range(P)]
    all_r = np.stack(list(ratios.values()))
    res.metrics["max_ratio"] = float(np.max(all_r))
    linear = c.name == "linear_memory_meanfield"
    if linear:
        dev = float(np.max(np.abs(all_r / all_r[:1] - 1.0)))
        res.metrics["ratio_scale_deviation"] = dev
        res.checks["ratio_scale_invariant"] = dev <= 1e-12
    else:
        bound = lipschitz_ratio_bound(c, grid.T)
        res.metrics["ratio_bound"] = bound
        res.checks["ratio_bounded"] = bool(np.all(np.isfinite(all_r)) and np.max(all_r) <= bound)
    _epr(res, ctx, *paths)
    res.add_series("lipschitz", ("pair", "scale", "gap0", "sup_gap", "ratio"), rows)
    return res


def run_moments(ctx: Context) -> ExperimentResult:
    res = ExperimentResult()
    prm = ctx.params
    c, grid = ctx.coeffs, ctx.grid
    ks = [float(k) for k in prm["k"]]
    norms = [float(x) for x in prm["initial_norms"]]
    table, curves, paths = [], [], []
    sup = {k: [] for k in ks}
    for x0 in norms:
        init = np.zeros((ctx.M, grid.window, c.d))
        init[..., 0] = x0
        ens = _simulate(ctx, init, phase="moments")
        paths.append(ens.paths)
        for k in ks:
            mc = moment_curve(ens, k)
            sup[k].append((mc.sup_estimate[-1], mc.sup_stderr[-1]))
            table.append((x0, k, mc.sup_estimate[-1], mc.sup_stderr[-1], 1 + x0 ** k))
            curves += [(x0, k) + r for r in mc.rows()]
    r2 = {}
    for k in ks:
        y = np.array([v for v, _ in sup[k]])
        x = 1 + np.array(norms) ** k
        if len(set(x.tolist())) < 2:
            raise DomainError("need at least two distinct initial norms for the regression")
        fit = stats.linregress(x, y)
        r2[k] = float(fit.rvalue ** 2)
        res.metrics[f"r2_k{k:g}"] = r2[k]
        res.metrics[f"slope_k{k:g}"] = float(fit.slope)
        res.checks[f"sup_moment_linear_k{k:g}"] = r2[k] > float(prm["r2_min"])
    _epr(res, ctx, *paths)
    res.add_series("sup_moments", ("initial_norm", "k", "sup_moment", "stderr", "one_plus_norm_k"), table)
    res.add_series("moment_curves", ("initial_norm", "k") + MOMENT_COLUMNS, curves)
    return res


def gaussian_exp_moment(m, v, beta):
    """``E exp(beta Z^2)`` for ``Z ~ N(m, v)``; requires ``2 beta v < 1``."""
    s = 1.0 - 2.0 * beta * v
    if np.any(s <= 0):
        return np.where(s > 0, np.exp(beta * m * m / np.where(s > 0, s, 1)) / np.sqrt(np.where(s > 0, s, 1)), np.inf)
    return np.exp(beta * m * m / s) / np.sqrt(s)


def euler_ou_moments(x0: float, a: float, sigma0: float, h: float, n: int):
    """Mean and variance of the Euler OU recursion at steps ``0..n``."""
    r = 1.0 - a * h
    j = np.arange(n + 1)
    mean = x0 * r ** j
    var = sigma0 ** 2 * h * np.concatenate([[0.0], np.cumsum(r ** (2 * np.arange(n)))])
    return mean, var


def run_exp_moments(ctx: Context) -> ExperimentResult:
    res = ExperimentResult()
    prm = ctx.params
    c, grid = ctx.coeffs, ctx.grid
    init = initial_atoms(ctx.cfg["initial"], ctx.M, grid, c.d, ctx.plan, "mu")
    ens = _simulate(ctx, init, phase="exp")
    beta, alpha = float(prm["beta"]), float(prm["alpha"])
    em = exp_moment(ens, beta, alpha)
    res.metrics.update({"beta": beta, "alpha": alpha, "max_estimate": float(np.max(em.estimate)),
                        "overflow": em.overflow, "degenerate_steps": int(np.count_nonzero(em.degenerate))})
    res.checks["finite"] = bool(np.all(np.isfinite(em.estimate)))
    p = c.params
    ou = (c.name == "linear_memory_meanfield" and float(p["beta"]) == 0 and float(p["gamma"]) == 0
          and ctx.cfg["initial"]["kind"] == "point" and alpha == 1.0)
    rows = list(zip(em.times, em.estimate, em.stderr, em.point_estimate, em.point_stderr, em.max_share))
    if ou:
        m, v = euler_ou_moments(float(init[0, -1, 0]), float(p["a"]), float(p["sigma0"]), grid.h, grid.n_steps)
        target = gaussian_exp_moment(m, v, beta)
        # rounding floor: at t=0 every particle agrees and the stderr is pure rounding
        z = np.abs(em.point_estimate - target) / (em.point_stderr + 1e-12 * np.abs(target))
        res.metrics["gaussian_max_z"] = float(np.max(z))
        res.checks["gaussian_oracle"] = bool(np.max(z) <= 5)
        rows = [r + (tg,) for r, tg in zip(rows, target)]
        cols = ("t", "estimate", "stderr", "point_estimate", "point_stderr", "max_share", "gaussian")
    else:
        cols = ("t", "estimate", "stderr", "point_estimate", "point_stderr", "max_share")
    _epr(res, ctx, ens.paths)
    res.add_series("exp_moment", cols, rows)
    return res


def run_check_assumptions(ctx: Context) -> ExperimentResult:
    res = ExperimentResult()
    prm = ctx.params
    rng = ctx.plan.generator(0, "assumptions")
    sampler = co.random_pair_sampler(ctx.coeffs, ctx.grid, rng, n_atoms=int(prm["atoms"]),
                                     t_max=max(ctx.grid.T, 1.0))
    rows = []
    for aid in prm["assumptions"]:
        rep = co.check_assumption(ctx.coeffs, aid, sampler, int(prm["n_pairs"]), ctx.grid.h)
        res.metrics[aid] = rep.to_dict()
        res.checks[f"assumption_{aid}"] = rep.passed
        rows.append((aid, rep.n_samples, rep.max_violation))
    res.metrics["constants"] = ctx.coeffs.constants.to_dict()
    res.add_series("assumptions", ("id", "n_samples", "max_violation"), rows)
    return res


def run_lpq(ctx: Context) -> ExperimentResult:
    res = ExperimentResult()
    prm = ctx.params
    c, grid = ctx.coeffs, ctx.grid
    prof = c.profile
    p = prm["p"] if prm["p"] is not None else (prof.p if prof else 4.0)
    q = prm["q"] if prm["q"] is not None else (prof.q if prof else 4.0)
    if grid.T <= 0:
        raise ConfigError("config field grid/T: lpq-diagnose needs a positive horizon")
    if prof is not None:
        f = prof.f0
    else:
        def f(r, x):
            flat = x.reshape(-1, x.shape[-1])
            v = np.sqrt(np.sum(c.drift_b0(0.0, flat) ** 2, axis=-1)).reshape(x.shape[:-1])
            return np.broadcast_to(v, (r.shape[0], v.shape[-1]))
    out = co.lpq_norm(f, p, q, 0.0, grid.T, tuple(prm["box"]), d=c.d, n_time=int(prm["n_time"]), dx=float(prm["dx"]))
    adm = co.kato_admissible(p, q, c.d)
    res.metrics.update({"p": p, "q": q, "value": out.value, "n_time": out.n_time, "dx": out.dx,
                        "n_centers": out.n_centers, "argmax_center": list(out.argmax_center), "admissible": adm})
    res.checks["admissible"] = adm
    res.checks["finite"] = math.isfinite(out.value)
    res.add_series("lpq", ("p", "q", "value", "n_time", "dx", "admissible"), [(p, q, out.value, out.n_time, out.dx, adm)])
    return res


RUNNERS = {
    "simulate": run_simulate,
    "picard": run_picard,
    "couple": run_couple,
    "lipschitz": run_lipschitz,
    "moments": run_moments,
    "exp-moments": run_exp_moments,
    "check-assumptions": run_check_assumptions,
    "lpq-diagnose": run_lpq,
}


def run_experiment(cfg: dict, workers: int = 1) -> ExperimentResult:
    ctx = make_context(cfg, workers)
    return RUNNERS[cfg["experiment"]](ctx)
