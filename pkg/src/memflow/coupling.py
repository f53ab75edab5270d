"""Asymptotic coupling with Girsanov weights, decay fits and log-Harnack checks.

For a pair of frozen flows ``mu_t`` and ``nu_t`` the run integrates, with one
shared increment ``dW`` per particle and step,

    X+ = X + b(X, mu) h + sigma(X) dW
    Y+ = Y + b(Y, nu) h + sigma(Y) zt h + sigma(Y) (dW + zb h)

where ``zb = sigma(X)^-1 [b(X, mu) - b(X, nu)]`` and ``zt = kappa sigma(X)^-1
(X(0) - Y(0))``.  With ``log R = -sum <zb + zt, dW> - 1/2 sum |zb + zt|^2 h``
the increments ``dW + (zb + zt) h`` are exactly ``N(0, h I)`` under ``R P``,
so under the weighted measure ``Y`` is the Euler scheme of the ``nu`` system.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .coefficients import CoefficientSet
from .errors import BlowUpError, DomainError, NumericError, ShapeError
from .measure_flow import EmpiricalMeasure, EmpiricalMeasureFlow, optimal_assignment, wasserstein
from .sde_engine import NoisePlan, _check_flow, _check_noise, initial_array, simulate_frozen, simulate_interacting
from .segment_path import GridSpec, segment_weights, window_norms

log = logging.getLogger(__name__)

ESS_WARN_FRACTION = 0.05


@dataclass(frozen=True)
class CouplingConfig:
    grid: GridSpec
    tau: float
    kappa: float
    tau0: float
    p: float = 2.0

    def __post_init__(self):
        if not self.kappa > self.tau:
            raise DomainError(f"kappa={self.kappa} must exceed tau={self.tau}")
        if not 0 < self.tau0 < self.tau:
            raise DomainError(f"tau0={self.tau0} must lie in (0, tau={self.tau})")
        if self.p < 1:
            raise DomainError("p must be >= 1")

    @classmethod
    def for_model(cls, coeffs: CoefficientSet, grid: GridSpec, kappa: float | None = None,
                  tau0: float | None = None, p: float = 2.0) -> "CouplingConfig":
        """Defaults ``kappa = 4 tau + K1`` and ``tau0 = tau / 2``."""
        tau = coeffs.tau
        kappa = 4 * tau + coeffs.constants.K1 if kappa is None else kappa
        return cls(grid, tau, kappa, tau / 2 if tau0 is None else tau0, p)


# -- test functions ---------------------------------------------------------

FUNCTION_KINDS = ("constant", "exp_linear", "bounded_smooth", "linear")


@dataclass(frozen=True)
class TestFunction:
    """``f(xi)`` depending on ``xi(0)`` only, with analytic gradient bounds.

    * ``constant``: ``value``;
    * ``exp_linear``: ``exp(<c, xi(0)>)``;
    * ``bounded_smooth``: ``2 + tanh(<c, xi(0)>)``;
    * ``linear``: ``<c, xi(0)>`` (not positive; gradient checks only).
    """

    __test__ = False

    kind: str
    params: dict = field(default_factory=dict)
    grad_sup: float | None = None
    grad_log_sup: float | None = None

    def __post_init__(self):
        if self.kind not in FUNCTION_KINDS:
            raise DomainError(f"unknown test function kind {self.kind!r}")

    @classmethod
    def from_descriptor(cls, desc: dict, d: int = 1) -> "TestFunction":
        kind = desc["kind"]
        params = dict(desc.get("params", {}))
        if kind == "constant":
            params.setdefault("value", 1.0)
            gs, gl = 0.0, 0.0
        else:
            c = np.broadcast_to(np.asarray(params.get("c", 1.0), dtype=float), (d,))
            params["c"] = c.tolist()
            cn = float(np.linalg.norm(c))
            gs = {"exp_linear": None, "bounded_smooth": cn, "linear": cn}[kind]
            gl = {"exp_linear": cn, "bounded_smooth": cn, "linear": None}[kind]
        gs = desc.get("grad_sup", gs)
        gl = desc.get("grad_log_sup", gl)
        return cls(kind, params, gs, gl)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "grad_sup": self.grad_sup,
                "grad_log_sup": self.grad_log_sup}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on current values ``x`` of shape ``(..., d)``."""
        if self.kind == "constant":
            return np.full(x.shape[:-1], float(self.params.get("value", 1.0)))
        u = x @ np.asarray(self.params["c"], dtype=float)
        if self.kind == "exp_linear":
            return np.exp(u)
        if self.kind == "bounded_smooth":
            return 2.0 + np.tanh(u)
        return u

    def log(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "exp_linear":
            return x @ np.asarray(self.params["c"], dtype=float)
        v = self(x)
        if np.any(v <= 0):
            raise DomainError("test function is not strictly positive on the sample")
        return np.log(v)


# -- the coupled run ----------------------------------------------------------

@dataclass
class CouplingRun:
    cfg: CouplingConfig
    X: np.ndarray
    Y: np.ndarray
    dW: np.ndarray
    zeta_bar: np.ndarray
    zeta_tilde: np.ndarray
    log_rbar: np.ndarray
    log_rtilde: np.ndarray
    int_zeta_sq: np.ndarray
    pairing: np.ndarray
    w2_initial: float
    ess: np.ndarray = None
    gap_moment: np.ndarray = None
    gap_moment_plain: np.ndarray = None
    entropy: np.ndarray = None
    entropy_rlogr: np.ndarray = None
    ess_warning: bool = False

    @property
    def grid(self) -> GridSpec:
        return self.cfg.grid

    @property
    def M(self) -> int:
        return self.X.shape[0]

    def times(self) -> np.ndarray:
        return self.grid.times()

    @property
    def log_weight(self) -> np.ndarray:
        return self.log_rbar + self.log_rtilde

    def weights(self, j: int) -> np.ndarray:
        """Self-normalized ``R_t`` at step ``j``."""
        lw = self.log_weight[:, j]
        w = np.exp(lw - np.max(lw))
        return w / np.sum(w)

    def gap_norms(self) -> np.ndarray:
        """``(M, n_steps + 1)`` values of ``||X_t - Y_t||_tau``."""
        return window_norms(self.X - self.Y, self.cfg.tau, self.grid)

    def rows(self):
        return [(float(t), float(g), float(e), float(h)) for t, g, e, h in
                zip(self.times(), self.gap_moment, self.ess, self.entropy)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "gap_p_weighted", "ess", "entropy_estimate"])
            for r in self.rows():
                w.writerow([repr(v) for v in r])

    def summary(self) -> dict:
        return {"M": self.M, "kappa": self.cfg.kappa, "tau0": self.cfg.tau0, "p": self.cfg.p,
                "w2_initial": self.w2_initial, "min_ess": float(np.min(self.ess)),
                "ess_warning": self.ess_warning, "final_gap_moment": float(self.gap_moment[-1]),
                "final_entropy": float(self.entropy[-1])}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _inv_apply(S: np.ndarray, v: np.ndarray, j: int) -> np.ndarray:
    try:
        return np.linalg.solve(S, v[..., None])[..., 0]
    except np.linalg.LinAlgError:
        dets = np.abs(np.linalg.det(S))
        i = int(np.argmin(dets))
        raise NumericError(f"singular diffusion matrix for particle {i} at step {j}: {S[i].tolist()}") from None


def run_coupling(coeffs: CoefficientSet, mu_initials, nu_initials, flow_mu: EmpiricalMeasureFlow | None,
                 flow_nu: EmpiricalMeasureFlow | None, cfg: CouplingConfig, noise: NoisePlan, *,
                 phase="couple", workers: int = 1, pair: bool = True) -> CouplingRun:
    """Integrate ``(X, Y)`` and the weight ledger on ``cfg.grid``.

    Initials are paired by the optimal W_2 assignment unless ``pair=False``,
    in which case they are paired by index.  ``w2_initial`` is the L^2 cost of
    the pairing used, so it equals W_2 when ``pair`` is set.  Flows may be
    ``None`` for distribution-free models.
    """
    if not coeffs.flags.sigma_invertible:
        raise DomainError("coupling needs an invertible diffusion coefficient")
    grid, tau, d = cfg.grid, coeffs.tau, coeffs.d
    if cfg.tau != tau:
        raise DomainError("coupling config and model disagree on tau")
    A = initial_array(mu_initials, grid, tau, d)
    B = initial_array(nu_initials, grid, tau, d)
    if A.shape != B.shape:
        raise ShapeError(f"mu and nu ensembles differ in shape: {A.shape} vs {B.shape}")
    _check_noise(noise, grid, d)
    dd = coeffs.flags.distribution_dependent
    if dd:
        if flow_mu is None or flow_nu is None:
            raise DomainError("distribution-dependent model needs both flows")
        _check_flow(flow_mu, grid, tau, d)
        _check_flow(flow_nu, grid, tau, d)
    mu0 = EmpiricalMeasure(tau, grid.h, A)
    nu0 = EmpiricalMeasure(tau, grid.h, B)
    if pair:
        perm, w2 = optimal_assignment(mu0, nu0, 2.0)
        B = B[perm]
    else:
        # cost of the pairing actually used; an upper bound on W_2 that avoids an M x M assignment
        perm = np.arange(A.shape[0])
        w2 = math.sqrt(float(np.mean(_segment_norms(A - B, tau, grid.h) ** 2)))

    M, L = A.shape[0], grid.window
    n, h = grid.n_steps, grid.h
    X = np.empty((M, grid.n_nodes, d))
    Y = np.empty((M, grid.n_nodes, d))
    X[:, :L], Y[:, :L] = A, B
    dWs = noise.stream(np.arange(M), phase, workers).draw(n) if n else np.empty((M, 0, d))
    zb_all = np.zeros((M, n, d))
    zt_all = np.zeros((M, n, d))
    lrb = np.zeros((M, n + 1))
    lrt = np.zeros((M, n + 1))
    izz = np.zeros((M, n + 1))
    for j in range(n):
        t = j * h
        sx, sy = X[:, j:j + L], Y[:, j:j + L]
        mu_j = flow_mu.measure(j) if dd else None
        nu_j = flow_nu.measure(j) if dd else None
        bx = coeffs.scheme_drift(t, sx, mu_j, h)
        by = coeffs.scheme_drift(t, sy, nu_j, h)
        Sx, Sy = coeffs.diffusion(t, sx), coeffs.diffusion(t, sy)
        zb = _inv_apply(Sx, bx - coeffs.scheme_drift(t, sx, nu_j, h), j) if dd else np.zeros((M, d))
        zt = kappa_pull(cfg.kappa, Sx, sx[:, -1] - sy[:, -1], j)
        dW = dWs[:, j]
        X[:, L + j] = sx[:, -1] + bx * h + np.einsum("mij,mj->mi", Sx, dW)
        Y[:, L + j] = sy[:, -1] + by * h + np.einsum("mij,mj->mi", Sy, zt * h + dW + zb * h)
        if not (np.all(np.isfinite(X[:, L + j])) and np.all(np.isfinite(Y[:, L + j]))):
            bad = ~(np.all(np.isfinite(X[:, L + j]), axis=1) & np.all(np.isfinite(Y[:, L + j]), axis=1))
            i = int(np.argmax(bad))
            raise BlowUpError(f"non-finite coupled state for particle {i} at step {j + 1}", particle=i, step=j + 1)
        zb_all[:, j], zt_all[:, j] = zb, zt
        lrb[:, j + 1] = lrb[:, j] - np.sum(zb * dW, axis=1) - 0.5 * np.sum(zb * zb, axis=1) * h
        lrt[:, j + 1] = lrt[:, j] - np.sum(zt * (dW + zb * h), axis=1) - 0.5 * np.sum(zt * zt, axis=1) * h
        z = zb + zt
        izz[:, j + 1] = izz[:, j] + np.sum(z * z, axis=1) * h

    run = CouplingRun(cfg, X, Y, dWs, zb_all, zt_all, lrb, lrt, izz, perm, float(w2))
    _finish_run(run)
    return run


def _segment_norms(diff: np.ndarray, tau: float, h: float) -> np.ndarray:
    """Weighted norms of a batch of ``(M, window, d)`` segments."""
    w = segment_weights(tau, h, diff.shape[1])
    return np.max(np.sqrt(np.sum(diff * diff, axis=-1)) * w, axis=1)


def kappa_pull(kappa: float, Sx: np.ndarray, gap: np.ndarray, j: int) -> np.ndarray:
    return kappa * _inv_apply(Sx, gap, j)


def _finish_run(run: CouplingRun) -> None:
    lw = run.log_weight
    shift = np.max(lw, axis=0)
    w = np.exp(lw - shift)
    s1 = np.sum(w, axis=0)
    run.ess = s1 * s1 / np.sum(w * w, axis=0)
    wn = w / s1
    gp = run.gap_norms() ** run.cfg.p
    run.gap_moment = np.sum(wn * gp, axis=0)
    run.gap_moment_plain = np.mean(gp, axis=0)
    run.entropy = np.sum(wn * 0.5 * run.int_zeta_sq, axis=0)
    with np.errstate(over="ignore"):
        R = np.exp(lw)
    run.entropy_rlogr = np.mean(R * lw, axis=0)
    run.ess_warning = bool(np.min(run.ess) < ESS_WARN_FRACTION * run.M)
    if run.ess_warning:
        log.warning("effective sample size fell to %.1f of %d particles", float(np.min(run.ess)), run.M)


def replay_log_weights(run: CouplingRun) -> np.ndarray:
    """Recompute the combined log weights from the stored drifts and increments."""
    h = run.grid.h
    lrb = np.zeros_like(run.log_rbar)
    lrt = np.zeros_like(run.log_rtilde)
    for j in range(run.grid.n_steps):
        zb, zt, dW = run.zeta_bar[:, j], run.zeta_tilde[:, j], run.dW[:, j]
        lrb[:, j + 1] = lrb[:, j] - np.sum(zb * dW, axis=1) - 0.5 * np.sum(zb * zb, axis=1) * h
        lrt[:, j + 1] = lrt[:, j] - np.sum(zt * (dW + zb * h), axis=1) - 0.5 * np.sum(zt * zt, axis=1) * h
    return lrb + lrt


def zeta_bar_bound(run: CouplingRun, coeffs: CoefficientSet, flow_mu, flow_nu, stride: int = 1,
                   c1: float = 2.0) -> dict:
    """Largest ratio ``|zb_t|^2 / (c1 |sigma^-1|^2 K2 W_2(mu_t, nu_t)^2)`` over sampled steps."""
    c = coeffs.constants
    if c.sigma_inv_sup is None:
        raise DomainError("model declares no bound on the inverse diffusion")
    worst, at = 0.0, None
    for j in range(0, run.grid.n_steps, stride):
        zmax = float(np.max(np.sum(run.zeta_bar[:, j] ** 2, axis=1)))
        if zmax == 0.0:
            continue
        w2 = wasserstein(flow_mu.measure(j), flow_nu.measure(j), 2.0)
        bound = c1 * c.sigma_inv_sup ** 2 * c.K2 * w2 * w2
        r = math.inf if bound == 0 else zmax / bound
        if r > worst:
            worst, at = r, float(j * run.grid.h)
    return {"max_ratio": worst, "t": at, "c1": c1}


# -- decay fit ------------------------------------------------------------------

@dataclass
class DecayFit:
    slope: float
    intercept: float
    rate: float
    ci: tuple
    degenerate: bool
    n_points: int

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "rate": self.rate, "ci": list(self.ci),
                "degenerate": self.degenerate, "n_points": self.n_points}


def _fit_tail(times, curve):
    keep = curve > 0
    if np.count_nonzero(keep) < 2:
        return -math.inf, math.nan
    slope, intercept = np.polyfit(times[keep], np.log(curve[keep]), 1)
    return float(slope), float(intercept)


def decay_fit(run: CouplingRun, p: float | None = None, n_boot: int = 200, seed: int = 0,
              level: float = 0.95) -> DecayFit:
    """Least-squares slope of ``log E_Q ||X_t - Y_t||^p`` on the second half of ``[0, T]``.

    ``rate = slope / p``.  The interval comes from a particle bootstrap with
    weights renormalized inside each resample.
    """
    p = run.cfg.p if p is None else p
    times = run.times()
    tail = times >= times[-1] / 2
    gp = run.gap_norms()[:, tail] ** p
    lw = run.log_weight[:, tail]
    w = np.exp(lw - np.max(lw, axis=0))

    def curve(idx):
        ww = w[idx]
        return np.sum(ww * gp[idx], axis=0) / np.sum(ww, axis=0)

    full = curve(np.arange(run.M))
    if np.all(full == 0):
        return DecayFit(-math.inf, math.nan, -math.inf, (-math.inf, -math.inf), True, 0)
    if np.count_nonzero(full > 0) < 10:
        raise DomainError("fewer than 10 tail times with a positive gap")
    slope, intercept = _fit_tail(times[tail], full)
    rng = np.random.default_rng(seed)
    boots = np.array([_fit_tail(times[tail], curve(rng.integers(0, run.M, run.M)))[0] for _ in range(n_boot)])
    a = (1 - level) / 2
    lo, hi = np.quantile(boots, [a, 1 - a])
    return DecayFit(slope, intercept, slope / p, (float(lo), float(hi)), False, int(np.count_nonzero(full > 0)))


# -- log-Harnack ----------------------------------------------------------------

@dataclass
class HarnackDefect:
    t: float
    lhs: float
    logPtf: float
    defect: float
    stderr: float
    W2sq_term: float
    grad_term: float | None
    entropy: float
    ess: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def log_harnack_defect(run: CouplingRun, f: TestFunction, t: float) -> HarnackDefect:
    """``E_Q log f(Y_t) - log E f(X_t)`` with a delta-method standard error.

    ``W2sq_term`` is ``W_2(mu, nu)^2`` of the initial laws; ``grad_term`` is
    ``e^{-tau0 t} ||grad log f|| W_2(mu, nu)``.  Constants multiplying these
    are left to the caller.
    """
    j = run.grid.step_index(t)
    L = run.grid.window
    yt = run.Y[:, j + L - 1]
    xt = run.X[:, j + L - 1]
    w = run.weights(j)
    ly = f.log(yt)
    fx = f(xt)
    if np.any(fx <= 0):
        raise DomainError("test function is not strictly positive on the sample")
    lhs = float(np.sum(w * ly))
    mfx = float(np.mean(fx))
    log_ptf = math.log(mfx)
    se_l = math.sqrt(float(np.sum(w * w * (ly - lhs) ** 2)))
    se_r = float(np.std(fx, ddof=1) / math.sqrt(run.M) / mfx) if run.M > 1 else 0.0
    w2 = run.w2_initial
    grad = None if f.grad_log_sup is None else math.exp(-run.cfg.tau0 * t) * f.grad_log_sup * w2
    return HarnackDefect(float(t), lhs, log_ptf, lhs - log_ptf, math.hypot(se_l, se_r), w2 * w2, grad,
                         float(run.entropy[j]), float(run.ess[j]))


def trend_test(times, values, alpha: float = 0.05) -> dict:
    """Mann-Kendall style test for an increasing trend via Kendall's tau."""
    res = stats.kendalltau(times, values, alternative="greater")
    return {"kendall_tau": float(res.statistic), "p_increasing": float(res.pvalue),
            "nonincreasing": bool(res.pvalue >= alpha)}


# -- gradient estimate ----------------------------------------------------------

@dataclass
class GradientRow:
    t: float
    direction: int
    fd_gradient: float
    fd_stderr: float
    variance_term: float
    residual: float


@dataclass
class GradientCheck:
    rows: list
    C: float
    fitted_rate: float
    unstable: bool

    def to_dict(self) -> dict:
        return {"C": self.C, "fitted_rate": self.fitted_rate, "unstable": self.unstable,
                "rows": [r.__dict__ for r in self.rows]}


def _ensemble_values(coeffs, init, grid, noise, phase, workers):
    if coeffs.flags.distribution_dependent:
        ens, _ = simulate_interacting(coeffs, init, grid, noise, phase=phase, workers=workers)
    else:
        ens = simulate_frozen(coeffs, None, init, grid, noise, phase=phase, workers=workers)
    return ens.present()


def gradient_estimate_check(coeffs: CoefficientSet, f: TestFunction, xi: np.ndarray, directions, grid: GridSpec,
                            M: int, noise: NoisePlan, times=None, eps: float = 1e-3, workers: int = 1,
                            phase="gradient") -> GradientCheck:
    """Central differences of ``P_t f`` along each direction with common noise.

    ``xi`` is one segment ``(window, d)``; every particle starts from it.
    ``residual = |fd| - C * variance_term`` where ``C`` and a decaying
    envelope ``A e^{rho t}`` are fitted jointly to ``|fd|``; ``fitted_rate``
    is the log-linear slope of the positive residuals.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (grid.window, coeffs.d):
        raise ShapeError(f"xi needs shape ({grid.window}, {coeffs.d})")
    if not eps > 0:
        raise DomainError("eps must be positive")
    steps = np.arange(grid.n_steps + 1) if times is None else np.array([grid.step_index(t) for t in times])
    base = _ensemble_values(coeffs, np.repeat(xi[None], M, 0), grid, noise, phase, workers)
    fb = f(base[:, steps])
    var_term = np.sqrt(np.maximum(np.mean(fb * fb, axis=0) - np.mean(fb, axis=0) ** 2, 0.0))
    rows, fds, vts, ts = [], [], [], []
    unstable = False
    for k, v in enumerate(directions):
        v = np.asarray(v, dtype=float)
        if v.shape != xi.shape:
            raise ShapeError("direction shape differs from xi")
        up = f(_ensemble_values(coeffs, np.repeat((xi + eps * v)[None], M, 0), grid, noise, phase, workers)[:, steps])
        dn = f(_ensemble_values(coeffs, np.repeat((xi - eps * v)[None], M, 0), grid, noise, phase, workers)[:, steps])
        per = (up - dn) / (2 * eps)
        fd = np.mean(per, axis=0)
        se = np.std(per, axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros_like(fd)
        if np.any((se > 0) & (np.abs(fd) < se)):
            unstable = True
        for i, j in enumerate(steps):
            rows.append(GradientRow(float(j * grid.h), k, float(fd[i]), float(se[i]), float(var_term[i]), 0.0))
        fds.append(np.abs(fd))
        vts.append(var_term)
        ts.append(steps * grid.h)
    if unstable:
        log.warning("finite-difference gradient is below its Monte-Carlo error at some times; increase eps or M")
    t_all, g_all, v_all = np.concatenate(ts), np.concatenate(fds), np.concatenate(vts)
    C = _fit_envelope(t_all, g_all, v_all)
    resid = g_all - C * v_all
    for r, res in zip(rows, resid):
        r.residual = float(res)
    pos = resid > 0
    rate = float(np.polyfit(t_all[pos], np.log(resid[pos]), 1)[0]) if np.count_nonzero(pos) >= 2 else -math.inf
    return GradientCheck(rows, float(C), rate, unstable)


def _fit_envelope(t, g, v) -> float:
    """``C`` from ``g ~ C v + A e^{rho t}`` with ``C, A >= 0``."""
    def solve(rho):
        X = np.column_stack([v, np.exp(rho * t)])
        coef, res = optimize.nnls(X, g)
        return coef, res

    span = max(float(t.max()), 1e-12)
    best = optimize.minimize_scalar(lambda r: solve(r)[1], bounds=(-50.0 / span, 5.0 / span), method="bounded")
    return float(solve(best.x)[0][0])
