"""Fixed-point iteration on measure flows with contraction diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field


from .coefficients import CoefficientSet
from .errors import DomainError, InsufficientIterationsError
from .measure_flow import (EmpiricalMeasure, EmpiricalMeasureFlow, flow_distance_theta,
                           make_cache, moment_norm)
from .sde_engine import NoisePlan, simulate_frozen
from .segment_path import GridSpec


@dataclass(frozen=True)
class PicardConfig:
    grid: GridSpec
    M: int
    tol: float = 1e-3
    max_iter: int = 20
    theta: float | None = None
    common_noise: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise DomainError("tol must be positive")
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1")
        if self.M < 1:
            raise DomainError("M must be >= 1")
        if self.theta is not None and self.theta < 0:
            raise DomainError("theta must be >= 0")


def default_theta(coeffs: CoefficientSet) -> float:
    c = coeffs.constants
    return 2.0 * (c.K1 + c.K2 + 1.0)


@dataclass
class PicardTrace:
    theta: float
    tol: float
    flows: list
    distances: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    converged: bool = False
    certificate: float | None = None

    @property
    def iterations(self) -> int:
        return len(self.distances)

    @property
    def ratios(self) -> list:
        """``d_{j+1} / d_j``; ``None`` where ``d_j`` is below the noise floor."""
        return _ratios(self.distances, self.tol)

    def rows(self):
        r = [None] + self.ratios
        return [(j, d, r[j]) for j, d in enumerate(self.distances)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "d", "ratio"])
            for j, d, r in self.rows():
                w.writerow([j, repr(float(d)), "" if r is None else repr(float(r))])

    def to_dict(self) -> dict:
        return {"theta": self.theta, "tol": self.tol, "distances": [float(d) for d in self.distances],
                "ratios": self.ratios, "converged": self.converged, "iterations": self.iterations,
                "certificate": self.certificate}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _ratios(distances, tol):
    floor = tol * 1e-3
    return [float(distances[j + 1] / distances[j]) if distances[j] > floor else None
            for j in range(len(distances) - 1)]


def _phase(cfg: PicardConfig, j: int):
    return "picard" if cfg.common_noise else f"picard:{j}"


def solve_fixed_point(coeffs: CoefficientSet, gamma: EmpiricalMeasure, cfg: PicardConfig, noise: NoisePlan,
                      workers: int = 1):
    """Iterate ``flow -> law of the frozen-flow SDE`` from the constant flow ``gamma``.

    ``d_j`` is the ``W_{2,theta}`` gap between iterates ``j+1`` and ``j``.
    Stops when ``d_j < tol`` or after ``max_iter`` simulations; the returned
    flow is the last iterate.  On convergence one extra application gives
    ``certificate = W_{2,theta}(Phi(flow), flow)``.
    """
    grid = cfg.grid
    if gamma.M != cfg.M:
        raise DomainError(f"gamma has {gamma.M} atoms, config asks for M={cfg.M}")
    if gamma.window != grid.window or gamma.h != grid.h or gamma.tau != coeffs.tau:
        raise DomainError("gamma does not live on the configured grid")
    if not math.isfinite(moment_norm(gamma, 2.0)):
        raise DomainError("initial law must have a finite second moment")
    theta = default_theta(coeffs) if cfg.theta is None else cfg.theta

    def phi(flow, j):
        return simulate_frozen(coeffs, flow, gamma, grid, noise, phase=_phase(cfg, j), workers=workers).flow()

    flows = [EmpiricalMeasureFlow.constant_flow(grid, gamma)]
    trace = PicardTrace(theta, cfg.tol, flows)
    for j in range(cfg.max_iter):
        flows.append(phi(flows[-1], j))
        cache = make_cache(flows[-1], flows[-2])
        d = flow_distance_theta(flows[-1], flows[-2], theta, cache, workers)
        trace.distances.append(d)
        trace.caches.append(cache)
        if d < cfg.tol:
            trace.converged = True
            break
    if trace.converged:
        extra = phi(flows[-1], len(flows) - 1)
        trace.certificate = flow_distance_theta(extra, flows[-1], theta, None, workers)
    return flows[-1], trace


@dataclass
class ContractionRow:
    theta: float
    max_ratio: float | None
    iterations_to_tol: int | None


@dataclass
class ContractionReport:
    rows: list
    smallest_contractive_theta: float | None
    degenerate: bool


def contraction_report(trace: PicardTrace, thetas, workers: int = 1) -> ContractionReport:
    """Re-weigh the stored iterate gaps under each ``theta``."""
    if len(trace.flows) < 3:
        raise InsufficientIterationsError(f"need at least 3 flows, trace has {len(trace.flows)}")
    rows = []
    degenerate = all(d <= trace.tol * 1e-3 for d in trace.distances)
    for th in thetas:
        if th < 0:
            raise DomainError("theta must be >= 0")
        ds = [flow_distance_theta(trace.flows[j + 1], trace.flows[j], th, trace.caches[j], workers)
              for j in range(len(trace.distances))]
        rs = [r for r in _ratios(ds, trace.tol) if r is not None]
        hit = next((j for j, d in enumerate(ds) if d < trace.tol), None)
        rows.append(ContractionRow(float(th), max(rs) if rs else None, hit))
    good = [r.theta for r in rows if r.max_ratio is not None and r.max_ratio < 1]
    return ContractionReport(rows, min(good) if good else None, degenerate)
