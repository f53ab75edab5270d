"""Euler-Maruyama integration of segment-dependent SDEs.

Noise is keyed by ``(master_seed, particle_index, phase)``: every particle owns
a PCG64 stream per phase, drawn sequentially in time blocks.  Block size and
worker count change only how the draws are scheduled, never their values, and
every cross-particle reduction runs in index order.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coefficients import CoefficientSet
from .errors import BlowUpError, DomainError, GridMismatchError, ShapeError
from .measure_flow import EmpiricalMeasure, EmpiricalMeasureFlow
from .segment_path import GridSpec, WeightedSegment, window_norms, write_csv

log = logging.getLogger(__name__)

_NOISE_BLOCK_ELEMS = 1 << 22


def phase_code(tag) -> int:
    """Integer key of a phase tag; integers pass through, strings are hashed."""
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise DomainError("integer phase tags must be >= 0")
        return int(tag)
    return zlib.crc32(str(tag).encode())


@dataclass(frozen=True)
class NoisePlan:
    """Brownian increments ``N(0, h I)`` keyed by particle and phase."""

    master_seed: int
    h: float
    d: int = 1

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise DomainError("master_seed must fit in 64 unsigned bits")
        if not self.h > 0:
            raise DomainError("h must be positive")

    def generator(self, particle: int, phase="main") -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.master_seed), spawn_key=(int(particle), phase_code(phase)))
        return np.random.Generator(np.random.PCG64(ss))

    def stream(self, particles, phase="main", workers: int = 1) -> "NoiseStream":
        return NoiseStream(self, np.asarray(particles, dtype=np.int64), phase, workers)

    def increments(self, particle: int, n_steps: int, phase="main") -> np.ndarray:
        """All ``n_steps`` increments of one particle, shape ``(n_steps, d)``."""
        g = self.generator(particle, phase)
        return g.standard_normal((n_steps, self.d)) * math.sqrt(self.h)


class NoiseStream:
    """Sequential reader of the increments of a set of particles."""

    def __init__(self, plan: NoisePlan, particles: np.ndarray, phase, workers: int = 1):
        self.plan = plan
        self.particles = particles
        self.workers = max(1, int(workers))
        self._gens = [plan.generator(int(i), phase) for i in particles]
        self._scale = math.sqrt(plan.h)

    def draw(self, n: int) -> np.ndarray:
        """Next ``n`` increments of every particle, shape ``(M, n, d)``."""
        M, d = len(self._gens), self.plan.d
        out = np.empty((M, n, d))

        def fill(lo, hi):
            for i in range(lo, hi):
                self._gens[i].standard_normal((n, d), out=out[i])

        if self.workers > 1 and M > 1:
            edges = np.linspace(0, M, min(self.workers, M) + 1).astype(int)
            with ThreadPoolExecutor(self.workers) as pool:
                list(pool.map(lambda k: fill(edges[k], edges[k + 1]), range(len(edges) - 1)))
        else:
            fill(0, M)
        out *= self._scale
        return out


@dataclass
class EnsembleState:
    """Particle paths on a shared grid.

    ``values[:, i]`` is the node ``first + i`` of the grid (node 0 is time
    ``-T_hist``).  ``keep="full"`` runs have ``first == 0``; ``keep="window"``
    runs keep only the final segment.
    """

    grid: GridSpec
    tau: float
    values: np.ndarray
    mode: str
    first: int = 0
    tail_policy: str = "constant"

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ShapeError(f"ensemble values need shape (M, nodes, d), got {self.values.shape}")
        if self.first + self.values.shape[1] != self.grid.n_nodes:
            raise ShapeError("stored nodes do not end at the final grid time")

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def full(self) -> bool:
        return self.first == 0

    @property
    def paths(self) -> np.ndarray:
        if not self.full:
            raise DomainError("ensemble was run with keep='window'; full paths are not stored")
        return self.values

    def step_range(self) -> np.ndarray:
        """Simulation steps whose segment is stored."""
        return np.arange(self.first, self.grid.n_steps + 1)

    def times(self) -> np.ndarray:
        return self.step_range() * self.grid.h

    def present(self) -> np.ndarray:
        """``(M, steps, d)`` current values at the stored steps."""
        return self.values[:, self.grid.n_hist:, :] if self.full else self.values[:, -len(self.step_range()):, :]

    def final_window(self) -> np.ndarray:
        return self.values[:, -self.grid.window:, :]

    def final_measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.tau, self.grid.h, self.final_window(), self.tail_policy)

    def norms(self) -> np.ndarray:
        """``(M, steps)`` weighted segment norms at the stored steps."""
        return window_norms(self.values, self.tau, self.grid)

    def flow(self) -> EmpiricalMeasureFlow:
        return EmpiricalMeasureFlow.from_paths(self.grid, self.tau, self.paths, self.tail_policy)

    def save(self, directory, model: str, master_seed: int) -> None:
        """One CSV per particle plus ``manifest.json``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        t = (np.arange(self.values.shape[1]) + self.first - self.grid.n_hist) * self.grid.h
        for i in range(self.M):
            write_csv(out / f"particle_{i:05d}.csv", t, self.values[i])
        manifest = {"model": model, "grid": self.grid.to_dict(), "M": self.M, "master_seed": int(master_seed),
                    "mode": self.mode, "tau": self.tau, "first_node": self.first, "d": self.d}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def initial_array(initials, grid: GridSpec, tau: float, d: int) -> np.ndarray:
    """Stack initial segments into ``(M, window, d)`` after grid checks."""
    if isinstance(initials, EmpiricalMeasure):
        if initials.tau != tau or initials.h != grid.h:
            raise GridMismatchError("initial measure uses a different grid")
        arr = np.array(initials.atoms)
    elif isinstance(initials, np.ndarray):
        arr = np.array(initials, dtype=float)
    else:
        segs = list(initials)
        for s in segs:
            if not isinstance(s, WeightedSegment):
                raise ShapeError("initials must be WeightedSegments, an EmpiricalMeasure or an array")
            if s.tau != tau or s.h != grid.h:
                raise GridMismatchError("initial segment uses a different grid")
        arr = np.stack([s.values for s in segs]) if segs else np.empty((0, grid.window, d))
    if arr.ndim != 3 or arr.shape[1:] != (grid.window, d) or arr.shape[0] < 1:
        raise ShapeError(f"initials need shape (M, {grid.window}, {d}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("initial segments contain non-finite values")
    return arr


def _check_flow(flow: EmpiricalMeasureFlow, grid: GridSpec, tau: float, d: int) -> None:
    fg = flow.grid
    if fg.h != grid.h or fg.n_hist != grid.n_hist or fg.n_steps < grid.n_steps:
        raise GridMismatchError("flow grid does not cover the simulation grid")
    if flow.tau != tau or flow.d != d:
        raise GridMismatchError("flow and model disagree on tau or dimension")


def _time_block(M: int, d: int, n_steps: int) -> int:
    return max(1, min(n_steps, _NOISE_BLOCK_ELEMS // max(1, M * d)))


def _blow_up(x: np.ndarray, j: int, offset: int = 0):
    bad = ~np.all(np.isfinite(x), axis=1)
    i = int(np.argmax(bad))
    raise BlowUpError(f"non-finite state for particle {i + offset} at step {j + 1}", particle=i + offset, step=j + 1)


def _integrate(coeffs: CoefficientSet, init: np.ndarray, grid: GridSpec, stream: NoiseStream, measure_at,
               keep: str, on_step=None) -> tuple[np.ndarray, int]:
    """Run the Euler scheme; ``measure_at(j, seg)`` supplies the measure at step ``j``."""
    M, L, d = init.shape
    n, h = grid.n_steps, grid.h
    if keep not in ("full", "window"):
        raise DomainError(f"keep must be 'full' or 'window', got {keep!r}")
    B = _time_block(M, d, n)
    if keep == "full":
        buf = np.empty((M, grid.n_nodes, d))
    else:
        buf = np.empty((M, L + B, d))
    buf[:, :L] = init
    pos = L - 1  # buffer index of the current node
    noise = None
    for j in range(n):
        k = j % B
        if k == 0:
            noise = stream.draw(min(B, n - j))
            if keep == "window" and pos + noise.shape[1] >= buf.shape[1]:
                buf[:, :L] = buf[:, pos - L + 1:pos + 1]
                pos = L - 1
        seg = buf[:, pos - L + 1:pos + 1]
        t = j * h
        b = coeffs.scheme_drift(t, seg, measure_at(j, seg), h)
        S = coeffs.diffusion(t, seg)
        dW = noise[:, k]
        if d == 1:
            x = seg[:, -1] + b * h + S[:, :, 0] * dW
        else:
            x = seg[:, -1] + b * h + np.einsum("mij,mj->mi", S, dW)
        if not np.all(np.isfinite(x)):
            _blow_up(x, j)
        buf[:, pos + 1] = x
        pos += 1
        if on_step is not None:
            on_step(j, seg, x)
    if keep == "full":
        return buf, 0
    return buf[:, pos - L + 1:pos + 1].copy(), grid.n_steps


def simulate_frozen(coeffs: CoefficientSet, flow: EmpiricalMeasureFlow | None, initials, grid: GridSpec,
                    noise: NoisePlan, *, phase="main", keep: str = "full", workers: int = 1,
                    particle_offset: int = 0) -> EnsembleState:
    """Euler scheme with the measure argument read from ``flow`` at each step.

    ``flow`` may be ``None`` only for distribution-free models.
    """
    tau = coeffs.tau
    init = initial_array(initials, grid, tau, coeffs.d)
    _check_noise(noise, grid, coeffs.d)
    if flow is None:
        if coeffs.flags.distribution_dependent:
            raise DomainError("distribution-dependent model needs a measure flow")
        measure_at = lambda j, seg: None
    else:
        _check_flow(flow, grid, tau, coeffs.d)
        measure_at = lambda j, seg: flow.measure(j)
    stream = noise.stream(np.arange(init.shape[0]) + particle_offset, phase, workers)
    vals, first = _integrate(coeffs, init, grid, stream, measure_at, keep)
    return EnsembleState(grid, tau, vals, "frozen_flow", first)


def simulate_interacting(coeffs: CoefficientSet, initials, grid: GridSpec, noise: NoisePlan, *, phase="main",
                         keep: str = "full", workers: int = 1):
    """Mean-field particle system: the measure is the empirical law of the current segments.

    Returns ``(ensemble, flow)``; ``flow`` is ``None`` for ``keep="window"``.
    """
    tau = coeffs.tau
    init = initial_array(initials, grid, tau, coeffs.d)
    _check_noise(noise, grid, coeffs.d)
    if coeffs.flags.distribution_dependent:
        measure_at = lambda j, seg: EmpiricalMeasure(tau, grid.h, seg)
    else:
        measure_at = lambda j, seg: None
    stream = noise.stream(np.arange(init.shape[0]), phase, workers)
    vals, first = _integrate(coeffs, init, grid, stream, measure_at, keep)
    ens = EnsembleState(grid, tau, vals, "interacting", first)
    return ens, (ens.flow() if ens.full else None)


def _check_noise(noise: NoisePlan, grid: GridSpec, d: int) -> None:
    if noise.h != grid.h or noise.d != d:
        raise GridMismatchError(f"noise plan (h={noise.h}, d={noise.d}) does not match grid h={grid.h}, d={d}")


# -- Monte-Carlo functionals ------------------------------------------------

@dataclass
class MomentCurve:
    times: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    sup_estimate: np.ndarray
    sup_stderr: np.ndarray
    point_estimate: np.ndarray
    point_stderr: np.ndarray

    def rows(self):
        cols = (self.times, self.estimate, self.stderr, self.sup_estimate, self.sup_stderr, self.point_estimate,
                self.point_stderr)
        return [tuple(float(c[i]) for c in cols) for i in range(len(self.times))]


MOMENT_COLUMNS = ("t", "estimate", "stderr", "sup_estimate", "sup_stderr", "point_estimate", "point_stderr")


def _mean_se(a: np.ndarray):
    """Column means and standard errors over axis 0."""
    m = a.shape[0]
    mean = np.mean(a, axis=0)
    se = np.std(a, axis=0, ddof=1) / math.sqrt(m) if m > 1 else np.zeros_like(mean)
    return mean, se


def moment_curve(ens: EnsembleState, k: float) -> MomentCurve:
    """``E||X_t||^k``, ``E sup_{s<=t} ||X_s||^k`` and ``E|X(t)|^k`` with standard errors.

    The running sup starts at the first stored step.  ``k = 0`` gives ones.
    """
    if k < 0:
        raise DomainError(f"k must be >= 0, got {k!r}")
    times = ens.times()
    if k == 0:
        one, zero = np.ones(len(times)), np.zeros(len(times))
        return MomentCurve(times, one, zero, one.copy(), zero.copy(), one.copy(), zero.copy())
    nrm = ens.norms() ** k
    sup = np.maximum.accumulate(nrm, axis=1)
    pt = np.sqrt(np.sum(ens.present() ** 2, axis=-1)) ** k
    e, se = _mean_se(nrm)
    s, sse = _mean_se(sup)
    p, pse = _mean_se(pt)
    return MomentCurve(times, e, se, s, sse, p, pse)


@dataclass
class ExpMoment:
    times: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    point_estimate: np.ndarray
    point_stderr: np.ndarray
    max_share: np.ndarray
    degenerate: np.ndarray
    overflow: list


def exp_moment(ens: EnsembleState, beta: float, alpha: float) -> ExpMoment:
    """``E exp(beta ||X_t||^{2 alpha})`` per stored step.

    ``degenerate`` flags steps where one particle carries more than half of
    the exponential mass.  Overflowing steps report ``inf`` and are listed in
    ``overflow`` with the offending particle and norm.
    """
    if beta < 0:
        raise DomainError(f"beta must be >= 0, got {beta!r}")
    if not 0 <= alpha <= 1:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha!r}")
    times = ens.times()
    nrm = ens.norms()
    pt = np.sqrt(np.sum(ens.present() ** 2, axis=-1))
    expo = beta * (nrm ** (2 * alpha) if alpha > 0 else np.ones_like(nrm))
    expo_pt = beta * (pt ** (2 * alpha) if alpha > 0 else np.ones_like(pt))
    with np.errstate(over="ignore"):
        vals = np.exp(expo)
        pvals = np.exp(expo_pt)
    est, se = _mean_se(vals)
    pest, pse = _mean_se(pvals)
    overflow = []
    bad = ~np.isfinite(vals)
    for j in np.flatnonzero(bad.any(axis=0)):
        i = int(np.argmax(bad[:, j]))
        overflow.append({"t": float(times[j]), "particle": i, "norm": float(nrm[i, j])})
        est[j], se[j] = math.inf, math.inf
    with np.errstate(invalid="ignore"):
        share = np.max(vals, axis=0) / np.sum(vals, axis=0)
    share = np.where(np.isfinite(share), share, 1.0)
    return ExpMoment(times, est, se, pest, pse, share, share > 0.5, overflow)
