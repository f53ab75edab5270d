"""Empirical measures on the weighted path space and distances between them.

Wasserstein distances between equal-size empirical measures are computed
exactly as an assignment problem over the pairwise truncated-norm costs.  The
flow metric ``sup_t e^{-theta t} W_2(F_t, G_t)`` is evaluated exactly but
lazily: the identity pairing gives a cheap upper bound at every time, and the
assignment problem is only solved at times whose bound could still change the
maximum.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DomainError, GridMismatchError, OutOfRangeError, ShapeError, UnsupportedCouplingError
from .segment_path import GridSpec, WeightedSegment, grid_count, segment_weights


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform measure on ``M`` segments stored as an ``(M, window, d)`` array."""

    tau: float
    h: float
    atoms: np.ndarray
    tail_policy: str = "constant"

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ShapeError(f"atoms must have shape (M, window, d), got {np.shape(self.atoms)}")
        if a.flags.writeable:
            a = a.copy() if a is self.atoms else a
            a.flags.writeable = False
        object.__setattr__(self, "atoms", a)

    @classmethod
    def from_segments(cls, segments) -> "EmpiricalMeasure":
        segments = list(segments)
        if not segments:
            raise ShapeError("an empirical measure needs at least one atom")
        s0 = segments[0]
        for s in segments[1:]:
            if not s0.same_grid(s):
                raise GridMismatchError("atoms live on different grids")
        return cls(s0.tau, s0.h, np.stack([s.values for s in segments]), s0.tail_policy)

    @classmethod
    def dirac(cls, xi: WeightedSegment) -> "EmpiricalMeasure":
        return cls.from_segments([xi])

    @property
    def M(self) -> int:
        return self.atoms.shape[0]

    @property
    def window(self) -> int:
        return self.atoms.shape[1]

    @property
    def d(self) -> int:
        return self.atoms.shape[2]

    @property
    def T_hist(self) -> float:
        return (self.window - 1) * self.h

    def present(self) -> np.ndarray:
        """Current values ``eta(0)`` of all atoms, shape ``(M, d)``."""
        return self.atoms[:, -1, :]

    def segment(self, i: int) -> WeightedSegment:
        return WeightedSegment(self.tau, self.h, self.atoms[i], self.tail_policy)

    def segments(self):
        return [self.segment(i) for i in range(self.M)]

    def norms(self) -> np.ndarray:
        w = segment_weights(self.tau, self.h, self.window)
        return np.max(np.sqrt(np.sum(self.atoms * self.atoms, axis=-1)) * w, axis=1)

    def check_compatible(self, other: "EmpiricalMeasure") -> None:
        if self.tau != other.tau or self.h != other.h or self.window != other.window or self.d != other.d:
            raise GridMismatchError("measures live on different grids")


def moment_norm(mu: EmpiricalMeasure, k: float) -> float:
    """``(mean ||xi||_tau^k)^{1/k}``; 1 by convention when ``k == 0``."""
    if k < 0:
        raise DomainError(f"k must be >= 0, got {k!r}")
    if k == 0:
        return 1.0
    return float(np.mean(mu.norms() ** k) ** (1.0 / k))


def _window_nodes(window: int, h: float, N: float | None) -> int:
    if N is None:
        return window
    if not N > 0:
        raise GridMismatchError(f"window N must be positive, got {N!r}")
    n = grid_count(N, h, "N")
    if n > window - 1:
        raise OutOfRangeError(f"window N={N!r} exceeds the stored history")
    return n + 1


def cost_matrix(A: np.ndarray, B: np.ndarray, tau: float, h: float, n_nodes: int | None = None) -> np.ndarray:
    """``C[i, j] = ||A_i - B_j||_{N,tau}`` over the last ``n_nodes`` nodes."""
    L = A.shape[1] if n_nodes is None else n_nodes
    A = A[:, A.shape[1] - L:, :]
    B = B[:, B.shape[1] - L:, :]
    w = segment_weights(tau, h, A.shape[1] if n_nodes is None else L)
    w = w[w.shape[0] - L:]
    out = np.zeros((A.shape[0], B.shape[0]))
    tmp = np.empty_like(out)
    for l in range(L):
        if A.shape[2] == 1:
            np.subtract(A[:, None, l, 0], B[None, :, l, 0], out=tmp)
            np.multiply(tmp, tmp, out=tmp)
        else:
            diff = A[:, None, l, :] - B[None, :, l, :]
            np.sum(diff * diff, axis=-1, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp *= w[l]
        np.maximum(out, tmp, out=out)
    return out


def _pair_cost(C: np.ndarray, k: float, rows, cols) -> float:
    return float(np.sum(C[rows, cols] ** k) / C.shape[0])


def _finish(total: float, k: float) -> float:
    return total ** (1.0 / max(1.0, k))


def optimal_assignment(mu: EmpiricalMeasure, nu: EmpiricalMeasure, k: float = 2.0, N: float | None = None):
    """Optimal pairing ``i -> perm[i]`` and its distance."""
    _check_pair(mu, nu, k)
    n = _window_nodes(mu.window, mu.h, N)
    C = cost_matrix(mu.atoms, nu.atoms, mu.tau, mu.h, n)
    rows, cols = linear_sum_assignment(C ** k)
    return cols, _finish(_pair_cost(C, k, rows, cols), k)


def _check_pair(mu, nu, k):
    if not k > 0:
        raise DomainError(f"k must be positive, got {k!r}")
    if mu.M != nu.M:
        raise UnsupportedCouplingError(f"equal atom counts required, got {mu.M} and {nu.M}")
    mu.check_compatible(nu)


def wasserstein(mu: EmpiricalMeasure, nu: EmpiricalMeasure, k: float = 2.0, N: float | None = None) -> float:
    """L^k-Wasserstein distance under the truncated weighted norm on ``[-N, 0]``.

    ``N`` defaults to the full stored history, where the truncated norm is
    largest.  The result carries the exponent ``1 / max(1, k)``.
    """
    return optimal_assignment(mu, nu, k, N)[1]


def _exact_w(A, B, tau, h, k, n_nodes):
    """Optimal cost, never above the identity pairing evaluated the same way."""
    C = cost_matrix(A, B, tau, h, n_nodes)
    rows, cols = linear_sum_assignment(C ** k)
    diag = np.arange(C.shape[0])
    return _finish(min(_pair_cost(C, k, rows, cols), _pair_cost(C, k, diag, diag)), k)


class EmpiricalMeasureFlow:
    """Time-indexed empirical measures on the simulation grid.

    Either backed by full particle paths of shape ``(M, n_nodes, d)``, in which
    case the measure at step ``j`` is the set of windows ``paths[:, j:j+window]``,
    or by a single measure held constant in time.
    """

    def __init__(self, grid: GridSpec, tau: float, *, paths=None, constant: EmpiricalMeasure | None = None,
                 tail_policy: str = "constant"):
        if (paths is None) == (constant is None):
            raise ValueError("give exactly one of paths or constant")
        self.grid = grid
        self.tau = tau
        self.tail_policy = tail_policy
        self.constant = constant
        if paths is not None:
            p = np.asarray(paths, dtype=float)
            if p.ndim != 3 or p.shape[1] != grid.n_nodes:
                raise ShapeError(f"flow paths need shape (M, {grid.n_nodes}, d), got {p.shape}")
            p.flags.writeable = False
            self.paths = p
        else:
            if constant.window != grid.window or constant.h != grid.h or constant.tau != tau:
                raise GridMismatchError("constant measure does not match the flow grid")
            self.paths = None

    @classmethod
    def from_paths(cls, grid, tau, paths, tail_policy="constant"):
        return cls(grid, tau, paths=paths, tail_policy=tail_policy)

    @classmethod
    def constant_flow(cls, grid, measure: EmpiricalMeasure):
        return cls(grid, measure.tau, constant=measure, tail_policy=measure.tail_policy)

    @property
    def M(self) -> int:
        return self.paths.shape[0] if self.paths is not None else self.constant.M

    @property
    def d(self) -> int:
        return self.paths.shape[2] if self.paths is not None else self.constant.d

    @property
    def n_times(self) -> int:
        return self.grid.n_steps + 1

    def atoms(self, j: int) -> np.ndarray:
        if not 0 <= j < self.n_times:
            raise OutOfRangeError(f"step {j} outside the flow")
        if self.paths is None:
            return self.constant.atoms
        return self.paths[:, j:j + self.grid.window, :]

    def measure(self, j: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.tau, self.grid.h, self.atoms(j), self.tail_policy)

    def present_values(self) -> np.ndarray:
        """``(n_times, M, d)`` array of the atoms' current values."""
        if self.paths is None:
            return np.broadcast_to(self.constant.present(), (self.n_times,) + self.constant.present().shape)
        return np.swapaxes(self.paths[:, self.grid.n_hist:, :], 0, 1)

    def check_compatible(self, other: "EmpiricalMeasureFlow") -> None:
        if self.grid != other.grid or self.tau != other.tau:
            raise GridMismatchError("flows live on different grids")
        if self.M != other.M:
            raise UnsupportedCouplingError(f"equal atom counts required, got {self.M} and {other.M}")


def identity_pairing_profile(F: EmpiricalMeasureFlow, G: EmpiricalMeasureFlow, k: float = 2.0) -> np.ndarray:
    """W_k of the index-wise pairing at every time; an upper bound on W_k."""
    F.check_compatible(G)
    w = segment_weights(F.tau, F.grid.h, F.grid.window)
    out = np.empty(F.n_times)
    for j in range(F.n_times):
        diff = F.atoms(j) - G.atoms(j)
        c = np.max(np.sqrt(np.sum(diff * diff, axis=-1)) * w, axis=-1)
        out[j] = _finish(float(np.sum(c ** k) / c.shape[0]), k)
    return out


@dataclass
class FlowDistanceCache:
    """Exact per-time W_2 values computed so far for one pair of flows."""

    upper: np.ndarray
    exact: dict = field(default_factory=dict)


def make_cache(F, G) -> FlowDistanceCache:
    return FlowDistanceCache(identity_pairing_profile(F, G, 2.0))


_BATCH = 8


def flow_distance_theta(F: EmpiricalMeasureFlow, G: EmpiricalMeasureFlow, theta: float,
                        cache: FlowDistanceCache | None = None, workers: int = 1) -> float:
    """``max_t e^{-theta t} W_2(F_t, G_t)`` over the grid times.

    Times are visited in decreasing order of their identity-pairing bound and
    the assignment problem is skipped once the bound cannot exceed the running
    maximum.  Candidate batches have a fixed size, so the set of solved times
    and the result do not depend on ``workers``.
    """
    if theta < 0:
        raise DomainError(f"theta must be >= 0, got {theta!r}")
    F.check_compatible(G)
    if cache is None:
        cache = make_cache(F, G)
    damp = np.exp(-theta * F.grid.times())
    bound = cache.upper * damp
    order = np.argsort(-bound, kind="stable")
    best = 0.0
    pos = 0
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while pos < len(order):
            batch = []
            while pos < len(order) and len(batch) < _BATCH:
                j = int(order[pos])
                pos += 1
                if bound[j] <= best:
                    pos = len(order)
                    break
                batch.append(j)
            todo = [j for j in batch if j not in cache.exact]
            if todo:
                jobs = [(F.atoms(j), G.atoms(j)) for j in todo]
                fn = lambda ab: _exact_w(ab[0], ab[1], F.tau, F.grid.h, 2.0, None)
                vals = list(pool.map(fn, jobs)) if pool else [fn(ab) for ab in jobs]
                cache.exact.update(zip(todo, vals))
            for j in batch:
                best = max(best, cache.exact[j] * damp[j])
    finally:
        if pool:
            pool.shutdown()
    return float(best)


def w2_profile(F: EmpiricalMeasureFlow, G: EmpiricalMeasureFlow, workers: int = 1) -> np.ndarray:
    """Exact W_2 at every grid time (no pruning)."""
    F.check_compatible(G)
    fn = lambda j: _exact_w(F.atoms(j), G.atoms(j), F.tau, F.grid.h, 2.0, None)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return np.array(list(pool.map(fn, range(F.n_times))))
    return np.array([fn(j) for j in range(F.n_times)])


def theta_weighted(profile: np.ndarray, times: np.ndarray, theta: float) -> float:
    return float(np.max(profile * np.exp(-theta * times)))


def distance_rows(F, G, theta: float, workers: int = 1):
    """Rows ``(t, W2, theta_weighted)`` for a distance report."""
    prof = w2_profile(F, G, workers)
    t = F.grid.times()
    return [(float(ti), float(w), float(w * math.exp(-theta * ti))) for ti, w in zip(t, prof)]

