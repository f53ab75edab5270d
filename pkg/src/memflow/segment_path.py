"""Grid representation of paths on (-inf, 0] with exponentially fading weight.

A segment is stored on the uniform grid ``{-T_hist, ..., -h, 0}``.  The part of
the path older than ``-T_hist`` is not stored; ``tail_policy`` says how it is
interpreted (``"constant"``: the oldest stored value is extended to -inf,
``"zero"``: the path vanishes there).  Under either policy the weighted sup
over the unrepresented tail never exceeds the weighted value at the oldest
node, so every norm below is an exact maximum over grid nodes.  The bound on
what the tail *could* contribute if the true path were different is available
from :func:`truncation_bound`.

All time arithmetic is done on integer node indices; ``h`` only enters through
``index * h``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridMismatchError, MalformedSegmentError, OutOfRangeError, ShapeError

TAIL_POLICIES = ("constant", "zero")

_REL_GRID_TOL = 1e-9


def grid_count(length: float, h: float, what: str = "time") -> int:
    """Return ``length / h`` as an integer, or raise if it is not one."""
    if h <= 0:
        raise GridMismatchError(f"grid step must be positive, got h={h!r}")
    n = int(round(length / h))
    if abs(n * h - length) > _REL_GRID_TOL * max(1.0, abs(length)):
        raise GridMismatchError(f"{what}={length!r} is not a multiple of h={h!r}")
    return n


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid: history ``[-T_hist, 0]`` followed by simulation ``[0, T]``."""

    h: float
    T_hist: float
    T: float = 0.0
    n_hist: int = field(init=False)
    n_steps: int = field(init=False)

    def __post_init__(self):
        if not self.h > 0:
            raise GridMismatchError(f"grid step must be positive, got h={self.h!r}")
        if not self.T_hist > 0:
            raise GridMismatchError(f"history horizon must be positive, got {self.T_hist!r}")
        if self.T < 0:
            raise GridMismatchError(f"simulation horizon must be >= 0, got {self.T!r}")
        object.__setattr__(self, "n_hist", grid_count(self.T_hist, self.h, "T_hist"))
        object.__setattr__(self, "n_steps", grid_count(self.T, self.h, "T"))

    @property
    def window(self) -> int:
        """Number of nodes in one segment."""
        return self.n_hist + 1

    @property
    def n_nodes(self) -> int:
        return self.n_hist + self.n_steps + 1

    def step_index(self, t: float) -> int:
        """Index of the simulation time ``t`` (0 for t=0)."""
        j = grid_count(t, self.h, "t") if t != 0 else 0
        if j < 0 or j > self.n_steps:
            raise OutOfRangeError(f"t={t!r} outside [0, {self.T}]")
        return j

    def times(self) -> np.ndarray:
        """Simulation times ``0, h, ..., T``."""
        return np.arange(self.n_steps + 1) * self.h

    def node_times(self) -> np.ndarray:
        """Times of every stored node, ``-T_hist`` to ``T``."""
        return (np.arange(self.n_nodes) - self.n_hist) * self.h

    def segment_offsets(self) -> np.ndarray:
        """Relative times ``s`` of the nodes of one segment, oldest first."""
        return (np.arange(self.window) - self.n_hist) * self.h

    def with_horizon(self, T: float) -> "GridSpec":
        return GridSpec(self.h, self.T_hist, T)

    def to_dict(self) -> dict:
        return {"h": self.h, "T_hist": self.T_hist, "T": self.T}


def segment_weights(tau: float, h: float, window: int) -> np.ndarray:
    """``exp(tau * s)`` for the ``window`` nodes of a segment, oldest first."""
    s = (np.arange(window) - (window - 1)) * h
    return np.exp(tau * s)


@dataclass(frozen=True, eq=False)
class WeightedSegment:
    """A path on the history grid, ``values[i]`` at time ``(i - n_hist) * h``."""

    tau: float
    h: float
    values: np.ndarray
    tail_policy: str = "constant"

    def __post_init__(self):
        if not self.tau > 0:
            raise MalformedSegmentError(f"tau must be positive, got {self.tau!r}")
        if not self.h > 0:
            raise MalformedSegmentError(f"h must be positive, got {self.h!r}")
        if self.tail_policy not in TAIL_POLICIES:
            raise MalformedSegmentError(f"unknown tail policy {self.tail_policy!r}")
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise MalformedSegmentError(f"segment values must be a non-empty (n, d) array, got shape {np.shape(self.values)}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def window(self) -> int:
        return self.values.shape[0]

    @property
    def n_hist(self) -> int:
        return self.window - 1

    @property
    def T_hist(self) -> float:
        return self.n_hist * self.h

    def times(self) -> np.ndarray:
        return (np.arange(self.window) - self.n_hist) * self.h

    def weights(self) -> np.ndarray:
        return segment_weights(self.tau, self.h, self.window)

    def at(self, r: float) -> np.ndarray:
        """Value at the grid time ``r <= 0``; older times follow the tail policy."""
        i = grid_count(-r, self.h, "r") if r != 0 else 0
        if i < 0:
            raise OutOfRangeError(f"r={r!r} is in the future of the segment")
        if i > self.n_hist:
            if self.tail_policy == "zero":
                return np.zeros(self.d)
            return self.values[0].copy()
        return self.values[self.n_hist - i].copy()

    def __call__(self, r: float) -> np.ndarray:
        return self.at(r)

    def same_grid(self, other: "WeightedSegment") -> bool:
        return self.tau == other.tau and self.h == other.h and self.values.shape == other.values.shape

    def __add__(self, other):
        if not isinstance(other, WeightedSegment):
            return NotImplemented
        if not self.same_grid(other):
            raise GridMismatchError("segments live on different grids")
        return WeightedSegment(self.tau, self.h, self.values + other.values, self.tail_policy)

    def __sub__(self, other):
        if not isinstance(other, WeightedSegment):
            return NotImplemented
        if not self.same_grid(other):
            raise GridMismatchError("segments live on different grids")
        return WeightedSegment(self.tau, self.h, self.values - other.values, self.tail_policy)

    def __mul__(self, c):
        return WeightedSegment(self.tau, self.h, float(c) * self.values, self.tail_policy)

    __rmul__ = __mul__

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "h": self.h,
            "T_hist": self.T_hist,
            "tail_policy": self.tail_policy,
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "WeightedSegment":
        seg = cls(obj["tau"], obj["h"], np.asarray(obj["values"], dtype=float), obj.get("tail_policy", "constant"))
        if "T_hist" in obj and grid_count(obj["T_hist"], seg.h, "T_hist") != seg.n_hist:
            raise MalformedSegmentError("T_hist does not match the number of values")
        return seg


def _node_norms(values: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(values * values, axis=-1))


def tau_norm(xi: WeightedSegment) -> float:
    """Weighted sup norm ``max_s e^{tau s} |xi(s)|`` over the stored nodes."""
    return float(np.max(xi.weights() * _node_norms(xi.values)))


def truncated_norm(xi: WeightedSegment, N: float) -> float:
    """Weighted sup norm restricted to the window ``[-N, 0]``."""
    if not N > 0:
        raise GridMismatchError(f"window N must be positive, got {N!r}")
    n = grid_count(N, xi.h, "N")
    if n > xi.n_hist:
        raise OutOfRangeError(f"window N={N!r} exceeds T_hist={xi.T_hist!r}")
    w = xi.weights()[xi.n_hist - n:]
    return float(np.max(w * _node_norms(xi.values[xi.n_hist - n:])))


def truncation_bound(xi: WeightedSegment) -> float:
    """Largest weighted value the unrepresented tail can carry under the policy."""
    if xi.tail_policy == "zero":
        return 0.0
    return float(math.exp(-xi.tau * xi.T_hist) * np.linalg.norm(xi.values[0]))


def constant_extension(xi: WeightedSegment) -> WeightedSegment:
    """The segment frozen at its present value, ``r -> xi(0)``."""
    v = np.broadcast_to(xi.values[-1], xi.values.shape)
    return WeightedSegment(xi.tau, xi.h, v, xi.tail_policy)


def point_path(x, tau: float, h: float, T_hist: float, tail_policy: str = "constant") -> WeightedSegment:
    """The constant path equal to ``x`` on the whole history grid."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = grid_count(T_hist, h, "T_hist")
    return WeightedSegment(tau, h, np.broadcast_to(x, (n + 1, x.shape[0])), tail_policy)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A path on the full grid: the initial history followed by ``[0, T]``."""

    grid: GridSpec
    tau: float
    values: np.ndarray
    tail_policy: str = "constant"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_nodes:
            raise ShapeError(f"trajectory needs {self.grid.n_nodes} nodes, got shape {np.shape(self.values)}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def at(self, t: float) -> np.ndarray:
        i = grid_count(t + self.grid.T_hist, self.grid.h, "t")
        if not 0 <= i < self.grid.n_nodes:
            raise OutOfRangeError(f"t={t!r} outside the stored grid")
        return self.values[i].copy()

    def __call__(self, t: float) -> np.ndarray:
        return self.at(t)

    def to_rows(self):
        times = self.grid.node_times()
        for t, row in zip(times, self.values):
            yield [float(t)] + [float(x) for x in row]


def segment_at(traj: Trajectory, t: float) -> WeightedSegment:
    """The segment ``r -> traj(t + r)``; an exact slice of the stored values."""
    j = traj.grid.step_index(t)
    g = traj.grid
    return WeightedSegment(traj.tau, g.h, traj.values[j:j + g.window], traj.tail_policy)


@dataclass(frozen=True)
class ShiftBound:
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def _abs_weighted(values: np.ndarray, tau: float, grid: GridSpec) -> np.ndarray:
    """``e^{tau s}|X(s)|`` with ``s`` the absolute node time."""
    return np.exp(tau * grid.node_times()) * _node_norms(values)


def shift_bound_check(traj: Trajectory, p: float, t: float) -> ShiftBound:
    """Both sides of the pathwise estimate for the weighted segment norm.

    ``lhs = e^{p tau t} ||X_t||^p`` and ``rhs = ||X_0||^p + max_{s in [0,t]}
    e^{p tau s}|X(s)|^p``.  Both are evaluated from the same per-node numbers
    ``e^{tau s}|X(s)|`` (absolute node time ``s``), so the inequality is exact in
    floating point: ``lhs`` is the p-th power of a maximum that appears in one
    of the two terms of ``rhs``.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p!r}")
    g = traj.grid
    j = g.step_index(t)
    a = _abs_weighted(traj.values, traj.tau, g)
    lhs = float(np.max(a[j:j + g.window])) ** p
    rhs = float(np.max(a[:g.window])) ** p + float(np.max(a[g.n_hist:g.n_hist + j + 1])) ** p
    return ShiftBound(lhs, rhs)


def shift_bound_violations(paths: np.ndarray, tau: float, grid: GridSpec, p: float) -> int:
    """Count (particle, time) pairs violating the shift bound for an ensemble.

    ``paths`` has shape ``(M, n_nodes, d)``.  Uses the same arithmetic as
    :func:`shift_bound_check`.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    a = np.exp(tau * grid.node_times()) * _node_norms(paths)
    lhs = np.max(sliding_window_view(a, grid.window, axis=1), axis=-1) ** p
    head = np.max(a[:, :grid.window], axis=1) ** p
    running = np.maximum.accumulate(a[:, grid.n_hist:], axis=1) ** p
    rhs = head[:, None] + running
    return int(np.count_nonzero(lhs > rhs))


def window_norms(paths: np.ndarray, tau: float, grid: GridSpec, chunk: int = 256) -> np.ndarray:
    """``||X_t||_tau`` for every particle and simulation time.

    ``paths`` has shape ``(M, n_nodes, d)``; returns ``(M, n_steps + 1)``.  The
    arithmetic matches :func:`tau_norm` applied to each slice.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    w = segment_weights(tau, grid.h, grid.window)
    nn = _node_norms(paths)
    out = np.empty((paths.shape[0], nn.shape[1] - grid.window + 1))
    for i in range(0, paths.shape[0], chunk):
        win = sliding_window_view(nn[i:i + chunk], grid.window, axis=1)
        out[i:i + chunk] = np.max(win * w, axis=-1)
    return out


# -- serialization ---------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path, times, values) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"x_{k + 1}" for k in range(values.shape[1])])
        for t, row in zip(times, values):
            w.writerow([_fmt(t)] + [_fmt(x) for x in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    return data[:, 0], data[:, 1:]


def segment_to_csv(xi: WeightedSegment, path) -> None:
    write_csv(path, xi.times(), xi.values)


def segment_from_csv(path, tau: float, h: float, tail_policy: str = "constant") -> WeightedSegment:
    times, values = read_csv(path)
    if len(times) > 1 and grid_count(-float(times[0]), h, "T_hist") != len(times) - 1:
        raise GridMismatchError(f"{path}: time column does not match h={h!r}")
    return WeightedSegment(tau, h, values, tail_policy)


def segment_to_json(xi: WeightedSegment) -> str:
    return json.dumps(xi.to_dict())


def segment_from_json(text: str) -> WeightedSegment:
    return WeightedSegment.from_dict(json.loads(text))


def trajectory_to_csv(traj: Trajectory, path) -> None:
    write_csv(path, traj.grid.node_times(), traj.values)


def trajectory_from_csv(path, grid: GridSpec, tau: float, tail_policy: str = "constant") -> Trajectory:
    _, values = read_csv(path)
    return Trajectory(grid, tau, values, tail_policy)


def trajectory_to_json(traj: Trajectory) -> str:
    return json.dumps({
        "tau": traj.tau,
        "h": traj.grid.h,
        "T_hist": traj.grid.T_hist,
        "T": traj.grid.T,
        "tail_policy": traj.tail_policy,
        "values": traj.values.tolist(),
    })


def trajectory_from_json(text: str) -> Trajectory:
    obj = json.loads(text)
    grid = GridSpec(obj["h"], obj["T_hist"], obj["T"])
    return Trajectory(grid, obj["tau"], np.asarray(obj["values"], dtype=float), obj.get("tail_policy", "constant"))


def load_segment(path) -> WeightedSegment:
    return segment_from_json(Path(path).read_text())
