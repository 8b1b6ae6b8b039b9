"""Brownian path simulation, driving martingales and stochastic exponentials.

All processes live on a uniform grid ``t_k = k * T / n_steps``.  A martingale
``M = int theta dW`` is discretised with the left-point rule

    M_{k+1}  = M_k  + theta_k * dW_k
    QV_{k+1} = QV_k + theta_k**2 * dt

with ``theta_k = theta(t_k, W_{t_k})``, so the quadratic variation is exact
whenever the integrand is deterministic.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

DEFAULT_BLOCK_SIZE = 8192
OVERFLOW_CAP = 700.0


class SimulationError(ValueError):
    """Invalid simulation input."""


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise SimulationError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise SimulationError(f"n_steps must be an integer >= 2, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.horizon
        return t


# ---------------------------------------------------------------------------
# integrands


class IntegrandSpec:
    """Integrand theta(t, w) of a Brownian martingale ``M = int theta dW``."""

    bound: float
    deterministic: bool = False

    def evaluate(self, t: float, w: np.ndarray, step: int) -> np.ndarray:
        raise NotImplementedError

    def profile(self, grid: TimeGrid) -> np.ndarray:
        """Per-step values for a deterministic integrand, shape ``(n_steps,)``."""
        raise TypeError(f"{self!r} is not deterministic")

    def scaled(self, c: float) -> "IntegrandSpec":
        return Scaled(self, c)

    def check_bound(self, grid: TimeGrid, n_samples: int = 2001) -> None:
        if not (math.isfinite(self.bound) and self.bound >= 0):
            raise SimulationError(f"integrand bound must be finite, got {self.bound}")


@dataclass(frozen=True)
class Constant(IntegrandSpec):
    value: float
    deterministic = True

    @property
    def bound(self) -> float:
        return abs(self.value)

    def evaluate(self, t, w, step):
        return np.full(np.shape(w), self.value, dtype=float)

    def profile(self, grid):
        return np.full(grid.n_steps, float(self.value))

    def scaled(self, c):
        return Constant(c * self.value)


@dataclass(frozen=True)
class PiecewiseDeterministic(IntegrandSpec):
    values: tuple[float, ...]
    deterministic = True

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @property
    def bound(self) -> float:
        return max(abs(v) for v in self.values)

    def evaluate(self, t, w, step):
        return np.full(np.shape(w), self.values[step], dtype=float)

    def profile(self, grid):
        if len(self.values) != grid.n_steps:
            raise SimulationError(
                f"piecewise integrand has {len(self.values)} values for {grid.n_steps} steps"
            )
        return np.asarray(self.values, dtype=float)

    def scaled(self, c):
        return PiecewiseDeterministic(tuple(c * v for v in self.values))


@dataclass(frozen=True)
class StateDependent(IntegrandSpec):
    """Bounded Markov integrand ``theta(t, w)`` with a declared sup-bound."""

    func: Callable[[float, np.ndarray], np.ndarray] = field(compare=False)
    bound: float = 1.0
    name: str = "state"

    def evaluate(self, t, w, step):
        return np.asarray(self.func(t, w), dtype=float) * np.ones(np.shape(w))

    def check_bound(self, grid, n_samples=2001):
        super().check_bound(grid)
        # sample the envelope on a (t, w) lattice wide enough for any simulated path
        w = np.linspace(-8.0 * math.sqrt(grid.horizon), 8.0 * math.sqrt(grid.horizon), n_samples)
        for t in np.linspace(0.0, grid.horizon, 11):
            sup = float(np.max(np.abs(self.evaluate(t, w, 0))))
            if sup > self.bound * (1 + 1e-12):
                raise SimulationError(
                    f"integrand {self.name} reaches |theta| = {sup:.6g} above declared bound {self.bound}"
                )


@dataclass(frozen=True)
class Scaled(IntegrandSpec):
    base: IntegrandSpec
    factor: float

    @property
    def bound(self) -> float:
        return abs(self.factor) * self.base.bound

    @property
    def deterministic(self) -> bool:  # type: ignore[override]
        return self.base.deterministic

    def evaluate(self, t, w, step):
        return self.factor * self.base.evaluate(t, w, step)

    def profile(self, grid):
        return self.factor * self.base.profile(grid)

    def check_bound(self, grid, n_samples=2001):
        self.base.check_bound(grid, n_samples)


def sine_modulated(scale: float, amplitude: float) -> StateDependent:
    """theta(t, w) = scale * (1 + amplitude * sin w)."""
    return StateDependent(
        func=lambda t, w: scale * (1.0 + amplitude * np.sin(w)),
        bound=abs(scale) * (1.0 + abs(amplitude)),
        name=f"sin:{scale!r},{amplitude!r}",
    )


def cosine_modulated(scale: float, amplitude: float) -> StateDependent:
    """theta(t, w) = scale * (1 + amplitude * cos w)."""
    return StateDependent(
        func=lambda t, w: scale * (1.0 + amplitude * np.cos(w)),
        bound=abs(scale) * (1.0 + abs(amplitude)),
        name=f"cos:{scale!r},{amplitude!r}",
    )


def parse_integrand(text: str) -> IntegrandSpec:
    """Parse ``const:0.5``, ``sin:0.5,0.5``, ``cos:1,0.5`` or ``piecewise:0.1,0.2,...``."""
    kind, _, args = text.strip().partition(":")
    kind = kind.strip().lower()
    try:
        vals = [float(a) for a in args.split(",") if a.strip()]
    except ValueError as exc:
        raise SimulationError(f"cannot parse integrand {text!r}") from exc
    if kind in ("const", "constant") and len(vals) == 1:
        return Constant(vals[0])
    if kind == "sin" and len(vals) == 2:
        return sine_modulated(*vals)
    if kind == "cos" and len(vals) == 2:
        return cosine_modulated(*vals)
    if kind == "piecewise" and vals:
        return PiecewiseDeterministic(tuple(vals))
    raise SimulationError(f"cannot parse integrand {text!r}")


def format_integrand(spec: IntegrandSpec) -> str:
    if isinstance(spec, Constant):
        return f"const:{spec.value!r}"
    if isinstance(spec, PiecewiseDeterministic):
        return "piecewise:" + ",".join(repr(v) for v in spec.values)
    if isinstance(spec, StateDependent):
        return spec.name
    raise SimulationError(f"integrand {spec!r} has no text form")


# ---------------------------------------------------------------------------
# Brownian paths


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments on a grid, plus the regression state ``W``.

    ``dB`` are standard Brownian increments under the simulation measure.
    ``dW`` are the increments of the coordinate process W used to build
    martingales; they coincide with ``dB`` under P and carry the Girsanov
    drift for bundles simulated under the tilted measure.
    """

    grid: TimeGrid
    seed: int
    block_size: int
    dB: np.ndarray
    measure: str = "P"
    drift: IntegrandSpec | None = None
    dW: np.ndarray | None = None
    W: np.ndarray | None = None

    def __post_init__(self):
        if self.dW is None:
            object.__setattr__(self, "dW", self.dB)
        if self.W is None:
            object.__setattr__(self, "W", cumulative(self.dW))

    @property
    def n_paths(self) -> int:
        return self.dB.shape[0]

    @property
    def n_blocks(self) -> int:
        return -(-self.n_paths // self.block_size)


def cumulative(increments: np.ndarray) -> np.ndarray:
    out = np.zeros((increments.shape[0], increments.shape[1] + 1))
    np.cumsum(increments, axis=1, out=out[:, 1:])
    return out


def _check_seed(seed: int) -> int:
    if int(seed) != seed or not 0 <= seed < 2**64:
        raise SimulationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return int(seed)


def block_generator(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, block)."""
    key = _check_seed(seed) | ((int(stream) << 32 | int(block)) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def standard_normals(n_rows: int, n_cols: int, seed: int, block_size: int = DEFAULT_BLOCK_SIZE,
                     stream: int = 0, workers: int = 1) -> np.ndarray:
    out = np.empty((n_rows, n_cols))
    starts = range(0, n_rows, block_size)

    def fill(start: int) -> None:
        stop = min(start + block_size, n_rows)
        block_generator(seed, start // block_size, stream).standard_normal(
            out=out[start:stop])

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    return out


def simulate_brownian(grid: TimeGrid, n_paths: int, seed: int,
                      block_size: int = DEFAULT_BLOCK_SIZE, workers: int = 1) -> PathBundle:
    """Standard Brownian increments scaled by sqrt(dt), reproducible per block layout."""
    if int(n_paths) != n_paths or n_paths < 1:
        raise SimulationError(f"n_paths must be a positive integer, got {n_paths}")
    if block_size < 1:
        raise SimulationError("block_size must be positive")
    z = standard_normals(int(n_paths), grid.n_steps, seed, block_size, workers=workers)
    z *= math.sqrt(grid.dt)
    return PathBundle(grid=grid, seed=int(seed), block_size=int(block_size), dB=z)


def simulate_drifted(grid: TimeGrid, drift: IntegrandSpec, n_paths: int, seed: int,
                     block_size: int = DEFAULT_BLOCK_SIZE) -> PathBundle:
    """Paths of ``dW = dB + drift(t, W) dt`` with Brownian ``B``.

    With ``drift = theta^M`` this is the P-coordinate Brownian motion seen
    under the measure ``E_T(M) dP``.
    """
    base = simulate_brownian(grid, n_paths, seed, block_size)
    dB = base.dB
    W = np.zeros((dB.shape[0], grid.n_steps + 1))
    dW = np.empty_like(dB)
    times = grid.times
    for k in range(grid.n_steps):
        dW[:, k] = dB[:, k] + drift.evaluate(times[k], W[:, k], k) * grid.dt
        W[:, k + 1] = W[:, k] + dW[:, k]
    return PathBundle(grid=grid, seed=int(seed), block_size=int(block_size), dB=dB,
                      measure="tilde", drift=drift, dW=dW, W=W)


def continue_paths(bundle: PathBundle, prefix_W: np.ndarray, prefix_dW: np.ndarray,
                   step: int, dB_future: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Branch a path at ``step`` under the bundle's measure.

    ``prefix_*`` are a single outer path; ``dB_future`` has shape
    ``(n_branches, n_steps - step)``.  Returns full-length ``(W, dW)`` arrays.
    """
    grid = bundle.grid
    nb = dB_future.shape[0]
    W = np.empty((nb, grid.n_steps + 1))
    dW = np.empty((nb, grid.n_steps))
    W[:, : step + 1] = prefix_W[: step + 1]
    dW[:, :step] = prefix_dW[:step]
    times = grid.times
    for j in range(step, grid.n_steps):
        inc = dB_future[:, j - step]
        if bundle.drift is not None:
            inc = inc + bundle.drift.evaluate(times[j], W[:, j], j) * grid.dt
        dW[:, j] = inc
        W[:, j + 1] = W[:, j] + inc
    return W, dW


def write_bundle_csv(bundle: PathBundle, path: str | Path) -> None:
    """Debug dump with columns ``path, step, dW``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "dW"])
        for i in range(bundle.n_paths):
            for k in range(bundle.grid.n_steps):
                w.writerow([i, k, repr(float(bundle.dW[i, k]))])


def read_bundle_csv(path: str | Path, grid: TimeGrid, seed: int = 0,
                    block_size: int = DEFAULT_BLOCK_SIZE) -> PathBundle:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = int(rows[:, 0].max()) + 1
    dW = np.zeros((n, grid.n_steps))
    dW[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2]
    return PathBundle(grid=grid, seed=seed, block_size=block_size, dB=dW)


def save_bundle(bundle: PathBundle, path: str | Path) -> None:
    np.savez(path, dB=bundle.dB, dW=bundle.dW, horizon=bundle.grid.horizon,
             n_steps=bundle.grid.n_steps, seed=bundle.seed, block_size=bundle.block_size)


def load_bundle(path: str | Path) -> PathBundle:
    with np.load(path) as z:
        grid = TimeGrid(float(z["horizon"]), int(z["n_steps"]))
        return PathBundle(grid=grid, seed=int(z["seed"]), block_size=int(z["block_size"]),
                          dB=z["dB"], dW=z["dW"])


# ---------------------------------------------------------------------------
# martingales


@dataclass(frozen=True)
class ProcessPaths:
    """``M = int theta dW`` on a bundle, with ``<M>`` and optionally ``E(M)``.

    ``theta`` has shape ``(n_paths, n_steps)`` (a broadcast view for
    deterministic integrands); ``values``, ``qv`` and ``exp`` have
    ``n_steps + 1`` columns.
    """

    bundle: PathBundle
    spec: IntegrandSpec
    theta: np.ndarray
    values: np.ndarray
    qv: np.ndarray
    exp: np.ndarray | None = None
    overflow: np.ndarray | None = None

    @property
    def grid(self) -> TimeGrid:
        return self.bundle.grid

    @property
    def n_paths(self) -> int:
        return self.bundle.n_paths

    @property
    def dqv(self) -> np.ndarray:
        return self.theta**2 * self.grid.dt

    def increments(self) -> np.ndarray:
        return self.theta * self.bundle.dW

    def martingale_increments(self) -> np.ndarray:
        """Increments of the martingale part under the bundle's own measure."""
        return self.theta * self.bundle.dB


def integrand_matrix(bundle: PathBundle, spec: IntegrandSpec) -> np.ndarray:
    grid = bundle.grid
    if spec.deterministic:
        prof = spec.profile(grid)
        return np.broadcast_to(prof, (bundle.n_paths, grid.n_steps))
    times = grid.times
    theta = np.empty((bundle.n_paths, grid.n_steps))
    for k in range(grid.n_steps):
        theta[:, k] = spec.evaluate(times[k], bundle.W[:, k], k)
    return theta


def build_martingale(bundle: PathBundle, spec: IntegrandSpec) -> ProcessPaths:
    grid = bundle.grid
    spec.check_bound(grid)
    theta = integrand_matrix(bundle, spec)
    values = cumulative(theta * bundle.dW)
    if isinstance(spec, Constant):
        qv = np.broadcast_to(spec.value**2 * grid.times, values.shape)
    elif spec.deterministic:
        prof = np.concatenate([[0.0], np.cumsum(spec.profile(grid) ** 2 * grid.dt)])
        qv = np.broadcast_to(prof, values.shape)
    else:
        qv = cumulative(theta**2 * grid.dt)
    return ProcessPaths(bundle=bundle, spec=spec, theta=theta, values=values, qv=qv)


def stochastic_exponential(proc: ProcessPaths, cap: float = OVERFLOW_CAP) -> ProcessPaths:
    """Attach ``E_t(M) = exp(M_t - <M>_t / 2)``; paths with ``|M| > cap`` are flagged."""
    overflow = np.any(np.abs(proc.values) > cap, axis=1)
    if overflow.any():
        warnings.warn(f"{int(overflow.sum())} paths exceed |M| <= {cap}; E(M) may overflow",
                      RuntimeWarning, stacklevel=2)
    with np.errstate(over="ignore"):
        exp = np.exp(proc.values - 0.5 * proc.qv)
    return replace(proc, exp=exp, overflow=overflow)


def one_step_exponential(proc: ProcessPaths, power: float = 1.0) -> np.ndarray:
    """``E_{t_k, t_{k+1}}(M) ** power`` per path and step, shape ``(n_paths, n_steps)``."""
    th = proc.theta
    return np.exp(power * (th * proc.bundle.dW - 0.5 * th**2 * proc.grid.dt))
