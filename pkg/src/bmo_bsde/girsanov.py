"""Measure change ``dP~ = E_T(M) dP`` and the map ``X -> <X, M> - X``."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .timegrid import (
    IntegrandSpec,
    PathBundle,
    ProcessPaths,
    SimulationError,
    TimeGrid,
    build_martingale,
    cumulative,
    simulate_drifted,
    stochastic_exponential,
)

ESS_FLOOR = 0.1


class WeightDegeneracyWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MeasureChange:
    """Per-path densities ``E_T(M)`` of the tilted measure."""

    driver: ProcessPaths
    weights: np.ndarray
    weight_mean: float
    weight_se: float
    ess: float

    @property
    def n_paths(self) -> int:
        return self.weights.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.ess < ESS_FLOOR * self.n_paths


def make_measure_change(proc: ProcessPaths, ess_floor: float = ESS_FLOOR) -> MeasureChange:
    if proc.bundle.measure != "P":
        raise SimulationError("measure change must start from paths simulated under P")
    if proc.exp is None:
        proc = stochastic_exponential(proc)
    w = np.array(proc.exp[:, -1])
    n = w.shape[0]
    mean = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    ess = float(w.sum() ** 2 / np.sum(w * w))
    if ess < ess_floor * n:
        warnings.warn(f"effective sample size {ess:.0f} below {ess_floor:g} * {n}",
                      WeightDegeneracyWarning, stacklevel=2)
    return MeasureChange(driver=proc, weights=w, weight_mean=mean, weight_se=se, ess=ess)


@dataclass(frozen=True)
class TildeProcesses:
    tilde_M: np.ndarray
    tilde_X: np.ndarray
    cross: np.ndarray
    X: ProcessPaths
    M: ProcessPaths

    def as_process(self) -> ProcessPaths:
        """``X~`` as a process whose integrand against the tilted Brownian motion is ``-theta^X``.

        Its ``values`` are ``<X, M> - X`` and its bracket is ``<X>``.
        """
        return ProcessPaths(bundle=self.X.bundle, spec=self.X.spec.scaled(-1.0),
                            theta=-self.X.theta, values=self.tilde_X, qv=self.X.qv)

    def tilde_driver(self) -> ProcessPaths:
        return ProcessPaths(bundle=self.M.bundle, spec=self.M.spec.scaled(-1.0),
                            theta=-self.M.theta, values=self.tilde_M, qv=self.M.qv)


def cross_variation(X: ProcessPaths, M: ProcessPaths) -> np.ndarray:
    if X.bundle is not M.bundle:
        if X.grid != M.grid or X.n_paths != M.n_paths:
            raise SimulationError("X and M live on different grids")
        if not np.array_equal(X.bundle.dW, M.bundle.dW):
            raise SimulationError("X and M must be built from the same paths")
    return cumulative(np.asarray(X.theta * M.theta) * X.grid.dt)


def tilde_transform(X: ProcessPaths, M: ProcessPaths) -> TildeProcesses:
    """``X~ = <X, M> - X`` and ``M~ = <M> - M`` on the same paths."""
    cross = cross_variation(X, M)
    return TildeProcesses(tilde_M=M.qv - M.values, tilde_X=cross - X.values, cross=cross, X=X, M=M)


def retransform(tp: TildeProcesses) -> np.ndarray:
    """Apply the tilde map again, now with ``M~`` under the tilted measure; returns X."""
    xt, mt = tp.as_process(), tp.tilde_driver()
    cross = cumulative(np.asarray(xt.theta * mt.theta) * xt.grid.dt)
    return cross - xt.values


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float


def expect_tilde(payoff: np.ndarray, mc: MeasureChange) -> Estimate:
    """Reweighted mean ``sum(w_i Z_i) / n`` and its standard error."""
    z = np.asarray(payoff, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("payoff must be finite on all paths")
    wz = mc.weights * z
    n = wz.shape[0]
    se = float(wz.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Estimate(float(wz.mean()), se)


@dataclass(frozen=True)
class TildeSimulation:
    """Paths simulated directly under ``E_T(M) dP``."""

    bundle: PathBundle
    M: ProcessPaths
    X: ProcessPaths
    tilde: TildeProcesses


def simulate_under_tilde(grid: TimeGrid, spec_M: IntegrandSpec, spec_X: IntegrandSpec,
                         n_paths: int, seed: int, block_size: int = 8192) -> TildeSimulation:
    """Simulate a tilted-measure Brownian motion and rebuild ``W = B + int theta^M dt``."""
    spec_M.check_bound(grid)
    spec_X.check_bound(grid)
    bundle = simulate_drifted(grid, spec_M, n_paths, seed, block_size)
    M = build_martingale(bundle, spec_M)
    X = M if spec_X == spec_M else build_martingale(bundle, spec_X)
    return TildeSimulation(bundle=bundle, M=M, X=X, tilde=tilde_transform(X, M))


def density_product(tp: TildeProcesses) -> np.ndarray:
    """``E_T(M) * E_T(M~)`` per path; identically one since ``<M~> = <M>``."""
    m, q = tp.M.values[:, -1], tp.M.qv[:, -1]
    mt = tp.tilde_M[:, -1]
    return np.exp(m - 0.5 * q) * np.exp(mt - 0.5 * q)
