"""Linear BSDEs driven by ``M = int theta dW``, their contraction map and diagnostics.

A linear BSDE here has the form

    Y_t = Y_0 - int (a Y + b psi) d<M> - <X>_t + int psi dM + N_t,   Y_T = terminal,

solved backward on the grid with the step

    Y_k = E[Y_{k+1} | F_k] + (a Y_k + b psi_k) d<M>_k + d<X>_k,
    psi_k = E[Y_{k+1} dM_k | F_k] / E[dM_k^2 | F_k],

implicit in ``Y_k`` and explicit in ``psi_k``.  On paths simulated under the
tilted measure the martingale part of ``dM`` is ``theta dB`` and ``d<M>``
carries the extra drift, so the psi coefficient becomes ``b - 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .cond_expect import (
    ArrayPayoff,
    ExpMoment,
    PolynomialRegression,
    RemainingQV,
    SliceProjector,
    ess_sup,
    estimate_conditional,
)
from .constants import DomainError, alpha_beta_rp
from .girsanov import MeasureChange
from .timegrid import ProcessPaths, stochastic_exponential


class SolvabilityError(ValueError):
    """The implicit step ``1 - a d<M>_k`` is not positive at some step."""


class ContractionError(RuntimeError):
    """Successive Picard distances failed to shrink."""

    def __init__(self, message: str, trace: "PicardTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class LinearBsdeSpec:
    a: float
    b: float
    driver: ProcessPaths
    terminal: float = 1.0
    forcing: np.ndarray | None = field(default=None, repr=False)  # d<X>_k per path and step
    name: str = "linear"

    def __post_init__(self):
        if not math.isfinite(self.terminal):
            raise ValueError("terminal value must be finite")
        if self.forcing is not None:
            f = np.asarray(self.forcing)
            if f.shape[-1] != self.driver.grid.n_steps:
                raise ValueError("forcing needs one column per grid step")
            if np.any(f < 0):
                raise ValueError("forcing must be nonnegative")

    @classmethod
    def power_moment(cls, driver: ProcessPaths, q: float, name: str = "power") -> "LinearBsdeSpec":
        """BSDE solved by ``E[E_{t,T}(M)^q | F_t]``: ``a = q(q-1)/2``, ``b = q``."""
        return cls(a=0.5 * q * (q - 1.0), b=q, driver=driver, terminal=1.0, name=name)

    @classmethod
    def reverse_holder(cls, driver: ProcessPaths, p: float) -> "LinearBsdeSpec":
        if not p > 1:
            raise ValueError(f"reverse Hoelder exponent must exceed 1, got {p}")
        return cls.power_moment(driver, p, name=f"reverse_holder(p={p:g})")

    @classmethod
    def muckenhoupt(cls, driver: ProcessPaths, p: float) -> "LinearBsdeSpec":
        if not p > 1:
            raise ValueError(f"Muckenhoupt exponent must exceed 1, got {p}")
        return cls.power_moment(driver, -1.0 / (p - 1.0), name=f"muckenhoupt(p={p:g})")

    @classmethod
    def girsanov_energy(cls, X: ProcessPaths, M: ProcessPaths) -> "LinearBsdeSpec":
        """``Y_t = E~[<X>_T - <X>_t | F_t]`` written under P: ``a = 0``, ``b = 1``, forcing ``d<X>``."""
        if X.bundle is not M.bundle and not np.array_equal(X.bundle.dW, M.bundle.dW):
            raise ValueError("X and M must be built from the same paths")
        return cls(a=0.0, b=1.0, driver=M, terminal=0.0, forcing=X.dqv, name="girsanov_energy")

    @property
    def measure(self) -> str:
        return self.driver.bundle.measure

    @property
    def psi_coefficient(self) -> float:
        """Coefficient of ``psi d<M>`` in the step, after the drift of ``dM`` under the simulation measure."""
        return self.b - 1.0 if self.measure == "tilde" else self.b


@dataclass
class BsdeSolution:
    Y: np.ndarray
    psi: np.ndarray
    residual: np.ndarray  # per-step mean of the unexplained increment
    orthogonal_var: np.ndarray  # per-step variance of the part orthogonal to dM
    explained_var: np.ndarray  # per-step variance of psi dM
    spec: LinearBsdeSpec = field(repr=False)
    method: str = "regression"

    @property
    def grid(self):
        return self.spec.driver.grid

    @property
    def y0(self) -> float:
        return float(self.Y[0, 0])

    @property
    def y_sup(self) -> float:
        """``||Y||_inf`` as the maximum of ``|Y|`` over paths and grid times."""
        return float(np.max(np.abs(self.Y)))

    @property
    def psi_sup(self) -> float:
        return float(np.max(np.abs(self.psi)))

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def orthogonal_ratio(self) -> float:
        """Total orthogonal variance over total explained variance (zero when both vanish)."""
        ex = float(self.explained_var.sum())
        orth = float(self.orthogonal_var.sum())
        if ex <= 0:
            return 0.0 if orth <= 0 else math.inf
        return orth / ex

    def rows(self) -> list[tuple]:
        t = self.grid.times
        m = self.grid.n_steps
        out = []
        for k in range(m + 1):
            y = self.Y[:, k]
            psi = float(np.mean(self.psi[:, k])) if k < m else math.nan
            res = float(self.residual[k]) if k < m else 0.0
            out.append((k, float(t[k]), float(y.mean()), float(y.max()), float(y.min()), psi, res))
        return out

    def to_csv(self, path: str | Path) -> None:
        write_solution_rows(self.rows(), path)


def write_solution_rows(rows: list[tuple], path: str | Path) -> None:
    """Per-step summary table of a solution, as produced by :meth:`BsdeSolution.rows`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "mean_Y", "max_Y", "min_Y", "mean_psi", "residual"])
        for row in rows:
            w.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


def _regression(est: PolynomialRegression | None) -> PolynomialRegression:
    est = PolynomialRegression() if est is None else est
    if not isinstance(est, PolynomialRegression):
        raise TypeError("backward BSDE steps need a regression estimator")
    return est


def _check_solvable(spec: LinearBsdeSpec) -> None:
    dqv = np.asarray(spec.driver.dqv)
    bad = np.nonzero(np.any(spec.a * dqv >= 1.0, axis=0))[0]
    if bad.size:
        k = int(bad[0])
        worst = float(np.max(spec.a * dqv[:, k]))
        raise SolvabilityError(f"implicit step not solvable at step {k}: a * d<M> = {worst:.4g} >= 1")


def _theta_dt(proc: ProcessPaths, k: int) -> np.ndarray:
    return np.asarray(proc.theta[:, k]) * proc.grid.dt


def covariance_psi(proj: SliceProjector, centered: np.ndarray, dB: np.ndarray,
                   theta_dt: np.ndarray) -> np.ndarray:
    """``E[Y_{k+1} dM_k | F_k] / E[dM_k^2 | F_k]`` with ``dM = theta dB`` and ``E[dM^2] = theta^2 dt``.

    ``centered`` is ``Y_{k+1} - E[Y_{k+1} | F_k]``; centering leaves the ratio
    unchanged and removes most of its noise.
    """
    num = proj.fitted(centered * dB)
    out = np.zeros_like(num)
    nz = theta_dt != 0
    out[nz] = num[nz] / theta_dt[nz]
    return out


def solve_backward(spec: LinearBsdeSpec, estimator: PolynomialRegression | None = None) -> BsdeSolution:
    est = _regression(estimator)
    _check_solvable(spec)
    proc = spec.driver
    bundle, grid = proc.bundle, proc.grid
    n, m = bundle.n_paths, grid.n_steps
    dqv = np.asarray(proc.dqv)
    b = spec.psi_coefficient
    Y = np.empty((n, m + 1))
    psi = np.empty((n, m))
    residual = np.empty(m)
    orth = np.empty(m)
    expl = np.empty(m)
    Y[:, m] = spec.terminal
    for k in range(m - 1, -1, -1):
        proj = SliceProjector.for_estimator(est, bundle.W[:, k])
        nxt = Y[:, k + 1]
        cont = proj.fitted(nxt)
        centered = nxt - cont
        psi[:, k] = covariance_psi(proj, centered, bundle.dB[:, k], _theta_dt(proc, k))
        rhs = cont + b * psi[:, k] * dqv[:, k]
        if spec.forcing is not None:
            rhs = rhs + spec.forcing[:, k]
        Y[:, k] = rhs / (1.0 - spec.a * dqv[:, k])
        dm = psi[:, k] * np.asarray(proc.theta[:, k]) * bundle.dB[:, k]
        unexplained = centered - dm
        residual[k] = unexplained.mean()
        orth[k] = unexplained.var()
        expl[k] = dm.var()
    return BsdeSolution(Y=Y, psi=psi, residual=residual, orthogonal_var=orth, explained_var=expl,
                        spec=spec, method=f"regression:{est.basis}")


def bsde_residuals(Y: np.ndarray, spec: LinearBsdeSpec,
                   estimator: PolynomialRegression | None = None) -> BsdeSolution:
    """Extract ``psi`` from a given ``Y`` field and measure the per-step BSDE residual.

    The residual of step k is the path mean of
    ``Y_{k+1} - Y_k + (a Y_k + b psi_k) d<M>_k + d<X>_k - psi_k dM_k``.
    """
    est = _regression(estimator)
    proc = spec.driver
    bundle, grid = proc.bundle, proc.grid
    n, m = bundle.n_paths, grid.n_steps
    dqv = np.asarray(proc.dqv)
    b = spec.psi_coefficient
    psi = np.empty((n, m))
    residual = np.empty(m)
    orth = np.empty(m)
    expl = np.empty(m)
    for k in range(m - 1, -1, -1):
        proj = SliceProjector.for_estimator(est, bundle.W[:, k])
        nxt = Y[:, k + 1]
        centered = nxt - proj.fitted(nxt)
        psi[:, k] = covariance_psi(proj, centered, bundle.dB[:, k], _theta_dt(proc, k))
        dm = psi[:, k] * np.asarray(proc.theta[:, k]) * bundle.dB[:, k]
        inc = nxt - Y[:, k] + (spec.a * Y[:, k] + b * psi[:, k]) * dqv[:, k] - dm
        if spec.forcing is not None:
            inc = inc + spec.forcing[:, k]
        residual[k] = inc.mean()
        orth[k] = (centered - dm).var()
        expl[k] = dm.var()
    return BsdeSolution(Y=np.asarray(Y), psi=psi, residual=residual, orthogonal_var=orth,
                        explained_var=expl, spec=spec, method=f"given:{est.basis}")


def psi_bmo_norm(sol: BsdeSolution, estimator: PolynomialRegression | None = None) -> float:
    """``||psi . M||_BMO`` under the simulation measure of the solution's paths."""
    proc = sol.spec.driver
    running = sol.psi**2 * np.asarray(proc.dqv)
    fld = estimate_conditional(ArrayPayoff(running=running), proc.bundle, _regression(estimator))
    return math.sqrt(max(ess_sup(fld).value, 0.0))


# ---------------------------------------------------------------------------
# characterization checks for the moment BSDEs


@dataclass
class LemmaCheck:
    direction: str
    p: float
    variant: str
    measured: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)
    solution: BsdeSolution | None = field(default=None, repr=False)


def _moment_power(p: float, variant: str) -> float:
    if not p > 1:
        raise ValueError(f"exponent must exceed 1, got {p}")
    if variant == "rp":
        return p
    if variant == "ap":
        return -1.0 / (p - 1.0)
    raise ValueError(f"unknown variant {variant!r}")


def verify_lemma1(direction: str, p: float, driver: ProcessPaths,
                  estimator: PolynomialRegression | None = None, variant: str = "rp",
                  residual_factor: float = 3.0, n_se: float = 3.0) -> LemmaCheck:
    """Check that the moment process solves its BSDE (forward) or that the BSDE solution is a moment (backward).

    forward: ``Y_t = E[E_{t,T}(M)^q | F_t]`` from the conditional estimator;
    the largest per-step mean residual must stay below ``residual_factor * dt``.

    backward: ``Y`` from :func:`solve_backward`; ``Y_t E_t(M)^q`` must have no
    drift, i.e. every per-step mean increment within ``n_se`` standard errors
    of zero.
    """
    q = _moment_power(p, variant)
    spec = LinearBsdeSpec.power_moment(driver, q, name=f"{variant}(p={p:g})")
    est = _regression(estimator)
    dt = driver.grid.dt
    if direction == "forward":
        fld = estimate_conditional(ExpMoment(driver.spec, q), driver.bundle, est)
        sol = bsde_residuals(fld.values, spec, est)
        tol = residual_factor * dt
        worst = sol.max_abs_residual
        return LemmaCheck(direction, p, variant, worst, tol, bool(worst < tol),
                          {"y0": sol.y0, "step": int(np.argmax(np.abs(sol.residual)))}, sol)
    if direction == "backward":
        sol = solve_backward(spec, est)
        proc = driver if driver.exp is not None else stochastic_exponential(driver)
        Z = sol.Y * proc.exp**q
        inc = np.diff(Z, axis=1)
        n = inc.shape[0]
        mean = inc.mean(axis=0)
        se = inc.std(axis=0, ddof=1) / math.sqrt(n)
        ok = np.abs(mean) <= n_se * se
        z = np.divide(np.abs(mean), se, out=np.zeros_like(mean), where=se > 0)
        # a driftless Z still exceeds n_se on about erfc(n_se / sqrt 2) of the steps;
        # the sum of squared z-scores is the aggregate test, chi-square with one degree per step
        expected = math.erfc(n_se / math.sqrt(2.0)) * inc.shape[1]
        chi2 = float(np.sum(z**2))
        return LemmaCheck(direction, p, variant, float(z.max()), n_se, bool(ok.all()),
                          {"y0": sol.y0, "failed_steps": [int(k) for k in np.nonzero(~ok)[0]],
                           "expected_exceedances": expected, "chi2": chi2,
                           "chi2_pvalue": float(stats.chi2.sf(chi2, inc.shape[1])),
                           "y_min": float(sol.Y.min())}, sol)
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


# ---------------------------------------------------------------------------
# contraction map


def _require_tilde(M: ProcessPaths) -> None:
    if M.bundle.measure != "tilde":
        raise ValueError("the contraction map runs on paths simulated under the tilted measure")


def picard_operator_H(y: np.ndarray, psi: np.ndarray, p: float, M: ProcessPaths,
                      estimator: PolynomialRegression | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One application of the contraction map on tilted-measure paths.

    ``Y_t = E~[1 + int_t^T (p(p-1)/2 y + (p-1) psi) d<M> | F_t]`` by the
    tower property, and ``Psi`` is the integrand of the martingale part of
    ``Y`` against ``-dM~ = theta dB``.
    """
    _require_tilde(M)
    est = _regression(estimator)
    bundle, grid = M.bundle, M.grid
    n, m = bundle.n_paths, grid.n_steps
    a, c = 0.5 * p * (p - 1.0), p - 1.0
    dqv = np.asarray(M.dqv)
    Y = np.empty((n, m + 1))
    Psi = np.empty((n, m))
    Y[:, m] = 1.0
    for k in range(m - 1, -1, -1):
        proj = SliceProjector.for_estimator(est, bundle.W[:, k])
        nxt = Y[:, k + 1]
        cont = proj.fitted(nxt)
        Psi[:, k] = covariance_psi(proj, nxt - cont, bundle.dB[:, k], _theta_dt(M, k))
        Y[:, k] = cont + (a * y[:, k] + c * psi[:, k]) * dqv[:, k]
    return Y, Psi


@dataclass
class PicardTrace:
    p: float
    alpha: float
    beta: float
    norm_tilde: float
    y_dist: list[float] = field(default_factory=list)  # sup-norm distance of successive Y
    psi_dist: list[float] = field(default_factory=list)  # BMO distance of successive psi . M~
    ratios: list[float] = field(default_factory=list)  # squared-distance ratios, from the second iterate

    @property
    def bound(self) -> float:
        return max(self.alpha, self.beta)

    @property
    def combined(self) -> list[float]:
        return [dy**2 + dp**2 for dy, dp in zip(self.y_dist, self.psi_dist)]

    @property
    def iterations(self) -> int:
        return len(self.y_dist)


@dataclass
class PicardResult:
    trace: PicardTrace
    Y: np.ndarray
    psi: np.ndarray
    converged: bool


def picard_iterate(p: float, M: ProcessPaths, estimator: PolynomialRegression | None = None,
                   k_max: int = 12, tol: float = 1e-10, norm_tilde: float | None = None,
                   y0: np.ndarray | None = None, psi0: np.ndarray | None = None,
                   stall: int = 3) -> PicardResult:
    """Iterate the contraction map from ``(y0, psi0)`` (zero by default).

    ``norm_tilde`` is the BMO norm of ``M~`` used for the predicted factors;
    it is estimated from the paths when omitted.  Raises
    :class:`ContractionError` when the squared-distance ratio stays at or
    above one for ``stall`` consecutive iterations.
    """
    _require_tilde(M)
    est = _regression(estimator)
    if norm_tilde is None:
        fld = estimate_conditional(RemainingQV(M.spec), M.bundle, est)
        norm_tilde = math.sqrt(max(ess_sup(fld).value, 0.0))
    try:
        alpha, beta = alpha_beta_rp(p, norm_tilde)
    except DomainError:
        alpha = beta = math.inf  # outside the validity region there is no predicted factor
    trace = PicardTrace(p=p, alpha=alpha, beta=beta, norm_tilde=norm_tilde)
    n, m = M.n_paths, M.grid.n_steps
    y = np.zeros((n, m + 1)) if y0 is None else np.array(y0, dtype=float)
    psi = np.zeros((n, m)) if psi0 is None else np.array(psi0, dtype=float)
    dqv = np.asarray(M.dqv)
    bad = 0
    converged = False
    for _ in range(k_max):
        Y, Psi = picard_operator_H(y, psi, p, M, est)
        dy = float(np.max(np.abs(Y - y)))
        fld = estimate_conditional(ArrayPayoff(running=(Psi - psi) ** 2 * dqv), M.bundle, est)
        dpsi = math.sqrt(max(ess_sup(fld).value, 0.0))
        trace.y_dist.append(dy)
        trace.psi_dist.append(dpsi)
        comb = trace.combined
        if len(comb) >= 2:
            ratio = comb[-1] / comb[-2] if comb[-2] > 0 else 0.0
            trace.ratios.append(ratio)
            bad = bad + 1 if ratio >= 1.0 else 0
        y, psi = Y, Psi
        if comb[-1] < tol:
            converged = True
            break
        if bad >= stall:
            raise ContractionError(
                f"no contraction after {trace.iterations} iterations at p={p:g}: "
                f"alpha={alpha:.4g}, beta={beta:.4g}, last ratio {trace.ratios[-1]:.4g}", trace)
    return PicardResult(trace=trace, Y=y, psi=psi, converged=converged)


# ---------------------------------------------------------------------------
# energy process of the transformed martingale


@dataclass
class EnergyProcess:
    """``Y_t = E~[<X>_T - <X>_t | F_t]`` with its BSDE diagnostics under P."""

    solution: BsdeSolution
    sup: float
    quantile_sup: float
    se: float

    @property
    def norm_sq(self) -> float:
        return self.sup


def theorem2_y_process(X: ProcessPaths, M: ProcessPaths, mc: MeasureChange | None = None,
                       estimator: PolynomialRegression | None = None) -> EnergyProcess:
    """Energy process of ``X~`` built by reweighting P-paths; ``sup |Y|`` is ``||X~||^2`` under the tilted measure."""
    if M.bundle.measure != "P":
        raise ValueError("the energy process is built on paths simulated under P")
    if mc is not None and mc.driver.spec != M.spec:
        raise ValueError("measure change must come from M")
    est = _regression(estimator)
    spec = LinearBsdeSpec.girsanov_energy(X, M)
    fld = estimate_conditional(RemainingQV(X.spec, M.spec), M.bundle, est)
    sol = bsde_residuals(fld.values, spec, est)
    sup = ess_sup(fld)
    return EnergyProcess(solution=sol, sup=sup.value, quantile_sup=sup.quantile_value, se=fld.se0)
