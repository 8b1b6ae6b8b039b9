"""Conditional expectations ``E[Z | F_{t_k}]`` along simulated paths.

Payoffs are written in one-step backward form

    Y_T = terminal,    Y_k = E~[ running_k + factor_k * Y_{k+1} | F_k ]

where ``E~`` is the expectation under the measure obtained by tilting each
step with ``tilt_k`` (one-step density, conditional mean one).  Unrolled,
``Y_k`` is the conditional expectation of

    Z_k = running_k + factor_k running_{k+1} + ... + (factor_k ... factor_{m-1}) terminal

weighted by ``L_k = tilt_k ... tilt_{m-1}``.  Three estimators are available:
a closed form for deterministic integrands, slice-by-slice least squares on a
basis of ``W_{t_k}`` (Hermite polynomials or cubic B-splines) and nested Monte
Carlo as an oracle.

When a payoff knows the one-step conditional mean of its factor, the backward
regression subtracts ``(factor_k - E~[factor_k | F_k]) * Yhat_k`` from the
response, with ``Yhat_k`` the previous fit evaluated at the current state.  The
term has conditional mean zero, so the projection is unchanged while most of
the response noise cancels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e
from scipy.interpolate import BSpline

from .timegrid import IntegrandSpec, PathBundle, TimeGrid, continue_paths


class EstimatorWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ClosedForm:
    name = "closed_form"


@dataclass(frozen=True)
class PolynomialRegression:
    """Slice-by-slice least squares.

    ``basis="hermite"`` uses probabilists' Hermite polynomials up to
    ``degree``; ``basis="spline"`` uses B-splines of that degree with
    ``knots`` intervals placed at state quantiles.  ``clip`` is the state
    quantile clipped on each side before the basis is built.
    """

    degree: int = 3
    clip: float = 0.0
    mode: str = "backward"  # or "direct"
    basis: str = "spline"
    knots: int = 8
    control_variate: bool = True
    name = "regression"

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("regression degree must be >= 1")
        if not 0 <= self.clip < 0.5:
            raise ValueError("clip must lie in [0, 0.5)")
        if self.mode not in ("backward", "direct"):
            raise ValueError(f"unknown regression mode {self.mode!r}")
        if self.basis not in ("hermite", "spline"):
            raise ValueError(f"unknown regression basis {self.basis!r}")
        if self.knots < 1:
            raise ValueError("spline basis needs at least one knot interval")


@dataclass(frozen=True)
class NestedMonteCarlo:
    branch: int = 1000
    n_outer: int = 32
    step_stride: int = 20
    seed: int = 0
    name = "nested_mc"

    def __post_init__(self):
        if self.branch < 2 or self.n_outer < 1 or self.step_stride < 1:
            raise ValueError("nested Monte Carlo needs branch >= 2, n_outer >= 1, step_stride >= 1")


Estimator = ClosedForm | PolynomialRegression | NestedMonteCarlo


# ---------------------------------------------------------------------------
# payoffs


@dataclass
class PayoffArrays:
    terminal: np.ndarray
    factor: np.ndarray | None = None
    running: np.ndarray | None = None
    tilt: np.ndarray | None = None
    factor_mean: np.ndarray | None = None  # E~[factor_k | F_k], enables the control variate


def integrand_on(spec: IntegrandSpec, W: np.ndarray, grid: TimeGrid) -> np.ndarray:
    if spec.deterministic:
        return np.broadcast_to(spec.profile(grid), (W.shape[0], grid.n_steps))
    times = grid.times
    out = np.empty((W.shape[0], grid.n_steps))
    for k in range(grid.n_steps):
        out[:, k] = spec.evaluate(times[k], W[:, k], k)
    return out


def step_density(theta: np.ndarray, dW: np.ndarray, dt: float, power: float = 1.0) -> np.ndarray:
    return np.exp(power * (theta * dW - 0.5 * theta**2 * dt))


class Payoff:
    """Builds :class:`PayoffArrays` from any set of paths (main bundle or nested branches)."""

    def arrays(self, W: np.ndarray, dW: np.ndarray, grid: TimeGrid) -> PayoffArrays:
        raise NotImplementedError

    def closed_form(self, grid: TimeGrid) -> np.ndarray | None:
        return None


@dataclass(frozen=True)
class ConstantPayoff(Payoff):
    value: float = 1.0

    def arrays(self, W, dW, grid):
        return PayoffArrays(terminal=np.full(W.shape[0], float(self.value)))

    def closed_form(self, grid):
        return np.full(grid.n_steps + 1, float(self.value))


@dataclass(frozen=True)
class RemainingQV(Payoff):
    """``<X>_T - <X>_t``, optionally under ``E_T(M) dP`` with ``M = int tilt_spec dW``."""

    spec: IntegrandSpec
    tilt_spec: IntegrandSpec | None = None

    def arrays(self, W, dW, grid):
        th = integrand_on(self.spec, W, grid)
        tilt = None
        if self.tilt_spec is not None:
            tilt = step_density(integrand_on(self.tilt_spec, W, grid), dW, grid.dt)
        return PayoffArrays(terminal=np.zeros(W.shape[0]), running=th**2 * grid.dt, tilt=tilt)

    def closed_form(self, grid):
        if not self.spec.deterministic:
            return None
        dqv = self.spec.profile(grid) ** 2 * grid.dt
        return np.concatenate([np.cumsum(dqv[::-1])[::-1], [0.0]])


@dataclass(frozen=True)
class ExpMoment(Payoff):
    """``E_{t,T}(M)**q``; with ``tilde=True`` the moment of ``E_{t,T}(M~)`` under ``E_T(M) dP``."""

    spec: IntegrandSpec
    q: float
    tilde: bool = False

    def arrays(self, W, dW, grid):
        th = integrand_on(self.spec, W, grid)
        e = step_density(th, dW, grid.dt)
        # both E[e^q] and E[e * e^-q] equal exp(q(q-1) theta^2 dt / 2)
        mean = np.exp(0.5 * self.q * (self.q - 1.0) * th**2 * grid.dt)
        if self.tilde:
            # E(M~) over one step is 1 / E(M) since <M~> = <M>
            return PayoffArrays(terminal=np.ones(W.shape[0]), factor=e ** (-self.q), tilt=e, factor_mean=mean)
        return PayoffArrays(terminal=np.ones(W.shape[0]), factor=e**self.q, factor_mean=mean)

    def closed_form(self, grid):
        if not self.spec.deterministic:
            return None
        dqv = self.spec.profile(grid) ** 2 * grid.dt
        rem = np.concatenate([np.cumsum(dqv[::-1])[::-1], [0.0]])
        return np.exp(0.5 * self.q * (self.q - 1.0) * rem)


@dataclass(frozen=True)
class ArrayPayoff(Payoff):
    """Payoff given directly as arrays on the main bundle (no nested or closed-form route)."""

    running: np.ndarray | None = None
    terminal: np.ndarray | float = 0.0
    factor: np.ndarray | None = None
    tilt: np.ndarray | None = None

    def arrays(self, W, dW, grid):
        n = W.shape[0]
        for a in (self.running, self.factor, self.tilt):
            if a is not None and a.shape[0] != n:
                raise ValueError("array payoffs are only defined on the bundle they were built on")
        term = np.broadcast_to(np.asarray(self.terminal, dtype=float), (n,))
        return PayoffArrays(terminal=term, factor=self.factor, running=self.running, tilt=self.tilt)


def unroll(arr: PayoffArrays, n_steps: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Pathwise ``Z_k`` and cumulative tilt ``L_k`` for every step."""
    n = arr.terminal.shape[0]
    Z = np.empty((n, n_steps + 1))
    Z[:, -1] = arr.terminal
    L = None
    if arr.tilt is not None:
        L = np.empty((n, n_steps + 1))
        L[:, -1] = 1.0
    for k in range(n_steps - 1, -1, -1):
        Z[:, k] = _step(arr, k, Z[:, k + 1])
        if L is not None:
            L[:, k] = L[:, k + 1] * arr.tilt[:, k]
    return Z, L


def unroll_time_zero(arr: PayoffArrays, n_steps: int) -> tuple[np.ndarray, np.ndarray | None]:
    """``Z_0`` and ``L_0`` only, without storing intermediate steps."""
    z = np.array(arr.terminal, dtype=float)
    lik = None if arr.tilt is None else np.ones_like(z)
    for k in range(n_steps - 1, -1, -1):
        z = _step(arr, k, z)
        if lik is not None:
            lik = lik * arr.tilt[:, k]
    return z, lik


def _step(arr: PayoffArrays, k: int, nxt: np.ndarray) -> np.ndarray:
    z = nxt if arr.factor is None else arr.factor[:, k] * nxt
    if arr.running is not None:
        z = z + arr.running[:, k]
    return z


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class StateBasis:
    """Basis functions of a scalar state, frozen at the fitting sample."""

    kind: str
    lo: float
    hi: float
    center: float = 0.0
    scale: float = 1.0
    degree: int = 3
    knots: np.ndarray | None = None

    @property
    def size(self) -> int:
        if self.kind == "constant":
            return 1
        if self.kind == "hermite":
            return self.degree + 1
        return self.knots.shape[0] - self.degree - 1

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.ones((x.shape[0], 1))
        x = np.clip(x, self.lo, self.hi)
        if self.kind == "hermite":
            return hermite_e.hermevander((x - self.center) / self.scale, self.degree)
        # x is already clipped to the knot span; extrapolate skips a slow range check
        return BSpline.design_matrix(x, self.knots, self.degree, extrapolate=True).toarray()


def make_basis(x: np.ndarray, degree: int, clip: float = 0.0, kind: str = "hermite",
               knots: int = 8) -> StateBasis:
    lo, hi = (np.quantile(x, [clip, 1.0 - clip]) if clip > 0 else (x.min(), x.max()))
    if not hi > lo:
        return StateBasis("constant", float(lo), float(hi))
    if kind == "hermite":
        xc = np.clip(x, lo, hi)
        sd = xc.std()
        if not sd > 0:
            return StateBasis("constant", float(lo), float(hi))
        return StateBasis("hermite", float(lo), float(hi), float(xc.mean()), float(sd), degree)
    inner = np.quantile(np.clip(x, lo, hi), np.linspace(0.0, 1.0, knots + 1)[1:-1])
    t = np.r_[[lo] * (degree + 1), inner, [hi] * (degree + 1)]
    return StateBasis("spline", float(lo), float(hi), degree=degree, knots=t)


def hermite_basis(x: np.ndarray, degree: int, clip: float) -> np.ndarray:
    return make_basis(x, degree, clip, "hermite")(x)


RANK_RTOL = 1e-10


@dataclass(frozen=True)
class SliceFit:
    basis: StateBasis
    coef: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.basis(x)[:, : self.coef.shape[0]] @ self.coef

    @property
    def degree(self) -> int:
        return self.coef.shape[0] - 1


class SliceProjector:
    """Weighted least-squares projection onto basis functions of one time slice.

    The design and its Gram factor are built once, so several responses on
    the same slice cost one matrix product each.  A rank-deficient design
    keeps the leading basis functions that are linearly independent and
    warns.
    """

    def __init__(self, x: np.ndarray, weights: np.ndarray | None = None, degree: int = 3,
                 clip: float = 0.0, basis: str = "hermite", knots: int = 8):
        self.basis = make_basis(x, degree, clip, basis, knots)
        self.weights = weights
        A = self.basis(x)
        Aw = A if weights is None else A * weights[:, None]
        gram = A.T @ Aw
        keep = _independent_columns(gram)
        if keep < A.shape[1]:
            warnings.warn(f"rank-deficient regression, keeping {keep} of {A.shape[1]} basis functions",
                          EstimatorWarning, stacklevel=3)
            A, Aw, gram = A[:, :keep], Aw[:, :keep], gram[:keep, :keep]
        self.design = A
        self._weighted = Aw
        self._chol = np.linalg.cholesky(gram)

    @classmethod
    def for_estimator(cls, est: "PolynomialRegression", x: np.ndarray,
                      weights: np.ndarray | None = None) -> "SliceProjector":
        return cls(x, weights, est.degree, est.clip, est.basis, est.knots)

    def coefficients(self, y: np.ndarray) -> np.ndarray:
        rhs = self._weighted.T @ y
        z = np.linalg.solve(self._chol, rhs)
        return np.linalg.solve(self._chol.T, z)

    def fit(self, y: np.ndarray) -> tuple[SliceFit, np.ndarray]:
        coef = self.coefficients(y)
        return SliceFit(self.basis, coef), self.design @ coef

    def fitted(self, y: np.ndarray) -> np.ndarray:
        return self.design @ self.coefficients(y)


def _independent_columns(gram: np.ndarray) -> int:
    """Largest leading block of the Gram matrix that is numerically positive definite."""
    scale = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    for keep in range(gram.shape[0], 0, -1):
        g = gram[:keep, :keep]
        s = scale[:keep]
        if np.any(s == 0):
            continue
        ev = np.linalg.eigvalsh(g / np.outer(s, s))
        if ev[0] > RANK_RTOL * ev[-1]:
            return keep
    return 1


def fit_slice(x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None, degree: int = 3,
              clip: float = 0.0, basis: str = "hermite", knots: int = 8) -> tuple[SliceFit, np.ndarray]:
    """Least-squares projection of ``y`` on basis functions of ``x``; returns the fit and fitted values.

    A constant state (time zero) gives the (weighted) mean.
    """
    return SliceProjector(x, weights, degree, clip, basis, knots).fit(y)


def regress_slice(x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None,
                  degree: int = 4, clip: float = 0.005, basis: str = "hermite",
                  knots: int = 8) -> tuple[np.ndarray, int]:
    """Fitted values and the number of basis functions used minus one."""
    fit, fitted = fit_slice(x, y, weights, degree, clip, basis, knots)
    return fitted, fit.degree


def fit_with(est: PolynomialRegression, x: np.ndarray, y: np.ndarray,
             weights: np.ndarray | None = None) -> tuple[SliceFit, np.ndarray]:
    return SliceProjector.for_estimator(est, x, weights).fit(y)


# ---------------------------------------------------------------------------
# fields


@dataclass
class ConditionalField:
    values: np.ndarray
    method: str
    se: np.ndarray | None = None
    se0: float = 0.0  # standard error of the time-zero estimate
    pathwise0: np.ndarray | None = field(default=None, repr=False)
    weights0: np.ndarray | None = field(default=None, repr=False)


def _time_zero_se(Z0: np.ndarray, L0: np.ndarray | None) -> float:
    n = Z0.shape[0]
    if n < 2:
        return 0.0
    if L0 is None:
        return float(Z0.std(ddof=1) / math.sqrt(n))
    est = np.dot(L0, Z0) / L0.sum()
    return float(math.sqrt(np.sum(L0**2 * (Z0 - est) ** 2)) / L0.sum())


def estimate_conditional(payoff: Payoff, bundle: PathBundle, estimator: Estimator | None = None) -> ConditionalField:
    """Estimate ``E~[Z_k | F_{t_k}]`` for every path and grid time."""
    est = PolynomialRegression() if estimator is None else estimator
    grid = bundle.grid
    n, m = bundle.n_paths, grid.n_steps

    if isinstance(est, ClosedForm):
        prof = payoff.closed_form(grid)
        if prof is None:
            raise ValueError(f"no closed form available for {payoff!r}")
        return ConditionalField(values=np.broadcast_to(prof, (n, m + 1)), method=est.name,
                                se=np.zeros((1, m + 1)))

    if isinstance(est, NestedMonteCarlo):
        return _nested(payoff, bundle, est)

    arr = payoff.arrays(bundle.W, bundle.dW, grid)
    values = np.empty((n, m + 1))
    values[:, -1] = arr.terminal
    if est.mode == "direct":
        Z, L = unroll(arr, m)
        Z0, L0 = Z[:, 0].copy(), None if L is None else L[:, 0].copy()
        for k in range(m - 1, -1, -1):
            _, values[:, k] = fit_with(est, bundle.W[:, k], Z[:, k], None if L is None else L[:, k])
        del Z, L
    else:
        Z0, L0 = unroll_time_zero(arr, m)
        use_cv = est.control_variate and arr.factor is not None and arr.factor_mean is not None
        prev: SliceFit | None = None
        for k in range(m - 1, -1, -1):
            w = None if arr.tilt is None else arr.tilt[:, k]
            y = _step(arr, k, values[:, k + 1])
            if use_cv and (prev is not None or not np.ptp(arr.terminal) > 0):
                # the control must be F_k-measurable: a constant terminal, or the previous fit at W_k
                yhat = values[:, k + 1] if prev is None else prev.predict(bundle.W[:, k])
                y = y - (arr.factor[:, k] - arr.factor_mean[:, k]) * yhat
            prev, values[:, k] = fit_with(est, bundle.W[:, k], y, w)
    return ConditionalField(values=values, method=f"{est.name}:{est.mode}", se0=_time_zero_se(Z0, L0),
                            pathwise0=Z0, weights0=L0)


def _inner_generator(seed: int, path: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path, step])))


def nested_points(bundle: PathBundle, est: NestedMonteCarlo) -> list[tuple[int, list[int]]]:
    """(step, paths) pairs visited by the nested estimator."""
    m = bundle.grid.n_steps
    n = bundle.n_paths
    pts = []
    for k in range(0, m, est.step_stride):
        if k == 0:
            pts.append((0, [0]))
            continue
        order = np.argsort(bundle.W[:, k], kind="stable")
        sel = order[np.unique(np.linspace(0, n - 1, min(est.n_outer, n)).round().astype(int))]
        pts.append((k, sorted(int(i) for i in sel)))
    return pts


def nested_value(payoff: Payoff, bundle: PathBundle, path: int, step: int,
                 branch: int, seed: int) -> tuple[float, float]:
    """Nested Monte Carlo estimate (and standard error) of ``E~[Z_step | F_step]`` on one path."""
    grid = bundle.grid
    m = grid.n_steps
    rng = _inner_generator(seed, path, step)
    dB = rng.standard_normal((branch, m - step)) * math.sqrt(grid.dt)
    W, dW = continue_paths(bundle, bundle.W[path], bundle.dW[path], step, dB)
    arr = payoff.arrays(W, dW, grid)
    z = np.array(arr.terminal, dtype=float)
    lik = np.ones(branch)
    for j in range(m - 1, step - 1, -1):
        if arr.factor is not None:
            z = arr.factor[:, j] * z
        if arr.running is not None:
            z = z + arr.running[:, j]
        if arr.tilt is not None:
            lik = lik * arr.tilt[:, j]
    x = lik * z
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(branch))


def _nested(payoff: Payoff, bundle: PathBundle, est: NestedMonteCarlo) -> ConditionalField:
    n, m = bundle.n_paths, bundle.grid.n_steps
    values = np.full((n, m + 1), np.nan)
    se = np.full((n, m + 1), np.nan)
    arr_T = payoff.arrays(bundle.W[:1], bundle.dW[:1], bundle.grid)
    for step, paths in nested_points(bundle, est):
        for i in paths:
            v, s = nested_value(payoff, bundle, i, step, est.branch, est.seed)
            values[i, step], se[i, step] = v, s
        if step == 0:
            values[:, 0], se[:, 0] = values[0, 0], se[0, 0]
    values[:, -1] = arr_T.terminal[0] if np.ndim(arr_T.terminal) else arr_T.terminal
    se[:, -1] = 0.0
    return ConditionalField(values=values, method=est.name, se=se, se0=float(se[0, 0]))


# ---------------------------------------------------------------------------
# essential supremum


@dataclass(frozen=True)
class EssSup:
    value: float
    quantile_value: float
    quantile: float
    step: int
    path: int


def ess_sup(fld: ConditionalField | np.ndarray, quantile: float = 0.999) -> EssSup:
    """Max over paths and grid times, with the per-step ``quantile`` companion (max over steps)."""
    v = fld.values if isinstance(fld, ConditionalField) else np.asarray(fld)
    flat = int(np.nanargmax(v))
    path, step = np.unravel_index(flat, v.shape)
    if v.strides[0] == 0 or v.shape[0] == 1:
        qv = float(np.nanmax(v[0]))
    elif np.isnan(v).any():
        qv = float(np.nanmax(np.nanquantile(v, quantile, axis=0)))
    else:
        qv = float(np.max(np.quantile(v, quantile, axis=0)))
    return EssSup(value=float(v[path, step]), quantile_value=qv, quantile=quantile,
                  step=int(step), path=int(path))
