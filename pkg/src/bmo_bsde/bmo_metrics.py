"""BMO norm, reverse Hoelder constant C_p and Muckenhoupt constant D_p from simulated paths."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cond_expect import (
    ConditionalField,
    Estimator,
    ExpMoment,
    Payoff,
    PolynomialRegression,
    RemainingQV,
    ess_sup,
    estimate_conditional,
)
from .girsanov import MeasureChange
from .timegrid import ProcessPaths

HEAVY_TAIL_FRACTION = 0.001
HEAVY_TAIL_SHARE = 0.5
JENSEN_TOLERANCE = 0.01


class HeavyTailWarning(RuntimeWarning):
    pass


@dataclass
class BmoEstimate:
    value: float
    method: str
    quantile_value: float
    se: float = 0.0
    step: int = 0
    n_paths: int = 0
    n_steps: int = 0
    measure: str = "P"
    flags: list[str] = field(default_factory=list)
    field: ConditionalField | None = field(default=None, repr=False)

    @property
    def squared(self) -> float:
        return self.value**2


def _tilt_spec(proc: ProcessPaths, measure: MeasureChange | None):
    if measure is None:
        return None
    if proc.bundle.measure != "P":
        raise ValueError("reweighting applies to paths simulated under P")
    if measure.driver.bundle is not proc.bundle and not np.array_equal(measure.driver.bundle.dW, proc.bundle.dW):
        raise ValueError("measure change and process must share paths")
    return measure.driver.spec


def _measure_label(proc: ProcessPaths, measure: MeasureChange | None) -> str:
    return "tilde" if measure is not None or proc.bundle.measure == "tilde" else "P"


def conditional_remaining_qv(proc: ProcessPaths, estimator: Estimator | None = None,
                             measure: MeasureChange | None = None) -> ConditionalField:
    payoff = RemainingQV(proc.spec, _tilt_spec(proc, measure))
    return estimate_conditional(payoff, proc.bundle, estimator)


def bmo_norm(proc: ProcessPaths, estimator: Estimator | None = None,
             measure: MeasureChange | None = None, keep_field: bool = False) -> BmoEstimate:
    """``sup_t ess sup E[<M>_T - <M>_t | F_t]^(1/2)`` over grid times.

    With ``measure`` the conditional expectations are taken under
    ``E_T(M) dP`` by reweighting the P-paths; on paths simulated under the
    tilted measure no reweighting is needed.
    """
    est = PolynomialRegression() if estimator is None else estimator
    fld = conditional_remaining_qv(proc, est, measure)
    sup = ess_sup(fld)
    val = math.sqrt(max(sup.value, 0.0))
    se = fld.se0 / (2 * val) if val > 0 else 0.0
    return BmoEstimate(value=val, method=fld.method, quantile_value=math.sqrt(max(sup.quantile_value, 0.0)),
                       se=se, step=sup.step, n_paths=proc.n_paths, n_steps=proc.grid.n_steps,
                       measure=_measure_label(proc, measure), field=fld if keep_field else None)


def _moment_constant(proc: ProcessPaths, q: float, estimator: Estimator | None, tilde: bool,
                     keep_field: bool) -> BmoEstimate:
    est = PolynomialRegression() if estimator is None else estimator
    payoff: Payoff = ExpMoment(proc.spec, q, tilde=tilde)
    fld = estimate_conditional(payoff, proc.bundle, est)
    sup = ess_sup(fld)
    flags = []
    if fld.pathwise0 is not None:
        z = fld.pathwise0 if fld.weights0 is None else fld.pathwise0 * fld.weights0
        if heavy_tailed(z):
            warnings.warn(f"moment of order {q:g} dominated by the top {HEAVY_TAIL_FRACTION:.1%} of paths",
                          HeavyTailWarning, stacklevel=3)
            flags.append("heavy_tail")
    if sup.value < 1.0 - JENSEN_TOLERANCE:
        flags.append("below_jensen_floor")
    return BmoEstimate(value=sup.value, method=fld.method, quantile_value=sup.quantile_value,
                       se=fld.se0, step=sup.step, n_paths=proc.n_paths, n_steps=proc.grid.n_steps,
                       measure="tilde" if tilde else proc.bundle.measure, flags=flags,
                       field=fld if keep_field else None)


def heavy_tailed(z: np.ndarray, fraction: float = HEAVY_TAIL_FRACTION, share: float = HEAVY_TAIL_SHARE) -> bool:
    """True when the largest ``fraction`` of nonnegative samples carries more than ``share`` of the sum."""
    z = np.abs(np.asarray(z, dtype=float))
    total = z.sum()
    if total <= 0:
        return False
    k = max(int(math.ceil(fraction * z.shape[0])), 1)
    top = np.partition(z, z.shape[0] - k)[-k:].sum()
    return bool(top > share * total)


def rp_constant(proc: ProcessPaths, p: float, estimator: Estimator | None = None,
                keep_field: bool = False) -> BmoEstimate:
    """Empirical ``C_p = sup_t ess sup E[E_{t,T}(M)^p | F_t]``."""
    if not p > 1:
        raise ValueError(f"reverse Hoelder exponent must exceed 1, got {p}")
    return _moment_constant(proc, p, estimator, False, keep_field)


def ap_constant(proc: ProcessPaths, p: float, estimator: Estimator | None = None,
                keep_field: bool = False, tilde: bool = False) -> BmoEstimate:
    """Empirical ``D_p = sup_t ess sup E[E_{t,T}(M)^(-1/(p-1)) | F_t]``.

    ``tilde=True`` computes the same quantity for ``M~`` under the tilted
    measure, by reweighting the P-paths of ``M``.
    """
    if not p > 1:
        raise ValueError(f"Muckenhoupt exponent must exceed 1, got {p}")
    return _moment_constant(proc, -1.0 / (p - 1.0), estimator, tilde, keep_field)
