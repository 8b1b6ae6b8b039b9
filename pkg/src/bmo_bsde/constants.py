"""Closed-form constants and bounds relating BMO norms, R_p and A_p constants.

Every function is a pure function of its inputs.  Domain checks are strict
inequalities; a value outside the validity domain raises :class:`DomainError`
instead of being extrapolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

SQRT2 = math.sqrt(2.0)
REL_TOL = 1e-6


class DomainError(ValueError):
    """A constant was requested outside the region where its formula is valid."""


@dataclass(frozen=True)
class BoundReport:
    name: str
    value: float
    domain: str
    inputs: dict = field(default_factory=dict)


def _check_norm(norm: float) -> float:
    if not (norm >= 0 and math.isfinite(norm)):
        raise DomainError(f"BMO norm must be finite and nonnegative, got {norm}")
    return float(norm)


def _check_p(p: float) -> float:
    if not p > 1:
        raise DomainError(f"exponent p must exceed 1, got {p}")
    return float(p)


# ---------------------------------------------------------------------------
# contraction factors


def alpha_beta_rp(p: float, norm_tilde: float) -> tuple[float, float]:
    """Lipschitz factors of the reverse-Hoelder Picard map, driven by ``||M~||_BMO(P~)``."""
    p, n2 = _check_p(p), _check_norm(norm_tilde) ** 2
    den = 1.0 - (p - 1.0) * (p + 2.0) * n2
    if not den > 0:
        raise DomainError(f"1 - (p-1)(p+2)||M~||^2 = {den:.6g} must be positive (p={p}, norm={math.sqrt(n2)})")
    return p * (p - 1.0) * n2 / den, 2.0 * (p - 1.0) / den


def alpha_beta_ap(p: float, norm_M: float) -> tuple[float, float]:
    """Lipschitz factors of the Muckenhoupt Picard map, driven by ``||M||_BMO(P)``."""
    p, n2 = _check_p(p), _check_norm(norm_M) ** 2
    den = (p - 1.0) ** 2 - (3.0 * p - 2.0) * n2
    if not den > 0:
        raise DomainError(f"(p-1)^2 - (3p-2)||M||^2 = {den:.6g} must be positive (p={p}, norm={math.sqrt(n2)})")
    return p * n2 / den, 2.0 * (p - 1.0) / den


def _max_factor(variant: str, p: float, norm: float) -> float:
    f = alpha_beta_rp if variant == "rp" else alpha_beta_ap
    try:
        return max(f(p, norm))
    except DomainError:
        return math.inf


def find_contraction_p(norm: float, variant: str = "rp", target: float = 0.5,
                       p_max: float = 1e8) -> float | None:
    """An exponent with ``max(alpha, beta) <= target``, or None.

    ``rp``: bisect for the largest ``p_up`` in (1, ...) meeting the target and
    return the midpoint of ``(1, p_up)``.  ``ap``: bisect for the smallest
    ``p_lo`` meeting it and return the mirror point ``2 p_lo - 1`` (the
    midpoint in ``1 / (p - 1)``).
    """
    norm = _check_norm(norm)
    if variant not in ("rp", "ap"):
        raise ValueError(f"variant must be 'rp' or 'ap', got {variant!r}")
    ok = lambda p: _max_factor(variant, p, norm) <= target  # noqa: E731
    if variant == "rp":
        lo = 1.0
        hi = 1.0 + 1e-12
        if not ok(hi):
            return None
        step = 1e-12
        while ok(hi + step) and hi + step < p_max:
            hi += step
            step *= 2.0
        bad = hi + step
        while bad - hi > 1e-12 * hi:
            mid = 0.5 * (hi + bad)
            hi, bad = (mid, bad) if ok(mid) else (hi, mid)
        return 0.5 * (lo + hi)
    if not ok(p_max):
        return None
    good, bad = p_max, 1.0
    while good - bad > 1e-12 * good:
        mid = 0.5 * (good + bad)
        good, bad = (mid, bad) if ok(mid) else (good, mid)
    # alpha and beta decrease past the domain root, so good is the threshold
    return 2.0 * good - 1.0


def positivity_lower_bound(p: float, sup_Y: float, norm_tilde: float, psi_norm: float) -> float:
    """Lower bound for the Picard fixed point ``Y``; positive means ``Y > 0``."""
    p = _check_p(p)
    return (1.0 - 0.5 * p * (p - 1.0) * sup_Y * norm_tilde
            - 0.5 * (p - 1.0) * norm_tilde - 0.5 * (p - 1.0) * psi_norm)


# ---------------------------------------------------------------------------
# quantitative BMO bounds


def bmo_bound_from_rp(p: float, C_p: float, beta: float) -> float:
    """Upper bound for ``||M||^2_BMO(P)`` from the reverse-Hoelder constant, valid for ``beta > p/(p-1)``."""
    p = _check_p(p)
    if not C_p >= 1:
        raise DomainError(f"C_p must be >= 1, got {C_p}")
    if not beta > p / (p - 1.0):
        raise DomainError(f"beta must exceed p/(p-1) = {p / (p - 1.0):.6g}, got {beta}")
    return 2.0 * math.expm1(beta * (C_p - 1.0)) / (p * (beta * (p - 1.0) - p))


def bmo_bound_from_ap(p: float, D_p: float, beta: float) -> float:
    """Upper bound for ``||M~||^2_BMO(P~)`` from the Muckenhoupt constant, valid for ``beta > p``."""
    p = _check_p(p)
    if not D_p >= 1:
        raise DomainError(f"D_p must be >= 1, got {D_p}")
    if not beta > p:
        raise DomainError(f"beta must exceed p = {p:.6g}, got {beta}")
    return 2.0 * (p - 1.0) ** 2 / (p * (beta - p)) * math.expm1(beta * (D_p - 1.0))


def _minimize_over_beta(bound: Callable[[float], float], beta_min: float) -> tuple[float, float]:
    # beta = beta_min + exp(s): smooth and unimodal in s on the validity region
    g = lambda s: bound(beta_min + math.exp(s))  # noqa: E731
    grid = np.linspace(-25.0, 12.0, 149)
    vals = np.array([g(s) if math.isfinite(_safe(g, s)) else math.inf for s in grid])
    i = int(np.argmin(vals))
    if i == 0 or i == len(grid) - 1 or not math.isfinite(vals[i]):
        return beta_min + math.exp(grid[i]), float(vals[i])
    res = optimize.minimize_scalar(g, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden",
                                   tol=REL_TOL)
    return beta_min + math.exp(res.x), float(res.fun)


def _safe(g, s):
    try:
        return g(s)
    except OverflowError:
        return math.inf


def bmo_bound_from_rp_min(p: float, C_p: float) -> BoundReport:
    p = _check_p(p)
    if C_p == 1:
        b = 2.0 * p / (p - 1.0)
        return BoundReport("bmo_sq_from_rp", 0.0, "beta > p/(p-1)", {"p": p, "C_p": C_p, "beta": b})
    beta, val = _minimize_over_beta(lambda b: bmo_bound_from_rp(p, C_p, b), p / (p - 1.0))
    return BoundReport("bmo_sq_from_rp", val, "beta > p/(p-1)", {"p": p, "C_p": C_p, "beta": beta})


def bmo_bound_from_ap_min(p: float, D_p: float) -> BoundReport:
    p = _check_p(p)
    if D_p == 1:
        return BoundReport("bmo_sq_from_ap", 0.0, "beta > p", {"p": p, "D_p": D_p, "beta": 2.0 * p})
    beta, val = _minimize_over_beta(lambda b: bmo_bound_from_ap(p, D_p, b), p)
    return BoundReport("bmo_sq_from_ap", val, "beta > p", {"p": p, "D_p": D_p, "beta": beta})


# ---------------------------------------------------------------------------
# isomorphism constants


def f_objective(p: float, norm: float) -> float:
    """``1/p + norm^2 / (2 (1 - p))`` on ``0 < p < 1``."""
    if not 0 < p < 1:
        raise DomainError(f"p must lie in (0, 1), got {p}")
    return 1.0 / p + norm**2 / (2.0 * (1.0 - p))


def iso_constant(norm: float) -> float:
    """``C = 1 + norm / sqrt(2)``."""
    return 1.0 + _check_norm(norm) / SQRT2


@dataclass(frozen=True)
class PStar:
    p_star: float
    f_min: float
    C: float
    p_numeric: float
    f_numeric: float


def p_star_and_f(norm: float) -> PStar:
    """Minimiser ``p* = sqrt2 / (sqrt2 + norm)`` of ``f`` and ``f(p*) = C^2``, with a numeric cross-check."""
    norm = _check_norm(norm)
    C = iso_constant(norm)
    if norm == 0:
        # infimum approached as p -> 1
        return PStar(1.0, 1.0, 1.0, 1.0, 1.0)
    ps = SQRT2 / (SQRT2 + norm)
    res = optimize.minimize_scalar(lambda p: f_objective(p, norm), bounds=(1e-12, 1 - 1e-12),
                                   method="bounded", options={"xatol": 1e-12})
    return PStar(ps, C * C, C, float(res.x), float(res.fun))


def admissible(norm: float, p: float) -> bool:
    """Admissibility of ``p`` for the classical constant: ``norm < sqrt2 (sqrt p - 1)``."""
    return p > 0 and _check_norm(norm) < SQRT2 * (math.sqrt(p) - 1.0)


def admissibility_threshold(norm: float) -> float:
    """``(1 + norm / sqrt2)^2``; admissible exponents are strictly above it."""
    return iso_constant(norm) ** 2


def kazamaki_constant(norm: float, ap_sup_term: float, p: float) -> float:
    """Squared classical constant ``2p 2^(1/p) D^((p-1)/p)`` at an admissible ``p``."""
    norm = _check_norm(norm)
    if not p > admissibility_threshold(norm):
        raise DomainError(f"p = {p} violates admissibility p > (1 + norm/sqrt2)^2 = {admissibility_threshold(norm):.6g}")
    if not ap_sup_term >= 1:
        raise DomainError(f"A_p supremum term must be >= 1, got {ap_sup_term}")
    return 2.0 * p * 2.0 ** (1.0 / p) * ap_sup_term ** ((p - 1.0) / p)


def gaussian_ap_term(norm: float) -> Callable[[float], float]:
    """A_p supremum for ``M~ = -lambda W~`` with ``lambda sqrt(T) = norm``: ``exp(p norm^2 / (2 (p-1)^2))``."""
    n2 = _check_norm(norm) ** 2
    return lambda p: math.exp(p * n2 / (2.0 * (p - 1.0) ** 2))


def gaussian_rp_term(norm: float) -> Callable[[float], float]:
    n2 = _check_norm(norm) ** 2
    return lambda p: math.exp(p * (p - 1.0) * n2 / 2.0)


def admissible_grid(norm: float, n: int = 4000, span: float = 200.0) -> np.ndarray:
    lo = admissibility_threshold(norm)
    return lo * (1.0 + np.geomspace(1e-6, span, n))


@dataclass(frozen=True)
class KazamakiMin:
    value: float
    p: float


def kazamaki_min(norm: float, ap_oracle: Callable[[float], float], grid: np.ndarray | None = None) -> KazamakiMin:
    ps = admissible_grid(norm) if grid is None else np.asarray(grid)
    best, best_p = math.inf, math.nan
    for p in ps:
        try:
            v = kazamaki_constant(norm, ap_oracle(float(p)), float(p))
        except (DomainError, OverflowError):
            continue
        if v < best:
            best, best_p = v, float(p)
    return KazamakiMin(best, best_p)


@dataclass(frozen=True)
class Comparison:
    norm: float
    C_sq: float
    half_CK_sq: float
    p: float

    @property
    def ratio(self) -> float:
        return self.C_sq / self.half_CK_sq

    @property
    def passed(self) -> bool:
        return self.C_sq <= self.half_CK_sq


def compare_constants(norm: float, ap_oracle: Callable[[float], float] | None = None) -> Comparison:
    """``C^2`` against half the grid-minimised classical constant."""
    oracle = gaussian_ap_term(norm) if ap_oracle is None else ap_oracle
    km = kazamaki_min(norm, oracle)
    return Comparison(norm=norm, C_sq=iso_constant(norm) ** 2, half_CK_sq=0.5 * km.value, p=km.p)


def bound_table(p: float, norm: float, beta: float | None = None) -> list[BoundReport]:
    """Every constant that is defined at ``(p, norm, beta)``; undefined ones are reported with NaN."""
    rows: list[BoundReport] = []

    def add(name, domain, fn, **inputs):
        try:
            val = fn()
        except DomainError as exc:
            rows.append(BoundReport(name, math.nan, f"{domain} [violated: {exc}]", inputs))
        else:
            rows.append(BoundReport(name, float(val), domain, inputs))

    ps = p_star_and_f(norm)
    rows.append(BoundReport("p_star", ps.p_star, "norm >= 0", {"norm": norm}))
    rows.append(BoundReport("C", ps.C, "norm >= 0", {"norm": norm}))
    rows.append(BoundReport("C_sq", ps.f_min, "norm >= 0", {"norm": norm}))
    add("alpha_rp", "1-(p-1)(p+2)norm^2 > 0", lambda: alpha_beta_rp(p, norm)[0], p=p, norm=norm)
    add("beta_rp", "1-(p-1)(p+2)norm^2 > 0", lambda: alpha_beta_rp(p, norm)[1], p=p, norm=norm)
    add("alpha_ap", "(p-1)^2-(3p-2)norm^2 > 0", lambda: alpha_beta_ap(p, norm)[0], p=p, norm=norm)
    add("beta_ap", "(p-1)^2-(3p-2)norm^2 > 0", lambda: alpha_beta_ap(p, norm)[1], p=p, norm=norm)
    rows.append(BoundReport("contraction_p_rp", _none_nan(find_contraction_p(norm, "rp")), "max(alpha,beta) <= 0.5", {"norm": norm}))
    rows.append(BoundReport("contraction_p_ap", _none_nan(find_contraction_p(norm, "ap")), "max(alpha,beta) <= 0.5", {"norm": norm}))
    C_p, D_p = gaussian_rp_term(norm)(p), gaussian_ap_term(norm)(p)
    if beta is not None:
        add("bmo_sq_from_rp", "beta > p/(p-1)", lambda: bmo_bound_from_rp(p, C_p, beta), p=p, C_p=C_p, beta=beta)
        add("bmo_sq_from_ap", "beta > p", lambda: bmo_bound_from_ap(p, D_p, beta), p=p, D_p=D_p, beta=beta)
    rows.append(bmo_bound_from_rp_min(p, C_p))
    rows.append(bmo_bound_from_ap_min(p, D_p))
    add("kazamaki_sq", "p > (1+norm/sqrt2)^2", lambda: kazamaki_constant(norm, D_p, p), p=p, norm=norm)
    cmp_ = compare_constants(norm)
    rows.append(BoundReport("half_kazamaki_sq_min", cmp_.half_CK_sq, "p > (1+norm/sqrt2)^2", {"norm": norm, "p": cmp_.p}))
    rows.append(BoundReport("C_sq_over_half_kazamaki_sq", cmp_.ratio, "norm >= 0", {"norm": norm}))
    return rows


def _none_nan(x):
    return math.nan if x is None else x
