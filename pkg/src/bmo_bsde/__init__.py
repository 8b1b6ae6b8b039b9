"""Monte Carlo verification of BSDE characterisations of BMO martingales."""

from .bmo_metrics import BmoEstimate, ap_constant, bmo_norm, rp_constant
from .bsde import (
    BsdeSolution,
    LinearBsdeSpec,
    PicardTrace,
    picard_iterate,
    picard_operator_H,
    solve_backward,
    theorem2_y_process,
    verify_lemma1,
)
from .cond_expect import ClosedForm, NestedMonteCarlo, PolynomialRegression, ess_sup, estimate_conditional
from .girsanov import make_measure_change, simulate_under_tilde, tilde_transform
from .harness import ExperimentConfig, VerdictReport
from .timegrid import (
    Constant,
    PiecewiseDeterministic,
    StateDependent,
    TimeGrid,
    build_martingale,
    simulate_brownian,
    stochastic_exponential,
)

__all__ = [
    "BmoEstimate", "BsdeSolution", "ClosedForm", "Constant", "ExperimentConfig", "LinearBsdeSpec",
    "NestedMonteCarlo", "PicardTrace", "PiecewiseDeterministic", "PolynomialRegression", "StateDependent",
    "TimeGrid", "VerdictReport", "ap_constant", "bmo_norm", "build_martingale", "ess_sup",
    "estimate_conditional", "make_measure_change", "picard_iterate", "picard_operator_H", "rp_constant",
    "simulate_brownian", "simulate_under_tilde", "solve_backward", "stochastic_exponential",
    "theorem2_y_process", "tilde_transform", "verify_lemma1",
]
