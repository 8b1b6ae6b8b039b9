import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmo_bsde import constants as K
from bmo_bsde.constants import DomainError

SQRT2 = math.sqrt(2.0)


# frozen oracle values, each from plain arithmetic on the closed forms
# alpha_rp(1.1, 0.5) = 1.1*0.1*0.25 / (1 - 0.1*3.1*0.25) = 0.0275 / 0.9225
ALPHA_RP_11 = 0.029810298102981
BETA_RP_11 = 0.216802168021680  # 0.2 / 0.9225
ALPHA_AP_10 = 2.5 / 74
BETA_AP_10 = 18 / 74
BOUND_P2_BETA4 = 1.0573014540  # 2 (exp(4 (e^0.25 - 1)) - 1) / (2 (4 - 2)), exp(1.1361017) = 3.1146029
P_STAR_05 = 0.7387961250362587  # sqrt2 / (sqrt2 + 0.5)
C_05 = 1.3535533905932737  # 1 + 0.5 / sqrt2
C_SQ_05 = 1.8321067811865475


def test_alpha_beta_rp_values():
    a, b = K.alpha_beta_rp(1.1, 0.5)
    assert a == pytest.approx(ALPHA_RP_11, rel=1e-12)
    assert b == pytest.approx(BETA_RP_11, rel=1e-12)


def test_alpha_beta_rp_limit_at_one():
    a, b = K.alpha_beta_rp(1 + 1e-6, 0.5)
    assert a < 1e-5 and b < 1e-5


def test_alpha_beta_rp_domain_error():
    with pytest.raises(DomainError, match="1 - \\(p-1\\)\\(p\\+2\\)"):
        K.alpha_beta_rp(2.5, 0.5)


def test_alpha_beta_ap_values():
    a, b = K.alpha_beta_ap(10.0, 0.5)
    assert a == pytest.approx(ALPHA_AP_10, rel=1e-12)
    assert b == pytest.approx(BETA_AP_10, rel=1e-12)


def test_alpha_beta_ap_limit_at_infinity():
    a, b = K.alpha_beta_ap(1e6, 0.5)
    assert a < 1e-5 and b < 1e-5


def test_alpha_beta_ap_domain_error():
    with pytest.raises(DomainError, match="\\(3p-2\\)"):
        K.alpha_beta_ap(1.5, 0.5)


@pytest.mark.parametrize("bad_p", [1.0, 0.5, -2.0])
def test_exponent_must_exceed_one(bad_p):
    with pytest.raises(DomainError):
        K.alpha_beta_rp(bad_p, 0.1)


def test_rp_factors_increase_in_p_on_validity_interval():
    # the printed formulas grow with p up to the singular denominator
    ps = np.linspace(1.01, 1.9, 50)
    vals = [max(K.alpha_beta_rp(p, 0.5)) for p in ps]
    assert np.all(np.diff(vals) > 0)


def test_find_contraction_p_rp():
    p = K.find_contraction_p(0.5, "rp")
    assert 1 < p < 2
    assert max(K.alpha_beta_rp(p, 0.5)) <= 0.5
    # p = 1.1 also qualifies
    assert max(K.alpha_beta_rp(1.1, 0.5)) <= 0.5


def test_find_contraction_p_ap():
    p = K.find_contraction_p(0.5, "ap")
    assert p >= 10
    assert max(K.alpha_beta_ap(p, 0.5)) <= 0.5
    assert max(K.alpha_beta_ap(10.0, 0.5)) == pytest.approx(0.243, abs=5e-4)


def test_find_contraction_p_zero_norm_rp():
    p = K.find_contraction_p(0.0, "rp")
    a, b = K.alpha_beta_rp(p, 0.0)
    assert a == 0.0
    assert max(a, b) <= 0.5


def test_find_contraction_p_bad_variant():
    with pytest.raises(ValueError):
        K.find_contraction_p(0.5, "xx")


def test_find_contraction_p_none_when_range_exhausted():
    assert K.find_contraction_p(0.5, "ap", p_max=5.0) is None


@given(st.floats(0.0, 3.0), st.sampled_from(["rp", "ap"]))
@settings(max_examples=40, deadline=None)
def test_found_contraction_p_meets_target(norm, variant):
    p = K.find_contraction_p(norm, variant)
    if p is not None:
        f = K.alpha_beta_rp if variant == "rp" else K.alpha_beta_ap
        assert max(f(p, norm)) <= 0.5 + 1e-9


def test_bound_from_rp_value():
    assert K.bmo_bound_from_rp(2.0, math.exp(0.25), 4.0) == pytest.approx(BOUND_P2_BETA4, rel=1e-6)
    assert K.bmo_bound_from_rp(2.0, math.exp(0.25), 4.0) >= 0.25


def test_bound_from_ap_value():
    assert K.bmo_bound_from_ap(2.0, math.exp(0.25), 4.0) == pytest.approx(BOUND_P2_BETA4, rel=1e-6)


@pytest.mark.parametrize("fn", [K.bmo_bound_from_rp, K.bmo_bound_from_ap])
def test_bound_with_unit_constant_is_zero(fn):
    assert fn(2.0, 1.0, 7.0) == 0.0


@pytest.mark.parametrize("fn", [K.bmo_bound_from_rp, K.bmo_bound_from_ap])
def test_bound_beta_boundary_excluded(fn):
    with pytest.raises(DomainError):
        fn(2.0, 1.2, 2.0)


@pytest.mark.parametrize("lam", [0.1, 0.25, 0.5])
def test_minimized_rp_bound_dominates_gaussian_norm(lam):
    rep = K.bmo_bound_from_rp_min(2.0, math.exp(lam**2))
    assert rep.value > lam**2
    assert rep.inputs["beta"] > 2.0
    # the minimiser is no worse than a coarse scan over beta
    scan = min(K.bmo_bound_from_rp(2.0, math.exp(lam**2), b) for b in np.linspace(2.001, 60, 4000))
    assert rep.value <= scan * (1 + 1e-6)


def test_minimized_ap_bound_no_worse_than_scan():
    D = math.exp(0.25)
    rep = K.bmo_bound_from_ap_min(2.0, D)
    scan = min(K.bmo_bound_from_ap(2.0, D, b) for b in np.linspace(2.001, 60, 4000))
    assert rep.value <= scan * (1 + 1e-6)


def test_p_star_and_f_at_half():
    ps = K.p_star_and_f(0.5)
    assert ps.p_star == pytest.approx(P_STAR_05, abs=1e-12)
    assert ps.C == pytest.approx(C_05, abs=1e-12)
    assert ps.f_min == pytest.approx(C_SQ_05, abs=1e-12)


def test_p_star_zero_norm():
    ps = K.p_star_and_f(0.0)
    assert ps.C == 1.0 and ps.f_min == 1.0 and ps.p_star == 1.0


def test_f_grid_minimization_oracle():
    # independent brute-force grid, not the package minimiser
    grid = np.linspace(0.001, 0.999, 998_001)
    vals = 1 / grid + 0.25 / (2 * (1 - grid))
    i = int(np.argmin(vals))
    assert abs(grid[i] - P_STAR_05) < 1e-3
    assert abs(vals[i] - C_SQ_05) < 1e-6


@given(st.floats(0.0, 10.0))
def test_f_at_p_star_is_c_squared(norm):
    ps = K.p_star_and_f(norm)
    assert ps.f_min == pytest.approx((1 + norm / SQRT2) ** 2, rel=1e-12, abs=1e-12)
    if ps.p_star < 1.0:  # tiny norms round p_star to exactly 1
        assert K.f_objective(ps.p_star, norm) == pytest.approx(ps.f_min, rel=1e-12)


@pytest.mark.parametrize("norm", np.linspace(0.01, 5.0, 50))
def test_numeric_minimizer_matches_closed_form(norm):
    ps = K.p_star_and_f(float(norm))
    assert abs(ps.p_numeric - ps.p_star) < 1e-3
    assert abs(ps.f_numeric - ps.f_min) < 1e-6


def test_kazamaki_example():
    p = 1.84
    D = math.exp(p * 0.25 / (2 * 0.84**2))
    assert D == pytest.approx(1.3854, abs=1e-4)
    oracle = 2 * p * 2 ** (1 / p) * D ** ((p - 1) / p)
    assert K.kazamaki_constant(0.5, D, p) == pytest.approx(oracle, rel=1e-12)
    assert K.kazamaki_constant(0.5, D, p) == pytest.approx(6.22, abs=0.01)


def test_kazamaki_boundary_rejected():
    with pytest.raises(DomainError, match="admissibility"):
        K.kazamaki_constant(0.5, 1.2, (1 + 0.5 / SQRT2) ** 2)


@given(st.floats(1.0001, 50.0))
def test_kazamaki_exceeds_two_p(p):
    assert K.kazamaki_constant(0.0, 1.0, p) > 2 * p


@given(st.floats(0.0, 4.0), st.floats(0.01, 40.0))
def test_admissibility_equivalence(norm, p):
    th = K.admissibility_threshold(norm)
    if abs(p - th) > 1e-9 * th:
        assert K.admissible(norm, p) == (p > th)


def test_compare_constants_half():
    c = K.compare_constants(0.5)
    assert c.C_sq == pytest.approx(C_SQ_05, abs=1e-12)
    assert c.half_CK_sq == pytest.approx(3.11, abs=0.01)
    assert c.passed


@pytest.mark.parametrize("norm", [0.0, 0.1, 0.25, 0.5, 1.0, 2.0])
def test_compare_constants_grid(norm):
    c = K.compare_constants(norm)
    assert c.passed and c.ratio <= 1.0
    if norm == 0:
        assert c.C_sq == 1.0 and c.half_CK_sq > 1.0


def test_positivity_lower_bound_formula():
    lb = K.positivity_lower_bound(1.1, 1.1, 0.5, 0.2)
    assert lb == pytest.approx(1 - 0.5 * 1.1 * 0.1 * 1.1 * 0.5 - 0.5 * 0.1 * 0.5 - 0.5 * 0.1 * 0.2)


def test_bound_table_reports_domain_violations():
    rows = {r.name: r for r in K.bound_table(2.5, 0.5, beta=4.0)}
    assert math.isnan(rows["alpha_rp"].value)
    assert "violated" in rows["alpha_rp"].domain
    assert rows["C"].value == pytest.approx(C_05)


def test_constants_bit_identical_on_repeat():
    a = [r.value for r in K.bound_table(2.0, 0.5, 4.0)]
    b = [r.value for r in K.bound_table(2.0, 0.5, 4.0)]
    assert np.array_equal(np.array(a), np.array(b), equal_nan=True)
