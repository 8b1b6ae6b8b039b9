import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmo_bsde import constants as K
from bmo_bsde.bmo_metrics import bmo_norm
from bmo_bsde.bsde import (
    ContractionError,
    LinearBsdeSpec,
    SolvabilityError,
    picard_iterate,
    picard_operator_H,
    psi_bmo_norm,
    solve_backward,
    theorem2_y_process,
    verify_lemma1,
)
from bmo_bsde.cond_expect import PolynomialRegression
from bmo_bsde.girsanov import make_measure_change, simulate_under_tilde
from bmo_bsde.timegrid import (
    Constant,
    TimeGrid,
    build_martingale,
    simulate_brownian,
    sine_modulated,
    stochastic_exponential,
)

LAM = 0.5
E025 = math.exp(0.25)


@pytest.fixture(scope="module")
def tilde_sim(small_grid):
    return simulate_under_tilde(small_grid, Constant(LAM), Constant(LAM), 20_000, seed=11)


@pytest.fixture(scope="module")
def state_M(small_bundle):
    return stochastic_exponential(build_martingale(small_bundle, sine_modulated(0.5, 0.5)))


def closed_form_Y(grid, p, lam=LAM):
    return np.exp(0.5 * p * (p - 1) * lam**2 * (grid.horizon - grid.times))


def test_reverse_holder_closed_form(half_M):
    sol = solve_backward(LinearBsdeSpec.reverse_holder(half_M, 2.0))
    assert sol.y0 == pytest.approx(E025, rel=0.01)
    assert sol.psi_sup < 0.02
    assert sol.max_abs_residual < 3 * half_M.grid.dt


def test_muckenhoupt_closed_form(half_M):
    sol = solve_backward(LinearBsdeSpec.muckenhoupt(half_M, 2.0))
    assert sol.y0 == pytest.approx(E025, rel=0.01)


def test_zero_generator_is_constant(half_M):
    sol = solve_backward(LinearBsdeSpec(a=0.0, b=0.0, driver=half_M, terminal=1.0))
    assert np.allclose(sol.Y, 1.0)
    assert np.allclose(sol.psi, 0.0, atol=1e-9)


@pytest.mark.parametrize("make", [
    lambda M: LinearBsdeSpec.reverse_holder(M, 1.5),
    lambda M: LinearBsdeSpec.muckenhoupt(M, 3.0),
    lambda M: LinearBsdeSpec(a=0.3, b=-0.7, driver=M, terminal=2.5),
    lambda M: LinearBsdeSpec.girsanov_energy(M, M),
])
def test_terminal_pinning(state_M, make):
    spec = make(state_M)
    sol = solve_backward(spec)
    assert np.all(sol.Y[:, -1] == spec.terminal)


def test_invalid_specs(half_M):
    with pytest.raises(ValueError, match="finite"):
        LinearBsdeSpec(a=0.0, b=0.0, driver=half_M, terminal=math.nan)
    with pytest.raises(ValueError, match="nonnegative"):
        LinearBsdeSpec(a=0.0, b=0.0, driver=half_M, forcing=-np.ones((1, half_M.grid.n_steps)))
    with pytest.raises(ValueError, match="column"):
        LinearBsdeSpec(a=0.0, b=0.0, driver=half_M, forcing=np.ones((1, 3)))
    with pytest.raises(ValueError):
        LinearBsdeSpec.reverse_holder(half_M, 1.0)


def test_unsolvable_step_is_named():
    b = simulate_brownian(TimeGrid(1.0, 10), 100, seed=1)
    M = build_martingale(b, Constant(1.0))
    # a * d<M> = 0.5 q (q-1) * 0.1 >= 1 once q = 5
    with pytest.raises(SolvabilityError, match="step 0"):
        solve_backward(LinearBsdeSpec.power_moment(M, 5.0))


def test_positivity_with_nonnegative_data(state_M):
    for spec in (LinearBsdeSpec.reverse_holder(state_M, 2.0), LinearBsdeSpec.muckenhoupt(state_M, 2.0)):
        assert solve_backward(spec).Y.min() > 0
    energy = solve_backward(LinearBsdeSpec(a=0.0, b=0.0, driver=state_M, terminal=0.0, forcing=state_M.dqv))
    assert energy.Y.min() >= -1e-3


def test_halving_dt_halves_the_error():
    # Y is deterministic for constant lambda, so the error is pure discretization
    errs = []
    for n in (25, 50, 100):
        b = simulate_brownian(TimeGrid(1.0, n), 2000, seed=3)
        sol = solve_backward(LinearBsdeSpec.reverse_holder(build_martingale(b, Constant(LAM)), 3.0))
        errs.append(abs(sol.y0 - math.exp(0.75)))
    for coarse, fine in zip(errs, errs[1:]):
        assert 1.5 <= coarse / fine <= 3.0


def test_orthogonal_residual_small(state_M):
    sol = solve_backward(LinearBsdeSpec.reverse_holder(state_M, 2.0))
    assert sol.psi_sup > 0.02  # a genuinely state-dependent solution
    assert sol.orthogonal_ratio() < 0.01
    assert abs(sol.residual).max() < 3 * state_M.grid.dt


def test_solution_summary_csv(tmp_path, half_M):
    sol = solve_backward(LinearBsdeSpec.reverse_holder(half_M, 2.0))
    sol.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "step,t,mean_Y,max_Y,min_Y,mean_psi,residual"
    assert len(lines) == half_M.grid.n_steps + 2


@pytest.mark.parametrize("variant", ["rp", "ap"])
def test_lemma_forward(half_M, variant):
    chk = verify_lemma1("forward", 2.0, half_M, variant=variant)
    assert chk.passed and chk.measured < 3 * half_M.grid.dt
    assert chk.detail["y0"] == pytest.approx(E025, rel=0.01)


@pytest.mark.parametrize("variant", ["rp", "ap"])
def test_lemma_backward_has_no_aggregate_drift(half_M, variant):
    chk = verify_lemma1("backward", 2.0, half_M, variant=variant)
    assert chk.detail["y_min"] > 0
    # chi-square over all steps, at the 0.1% level
    assert chk.detail["chi2_pvalue"] > 1e-3
    assert chk.detail["expected_exceedances"] == pytest.approx(0.0027 * half_M.grid.n_steps, rel=0.01)


def test_lemma_backward_detects_a_wrong_solution(half_M, monkeypatch):
    # a generator with the wrong coefficient leaves Y E(M)^q with a drift
    import bmo_bsde.bsde as B
    real = B.LinearBsdeSpec.power_moment

    def wrong(driver, q, name="power"):
        spec = real(driver, q, name)
        return B.LinearBsdeSpec(a=4 * spec.a, b=spec.b, driver=driver, terminal=1.0, name="wrong")

    monkeypatch.setattr(B.LinearBsdeSpec, "power_moment", staticmethod(wrong))
    chk = verify_lemma1("backward", 2.0, half_M)
    assert not chk.passed
    assert chk.detail["chi2_pvalue"] < 1e-6


def test_lemma_zero_driver(small_bundle):
    Z = build_martingale(small_bundle, Constant(0.0))
    chk = verify_lemma1("forward", 2.0, Z)
    # zero up to the round-off of the least-squares projection
    assert chk.measured < 1e-12
    assert np.allclose(chk.solution.Y, 1.0, rtol=1e-12)


def test_lemma_bad_direction(half_M):
    with pytest.raises(ValueError):
        verify_lemma1("sideways", 2.0, half_M)


# ---------------------------------------------------------------------------
# contraction map


def test_H_of_zero_is_one(tilde_sim):
    M = tilde_sim.M
    n, m = M.n_paths, M.grid.n_steps
    Y, Psi = picard_operator_H(np.zeros((n, m + 1)), np.zeros((n, m)), 1.1, M)
    assert np.allclose(Y, 1.0)
    assert np.abs(Psi).max() < 1e-9


def test_H_fixes_the_closed_form(tilde_sim):
    # under the tilted measure the reverse-Hoelder solution still has psi = 0
    M = tilde_sim.M
    p = 2.0
    y = np.broadcast_to(closed_form_Y(M.grid, p), (M.n_paths, M.grid.n_steps + 1))
    Y, _ = picard_operator_H(y, np.zeros((M.n_paths, M.grid.n_steps)), p, M)
    assert np.max(np.abs(Y - y)) / np.max(y) < 0.01


def test_H_shift_bounded_by_sqrt_alpha(tilde_sim):
    M = tilde_sim.M
    p = 1.1
    n, m = M.n_paths, M.grid.n_steps
    y = np.zeros((n, m + 1))
    psi = np.zeros((n, m))
    Y0, _ = picard_operator_H(y, psi, p, M)
    Y1, _ = picard_operator_H(y + 1.0, psi, p, M)
    alpha, _ = K.alpha_beta_rp(p, LAM)
    assert np.max(np.abs(Y1 - Y0)) <= math.sqrt(alpha) + 1e-9


def test_H_needs_tilted_paths(half_M):
    n, m = half_M.n_paths, half_M.grid.n_steps
    with pytest.raises(ValueError):
        picard_operator_H(np.zeros((n, m + 1)), np.zeros((n, m)), 1.1, half_M)


def test_picard_contracts_and_matches_backward_solution(tilde_sim):
    M = tilde_sim.M
    p = K.find_contraction_p(LAM, "rp")
    res = picard_iterate(p, M, norm_tilde=LAM)
    tr = res.trace
    assert res.converged and tr.iterations >= 2
    assert all(math.isfinite(r) and r <= tr.bound + 0.1 for r in tr.ratios)
    ref = solve_backward(LinearBsdeSpec.reverse_holder(M, p))
    assert np.max(np.abs(res.Y - ref.Y)) / np.max(np.abs(ref.Y)) < 0.02


def test_picard_predicted_factors_at_p_11(tilde_sim):
    tr = picard_iterate(1.1, tilde_sim.M, norm_tilde=0.5, k_max=3).trace
    assert tr.alpha == pytest.approx(0.029810, abs=1e-6)
    assert tr.beta == pytest.approx(0.216802, abs=1e-6)
    assert all(r <= 0.25 for r in tr.ratios)


def test_picard_from_exact_solution_starts_at_noise_floor(tilde_sim):
    M = tilde_sim.M
    p = 1.1
    ref = solve_backward(LinearBsdeSpec.reverse_holder(M, p))
    res = picard_iterate(p, M, y0=ref.Y, psi0=ref.psi, k_max=2, norm_tilde=LAM)
    assert res.trace.y_dist[0] < 1e-8


def test_picard_non_contraction_raises():
    ts = simulate_under_tilde(TimeGrid(1.0, 10), Constant(2.0), Constant(2.0), 500, seed=2)
    with pytest.raises(ContractionError) as info:
        picard_iterate(20.0, ts.M, norm_tilde=2.0, k_max=10, tol=0.0)
    tr = info.value.trace
    assert tr.ratios[-1] >= 1.0
    assert tr.alpha == math.inf and "alpha=inf" in str(info.value)


def test_positivity_region_implies_positive_solution(tilde_sim):
    M = tilde_sim.M
    p = 1.1
    sol = solve_backward(LinearBsdeSpec.reverse_holder(M, p))
    lb = K.positivity_lower_bound(p, sol.y_sup, LAM, psi_bmo_norm(sol))
    assert lb > 0
    assert sol.Y.min() > 0


# ---------------------------------------------------------------------------
# energy process


def test_energy_process_gaussian(small_bundle):
    X = build_martingale(small_bundle, Constant(1.0))
    M = stochastic_exponential(build_martingale(small_bundle, Constant(LAM)))
    ep = theorem2_y_process(X, M, make_measure_change(M))
    assert ep.sup == pytest.approx(1.0, rel=0.03)
    assert np.all(ep.solution.Y[:, -1] == 0.0)
    assert ep.solution.max_abs_residual < 3 * small_bundle.grid.dt


def test_energy_process_zero_X(small_bundle):
    X = build_martingale(small_bundle, Constant(0.0))
    M = build_martingale(small_bundle, Constant(LAM))
    ep = theorem2_y_process(X, M)
    assert np.all(ep.solution.Y == 0.0)


def test_energy_route_agrees_with_direct_norm(small_bundle, small_grid):
    X = build_martingale(small_bundle, sine_modulated(1.0, 0.5))
    M = build_martingale(small_bundle, sine_modulated(0.5, 0.5))
    ep = theorem2_y_process(X, M)
    ts = simulate_under_tilde(small_grid, M.spec, X.spec, 20_000, seed=13)
    direct = bmo_norm(ts.tilde.as_process()).value ** 2
    assert ep.sup == pytest.approx(direct, rel=0.04)


def test_energy_requires_P_paths(tilde_sim):
    with pytest.raises(ValueError):
        theorem2_y_process(tilde_sim.X, tilde_sim.M)


@given(st.floats(1.05, 2.5), st.floats(0.1, 0.8))
@settings(max_examples=12, deadline=None)
def test_deterministic_solution_matches_discrete_product(p, lam):
    # for constant lambda the scheme reduces to Y_k = Y_{k+1} / (1 - a lam^2 dt)
    grid = TimeGrid(1.0, 20)
    M = build_martingale(simulate_brownian(grid, 200, seed=1), Constant(lam))
    sol = solve_backward(LinearBsdeSpec.reverse_holder(M, p))
    a = 0.5 * p * (p - 1)
    expect = (1 - a * lam**2 * grid.dt) ** -(grid.n_steps - np.arange(grid.n_steps + 1))
    assert np.allclose(sol.Y, expect, rtol=1e-9)
