import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from heaprecall.estimation import (
    Objective, bfgs_maximize, fd_gradient, fd_hessian, find_posterior_mode, from_unconstrained,
    log_jacobian, multistart_agreement, observed_information, parametric_bootstrap_ci,
    random_inits, repair_information, theta_jacobian, to_unconstrained,
)
from heaprecall.likelihood import MarginalLikelihood, log_posterior
from heaprecall.model import ModelSpec, Theta
from heaprecall.simulation import SimulationDesign, generate_dataset

from oracles import poisson_glm_fixed_effects


def test_round_trip_case1(case1):
    theta = case1[0]
    back = from_unconstrained(to_unconstrained(theta))
    assert np.max(np.abs(back.vector() - theta.vector())) < 1e-12


@settings(max_examples=300)
@given(arrays(float, 10, elements=st.floats(-12, 12)))
def test_every_finite_phi_gives_valid_theta(phi):
    theta = from_unconstrained(phi, 1, 1)
    assert theta.gamma1 > theta.gamma2 > theta.gamma3
    assert theta.sigma_b > 0 and theta.sigma_u > 0
    again = from_unconstrained(to_unconstrained(theta), 1, 1)
    assert np.allclose(again.vector(), theta.vector(), rtol=1e-12, atol=1e-12)


def test_ten_thousand_random_phi_map_to_valid_theta():
    rng = np.random.default_rng(0)
    for phi in rng.normal(0, 3, size=(10_000, 8)):
        t = from_unconstrained(phi)
        assert t.is_valid
        # the natural-scale round trip is well conditioned everywhere
        again = from_unconstrained(to_unconstrained(t))
        assert np.allclose(again.vector(), t.vector(), rtol=1e-12, atol=1e-12)


def test_phi_round_trip_within_1e12():
    # log-gaps lose digits when the gap is tiny next to the intercepts, so
    # the phi-side check stays in the range where that cannot happen
    rng = np.random.default_rng(1)
    for phi in rng.normal(0, 1, size=(10_000, 8)):
        assert np.allclose(to_unconstrained(from_unconstrained(phi)), phi, rtol=0, atol=1e-12)


def test_equal_intercepts_are_unreachable(case1):
    theta = Theta.unchecked(**{**case1[0].to_dict(), "gamma2": case1[0].gamma1})
    with pytest.raises(ValueError):
        to_unconstrained(theta)


def test_jacobian_matches_finite_differences(case2):
    theta = case2[0].replace(beta2=[0.2], beta3=[-1.0])
    phi = to_unconstrained(theta)
    jac = theta_jacobian(phi, 1, 1)
    num = np.empty_like(jac)
    for j in range(phi.size):
        e = np.zeros(phi.size)
        e[j] = 1e-6
        num[:, j] = (from_unconstrained(phi + e, 1, 1).vector()
                     - from_unconstrained(phi - e, 1, 1).vector()) / 2e-6
    assert np.allclose(jac, num, atol=1e-7)


def test_log_jacobian_is_log_det_to_prior_coordinates(case2):
    phi = to_unconstrained(case2[0])

    def prior_coords(p):
        t = from_unconstrained(p)
        return np.array([t.beta0, t.beta1, t.sigma_b2, t.gamma1, t.gamma2, t.gamma3, t.gamma0,
                         t.sigma_u2])

    num = np.empty((8, 8))
    for j in range(8):
        e = np.zeros(8)
        e[j] = 1e-6
        num[:, j] = (prior_coords(phi + e) - prior_coords(phi - e)) / 2e-6
    assert math.isclose(log_jacobian(phi), np.linalg.slogdet(num)[1], rel_tol=1e-7)


def test_fd_hessian_of_quadratic_is_exact():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 5))
    A = a @ a.T + np.eye(5)
    c = rng.normal(size=5)

    def f(x):
        return -0.5 * (x - c) @ A @ (x - c)

    H = fd_hessian(f, np.zeros(5))
    assert np.allclose(H, H.T)
    assert np.max(np.abs(H + A)) < 1e-6
    g, _ = fd_gradient(f, np.zeros(5))
    assert np.allclose(g, A @ c, atol=1e-6)


def test_repair_adds_escalating_ridge():
    info = np.diag([1.0, -1e-7])
    fixed, ridge = repair_information(info)
    assert ridge > 0
    np.linalg.cholesky(fixed)
    same, zero = repair_information(np.eye(3))
    assert zero == 0 and np.array_equal(same, np.eye(3))
    with pytest.raises(FloatingPointError):
        repair_information(np.array([[np.nan]]))


def test_bfgs_on_rosenbrock():
    def f(x):
        return -((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2)

    res = bfgs_maximize(f, np.array([-1.2, 1.0]), max_iter=2000, gtol=1e-5)
    assert res.converged
    assert np.allclose(res.x, [1, 1], atol=1e-4)


def test_bfgs_flags_non_convergence():
    res = bfgs_maximize(lambda x: -float(x @ x) ** 0.5 * 1e3 + x[0], np.array([3.0, 2.0]),
                        max_iter=3)
    assert not res.converged


def test_non_finite_start_raises(case2):
    theta, design = case2
    data = generate_dataset(theta, SimulationDesign(n_subjects=5), np.random.default_rng(0))
    with pytest.raises(FloatingPointError):
        find_posterior_mode(data.subjects, design.spec, init=theta.replace(beta0=900.0))


def test_empty_dataset_rejected(case2):
    with pytest.raises(ValueError):
        find_posterior_mode([], case2[1].spec)


def test_mode_improves_on_start_and_has_small_gradient(case2_fit, case2):
    lik, mode = case2_fit
    assert mode.converged
    assert mode.final_gradient_norm < 1e-4
    from heaprecall.estimation import default_init

    init = default_init(lik.subjects, lik.spec)
    assert log_posterior(mode.theta_hat, lik) >= log_posterior(init, lik)
    assert np.allclose(mode.information, mode.information.T)
    np.linalg.cholesky(mode.information)


def test_case2_estimates_near_truth(case2_fit, case2):
    _, mode = case2_fit
    theta = case2[0]
    se = mode.standard_errors()
    z = (mode.theta_hat.vector() - theta.vector()) / se
    assert np.all(np.abs(z) < 4), z


def test_wald_interval_uses_delta_method(case2_fit):
    _, mode = case2_fit
    lo, hi = mode.wald_intervals()[-1]
    t = mode.theta_hat.sigma_u
    cov = mode.phi_covariance()
    se = t * math.sqrt(cov[-1, -1])
    assert math.isclose(hi - t, 1.959963984540054 * se, rel_tol=1e-9)
    assert math.isclose(t - lo, hi - t, rel_tol=1e-12)


def test_multistart_recovers_same_mode(case2_fit, case2):
    lik, mode = case2_fit
    rng = np.random.default_rng(5)
    starts = random_inits(mode.theta_hat, 5, rng, scale=0.3)
    fits = [find_posterior_mode(lik.subjects, lik.spec, init=s, lik=lik, information=False)
            for s in starts]
    agree, _ = multistart_agreement(fits, tol=1e-3)
    assert agree >= 4


def test_near_zero_variances_match_fixed_effects_oracle():
    truth = Theta(beta0=0.5, beta1=0.8, sigma_b=1e-6, gamma1=-1.0, gamma2=-3.5, gamma3=-6.0,
                  gamma0=0.08, sigma_u=1e-6)
    data = generate_dataset(truth, SimulationDesign(n_subjects=40, days_per_subject=6),
                            np.random.default_rng(3))
    res = find_posterior_mode(data.subjects, ModelSpec(), init=truth, use_prior=False,
                              fixed={"sigma_b": 1e-6, "sigma_u": 1e-6}, information=False)
    ref = poisson_glm_fixed_effects(data.subjects, truth)
    got = res.theta_hat
    for name in ("beta0", "beta1", "gamma1", "gamma2", "gamma3", "gamma0"):
        assert abs(getattr(got, name) - ref[name]) < 2e-3, name
    assert abs(-res.loglik - ref["nll"]) < 1e-4


def test_fixed_parameters_stay_put(case2):
    theta, design = case2
    data = generate_dataset(theta, SimulationDesign(n_subjects=10), np.random.default_rng(1))
    lik = MarginalLikelihood(data.subjects, design.spec)
    obj = Objective(lik, fixed={"sigma_u": 1.5}, template=theta)
    assert obj.n_free == 7
    assert math.isclose(obj.theta(np.zeros(7)).sigma_u, 1.5)
    with pytest.raises(ValueError):
        Objective(lik, fixed={"gamma2": -3.0})


def test_bootstrap_of_degenerate_data_has_zero_width(case2):
    theta, design = case2
    small = SimulationDesign(n_subjects=15, days_per_subject=6)
    data = generate_dataset(theta, small, np.random.default_rng(2))
    fit = find_posterior_mode(data.subjects, small.spec, init=theta, use_prior=False,
                              information=False)

    def same(theta_, design_, rng):
        return data

    boot = parametric_bootstrap_ci(fit.theta_hat, small, B=50, simulate=same)
    assert boot.n_failed == 0
    assert np.all(boot.intervals[:, 1] - boot.intervals[:, 0] < 1e-12)


def test_bootstrap_needs_fifty_replicates(case2):
    with pytest.raises(ValueError):
        parametric_bootstrap_ci(case2[0], case2[1], B=10)


def test_observed_information_positive_definite_at_mode(case2_fit):
    lik, mode = case2_fit
    obj = Objective(lik)
    info, ridge = observed_information(obj, mode.phi_hat)
    assert np.allclose(info, mode.information, rtol=1e-6, atol=1e-6)
    assert ridge == 0
