import math

import numpy as np
import pytest

from invselect import samplers
from invselect.models import Dataset, InverseModel, ModelSpec, ParamVector, x_prior_interval
from invselect.samplers import (ChainConfig, CvPosterior, InvalidStateError, SiteFailure, importance_weight,
                                irmcmc_cv_posteriors, run_tmcmc, select_istar, tmcmc_step)
from invselect.streams import InvalidParameterError, SeededStream
from oracles import batch_means_se, fine_grid_log_integral, poisson_block_loglik, poisson_cv_grid_moments

POIS = ModelSpec(1, "poisson", "log")


def toy_data(n=3, m=20, seed=0, a0=0.5, b0=0.8):
    rng = np.random.default_rng(seed)
    X = np.linspace(-0.8, 0.8, n)
    return Dataset(X=X, Y=rng.poisson(np.exp(a0 + b0 * X)[:, None], (n, m)))


def test_chain_config_validation_and_presets():
    with pytest.raises(InvalidParameterError):
        ChainConfig(n_first_stage=100, first_burn=100)
    with pytest.raises(InvalidParameterError):
        ChainConfig(n_first_stage=100, first_burn=50, n_resample=60)
    with pytest.raises(InvalidParameterError):
        ChainConfig(step_scales={"alpha": 0.0})
    d = ChainConfig.desk()
    assert (d.n_first_stage, d.first_burn, d.n_resample, d.n_second_stage_per_theta) == (15000, 5000, 500, 50)
    p = ChainConfig.paper()
    assert p.n_resample * p.n_second_stage_per_theta == 100_000
    assert ChainConfig.from_dict(d.to_dict()) == d


def test_step_constant_target_always_moves():
    s = SeededStream(1)
    x = np.zeros(3)
    for _ in range(50):
        res = tmcmc_step(s, x, lambda v: 0.0, [1.0, 2.0, 3.0])
        assert res.accepted
        # one shared epsilon: the moves are equal in size up to the scales
        step = np.abs(res.state - x) / np.array([1.0, 2.0, 3.0])
        assert np.allclose(step, step[0])
        x = res.state


def test_step_deterministic():
    f = lambda v: -0.5 * float(v @ v)  # noqa: E731
    a = tmcmc_step(SeededStream(9, ("s",)), [0.3, -0.2], f, [1.0, 1.0])
    b = tmcmc_step(SeededStream(9, ("s",)), [0.3, -0.2], f, [1.0, 1.0])
    assert np.array_equal(a.state, b.state) and a.accepted == b.accepted


def test_step_invalid_state():
    with pytest.raises(InvalidStateError):
        tmcmc_step(SeededStream(0), [1.0], lambda v: -math.inf, [1.0])
    with pytest.raises(InvalidStateError):
        run_tmcmc(SeededStream(0), [1.0], lambda v: -math.inf, [1.0], 10)


def _moments_check(draws, mean, var):
    se_m = batch_means_se(draws)
    se_v = batch_means_se((draws - draws.mean()) ** 2)
    assert abs(draws.mean() - mean) < 3 * se_m, (draws.mean(), mean, se_m)
    assert abs(draws.var() - var) < 3 * se_v, (draws.var(), var, se_v)


def test_tmcmc_standard_normal():
    res = run_tmcmc(SeededStream(21, ("normal",)), [0.0], lambda v: -0.5 * v[0] ** 2, [2.4], 100_000,
                    adapt=False)
    _moments_check(res.draws[:, 0], 0.0, 1.0)


def test_tmcmc_gamma_3_2():
    # shape 3, rate 2: mean 1.5, variance 0.75
    def logpdf(v):
        x = v[0]
        return 2.0 * math.log(x) - 2.0 * x if x > 0 else -math.inf

    res = run_tmcmc(SeededStream(22, ("gamma",)), [1.0], logpdf, [1.5], 100_000, adapt=False)
    _moments_check(res.draws[:, 0], 1.5, 0.75)


def test_adaptation_only_in_burn_in_and_acceptance_band():
    f = lambda v: -0.5 * float(v @ v) / 0.01  # noqa: E731  narrow target, bad initial scale
    res = run_tmcmc(SeededStream(3), [0.0, 0.0], f, [5.0, 5.0], 6000, burn=4000)
    assert 0.1 < res.acceptance < 0.6
    # scales stop changing once burn-in ends
    just_after = run_tmcmc(SeededStream(3), [0.0, 0.0], f, [5.0, 5.0], 4001, burn=4000)
    assert np.array_equal(res.scales, just_after.scales)


def test_balance_between_two_regions():
    # a stationary chain crosses any cut as often in one direction as in the other
    f = lambda v: -0.5 * (v[0] - 0.5) ** 2  # noqa: E731
    res = run_tmcmc(SeededStream(44), [0.5], f, [1.5], 100_000, burn=1000, adapt=False)
    side = res.draws[:, 0] >= 0
    up = int(np.sum(~side[:-1] & side[1:]))
    down = int(np.sum(side[:-1] & ~side[1:]))
    assert abs(up - down) <= 3 * math.sqrt(up + down)


def test_select_istar_examples():
    assert select_istar(np.array([1.0, 5.0, 100.0])) == 1
    assert select_istar(np.array([3.0, 3.0, 3.0])) == 0
    assert select_istar(np.array([2.0, 9.0, 4.0, 7.0])) == 2


def test_importance_weight_self_is_one():
    d = toy_data()
    assert importance_weight(ParamVector(0.5, 0.8), 1, 1, POIS, d) == 1.0


def test_importance_weight_fine_grid_oracle():
    d = Dataset(X=[-0.5, 0.5], Y=[[1, 3], [2, 6]])
    theta = ParamVector(0.7, 0.9)

    def log_ibar(j):
        a, b, _ = x_prior_interval(POIS, theta, d, j)
        return fine_grid_log_integral(lambda x: poisson_block_loglik(d.Y[j], math.exp(0.7 + 0.9 * x)), a, b)

    f = lambda j: poisson_block_loglik(d.Y[j], math.exp(0.7 + 0.9 * d.X[j]))  # noqa: E731
    expect = math.exp(f(1) + log_ibar(0) - f(0) - log_ibar(1))
    got = importance_weight(theta, 0, 1, POIS, d)
    assert abs(got / expect - 1) < 0.01


def test_degenerate_interval_integral_is_point_value():
    # site 0 has s = 0, so its covariate prior is a point mass
    d = Dataset(X=[-0.5, 0.5], Y=[[2, 2, 2], [1, 4, 6]])
    im = InverseModel(POIS, d)
    draws = im.draws_from_coords(np.array([[0.7, 0.9]]))
    a, b, _ = im.prior_bounds(draws.alpha, draws.coef, 0)
    assert a[0, 0] == b[0, 0]
    got = samplers.log_heldout_integral(im, draws, 0, 32)[0]
    assert got == pytest.approx(poisson_block_loglik(d.Y[0], math.exp(0.7 + 0.9 * a[0, 0])))


SMALL = dict(n_first_stage=4000, first_burn=1000, n_resample=200, n_second_stage_per_theta=10,
             second_stage_initial_burn=500)


def test_irmcmc_shapes_and_support():
    d = toy_data(n=4, m=15, seed=2)
    cfg = ChainConfig(**SMALL)
    posts, det = irmcmc_cv_posteriors(POIS, d, cfg, SeededStream(8), return_details=True)
    im = InverseModel(POIS, d)
    M, R = cfg.n_resample, cfg.n_second_stage_per_theta
    for p in posts:
        assert isinstance(p, CvPosterior) and len(p.samples) == M * R and p.variance >= 0
        rows = det["draws"].take(det["selected"][p.site])
        a, b, _ = im.prior_bounds(rows.alpha, rows.coef, p.site)
        x = p.samples.reshape(M, R)
        assert np.all((x >= a) & (x <= b))


def test_irmcmc_mean_inside_interval_at_posterior_mean():
    d = toy_data(n=3, m=50, seed=4)
    cfg = ChainConfig(**SMALL)
    posts, det = irmcmc_cv_posteriors(POIS, d, cfg, SeededStream(5), return_details=True)
    mean = det["draws"].mean()
    theta = ParamVector(mean["alpha"], mean["coef0"])
    for p in posts:
        a, b, _ = x_prior_interval(POIS, theta, d, p.site)
        assert a < p.mean < b


def test_irmcmc_deterministic():
    d = toy_data(n=3, m=10, seed=1)
    cfg = ChainConfig(**SMALL)
    p1 = irmcmc_cv_posteriors(POIS, d, cfg, SeededStream(5))
    p2 = irmcmc_cv_posteriors(POIS, d, cfg, SeededStream(5))
    assert all(np.array_equal(a.samples, b.samples) for a, b in zip(p1, p2))


def test_irmcmc_two_covariates_pairs():
    rng = np.random.default_rng(3)
    X, Z = rng.uniform(-1, 1, 4), rng.uniform(0, 2, 4)
    d = Dataset(X=X, Z=Z, Y=rng.poisson(np.exp(0.3 + 0.6 * X - 0.5 * Z)[:, None], (4, 10)))
    spec = ModelSpec(1, "poisson", "log", "linear", "xz")
    cfg = ChainConfig(**SMALL)
    posts = irmcmc_cv_posteriors(spec, d, cfg, SeededStream(2))
    for p in posts:
        assert p.samples.shape == (cfg.n_resample * cfg.n_second_stage_per_theta, 2)
        assert p.variance.shape == (2, 2) and np.linalg.eigvalsh(p.variance).min() >= -1e-12


def test_irmcmc_gp_runs():
    d = toy_data(n=4, m=8, seed=6)
    spec = ModelSpec(2, "poisson", "log", "gp")
    posts = irmcmc_cv_posteriors(spec, d, ChainConfig(**SMALL), SeededStream(2))
    assert all(np.isfinite(p.mean) for p in posts)


def test_irmcmc_site_failure(monkeypatch):
    d = toy_data()
    monkeypatch.setattr(samplers, "log_importance_weights", lambda im, draws, i, *a, **k: np.full(len(draws), -np.inf))
    with pytest.raises(SiteFailure, match="site 1"):
        irmcmc_cv_posteriors(POIS, d, ChainConfig(**SMALL), SeededStream(0))


def well_identified_toy(seed=0):
    # slope far from zero, so the held-out covariate has light tails
    rng = np.random.default_rng(seed)
    X = np.array([-1.0, 0.0, 1.0])
    return Dataset(X=X, Y=rng.poisson(np.exp(1.0 + 1.5 * X)[:, None], (3, 20)))


@pytest.mark.slow
def test_irmcmc_matches_grid_oracle():
    d = well_identified_toy()
    posts, det = irmcmc_cv_posteriors(POIS, d, ChainConfig.desk(), SeededStream(0, ("irm",)),
                                      return_details=True)
    mean = det["draws"].mean()
    theta = ParamVector(mean["alpha"], mean["coef0"])
    for site in (0, 1):
        expect_mean, expect_var = poisson_cv_grid_moments(d.X, d.Y, site, np.linspace(-1, 3, 201),
                                                          np.linspace(-2, 5, 701))
        a, b, _ = x_prior_interval(POIS, theta, d, site)
        assert abs(posts[site].mean - expect_mean) < 0.02 * (b - a)
        assert abs(posts[site].variance / expect_var - 1) < 0.15
