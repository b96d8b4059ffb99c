import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import linear_quadratic_setup, random_batch
from poflab.linesearch import (LineSearchConfig, LineSearchError, golden_section, line_search,
                               line_search_xi)
from poflab.nn import ClassifierRestriction, MlpSpec, init_params


def _quadratic(A, theta_star):
    def loss(theta):
        d = theta - theta_star
        return 0.5 * d @ A @ d
    return loss


def _analytic_xi(A, theta0, theta_star):
    # minimizer of L(theta0 - xi u), u = g/|g|, g = A (theta0 - theta*): xi = |g|^3 / g^T A g
    g = A @ (theta0 - theta_star)
    return np.linalg.norm(g) ** 3 / (g @ A @ g)


def test_frozen_two_dim_instance():
    # A = diag(1, 4), theta0 = (1, 1), theta* = 0: g = (1, 4), xi* = 17 sqrt(17) / 65
    A = np.diag([1.0, 4.0])
    res = line_search(_quadratic(A, np.zeros(2)), np.ones(2), np.array([1.0, 4.0]))
    assert res.xi_star == pytest.approx(1.0783507020846188, rel=1e-6)
    assert not res.saturated and not res.asymmetric


def _random_pd(rng, n):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(rng.uniform(0.05, 5.0, size=n)) @ Q.T


@pytest.mark.parametrize("refine", ["parabolic", "golden-section"])
def test_random_quadratics(refine):
    rng = np.random.default_rng(0)
    cfg = LineSearchConfig(refine=refine)
    for _ in range(100):
        n = int(rng.integers(1, 21))
        A = _random_pd(rng, n)
        theta_star, theta0 = rng.normal(size=n), rng.normal(size=n)
        g = A @ (theta0 - theta_star)
        res = line_search(_quadratic(A, theta_star), theta0, g, cfg)
        xi = _analytic_xi(A, theta0, theta_star)
        assert abs(res.xi_star - xi) / xi < 1e-3
        assert abs(np.linalg.norm(res.direction) - 1.0) < 1e-12
        assert res.loss_at_star <= res.loss_at_zero


def test_mirror_invariance_on_quadratic():
    rng = np.random.default_rng(1)
    for _ in range(20):
        A = _random_pd(rng, 6)
        ts, t0 = rng.normal(size=6), rng.normal(size=6)
        f = _quadratic(A, ts)
        res = line_search(f, t0, A @ (t0 - ts))
        assert abs(res.loss_at_mirror - res.loss_at_zero) <= 1e-6 * max(1.0, res.loss_at_zero)


def test_zero_gradient_is_an_error():
    with pytest.raises(LineSearchError):
        line_search(lambda t: float(t @ t), np.zeros(3), np.zeros(3))


def test_zero_classifier_gradient_on_network():
    # squared error at an exact interpolating classifier: theta-gradient is zero
    spec, split, p, b = linear_quadratic_setup(n=2)
    r = ClassifierRestriction(p, spec, split, b)
    feats = np.hstack([r.features, np.ones((2, 1))])
    w, *_ = np.linalg.lstsq(feats, b.targets, rcond=None)
    vals = p.values.copy()
    vals[p.indices(split.classifier_block_ids)] = w.ravel()
    with pytest.raises(LineSearchError):
        line_search_xi(p.with_values(vals), spec, b, split)


def test_monotone_loss_saturates():
    cfg = LineSearchConfig(xi_max=5.0)
    res = line_search(lambda t: -float(t.sum()), np.zeros(4), -np.ones(4), cfg)
    assert res.saturated
    assert res.xi_star == 5.0


def test_asymmetric_landscape_flag():
    # quadratic on the near side of the minimum, nearly flat beyond it
    def loss(t):
        x = float(t[0]) - 1.0
        return x * x if x >= 0 else 0.1 * x * x
    res = line_search(loss, np.array([2.0]), np.array([2.0]))
    assert res.xi_star == pytest.approx(1.0, rel=1e-5)
    assert res.asymmetric
    res = line_search(lambda t: (float(t[0]) - 1.0) ** 2, np.array([2.0]), np.array([2.0]))
    assert not res.asymmetric


def test_golden_section_matches_known_minimum():
    x, fx, _ = golden_section(lambda x: (x - math.pi) ** 2, 0.0, 10.0, 1e-9)
    assert x == pytest.approx(math.pi, abs=1e-8)


def test_config_validation():
    for bad in (dict(xi_max=0), dict(coarse_points=4), dict(refine="newton"),
                dict(refine_tol=0), dict(asymmetry_ratio=1.0)):
        with pytest.raises(ValueError):
            LineSearchConfig(**bad).validate()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), act=st.sampled_from(["relu", "tanh"]),
       n_clf=st.integers(1, 2))
def test_network_line_search_contract(seed, act, n_clf):
    spec = MlpSpec((3, 6, 5, 4), act)
    split = spec.default_split(n_clf)
    p = init_params(spec, split, seed)
    res = line_search_xi(p, spec, random_batch(spec, 16, seed), split)
    assert abs(np.linalg.norm(res.direction) - 1.0) < 1e-12
    assert res.xi_star >= 0
    assert res.loss_at_star <= res.loss_at_zero


def test_network_quadratic_restriction_mirror():
    # tanh features + squared error: the classifier-restricted loss is exactly quadratic
    for seed in range(5):
        spec, split, p, b = linear_quadratic_setup(n=8, seed=seed)
        res = line_search_xi(p, spec, b, split)
        r = ClassifierRestriction(p, spec, split, b)
        mirror = r.loss(r.theta0 - 2 * res.xi_star * res.direction)
        assert abs(mirror - res.loss_at_zero) <= 1e-6
