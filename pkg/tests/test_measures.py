import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from wgflow.dynamics import forward_em
from wgflow.measures import (GaussianMixture, SampleBatch, gmm_diffuse, gmm_diffuse_integral, gmm_log_density,
                             gmm_quantiles,
                             gmm_sample, gmm_score, gmm_validate, mixture_from_config, preset, standard_normal)
from wgflow.schedule import DEFAULT_SCHEDULE, NoiseSchedule

SYM = gmm_validate([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])


def random_mixture(rng, d, k):
    w = rng.uniform(0.2, 1.0, k)
    return gmm_validate(w / w.sum(), rng.uniform(-2, 2, (k, d)), rng.uniform(0.2, 1.5, (k, d)))


@st.composite
def mixtures(draw, max_dim=3):
    seed = draw(st.integers(0, 2**31 - 1))
    d = draw(st.integers(1, max_dim))
    k = draw(st.integers(1, 4))
    return random_mixture(np.random.default_rng(seed), d, k)


# --- validation


def test_validate_identity_case():
    gm = gmm_validate([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    assert gm.dim == 2 and gm.n_components == 1
    np.testing.assert_array_equal(gm.means, [[0.0, 0.0]])


def test_validate_renormalizes_within_tolerance():
    gm = gmm_validate([0.5, 0.5 + 1e-8], [[0.0], [1.0]], [[1.0], [1.0]])
    assert abs(gm.weights.sum() - 1.0) <= 1e-12


def test_validate_rejects_weight_sum():
    with pytest.raises(ValueError, match="sum"):
        gmm_validate([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])


@pytest.mark.parametrize("args", [
    ([1.0], [[0.0, 0.0]], [[1.0]]),  # shape mismatch
    ([1.0, 0.0], [[0.0], [1.0]], [[1.0], [1.0]]),  # nonpositive weight
    ([1.0], [[0.0]], [[0.0]]),  # zero variance
    ([1.0], [[np.nan]], [[1.0]]),  # non-finite mean
])
def test_validate_errors(args):
    with pytest.raises(ValueError):
        gmm_validate(*args)


def test_mixture_is_immutable():
    gm = standard_normal(2)
    with pytest.raises(ValueError):
        gm.means[0, 0] = 1.0


def test_sample_batch_invariants():
    with pytest.raises(ValueError):
        SampleBatch(np.array([[np.inf]]))
    with pytest.raises(ValueError):
        SampleBatch(np.zeros((2, 1)), time=1.5)


# --- density and score


def test_log_density_at_mode():
    assert gmm_log_density(standard_normal(2), np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert gmm_log_density(standard_normal(2), np.zeros(2)) == pytest.approx(-1.837877, abs=1e-6)


def test_log_density_symmetric_mixture():
    assert gmm_log_density(SYM, np.zeros(1)) == pytest.approx(-0.5 - 0.5 * math.log(2 * math.pi), abs=1e-12)
    assert gmm_log_density(SYM, np.zeros(1)) == pytest.approx(-1.418939, abs=1e-6)


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_standard_normal_log_density_at_zero(d):
    assert gmm_log_density(standard_normal(d), np.zeros(d)) == pytest.approx(-d / 2 * math.log(2 * math.pi))


def test_log_density_far_tail_is_finite():
    val = gmm_log_density(preset("gmm-2d-ring8"), np.array([300.0, -400.0]))
    assert np.isfinite(val) and val < -1e5


def test_density_integrates_to_one_2d():
    gm = random_mixture(np.random.default_rng(3), 2, 3)
    lo = (gm.means - 8 * np.sqrt(gm.variances)).min(axis=0)
    hi = (gm.means + 8 * np.sqrt(gm.variances)).max(axis=0)
    xs = np.linspace(lo[0], hi[0], 801)
    ys = np.linspace(lo[1], hi[1], 801)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    dens = np.exp(gmm_log_density(gm, np.column_stack([X.ravel(), Y.ravel()]))).reshape(X.shape)
    total = trapezoid(trapezoid(dens, ys, axis=1), xs)
    assert abs(total - 1.0) < 1e-3


def test_score_examples():
    np.testing.assert_allclose(gmm_score(standard_normal(2), np.array([2.0, -3.0])), [-2.0, 3.0], atol=1e-15)
    assert gmm_score(SYM, np.zeros(1))[0] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(gmm_score(standard_normal(3), np.ones(3)), -np.ones(3), atol=1e-15)


def _fd_grad(gm, x, h=1e-5):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (gmm_log_density(gm, x + e) - gmm_log_density(gm, x - e)) / (2 * h)
    return g


@settings(max_examples=60, deadline=None)
@given(mixtures(), st.integers(0, 2**31 - 1))
def test_score_matches_finite_difference(gm, seed):
    x = np.random.default_rng(seed).uniform(-3, 3, gm.dim)
    fd = _fd_grad(gm, x)
    an = gmm_score(gm, x)
    assert np.linalg.norm(an - fd) <= 1e-6 * max(np.linalg.norm(an), 1e-3)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        gmm_log_density(standard_normal(2), np.zeros(3))
    with pytest.raises(ValueError):
        gmm_score(standard_normal(2), np.zeros((4, 1)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_score_nonfinite_raises():
    gm = gmm_validate([0.5, 0.5], [[0.0], [1.0]], [[1e-310], [1e-310]])
    with pytest.raises(FloatingPointError):
        gmm_score(gm, np.array([0.5]))


def test_batch_and_single_agree():
    gm = preset("gmm-2d-ring8")
    x = np.random.default_rng(0).normal(size=(5, 2)) * 3
    np.testing.assert_allclose(gmm_score(gm, x)[2], gmm_score(gm, x[2]), rtol=1e-14)
    assert gmm_log_density(gm, x)[4] == pytest.approx(gmm_log_density(gm, x[4]), rel=1e-14)


# --- sampling


def test_sample_moments():
    pts = gmm_sample(standard_normal(2), 100_000, np.random.default_rng(0)).points
    assert np.max(np.abs(pts.mean(0))) < 0.02
    assert np.all((pts.var(0) > 0.98) & (pts.var(0) < 1.02))


def test_sample_point_like_component():
    gm = gmm_validate([1.0], [[1.0, -2.0]], [[1e-12, 1e-12]])
    pts = gmm_sample(gm, 1000, np.random.default_rng(1)).points
    assert np.max(np.abs(pts - gm.means[0])) < 1e-5


def test_sample_determinism_and_time():
    gm = preset("gmm-2d-ring8")
    a = gmm_sample(gm, 50, np.random.default_rng(9))
    b = gmm_sample(gm, 50, np.random.default_rng(9))
    np.testing.assert_array_equal(a.points, b.points)
    assert a.time == 0.0
    with pytest.raises(ValueError):
        gmm_sample(gm, 0, np.random.default_rng(0))


# --- diffusion


def test_diffuse_at_zero_is_identity():
    gm = preset("gmm-2d-ring8")
    out = gmm_diffuse(gm, 0.0, DEFAULT_SCHEDULE)
    np.testing.assert_array_equal(out.means, gm.means)
    np.testing.assert_array_equal(out.variances, gm.variances)
    np.testing.assert_array_equal(out.weights, gm.weights)


def test_diffuse_hand_computation():
    gm = gmm_validate([1.0], [[2.0]], [[0.25]])
    out = gmm_diffuse_integral(gm, math.log(2.0))
    assert out.means[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert out.variances[0, 0] == pytest.approx(0.8125, abs=1e-15)


def test_diffuse_hand_computation_against_euler_maruyama():
    # constant beta = ln 2 gives B(1) = ln 2
    gm = gmm_validate([1.0], [[2.0]], [[0.25]])
    sched = NoiseSchedule.constant(math.log(2.0))
    x0 = gmm_sample(gm, 100_000, np.random.default_rng(5))
    x1 = forward_em(x0, sched, 1000, np.random.default_rng(6)).points[:, 0]
    n = x1.size
    assert abs(x1.mean() - 1.0) < 4 * math.sqrt(0.8125 / n)
    assert abs(x1.var() - 0.8125) < 4 * 0.8125 * math.sqrt(2 / n) + 1e-3


def test_diffuse_at_one_default_schedule():
    gm = preset("gmm-2d-ring8")
    out = gmm_diffuse(gm, 1.0, DEFAULT_SCHEDULE)
    assert np.all(np.abs(out.means) < 1e-4 * np.linalg.norm(gm.means, axis=1, keepdims=True))
    assert np.all(np.abs(out.variances - 1.0) < 1e-4)


def test_diffuse_out_of_range():
    with pytest.raises(ValueError):
        gmm_diffuse(standard_normal(1), 1.5, DEFAULT_SCHEDULE)


@given(mixtures(), st.floats(0, 5), st.floats(0, 5))
def test_diffusion_semigroup(gm, b1, b2):
    two = gmm_diffuse_integral(gmm_diffuse_integral(gm, b1), b2)
    one = gmm_diffuse_integral(gm, b1 + b2)
    np.testing.assert_allclose(two.means, one.means, rtol=0, atol=1e-12)
    np.testing.assert_allclose(two.variances, one.variances, rtol=0, atol=1e-12)


@given(mixtures(), st.floats(0, 8), st.floats(0.01, 4))
def test_limit_law_monotone(gm, b, db):
    a = gmm_diffuse_integral(gm, b)
    c = gmm_diffuse_integral(gm, b + db)
    assert np.all(np.abs(c.means) <= np.abs(a.means))
    assert np.all(np.abs(c.variances - 1.0) <= np.abs(a.variances - 1.0) + 1e-15)


# --- presets


def test_presets():
    bi = preset("gmm-1d-bimodal")
    np.testing.assert_array_equal(bi.means[:, 0], [-2.0, 2.0])
    np.testing.assert_array_equal(bi.variances[:, 0], [0.25, 0.25])
    ring = preset("gmm-2d-ring8")
    assert ring.n_components == 8
    np.testing.assert_allclose(np.linalg.norm(ring.means, axis=1), 4.0, rtol=1e-15)
    np.testing.assert_array_equal(ring.variances, 0.09)
    assert preset("std-normal-d", 4).dim == 4
    with pytest.raises(ValueError):
        preset("nope")


def test_mixture_from_config_round_trip():
    gm = preset("gmm-2d-ring8")
    back = mixture_from_config(gm.to_dict())
    np.testing.assert_array_equal(back.means, gm.means)
    assert mixture_from_config({"preset": "std-normal-d", "dim": 3}).dim == 3
    with pytest.raises(ValueError):
        mixture_from_config({"weights": [1.0]})
    with pytest.raises(ValueError):
        standard_normal(0)
    assert isinstance(mixture_from_config("gmm-1d-bimodal"), GaussianMixture)


def test_quantiles_invert_cdf():
    from scipy.special import ndtr
    from scipy.stats import norm

    np.testing.assert_allclose(gmm_quantiles(standard_normal(1), [0.025, 0.5, 0.9]),
                               norm.ppf([0.025, 0.5, 0.9]), atol=1e-12)
    gm = preset("gmm-1d-bimodal")
    p = np.linspace(0.001, 0.999, 50)
    q = gmm_quantiles(gm, p)
    cdf = ndtr((q[:, None] - gm.means[:, 0]) / np.sqrt(gm.variances[:, 0])) @ gm.weights
    np.testing.assert_allclose(cdf, p, atol=1e-12)
    with pytest.raises(ValueError):
        gmm_quantiles(gm, [0.0])
    with pytest.raises(ValueError):
        gmm_quantiles(standard_normal(2), [0.5])
