import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from perception_cbf.confset import (
    Ellipsoid,
    EstimatorConfig,
    chi2_quantile,
    contains,
    estimate,
    estimate_batch,
    sample_uniform,
)
from perception_cbf.dynamics import ContractViolation


class StubModel:
    """Constant-mean, constant-std error model."""

    def __init__(self, mu, sd):
        self.mu = np.asarray(mu, dtype=float)
        self.sd = np.asarray(sd, dtype=float)

    def predict(self, xq):
        xq = np.asarray(xq, dtype=float)
        return np.broadcast_to(self.mu, xq.shape).copy(), np.broadcast_to(self.sd, xq.shape).copy()


class TestChi2Quantile:
    def test_median_one_dof_by_quadrature(self):
        q = chi2_quantile(1, 0.5)
        mass, _ = integrate.quad(lambda t: np.exp(-t / 2) / np.sqrt(2 * np.pi * t), 0, q)
        assert mass == pytest.approx(0.5, abs=1e-8)
        assert q == pytest.approx(0.4549, abs=1e-4)

    def test_two_dof_closed_form(self):
        assert chi2_quantile(2, 0.95) == pytest.approx(-2 * np.log(0.05), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 16), st.floats(0.01, 0.999))
    def test_matches_scipy(self, dof, delta):
        assert chi2_quantile(dof, delta) == pytest.approx(stats.chi2.ppf(delta, dof), abs=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 16), st.floats(0.01, 0.98))
    def test_monotone_in_delta(self, dof, delta):
        assert chi2_quantile(dof, delta + 0.01) > chi2_quantile(dof, delta)

    @pytest.mark.parametrize("dof,delta", [(0, 0.5), (17, 0.5), (2, 0.0), (2, 1.0)])
    def test_bad_arguments(self, dof, delta):
        with pytest.raises(ContractViolation):
            chi2_quantile(dof, delta)


class TestEstimate:
    def test_unit_std_two_dims(self):
        e = estimate(StubModel([0, 0], [1, 1]), EstimatorConfig(), [0.3, -0.2])
        assert np.allclose(e.semiaxes, np.sqrt(5.9915), atol=1e-4)
        assert np.allclose(e.semiaxes, 2.4477, atol=1e-4)

    def test_degenerate_std_clamped(self):
        cfg = EstimatorConfig(min_semiaxis=1e-4)
        e = estimate(StubModel([0, 0, 0], [0, 1e-12, 0]), cfg, [1, 2, 3])
        assert np.array_equal(e.semiaxes, [1e-4] * 3)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    def test_center_is_perceived_plus_mean(self, xhat, mu):
        e = estimate(StubModel(mu, [0.1, 0.2, 0.3]), EstimatorConfig(), xhat)
        assert np.array_equal(e.center, np.asarray(xhat) + np.asarray(mu))
        assert contains(e, e.center)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1.01, 10.0))
    def test_scaling_std_scales_semiaxes(self, lam):
        sd = np.array([0.1, 0.5])
        cfg = EstimatorConfig()
        a = estimate(StubModel([0, 0], sd), cfg, [0, 0]).semiaxes
        b = estimate(StubModel([0, 0], lam * sd), cfg, [0, 0]).semiaxes
        assert np.allclose(b, lam * a, rtol=1e-12)

    def test_batch_matches_single(self):
        model = StubModel([0.1, -0.1], [0.2, 0.3])
        xh = np.random.default_rng(0).normal(size=(5, 2))
        c, a = estimate_batch(model, EstimatorConfig(), xh)
        for k in range(5):
            e = estimate(model, EstimatorConfig(), xh[k])
            assert np.array_equal(c[k], e.center) and np.array_equal(a[k], e.semiaxes)

    def test_coverage_calibrated(self):
        rng = np.random.default_rng(0)
        cfg = EstimatorConfig(delta=0.95)
        sd = np.array([0.2, 0.5, 1.3])
        model = StubModel([0.1, 0.0, -0.3], sd)
        xh = rng.normal(size=(10_000, 3))
        truth = xh + model.mu + sd * rng.standard_normal((10_000, 3))
        c, a = estimate_batch(model, cfg, xh)
        inside = (((truth - c) / a) ** 2).sum(1) <= 1
        assert 0.92 <= inside.mean() <= 0.98

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            EstimatorConfig(delta=1.0)
        with pytest.raises(ContractViolation):
            EstimatorConfig(min_semiaxis=0.0)


class TestContains:
    e = Ellipsoid(np.array([1.0, -1.0]), np.array([0.5, 2.0]))

    def test_center(self):
        assert contains(self.e, [1.0, -1.0]) is True

    def test_boundary_inclusive(self):
        assert contains(self.e, [1.5, -1.0]) is True

    def test_just_outside(self):
        assert contains(self.e, [1.0 + 1.01 * 0.5, -1.0]) is False

    def test_batched(self):
        out = contains(self.e, np.array([[1.0, -1.0], [3.0, 0.0]]))
        assert out.tolist() == [True, False]

    def test_rejects_bad_axes(self):
        with pytest.raises(ContractViolation):
            Ellipsoid([0.0, 0.0], [1.0, 0.0])


class TestSampleUniform:
    def test_all_inside(self):
        rng = np.random.default_rng(1)
        e = Ellipsoid(np.array([0.5, 0.0, -2.0]), np.array([0.1, 1.0, 3.0]))
        assert contains(e, sample_uniform(e, rng, 5000)).all()

    def test_mean_near_center(self):
        rng = np.random.default_rng(2)
        e = Ellipsoid(np.array([1.0, 2.0]), np.array([0.5, 1.5]))
        pts = sample_uniform(e, rng, 100_000)
        assert np.all(np.abs(pts.mean(0) - e.center) <= 0.02 * 1.5)

    def test_disk_area_ratio(self):
        rng = np.random.default_rng(3)
        pts = sample_uniform(Ellipsoid(np.zeros(2), np.ones(2)), rng, 100_000)
        frac = np.mean(np.linalg.norm(pts, axis=1) < 0.5)
        assert frac == pytest.approx(0.25, abs=0.01)

    def test_radial_law_in_four_dims(self):
        # for the uniform law on the unit 4-ball, P(|x| <= r) = r**4
        rng = np.random.default_rng(4)
        r = np.linalg.norm(sample_uniform(Ellipsoid(np.zeros(4), np.ones(4)), rng, 50_000), axis=1)
        assert stats.kstest(r, lambda t: np.clip(t, 0, 1) ** 4).pvalue > 1e-3

    def test_batched_shape(self):
        rng = np.random.default_rng(5)
        centers = np.zeros((7, 3))
        axes = np.full((7, 3), 0.2)
        out = sample_uniform(centers, rng, 11, semiaxes=axes)
        assert out.shape == (7, 11, 3)
        assert np.all((out**2).sum(-1) <= 0.2**2 + 1e-15)

    def test_single_draw(self):
        out = sample_uniform(Ellipsoid(np.zeros(2), np.ones(2)), np.random.default_rng(0))
        assert out.shape == (2,)
