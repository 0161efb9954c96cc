import dataclasses
import json

import numpy as np
import pytest

from perception_cbf.dynamics import (
    BENCHMARKS,
    ContractViolation,
    cartpole,
    get_system,
    in_safe_set,
    integrate_step,
    perceive,
    toy,
)
from perception_cbf.evaluation import (
    CriticalSetEmpty,
    _zero_control_exits,
    EvalConfig,
    audit_cbf,
    density_to_csv,
    export_density,
    make_ecm,
    sample_critical_initial,
    unsafe_ratio,
    zero_controller,
)
from perception_cbf.neural import CONTROLLER, MlpParams, init_mlp

SMALL = EvalConfig(episodes=40, horizon_s=2.0)


def _const_controller(sys, value):
    # zero hidden weights: the output is mid + half * tanh(bias), solved for ``value``
    mid = 0.5 * (sys.control_hi + sys.control_lo)
    half = 0.5 * (sys.control_hi - sys.control_lo)
    b = np.arctanh(np.clip((np.asarray(value, float) - mid) / half, -0.999999, 0.999999))
    return MlpParams((np.zeros((2, sys.n)), np.zeros((sys.m, 2))), (np.zeros(2), b), CONTROLLER, sys.control_lo, sys.control_hi)


class TestCriticalSet:
    @pytest.mark.parametrize("name", BENCHMARKS + ("toy",))
    def test_states_in_safe_set_and_exit_under_zero_control(self, name):
        sys = get_system(name)
        x0 = sample_critical_initial(sys, EvalConfig(episodes=20), np.random.default_rng(0))
        assert in_safe_set(sys, x0).all()
        for x in x0:
            exited = False
            for _ in range(100):
                x = integrate_step(sys, x, np.zeros(sys.m))
                if not in_safe_set(sys, x):
                    exited = True
                    break
            assert exited

    def test_cartpole_rejects_upright_counter_rotating_states(self):
        # the unforced pole diverges within a second from almost all of S; the survivors are near-upright
        # states whose rate points back toward upright
        sys = cartpole()
        lo, hi = sys.safe_box
        cand = np.random.default_rng(1).uniform(lo, hi, size=(4000, 4))
        hit = _zero_control_exits(sys, cand, 1.0)
        th, om = cand[:, 2], cand[:, 3]
        assert 0.5 < hit.mean() < 1.0
        assert np.abs(th[hit]).mean() > 2 * np.abs(th[~hit]).mean()
        agree = np.sign(th) == np.sign(om)
        assert agree[hit].mean() > 0.4 and agree[~hit].mean() < 0.2

    def test_batching_does_not_change_episodes(self):
        sys = toy()
        a = sample_critical_initial(sys, EvalConfig(episodes=5), np.random.default_rng(3))
        b = sample_critical_initial(sys, EvalConfig(episodes=12), np.random.default_rng(3))
        assert np.array_equal(a, b[:5])

    def test_empty_critical_set_detected(self):
        # a stable plant never leaves S under zero control
        sys = dataclasses.replace(toy(), f=lambda x, u: -x + u)
        with pytest.raises(CriticalSetEmpty, match="acceptance rate"):
            sample_critical_initial(sys, EvalConfig(episodes=4, max_draws=2000), np.random.default_rng(0))


class TestUnsafeRatio:
    def test_zero_controller_always_unsafe(self):
        sys = toy()
        assert unsafe_ratio(sys, zero_controller(sys), SMALL).unsafe_ratio == 1.0

    def test_always_exit_controller(self):
        sys = toy()
        push_out = lambda xh: 3.0 * np.sign(xh)
        assert unsafe_ratio(sys, push_out, SMALL).unsafe_ratio == 1.0

    def test_stabiliser_is_safe(self):
        sys = toy()
        assert unsafe_ratio(sys, lambda xh: -2.0 * xh, SMALL).unsafe_ratio == 0.0

    def test_reproducible(self):
        sys = cartpole()
        ecm = make_ecm(sys, _const_controller(sys, [1.0]))
        a = unsafe_ratio(sys, ecm, SMALL).dumps()
        b = unsafe_ratio(sys, ecm, SMALL).dumps()
        assert a == b

    def test_longer_horizon_never_safer(self):
        sys = cartpole()
        ecm = lambda xh: np.clip(-(xh @ np.array([-1.0, -2.0, -40.0, -5.0]))[:, None], -10, 10)
        short = unsafe_ratio(sys, ecm, EvalConfig(episodes=60, horizon_s=1.5))
        long = unsafe_ratio(sys, ecm, EvalConfig(episodes=60, horizon_s=10.0))
        assert long.unsafe_ratio >= short.unsafe_ratio
        assert all(l or not s for s, l in zip(short.outcomes, long.outcomes))

    def test_safe_episodes_stay_in_safe_set(self):
        sys = cartpole()
        law = sys.nominal
        ecm = lambda xh: law(xh)
        cfg = EvalConfig(episodes=40, horizon_s=3.0)
        rep = unsafe_ratio(sys, ecm, cfg)
        x0 = sample_critical_initial(sys, cfg, np.random.default_rng(cfg.seed))
        safe = [k for k, bad in enumerate(rep.outcomes) if not bad]
        assert safe
        for k in np.random.default_rng(0).choice(safe, size=min(10, len(safe)), replace=False):
            x = x0[k]
            for _ in range(300):
                u = np.clip(ecm(perceive(sys, x[None]))[0], sys.control_lo, sys.control_hi)
                x = integrate_step(sys, x, u)
                assert in_safe_set(sys, x)

    def test_barrier_statistics(self):
        sys = toy()
        h = MlpParams((np.zeros((1, 1)), np.zeros((1, 1))), (np.zeros(1), np.array([0.5])))
        rep = unsafe_ratio(sys, lambda xh: -2.0 * xh, SMALL, h=h)
        assert rep.mean_min_margin == 0.5 and rep.cbf_violation_rate == 0.0

    def test_report_json(self):
        sys = toy()
        rep = unsafe_ratio(sys, zero_controller(sys), EvalConfig(episodes=3, horizon_s=2.0))
        obj = json.loads(rep.dumps())
        assert obj["unsafe_episodes"] == 3 and obj["outcomes"] == ["unsafe"] * 3
        assert all(s is not None and s <= 100 for s in obj["exit_steps"])

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            EvalConfig(episodes=0)
        with pytest.raises(ContractViolation):
            EvalConfig(horizon_s=0.5, critical_exit_s=1.0)


class TestEcm:
    def test_dimension_mismatch(self):
        sys = cartpole()
        pi = init_mlp(3, 1, np.random.default_rng(0), (4,), head=CONTROLLER, out_lo=[-1.0], out_hi=[1.0])
        with pytest.raises(ContractViolation):
            make_ecm(sys, pi)

    def test_uses_corrected_center(self):
        sys = toy()

        class Shift:
            n = 1

            def predict_mean(self, xq):
                return np.full(np.shape(xq), 0.25)

        pi = init_mlp(1, 1, np.random.default_rng(0), (4,), head=CONTROLLER, out_lo=sys.control_lo, out_hi=sys.control_hi)
        ecm = make_ecm(sys, pi, Shift())
        from perception_cbf.neural import forward

        assert np.array_equal(ecm(np.array([[0.1]])), forward(pi, np.array([[0.35]])))


class TestAudit:
    def test_zero_barrier_never_violates(self):
        sys = cartpole()
        rng = np.random.default_rng(0)
        h = init_mlp(4, 1, rng, (8,)).zeros_like()
        pi = _const_controller(sys, [0.0])
        rep = audit_cbf(sys, h, pi, None, 50, rng, inner=8)
        assert rep.violation_rate == 0.0 and rep.worst_residual == 0.0

    def test_more_inner_points_never_fewer_violations(self):
        sys = cartpole()
        h = init_mlp(4, 1, np.random.default_rng(1), (8,))
        pi = _const_controller(sys, [5.0])
        counts = [audit_cbf(sys, h, pi, None, 40, np.random.default_rng(7), inner=k).violations for k in (4, 16, 64)]
        assert counts == sorted(counts)

    def test_report_fields(self):
        sys = toy()
        h = init_mlp(1, 1, np.random.default_rng(1), (4,))
        rep = audit_cbf(sys, h, _const_controller(sys, [0.0]), None, 10, np.random.default_rng(0), inner=3)
        assert rep.n_queries == 10 and rep.inner == 3
        assert 0 <= rep.violations <= 30
        assert json.loads(json.dumps(rep.to_json()))["inner"] == 3


class TestDensity:
    def test_total_is_dataset_size(self):
        pts = np.random.default_rng(0).normal(size=(321, 4)) * 3
        counts, _, _ = export_density(pts, (0, 1), 7, [-3] * 4, [3] * 4)
        assert counts.sum() == 321

    def test_uniform_points_are_flat(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-3, 3, size=(10_000, 4))
        counts, _, _ = export_density(pts, (0, 1), 10, [-3] * 4, [3] * 4)
        assert counts.max() / counts.min() <= 3

    def test_identical_points_single_bin(self):
        pts = np.tile([0.3, -1.2, 0.0, 1.0], (50, 1))
        counts, _, _ = export_density(pts, (0, 1), 5, [-3] * 4, [3] * 4)
        assert np.count_nonzero(counts) == 1 and counts.max() == 50

    def test_bins_validated(self):
        with pytest.raises(ContractViolation):
            export_density(np.zeros((3, 2)), (0, 1), 1, [0, 0], [1, 1])

    def test_csv(self):
        counts, xe, ye = export_density(np.array([[0.1, 0.9]]), (0, 1), (2, 3), [0, 0], [1, 1])
        lines = density_to_csv(counts, xe, ye, (0, 1)).splitlines()
        assert lines[0] == "# dims=0,1"
        assert lines[3:] == ["0,0,1", "0,0,0"]
