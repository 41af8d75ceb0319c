import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradreg.numerics import NonFiniteError, RngState, l2_norm
from gradreg.objectives import MlpClassifier, QuadraticObjective, synth_dataset
from gradreg.optim import (
    POLICIES,
    AdamState,
    ConfigError,
    RmsPropState,
    TrainConfig,
    TrainRecord,
    WarmupSchedule,
    adam_step,
    adaptive_lr_psi,
    gr_params_at,
    grad_clip,
    load_train_setup,
    lr_at,
    momentum_phi,
    read_trace,
    rmsprop_step,
    trace_line,
    train,
    write_trace,
)
from gradreg.regularizer import GrConfig, perturbation


class TestMomentumPhi:
    def test_constant_sequence_exact(self):
        for t in (1, 3, 10):
            for beta1 in (0.0, 0.5, 0.9):
                assert momentum_phi([2.5] * t, beta1) == pytest.approx(2.5, rel=1e-14)

    def test_first_step_is_first_gradient(self):
        for beta1 in (0.0, 0.5, 0.99):
            assert momentum_phi([3.7], beta1) == pytest.approx(3.7, rel=1e-15)

    def test_hand_value(self):
        # (0.1 * (0.9 * 1 + 2)) / (1 - 0.81) = 0.29 / 0.19
        assert momentum_phi([1.0, 2.0], 0.9) == pytest.approx(0.29 / 0.19, rel=1e-14)
        assert momentum_phi([1.0, 2.0], 0.9) == pytest.approx(1.52632, rel=1e-5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            momentum_phi([], 0.9)


class TestAdaptiveLrPsi:
    def test_constant_sequence_inverse_magnitude(self):
        for t in (1, 2, 7):
            for beta2 in (0.5, 0.9, 0.999):
                assert adaptive_lr_psi([-4.0] * t, beta2) == pytest.approx(0.25, rel=1e-14)

    def test_first_step(self):
        assert adaptive_lr_psi([3.0], 0.9) == pytest.approx(1.0 / 3.0, rel=1e-14)

    def test_hand_value(self):
        # sqrt(0.19 / (0.1 * (0.9 + 4))) = sqrt(0.19 / 0.49)
        assert adaptive_lr_psi([1.0, 2.0], 0.9) == pytest.approx(math.sqrt(0.19 / 0.49), rel=1e-14)
        assert adaptive_lr_psi([1.0, 2.0], 0.9) == pytest.approx(0.62270, rel=1e-5)

    def test_all_zero_diverges(self):
        with pytest.raises(ZeroDivisionError):
            adaptive_lr_psi([0.0, 0.0, 0.0], 0.9)

    @settings(max_examples=40, deadline=None)
    @given(
        scale=st.floats(1e-3, 1e3, allow_nan=False),
        negate=st.booleans(),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_scale_law(self, scale, negate, seed):
        c = -scale if negate else scale
        g = RngState(seed).standard_normals(12)
        np.testing.assert_allclose(
            adaptive_lr_psi(c * g, 0.99), adaptive_lr_psi(g, 0.99) / abs(c), rtol=1e-12
        )


class TestAdamStep:
    def test_first_step_magnitude(self):
        state = AdamState.fresh(1)
        theta, _ = adam_step(state, np.array([1.0]), np.array([1.0]), 0.1)
        assert theta[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), rel=1e-15)

    def test_all_zero_gradients_leave_theta(self):
        state = AdamState.fresh(3)
        theta = np.array([1.0, -2.0, 0.5])
        for _ in range(5):
            theta, state = adam_step(state, theta, np.zeros(3), 0.1)
        np.testing.assert_array_equal(theta, [1.0, -2.0, 0.5])

    def test_first_step_scale_free(self):
        g = np.array([0.3, -0.7])
        theta0 = np.zeros(2)
        t1, _ = adam_step(AdamState.fresh(2), theta0, g, 0.05)
        t2, _ = adam_step(AdamState.fresh(2), theta0, 10.0 * g, 0.05)
        np.testing.assert_allclose(t1, t2, rtol=1e-6)

    def test_nonfinite_gradient_rejected(self):
        with pytest.raises(NonFiniteError):
            adam_step(AdamState.fresh(1), np.zeros(1), np.array([np.nan]), 0.1)

    def test_step_counter_increments(self):
        state = AdamState.fresh(1)
        for expected in (1, 2, 3):
            _, state = adam_step(state, np.zeros(1), np.ones(1), 0.1)
            assert state.t == expected

    def test_second_moment_nonnegative(self):
        state = AdamState.fresh(4)
        theta = np.zeros(4)
        rng = RngState(3)
        for _ in range(20):
            theta, state = adam_step(state, theta, rng.standard_normals(4), 0.01)
            assert np.all(state.v >= 0.0)

    def test_streaming_matches_direct_sums(self):
        rng = RngState(17)
        grads = rng.standard_normals((100, 3))
        state = AdamState.fresh(3, beta1=0.9, beta2=0.999)
        theta = np.zeros(3)
        for t in range(grads.shape[0]):
            theta, state = adam_step(state, theta, grads[t], 0.01)
            history = grads[: t + 1]
            phi = [momentum_phi(history[:, j], 0.9) for j in range(3)]
            psi = [adaptive_lr_psi(history[:, j], 0.999) for j in range(3)]
            np.testing.assert_allclose(state.momentum(), phi, rtol=1e-10)
            np.testing.assert_allclose(state.adaptive_lr(), psi, rtol=1e-10)


class TestRmsPropStep:
    def test_zero_gradient_leaves_theta(self):
        theta, _ = rmsprop_step(RmsPropState.fresh(2), np.array([1.0, 2.0]), np.zeros(2), 0.1)
        np.testing.assert_array_equal(theta, [1.0, 2.0])

    def test_first_step_hand_value(self):
        theta, _ = rmsprop_step(RmsPropState.fresh(1, decay=0.9), np.zeros(1), np.ones(1), 0.1)
        assert -theta[0] == pytest.approx(0.1 / (math.sqrt(0.1) + 1e-8), rel=1e-14)
        assert -theta[0] == pytest.approx(0.31623, rel=1e-4)

    def test_second_moment_nonnegative(self):
        state = RmsPropState.fresh(3)
        theta = np.zeros(3)
        rng = RngState(5)
        for _ in range(20):
            theta, state = rmsprop_step(state, theta, rng.standard_normals(3), 0.01)
            assert np.all(state.v >= 0.0)


class TestLrAt:
    def test_reaches_base_rate_at_warmup_end(self):
        assert lr_at(40, 40, 1e-3) == 1e-3

    def test_midpoint(self):
        assert lr_at(20, 40, 1e-3) == 5e-4

    def test_zero_step(self):
        assert lr_at(0, 40, 1e-3) == 0.0

    def test_beyond_warmup_is_flat(self):
        assert lr_at(400, 40, 1e-3) == 1e-3


def _sched(policy, warmup=10, lambda0=0.08, r0=0.1, eta0=1e-3):
    return WarmupSchedule(policy, warmup, eta0, GrConfig(lambda0, r0))


class TestGrParamsAt:
    def test_step_zero_disables_regularization(self):
        for policy in ("r_warmup", "lambda_warmup", "zero_warmup"):
            lam, _ = gr_params_at(0, _sched(policy))
            assert lam == 0.0

    def test_none_policy_constant(self):
        sched = _sched("none")
        for t in (0, 1, 5, 10, 11, 100):
            assert gr_params_at(t, sched) == (0.08, 0.1)

    def test_full_strength_after_warmup(self):
        for policy in POLICIES:
            sched = _sched(policy)
            for t in (11, 20, 1000):
                lam, r = gr_params_at(t, sched)
                assert r == 0.1
                assert lam == pytest.approx(0.08, rel=1e-15)

    def test_zero_warmup_boundary_inclusive(self):
        sched = _sched("zero_warmup")
        assert gr_params_at(10, sched) == (0.0, 0.1)
        assert gr_params_at(11, sched) == (0.08, 0.1)

    def test_lambda_warmup_ramp(self):
        sched = _sched("lambda_warmup")
        for t in range(0, 15):
            lam, r = gr_params_at(t, sched)
            assert lam == min(t / 10, 1.0) * 0.08
            assert r == 0.1

    def test_r_warmup_preserves_ratio(self):
        sched = _sched("r_warmup", lambda0=0.06, r0=0.12)
        for t in range(1, 15):
            lam, r = gr_params_at(t, sched)
            assert r == min(t / 10, 1.0) * 0.12
            assert lam == (0.06 / 0.12) * r

    def test_bad_policy_rejected(self):
        with pytest.raises(ValueError):
            _sched("cosine")


class TestGradClip:
    def test_large_gradient_rescaled(self):
        clipped = grad_clip([3.0, 4.0], 1.0)
        assert l2_norm(clipped) == pytest.approx(1.0, rel=1e-15)
        np.testing.assert_allclose(clipped, [0.6, 0.8], rtol=1e-15)

    def test_small_gradient_untouched(self):
        g = np.array([0.3, 0.4])
        np.testing.assert_array_equal(grad_clip(g, 1.0), g)

    def test_idempotent(self):
        g = RngState(0).standard_normals(6) * 10
        once = grad_clip(g, 1.0)
        np.testing.assert_array_equal(grad_clip(once, 1.0), once)

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ValueError):
            grad_clip([1.0], 0.0)


class TestTrain:
    def _quadratic_setup(self, policy="none", lambda0=0.08, warmup=10, epochs=4, seed=3):
        sched = WarmupSchedule(policy, warmup, 1e-3, GrConfig(lambda0, 0.1))
        cfg = TrainConfig(schedule=sched, epochs=epochs, batch_size=16, seed=seed)
        data = synth_dataset("blobs", 64, 2, seed=1)
        obj = QuadraticObjective(np.diag(np.geomspace(1.0, 10.0, 6)))
        return cfg, obj, data

    def test_deterministic_given_seed(self):
        cfg, obj, data = self._quadratic_setup()
        a = train(cfg, obj, data)
        b = train(cfg, obj, data)
        np.testing.assert_array_equal(a.theta, b.theta)
        assert a.records == b.records

    def test_step_count_and_monotone_steps(self):
        cfg, obj, data = self._quadratic_setup(epochs=3)
        result = train(cfg, obj, data)
        assert len(result.records) == 3 * 4  # ceil(64/16) = 4 steps per epoch
        steps = [r.step for r in result.records]
        assert steps == list(range(1, 13))

    def test_records_match_schedule_functions(self):
        cfg, obj, data = self._quadratic_setup(policy="r_warmup")
        for rec in train(cfg, obj, data).records:
            lam, r = cfg.schedule.gr_params_at(rec.step)
            assert rec.lr == cfg.schedule.lr_at(rec.step)
            assert rec.lambda_t == lam
            assert rec.r_t == r

    def test_lambda_warmup_column_exact(self):
        cfg, obj, data = self._quadratic_setup(policy="lambda_warmup")
        for rec in train(cfg, obj, data).records:
            assert rec.lambda_t == min(rec.step / 10, 1.0) * 0.08

    def test_zero_warmup_prefix_equals_unregularized(self):
        cfg_zero, obj, data = self._quadratic_setup(policy="zero_warmup", lambda0=0.08)
        cfg_none, _, _ = self._quadratic_setup(policy="none", lambda0=0.0)
        zero = train(cfg_zero, obj, data)
        none = train(cfg_none, obj, data)
        warmup = cfg_zero.schedule.warmup_steps
        lines_zero = [trace_line(r) for r in zero.records if r.step <= warmup]
        lines_none = [trace_line(r) for r in none.records if r.step <= warmup]
        assert lines_zero == lines_none

    def test_regularization_lowers_warmup_gradient_norms(self):
        # needs a rotated Hessian: on a diagonal one the penalty direction is
        # sign-aligned with the gradient and Adam's per-coordinate
        # normalization absorbs it
        from gradreg.objectives import random_spd_matrix

        hessian = random_spd_matrix(12, RngState(42), 0.5, 5.0)
        obj = QuadraticObjective(hessian, init_scale=0.15)
        data = synth_dataset("blobs", 64, 2, seed=1)
        warmup = 40

        def mean_warmup_norm(lambda0):
            sched = WarmupSchedule("none", warmup, 1e-3, GrConfig(lambda0, 0.1))
            cfg = TrainConfig(schedule=sched, epochs=10, batch_size=16, seed=3)
            records = train(cfg, obj, data).records
            return np.mean([r.grad_norm for r in records if r.step <= warmup])

        assert mean_warmup_norm(0.08) < mean_warmup_norm(0.0)

    def test_r_warmup_gradient_is_perturbed_gradient_when_ratio_one(self):
        # lambda0 = r0 keeps lambda_t = r_t, so the mixed gradient collapses
        # to the gradient at the perturbed point whenever r_t > 0
        sched = WarmupSchedule("r_warmup", 10, 1e-3, GrConfig(0.1, 0.1))
        obj = QuadraticObjective(np.diag([1.0, 4.0]))
        theta = np.array([1.0, -0.5])
        from gradreg.regularizer import gr_gradient

        for t in (1, 3, 7, 10, 12):
            lam_t, r_t = gr_params_at(t, sched)
            assert lam_t == r_t
            mixed = gr_gradient(obj, theta, None, lam_t, r_t)
            _, g1 = obj.loss_grad(theta)
            _, g2 = obj.loss_grad(theta + perturbation(g1, r_t))
            np.testing.assert_array_equal(mixed, g2)

    def test_mlp_two_runs_identical_theta(self):
        sched = WarmupSchedule("lambda_warmup", 5, 1e-3, GrConfig(0.05, 0.1))
        cfg = TrainConfig(schedule=sched, epochs=2, batch_size=8, seed=11, eval_every=4)
        data = synth_dataset("blobs", 32, 3, seed=2)
        mlp = MlpClassifier((2, 8, 3))
        a = train(cfg, mlp, data)
        b = train(cfg, mlp, data)
        np.testing.assert_array_equal(a.theta, b.theta)
        evals = [r.eval_error for r in a.records if r.eval_error is not None]
        assert evals and all(0.0 <= e <= 1.0 for e in evals)

    def test_divergence_aborts_with_diagnostic(self):
        class ExplodingObjective:
            calls = 0

            def init_params(self, rng):
                return np.zeros(2)

            def loss_grad(self, theta, batch):
                ExplodingObjective.calls += 1
                if ExplodingObjective.calls > 3:
                    return math.inf, np.zeros(2)
                return 1.0, np.ones(2)

            def loss(self, theta, batch):
                return self.loss_grad(theta, batch)[0]

        cfg, _, data = self._quadratic_setup(lambda0=0.0, epochs=2)
        result = train(cfg, ExplodingObjective(), data)
        assert result.diverged
        assert math.isnan(result.records[-1].loss)
        assert result.records[-1].step == len(result.records)

    def test_empty_dataset_rejected(self):
        cfg, obj, _ = self._quadratic_setup()
        with pytest.raises(ValueError):
            train(cfg, obj, type("D", (), {"n": 0, "batch": None})())


class TestTraceIO:
    def test_round_trip_exact(self, tmp_path):
        cfg = TrainConfig(
            schedule=WarmupSchedule("lambda_warmup", 4, 1e-3, GrConfig(0.08, 0.1)),
            epochs=2,
            batch_size=8,
            seed=6,
            eval_every=3,
        )
        data = synth_dataset("blobs", 24, 3, seed=3)
        result = train(cfg, MlpClassifier((2, 6, 3)), data)
        path = tmp_path / "trace.jsonl"
        write_trace(result.records, path)
        assert read_trace(path) == result.records

    def test_lines_are_valid_json_with_fixed_keys(self, tmp_path):
        rec = TrainRecord(1, 1, 0.5, 1.0, 1.1, 1e-4, 0.0, 0.1)
        doc = json.loads(trace_line(rec))
        assert list(doc.keys()) == [
            "step",
            "epoch",
            "loss",
            "grad_norm",
            "mixed_grad_norm",
            "lr",
            "lambda_t",
            "r_t",
        ]

    def test_eval_records_carry_extra_key(self):
        rec = TrainRecord(2, 1, 0.5, 1.0, 1.1, 1e-4, 0.0, 0.1, eval_error=0.25)
        assert json.loads(trace_line(rec))["eval_error"] == 0.25

    def test_nonfinite_loss_serializes_as_null(self):
        rec = TrainRecord(3, 1, math.nan, math.nan, math.nan, 1e-4, 0.0, 0.1)
        doc = json.loads(trace_line(rec))
        assert doc["loss"] is None


class TestLoadTrainSetup:
    def _doc(self, **overrides):
        doc = {
            "model": {"kind": "mlp", "hidden": [8]},
            "dataset": {"kind": "blobs", "n": 32, "classes": 3, "seed": 1},
            "optimizer": {"kind": "adam"},
            "lr": 1e-3,
            "warmup_steps": 10,
            "policy": "zero_warmup",
            "lambda0": 0.08,
            "r0": 0.1,
            "epochs": 2,
            "batch_size": 8,
            "clip_norm": 1.0,
            "seed": 5,
        }
        doc.update(overrides)
        return doc

    def test_valid_document(self):
        obj, data, cfg = load_train_setup(self._doc())
        assert isinstance(obj, MlpClassifier)
        assert data.n == 32
        assert cfg.schedule.policy == "zero_warmup"
        assert cfg.clip_norm == 1.0

    def test_quadratic_model(self):
        obj, _, _ = load_train_setup(self._doc(model={"kind": "quadratic", "dim": 5}))
        assert isinstance(obj, QuadraticObjective)
        assert obj.dim == 5

    def test_missing_dataset_seed(self):
        doc = self._doc()
        del doc["dataset"]["seed"]
        with pytest.raises(ConfigError, match="dataset.seed"):
            load_train_setup(doc)

    def test_bad_policy(self):
        with pytest.raises(ConfigError):
            load_train_setup(self._doc(policy="sqrt"))

    def test_bad_lr_type(self):
        with pytest.raises(ConfigError, match="'lr'"):
            load_train_setup(self._doc(lr="fast"))

    def test_clip_norm_nullable(self):
        _, _, cfg = load_train_setup(self._doc(clip_norm=None))
        assert cfg.clip_norm is None

    def test_from_path(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(self._doc()))
        obj, data, cfg = load_train_setup(path)
        assert cfg.seed == 5
