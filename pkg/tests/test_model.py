"""Forward pass, loss terms, analytic gradients, and checkpoints."""

import math

import numpy as np
import pytest

from saldet.model import (
    ForwardTrace,
    ModelConfig,
    forward,
    image_classification_loss,
    init_params,
    l2_penalty,
    load_checkpoint,
    loss_and_grads,
    run_gradient_check,
    save_checkpoint,
    seed_classification_loss,
    seed_saliency_loss,
    step_losses,
)
from saldet.seeds import SeedAssignment

CFG = ModelConfig(feature_dim=4, num_classes=4, trunk_widths=(8,), saliency_hidden=4)


def zero_params(config):
    params = init_params(config, rng_seed=0)
    for name in params.values:
        params.values[name] = np.zeros_like(params.values[name])
    return params


class TestModelConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"feature_dim": 0},
            {"num_classes": 0},
            {"trunk_widths": ()},
            {"trunk_widths": (8, 0)},
            {"saliency_hidden": 0},
            {"epsilon": 0.0},
            {"epsilon": 0.1},
            {"lambda_seed_cls": -1.0},
        ],
    )
    def test_rejects(self, kw):
        base = dict(feature_dim=4, num_classes=4)
        base.update(kw)
        with pytest.raises(ValueError):
            ModelConfig(**base)

    def test_trunk_out(self):
        assert ModelConfig(feature_dim=4, num_classes=2, trunk_widths=(8, 6)).trunk_out == 6


class TestInitParams:
    def test_shapes_and_ranges(self):
        params = init_params(CFG, rng_seed=3)
        assert set(params.values) == {
            "trunk0.w", "trunk0.b", "sal_hidden.w", "sal_hidden.b",
            "sal_out.w", "sal_out.b", "cls.w", "cls.b", "det.w", "det.b",
        }
        assert params.values["trunk0.w"].shape == (4, 8)
        assert params.values["cls.w"].shape == (8, 4)
        assert params.values["sal_out.w"].shape == (4,)
        for name, arr in params.values.items():
            if name.endswith(".b"):
                np.testing.assert_array_equal(arr, 0.0)
            else:
                assert np.abs(arr).max() <= 1.0 / math.sqrt(arr.shape[0])
            np.testing.assert_array_equal(params.velocity[name], 0.0)

    def test_seeded(self):
        a = init_params(CFG, rng_seed=5)
        b = init_params(CFG, rng_seed=5)
        c = init_params(CFG, rng_seed=6)
        for name in a.values:
            np.testing.assert_array_equal(a.values[name], b.values[name])
        assert any(
            not np.array_equal(a.values[n], c.values[n]) for n in a.values
        )

    def test_copy_is_deep(self):
        a = init_params(CFG, rng_seed=0)
        b = a.copy()
        b.values["cls.w"][0, 0] += 1.0
        assert a.values["cls.w"][0, 0] != b.values["cls.w"][0, 0]


class TestForward:
    def test_zero_params_exact_uniform(self):
        # C=4, N_R=8: every stage lands on exact binary fractions
        params = zero_params(CFG)
        trace = forward(params, np.zeros((8, 4)), CFG)
        np.testing.assert_array_equal(trace.saliency, 0.5)
        np.testing.assert_array_equal(trace.cls_softmax, 0.25)
        np.testing.assert_array_equal(trace.det_softmax, 0.125)
        np.testing.assert_array_equal(trace.scores, 0.03125)
        np.testing.assert_array_equal(trace.image_scores, 0.25)

    def test_single_proposal(self):
        params = init_params(CFG, rng_seed=1)
        trace = forward(params, np.random.default_rng(0).normal(size=(1, 4)), CFG)
        np.testing.assert_array_equal(trace.det_softmax, 1.0)
        np.testing.assert_allclose(trace.image_scores, trace.cls_softmax[0], rtol=1e-15)

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        params = init_params(CFG, rng_seed=2)
        feats = rng.normal(size=(6, 4))
        perm = rng.permutation(6)
        t1 = forward(params, feats, CFG)
        t2 = forward(params, feats[perm], CFG)
        np.testing.assert_allclose(t2.scores, t1.scores[perm], atol=1e-12)
        np.testing.assert_allclose(t2.saliency, t1.saliency[perm], atol=1e-12)
        np.testing.assert_allclose(t2.image_scores, t1.image_scores, atol=1e-12)

    def test_invariants_on_random_inputs(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            c = int(rng.integers(2, 6))
            n = int(rng.integers(1, 9))
            d = int(rng.integers(2, 7))
            config = ModelConfig(
                feature_dim=d, num_classes=c, trunk_widths=(5,), saliency_hidden=3
            )
            params = init_params(config, rng_seed=int(rng.integers(2**31)))
            trace = forward(params, rng.normal(size=(n, d)), config)
            assert trace.scores.min() >= 0.0 and trace.scores.max() <= 1.0
            assert trace.image_scores.min() >= 0.0 and trace.image_scores.max() <= 1.0
            assert np.abs(trace.cls_softmax.sum(axis=1) - 1.0).max() <= 1e-6
            assert np.abs(trace.det_softmax.sum(axis=0) - 1.0).max() <= 1e-6

    def test_extreme_logits_stay_in_open_interval(self):
        params = zero_params(CFG)
        for bias in (500.0, -500.0):
            params.values["sal_out.b"] = np.array([bias])
            trace = forward(params, np.zeros((3, 4)), CFG)
            assert 0.0 < trace.saliency.min() and trace.saliency.max() < 1.0

    def test_disabled_saliency_gives_unit_weights(self):
        config = ModelConfig(
            feature_dim=4, num_classes=4, trunk_widths=(8,), saliency_hidden=4,
            saliency_enabled=False,
        )
        trace = forward(init_params(config, 0), np.ones((3, 4)), config)
        np.testing.assert_array_equal(trace.saliency, 1.0)
        assert trace.sal_logit is None

    def test_input_validation(self):
        params = init_params(CFG, rng_seed=0)
        with pytest.raises(ValueError, match="features"):
            forward(params, np.zeros((3, 5)), CFG)
        with pytest.raises(ValueError, match="proposal"):
            forward(params, np.zeros((0, 4)), CFG)
        with pytest.raises(FloatingPointError, match="input features"):
            forward(params, np.full((2, 4), np.nan), CFG)


class TestLossTerms:
    def test_seed_cls_hand_value(self):
        scores = np.full((2, 3), 0.5)
        loss, grad = seed_classification_loss(scores, [(1, 0)], epsilon=1e-8)
        assert abs(loss - math.log(2.0)) < 1e-12
        expected = np.zeros((2, 3))
        expected[0, 1] = -2.0
        np.testing.assert_array_equal(grad, expected)

    def test_seed_cls_sums_over_seeds(self):
        scores = np.array([[0.5, 0.25], [0.125, 0.5]])
        loss, grad = seed_classification_loss(scores, [(0, 0), (1, 1)], epsilon=1e-8)
        assert abs(loss - 2 * math.log(2.0)) < 1e-12
        assert grad[0, 0] == -2.0 and grad[1, 1] == -2.0

    def test_seed_cls_clamps_tiny_scores(self):
        scores = np.array([[1e-12, 0.9]])
        loss, grad = seed_classification_loss(scores, [(0, 0)], epsilon=1e-8)
        assert loss == -math.log(1e-8)
        np.testing.assert_array_equal(grad, 0.0)

    def test_seed_sal_hand_value(self):
        p = np.array([0.5, 0.5, 0.9])
        loss, grad = seed_saliency_loss(p, (0, 1), (1.0, 0.0))
        assert abs(loss - 0.5) < 1e-12
        np.testing.assert_allclose(grad, [-1.0, 1.0, 0.0], atol=1e-15)

    def test_seed_sal_accumulates_duplicates(self):
        p = np.array([0.3])
        loss, grad = seed_saliency_loss(p, (0, 0), (1.0, 0.0))
        assert loss == pytest.approx(0.7**2 + 0.3**2, rel=1e-15)
        assert grad[0] == pytest.approx(2 * (0.3 - 1.0) + 2 * 0.3, rel=1e-15)

    def test_image_cls_hand_value(self):
        tau = np.array([0.5, 0.5])
        loss, grad = image_classification_loss(tau, [1, -1], epsilon=1e-8)
        assert abs(loss - 2 * math.log(2.0)) < 1e-12
        np.testing.assert_allclose(grad, [-2.0, 2.0], atol=1e-15)

    def test_image_cls_perfect_prediction(self):
        loss, grad = image_classification_loss(
            np.array([1.0, 0.0]), [1, -1], epsilon=1e-8
        )
        assert loss == 0.0
        np.testing.assert_array_equal(grad, [-1.0, 1.0])

    def test_image_cls_clamps(self):
        # a confident wrong answer hits the epsilon clamp: finite loss, zero grad
        loss, grad = image_classification_loss(np.array([1.0]), [-1], epsilon=1e-8)
        assert loss == -math.log(1e-8)
        np.testing.assert_array_equal(grad, 0.0)


class TestStepLosses:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(21)
        params = init_params(CFG, rng_seed=4)
        feats = rng.normal(size=(5, 4))
        trace = forward(params, feats, CFG)
        y = np.array([1, 1, -1, -1])
        assignment = SeedAssignment(seeds=((0, 0), (1, 2)), negatives=(1, 3))
        return params, trace, y, assignment

    def test_total_is_weighted_sum(self, setup):
        params, trace, y, assignment = setup
        b, _, _ = step_losses(params, trace, y, assignment, CFG)
        assert b.total == (
            b.image_cls
            + CFG.lambda_seed_cls * b.seed_cls
            + (CFG.lambda_seed_sal / 2.0) * b.seed_sal
            + (CFG.lambda_l2 / 2.0) * b.l2
        )
        assert b.seed_cls > 0 and b.seed_sal > 0 and b.l2 > 0

    def test_no_assignment_drops_seed_terms(self, setup):
        params, trace, y, _ = setup
        b, _, d_sal = step_losses(params, trace, y, None, CFG)
        assert b.seed_cls == 0.0 and b.seed_sal == 0.0
        np.testing.assert_array_equal(d_sal, 0.0)

    def test_zero_weights_drop_terms(self, setup):
        params, trace, y, assignment = setup
        config = ModelConfig(
            feature_dim=4, num_classes=4, trunk_widths=(8,), saliency_hidden=4,
            lambda_seed_cls=0.0, lambda_seed_sal=0.0,
        )
        b, _, d_sal = step_losses(params, trace, y, assignment, config)
        assert b.seed_cls == 0.0 and b.seed_sal == 0.0
        np.testing.assert_array_equal(d_sal, 0.0)

    def test_l2_excludes_disabled_branch(self):
        params = init_params(CFG, rng_seed=8)
        off = ModelConfig(
            feature_dim=4, num_classes=4, trunk_widths=(8,), saliency_hidden=4,
            saliency_enabled=False,
        )
        sal_sq = sum(
            float((params.values[n] ** 2).sum())
            for n in ("sal_hidden.w", "sal_out.w")
        )
        assert l2_penalty(params, CFG) - l2_penalty(params, off) == pytest.approx(
            sal_sq, rel=1e-12
        )

    def test_disabled_branch_gets_zero_grads(self):
        config = ModelConfig(
            feature_dim=4, num_classes=4, trunk_widths=(8,), saliency_hidden=4,
            saliency_enabled=False,
        )
        params = init_params(config, rng_seed=8)
        feats = np.random.default_rng(3).normal(size=(4, 4))
        assignment = SeedAssignment(seeds=((0, 1),), negatives=(2,))
        _, grads = loss_and_grads(params, feats, [1, -1, -1, -1], assignment, config)
        for name in ("sal_hidden.w", "sal_hidden.b", "sal_out.w", "sal_out.b"):
            np.testing.assert_array_equal(grads[name], 0.0)


class TestGradientCheck:
    def test_small_sweep_passes(self):
        report = run_gradient_check(seed=123, instances=4)
        assert report.passed
        assert len(report.per_instance) == 4

    def test_detects_defective_gradient(self):
        # a 0.1% scale error on one tensor must land far above threshold
        from saldet import model as m

        orig = m.loss_and_grads

        def broken(params, features, y, assignment, config):
            breakdown, grads = orig(params, features, y, assignment, config)
            grads["cls.w"] = grads["cls.w"] * 1.001
            return breakdown, grads

        m.loss_and_grads = broken
        try:
            report = run_gradient_check(seed=123, instances=2)
        finally:
            m.loss_and_grads = orig
        assert not report.passed
        assert report.max_rel_error > 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(CFG, rng_seed=11)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, CFG)
        loaded, config = load_checkpoint(path)
        assert config == CFG
        for name, arr in params.values.items():
            np.testing.assert_array_equal(
                loaded.values[name], arr.astype(np.float32).astype(np.float64)
            )
            np.testing.assert_array_equal(loaded.velocity[name], 0.0)

    def test_round_trip_with_disabled_saliency(self, tmp_path):
        config = ModelConfig(
            feature_dim=3, num_classes=2, trunk_widths=(4, 5), saliency_hidden=2,
            saliency_enabled=False,
        )
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_params(config, 0), config)
        _, loaded_config = load_checkpoint(path)
        assert loaded_config.saliency_enabled is False
        assert loaded_config.trunk_widths == (4, 5)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_rejects_bad_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_params(CFG, 0), CFG)
        data = bytearray(path.read_bytes())
        data[8] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_rejects_truncation_and_trailing(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, init_params(CFG, 0), CFG)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(ValueError):
            load_checkpoint(path)
        path.write_bytes(blob + b"\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(path)
