import numpy as np
import pytest
from sklearn.metrics import f1_score

from hypermie import engine
from hypermie import numerics as nm
from hypermie.data import GeneratorSpec, generate_synthetic_corpus, gzsl_split
from hypermie.errors import NumericsError, ValidationError
from hypermie.fusion import PrototypeSet, Task


def tiny_setup(seed=0, categories=4, per_cat=12, d=8, counts=(2, 1, 1)):
    spec = GeneratorSpec(
        task=Task.MET,
        categories=categories,
        d=d,
        samples_per_category=per_cat,
        token_range=(3, 5),
        patch_range=(2, 4),
        seed=seed,
    )
    bundle = generate_synthetic_corpus(spec)
    split = gzsl_split(bundle, counts, seed=seed)
    return bundle, split


def tiny_config(seed=0, epochs=2, **overrides):
    base = dict(
        latent_dim=8,
        learning_rate=1e-3,
        epochs=epochs,
        batch_size=8,
        eta=5.0,
        zeta=1.0,
        seed=seed,
    )
    base.update(overrides)
    return engine.TrainConfig(**base).validate()


class TestOverallLoss:
    def test_unit_terms_combination(self):
        cfg = tiny_config(eta=5.0, zeta=1.0)
        terms = {name: 1.0 for name in engine.LOSS_TERMS}
        assert float(engine._combine_terms(terms, cfg)) == pytest.approx(10.0)

    def test_breakdown_accounting_identity(self):
        bundle, split = tiny_setup()
        cfg = tiny_config()
        protos_seen, remap = engine._label_space(bundle, split.seen_categories, [])
        protos_unseen = bundle.prototypes.subset(
            [bundle.prototypes.index(n) for n in split.unseen_categories]
        )
        samples = engine._subset_samples(bundle, split.train_ids[:6])
        labels = [remap[s.label] for s in samples]
        rng = nm.SeededRng(1)
        params = engine.init_params(bundle.d, bundle.task, cfg, rng)
        noise = engine.BatchNoise.draw(rng, samples, cfg.latent_dim, cfg.k_synthetic, 1, True)
        total, breakdown = engine.overall_loss(
            samples, params, protos_seen, labels, protos_unseen, cfg, bundle.task, noise
        )
        recombined = (
            cfg.ib_beta * breakdown["regularization"]
            + breakdown["contrastive"]
            + breakdown["ranking"]
            + breakdown["vae"]
            + cfg.eta * breakdown["unseen_ce"]
            + cfg.zeta * breakdown["alignment"]
        )
        assert abs(breakdown["total"] - recombined) < 1e-12 * max(1.0, abs(recombined))
        assert breakdown["total"] == float(nm.value_of(total))

    def test_zero_weights_reduce_to_seen_objective(self):
        bundle, split = tiny_setup()
        cfg = tiny_config(eta=0.0, zeta=0.0)
        protos_seen, remap = engine._label_space(bundle, split.seen_categories, [])
        protos_unseen = bundle.prototypes.subset(
            [bundle.prototypes.index(n) for n in split.unseen_categories]
        )
        samples = engine._subset_samples(bundle, split.train_ids[:4])
        labels = [remap[s.label] for s in samples]
        rng = nm.SeededRng(1)
        params = engine.init_params(bundle.d, bundle.task, cfg, rng)
        noise = engine.BatchNoise.draw(rng, samples, cfg.latent_dim, 1, 1, synth=False)
        _, breakdown = engine.overall_loss(
            samples, params, protos_seen, labels, protos_unseen, cfg, bundle.task, noise
        )
        assert breakdown["unseen_ce"] == 0.0
        assert breakdown["alignment"] == 0.0
        seen_only = (
            breakdown["regularization"]
            + breakdown["contrastive"]
            + breakdown["ranking"]
            + breakdown["vae"]
        )
        assert breakdown["total"] == pytest.approx(seen_only, rel=1e-12)


def toy_weights(d=2, h=2):
    entity_width = 2 * d
    feat_width = entity_width + h
    zeros = {
        "encoder.lorentz_mu": np.zeros((h, d)),
        "encoder.lorentz_sigma": np.zeros((h, d)),
        "encoder.head_mu.w": np.zeros((h, h)),
        "encoder.head_mu.b": np.zeros(h),
        "encoder.head_sigma.w": np.zeros((h, h)),
        "encoder.head_sigma.b": np.zeros(h),
        "attention.w": np.zeros(h + entity_width),
        "attention.b": np.zeros(()),
        "project.feature.w": np.eye(feat_width)[:h] * 0 + np.hstack([np.eye(h), np.zeros((h, entity_width))]),
        "project.feature.b": np.zeros(h),
        "project.prototype.w": np.eye(d)[:h] * 0 + np.eye(h, d),
        "project.prototype.b": np.zeros(h),
        "vae.lorentz_mu": np.zeros((h, feat_width)),
        "vae.lorentz_sigma": np.zeros((h, feat_width)),
        "decoder.hidden.w": np.zeros((h, d + h)),
        "decoder.hidden.b": np.zeros(h),
        "decoder.out.w": np.zeros((feat_width, h)),
        "decoder.out.b": np.zeros(feat_width),
    }
    return engine.ModelWeights(zeros)


class TestCalibratedPrediction:
    def test_zero_gamma_is_plain_argmax(self):
        scores = np.array([[0.2, 0.9, 0.5]])
        mask = np.array([True, True, False])
        assert engine.calibrated_argmax(scores, mask, 0.0)[0] == 1

    def test_gamma_flips_to_unseen(self):
        # seen score 0.9, unseen 0.85; gamma 0.1 pushes seen to 0.8
        scores = np.array([[0.9, 0.85]])
        mask = np.array([True, False])
        assert engine.calibrated_argmax(scores, mask, 0.0)[0] == 0
        assert engine.calibrated_argmax(scores, mask, 0.1)[0] == 1

    def test_huge_gamma_always_unseen(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=(20, 5))
        mask = np.array([True, True, True, False, False])
        pred = engine.calibrated_argmax(scores, mask, 1e6)
        assert np.all(~mask[pred] | False) or np.all(pred >= 3)

    def test_tie_breaks_to_lowest_index(self):
        scores = np.array([[0.5, 0.5, 0.5]])
        mask = np.array([False, False, False])
        assert engine.calibrated_argmax(scores, mask, 0.0)[0] == 0

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValidationError):
            engine.calibrated_argmax(np.zeros((1, 2)), np.array([True, False]), -0.5)

    def test_feature_level_predict(self):
        w = toy_weights(d=2, h=2)
        protos_seen = PrototypeSet(["s"], np.array([[0.9, 0.0]], dtype=np.float32))
        protos_unseen = PrototypeSet(["u"], np.array([[0.85, 0.0]], dtype=np.float32))
        # feature projection reads the first h coords of the feature
        feature = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        assert engine.calibrated_predict(feature, protos_seen, protos_unseen, w, 0.0) == 0
        assert engine.calibrated_predict(feature, protos_seen, protos_unseen, w, 0.1) == 1

    def test_empty_prototypes_rejected(self):
        w = toy_weights()
        empty = PrototypeSet([], np.zeros((0, 2), dtype=np.float32))
        with pytest.raises(ValidationError):
            engine.calibrated_predict(np.zeros(6), empty, empty, w, 0.0)


class TestSelectGamma:
    def setup_case(self):
        # two seen categories (cols 0,1), one unseen (col 2); four rows
        scores = np.array(
            [
                [1.0, 0.0, 0.5],  # seen row, correct at any gamma < 0.5
                [0.0, 1.0, 0.5],  # seen row
                [0.9, 0.0, 0.8],  # unseen row, needs gamma > 0.1
                [0.0, 0.2, 0.9],  # unseen row, correct already
            ]
        )
        y_true = np.array([0, 1, 2, 2])
        row_is_seen = np.array([True, True, False, False])
        seen_mask = np.array([True, True, False])
        return scores, y_true, row_is_seen, seen_mask

    def test_single_point_grid(self):
        scores, y, rs, sm = self.setup_case()
        gamma, _ = engine.select_gamma(scores, y, rs, sm, [0.0])
        assert gamma == 0.0

    def test_handpicked_flip(self):
        scores, y, rs, sm = self.setup_case()
        gamma, sweep = engine.select_gamma(scores, y, rs, sm, [0.0, 0.1, 0.2, 0.3])
        # gamma=0.2 flips the hard unseen row without losing the seen rows
        assert gamma == 0.2
        assert sweep[2]["unseen_accuracy"] == 1.0
        assert sweep[2]["seen_accuracy"] == 1.0

    def test_tie_prefers_smallest(self):
        scores, y, rs, sm = self.setup_case()
        gamma, _ = engine.select_gamma(scores, y, rs, sm, [0.2, 0.25])
        assert gamma == 0.2

    def test_missing_unseen_rows_rejected(self):
        scores, y, rs, sm = self.setup_case()
        with pytest.raises(ValidationError):
            engine.select_gamma(scores[:2], y[:2], rs[:2], sm, [0.0])

    def test_monotone_seen_count(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(50, 6))
        y = rng.integers(0, 6, size=50)
        seen_mask = np.array([True] * 3 + [False] * 3)
        row_is_seen = y < 3
        _, sweep = engine.select_gamma(
            scores, y, row_is_seen, seen_mask, np.linspace(0, 5, 21)
        )
        counts = [entry["predicted_seen"] for entry in sweep]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


class TestMetrics:
    def test_harmonic_identities(self):
        assert engine.harmonic_mean(0.5, 0.5) == pytest.approx(0.5)
        assert engine.harmonic_mean(0.8, 0.0) == 0.0
        assert engine.harmonic_mean(None, 0.9) == 0.0
        assert engine.harmonic_mean(0.623, 0.334) == pytest.approx(0.435, abs=5e-4)

    def test_harmonic_between_min_and_arithmetic_mean(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b = rng.uniform(0.01, 1.0, size=2)
            h = engine.harmonic_mean(a, b)
            assert min(a, b) - 1e-12 <= h <= (a + b) / 2 + 1e-12

    def test_weighted_f1_against_sklearn(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            y_true = rng.integers(0, 5, size=40)
            y_pred = rng.integers(0, 5, size=40)
            mine = engine.weighted_f1(y_true, y_pred, range(5))
            ref = f1_score(
                y_true, y_pred, labels=np.unique(y_true), average="weighted", zero_division=0
            )
            assert mine == pytest.approx(ref)

    def test_weighted_f1_relabel_invariance(self):
        rng = np.random.default_rng(6)
        y_true = rng.integers(0, 4, size=30)
        y_pred = rng.integers(0, 4, size=30)
        perm = rng.permutation(4)
        assert engine.weighted_f1(perm[y_true], perm[y_pred], range(4)) == pytest.approx(
            engine.weighted_f1(y_true, y_pred, range(4))
        )

    def test_perfect_predictions(self):
        y = np.array([0, 1, 2, 1])
        report = engine._build_report(
            y, y.copy(), np.array([True, True, False, True]), ["a", "b", "c"], 2, 0.0
        )
        assert report.seen.accuracy == 1.0
        assert report.unseen.accuracy == 1.0
        assert report.overall_accuracy == 1.0
        assert report.overall_f1 == 1.0

    def test_empty_group_reports_absent(self):
        y = np.array([0, 1])
        report = engine._build_report(
            y, y.copy(), np.array([True, True]), ["a", "b", "c"], 3, 0.0
        )
        assert report.unseen.accuracy is None
        assert report.overall_accuracy == 0.0


class TestTraining:
    def test_single_batch_single_epoch_one_step(self):
        bundle, split = tiny_setup()
        cfg = tiny_config(epochs=1, batch_size=len(split.train_ids))
        result = engine.train(bundle, split, cfg)
        # reconstruct the optimizer state from the final checkpoint
        assert result.last.optimizer.step_count == 1

    def test_fixed_seed_reproduces_trajectory(self):
        bundle, split = tiny_setup()
        cfg = tiny_config(epochs=3)
        one = engine.train(bundle, split, cfg)
        two = engine.train(bundle, split, cfg)
        for a, b in zip(one.history, two.history):
            for name in a.loss:
                assert abs(a.loss[name] - b.loss[name]) < 1e-9
            assert a.val_report == b.val_report
        for name in one.last.params:
            assert np.array_equal(one.last.params[name], two.last.params[name])

    def test_training_reduces_loss(self):
        bundle, split = tiny_setup(per_cat=20)
        cfg = tiny_config(epochs=6)
        result = engine.train(bundle, split, cfg)
        assert result.history[-1].loss["total"] < result.history[0].loss["total"]

    def test_divergence_names_epoch_and_batch(self):
        bundle, split = tiny_setup()
        cfg = tiny_config(epochs=1, learning_rate=1e12)
        with pytest.raises(NumericsError, match="epoch"):
            engine.train(bundle, split, cfg)

    def test_task_mismatch_rejected(self):
        bundle, split = tiny_setup()
        cfg = tiny_config()
        cfg.task = "MRE"
        with pytest.raises(ValidationError):
            engine.train(bundle, split, cfg)

    def test_mre_pipeline_end_to_end(self):
        spec = GeneratorSpec(
            task=Task.MRE,
            categories=4,
            d=8,
            samples_per_category=12,
            token_range=(3, 5),
            patch_range=(2, 4),
            seed=2,
        )
        bundle = generate_synthetic_corpus(spec)
        split = gzsl_split(bundle, (2, 1, 1), seed=2)
        cfg = tiny_config(epochs=2)
        result = engine.train(bundle, split, cfg)
        report = engine.evaluate(bundle, split, result.best, cfg, result.best.gamma)
        assert 0.0 <= report.overall_accuracy <= 1.0
        feats, _ = engine.export_test_features(bundle, split, result.best, cfg)
        assert feats.shape[1] == cfg.latent_dim + 3 * bundle.d


class TestCheckpoints:
    def test_save_load_roundtrip(self, tmp_path):
        bundle, split = tiny_setup()
        cfg = tiny_config(epochs=2)
        result = engine.train(bundle, split, cfg)
        path = tmp_path / "model.ckpt"
        engine.save_checkpoint(result.last, path)
        loaded = engine.load_checkpoint(path)
        assert loaded.epoch == result.last.epoch
        assert loaded.config_hash == result.last.config_hash
        assert loaded.gamma == result.last.gamma
        for name in result.last.params:
            assert np.array_equal(loaded.params[name], result.last.params[name])
        for name in result.last.optimizer.m:
            assert np.array_equal(loaded.optimizer.m[name], result.last.optimizer.m[name])

    def test_resume_reproduces_remaining_trajectory(self, tmp_path):
        bundle, split = tiny_setup()
        full_cfg = tiny_config(epochs=4)
        full = engine.train(bundle, split, full_cfg)

        half = engine.train(bundle, split, tiny_config(epochs=2))
        path = tmp_path / "half.ckpt"
        engine.save_checkpoint(half.last, path)
        loaded = engine.load_checkpoint(path)
        resumed = engine.train(bundle, split, full_cfg, resume_from=loaded)

        assert [r.epoch for r in resumed.history] == [3, 4]
        for a, b in zip(full.history[2:], resumed.history):
            for name in a.loss:
                assert a.loss[name] == b.loss[name]
            assert a.val_report == b.val_report
        for name in full.last.params:
            assert np.array_equal(full.last.params[name], resumed.last.params[name])

    def test_resume_config_mismatch_rejected(self):
        bundle, split = tiny_setup()
        result = engine.train(bundle, split, tiny_config(epochs=2))
        other = tiny_config(epochs=2, eta=0.25)
        with pytest.raises(ValidationError):
            engine.train(bundle, split, other, resume_from=result.last)


class TestEvaluation:
    def test_evaluate_report_fields(self):
        bundle, split = tiny_setup(per_cat=20)
        cfg = tiny_config(epochs=2)
        result = engine.train(bundle, split, cfg)
        report = engine.evaluate(bundle, split, result.best, cfg, result.best.gamma)
        payload = report.to_jsonable()
        assert set(payload) == {"seen", "unseen", "overall", "gamma", "per_class"}
        assert 0.0 <= payload["overall"]["accuracy"] <= 1.0
        assert payload["overall"]["accuracy"] == pytest.approx(
            engine.harmonic_mean(report.seen.accuracy, report.unseen.accuracy)
        )
        assert sum(v["support"] for v in payload["per_class"].values()) == len(split.test_ids)

    def test_export_features_shape(self):
        bundle, split = tiny_setup(per_cat=20)
        cfg = tiny_config(epochs=1)
        result = engine.train(bundle, split, cfg)
        feats, labels = engine.export_test_features(bundle, split, result.best, cfg)
        entity_width = bundle.task.entity_width_multiplier * bundle.d
        assert feats.shape == (len(split.test_ids), cfg.latent_dim + entity_width)
        assert len(labels) == len(split.test_ids)
