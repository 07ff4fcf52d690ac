"""Evaluation metrics and report plumbing.

Confusion matrices and UAR are checked against scikit-learn, posterior
averaging against a brute-force per-segment recomputation, and the report
records against lossless round-trip equality.
"""

import math
import statistics

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import confusion_matrix as sk_confusion
from sklearn.metrics import recall_score

from serobust.augment import load_noise_bank
from serobust.corpus import loso_folds
from serobust.errors import EmptyList, MissingClass
from serobust.evaluation import (EvalReport, SummaryReport, confusion_matrix,
                                 evaluate_adversarial, evaluate_fold,
                                 evaluate_noisy, format_cell,
                                 posteriors_from_features, read_report,
                                 render_confusion, render_report, summarize,
                                 uar, uar_from_confusion,
                                 utterance_posteriors, write_report)
from serobust.evaluation import test_read_leaks as read_leak_audit
from serobust.features import Normalizer, segment_features
from serobust.network import ModelConfig
from serobust.training import TrainConfig, train_fold

MICRO = ModelConfig(init_channels=4, blocks=((1, 4), (1, 4)), lstm_units=8,
                    highway_layers=1, highway_dim=8, seed=0)


class StubModel(torch.nn.Module):
    """Posterior is a softmax of fixed linear functionals of the segment's
    per-bin time average, cheap enough to recompute by hand."""

    def __init__(self, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w = torch.nn.Parameter(torch.randn(4, 128, generator=g))
        self.normalizer = None

    def logits(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        return x.mean(dim=3).squeeze(1) @ self.w.T

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class ConstantModel(torch.nn.Module):
    """Always predicts the same posterior, whatever the input."""

    def __init__(self, posterior=(0.7, 0.1, 0.1, 0.1)):
        super().__init__()
        self.p = torch.nn.Parameter(torch.tensor(posterior))
        self.normalizer = None

    def forward(self, x):
        return self.p.detach().expand(x.shape[0], -1)


@pytest.fixture(scope="module")
def trained(small_corpus, small_cache):
    fold = loso_folds(small_corpus)[0]
    config = TrainConfig(batch_size=8, max_epochs=2, seed=1, repeats=1)
    model, _ = train_fold(MICRO, config, fold, small_corpus, small_cache)
    return fold, model


def identity_normalizer():
    return Normalizer(np.zeros(128), np.ones(128))


class TestMetrics:
    def test_confusion_matches_sklearn(self):
        rng = np.random.default_rng(0)
        y_true = rng.integers(0, 4, size=200)
        y_pred = rng.integers(0, 4, size=200)
        got = confusion_matrix(y_true, y_pred)
        want = sk_confusion(y_true, y_pred, labels=range(4))
        np.testing.assert_array_equal(got, want)

    def test_uar_matches_sklearn_macro_recall(self):
        rng = np.random.default_rng(1)
        y_true = np.repeat(np.arange(4), 25)
        y_pred = rng.integers(0, 4, size=100)
        assert uar(y_true, y_pred) == pytest.approx(
            recall_score(y_true, y_pred, average="macro"), abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)),
                    min_size=4, max_size=200))
    @settings(max_examples=100, deadline=None)
    def test_uar_property_against_sklearn(self, pairs):
        y_true = np.array([p[0] for p in pairs] + [0, 1, 2, 3])
        y_pred = np.array([p[1] for p in pairs] + [0, 1, 2, 3])
        assert uar(y_true, y_pred) == pytest.approx(
            recall_score(y_true, y_pred, average="macro"), abs=1e-12)

    def test_perfect_and_worst_case(self):
        y = np.array([0, 1, 2, 3] * 5)
        assert uar(y, y) == 1.0
        assert uar(y, (y + 1) % 4) == 0.0

    def test_missing_class_is_an_error(self):
        cm = confusion_matrix([0, 1, 2], [0, 1, 2])  # class 3 has no support
        with pytest.raises(MissingClass) as err:
            uar_from_confusion(cm)
        assert "sad" in str(err.value)

    def test_empty_inputs(self):
        with pytest.raises(EmptyList):
            confusion_matrix([], [])


class TestReports:
    def make_report(self, seed=0, condition="clean"):
        rng = np.random.default_rng(seed)
        y_true = np.repeat(np.arange(4), 10)
        y_pred = rng.integers(0, 4, size=40)
        return EvalReport.from_predictions("spk00", condition, y_true, y_pred,
                                           params={"snr_db": 10.0, "seed": 3})

    def test_from_predictions_is_internally_consistent(self):
        rep = self.make_report()
        cm = np.array(rep.confusion)
        assert rep.n_utterances == cm.sum() == 40
        assert rep.accuracy == pytest.approx(np.trace(cm) / cm.sum())
        assert rep.uar == pytest.approx(np.mean(rep.per_class_recall))
        for i, recall in enumerate(rep.per_class_recall):
            assert recall == pytest.approx(cm[i, i] / cm[i].sum())

    def test_record_round_trip_is_lossless(self):
        rep = self.make_report()
        rec = rep.to_record(run_seed=7, config_hash="deadbeef")
        assert rec["record"] == "run"
        assert rec["run_seed"] == 7
        # confusion is stored flattened, row-major
        assert rec["confusion"] == [v for row in rep.confusion for v in row]
        assert EvalReport.from_record(rec) == rep

    def test_summary_round_trip_is_lossless(self):
        summary = summarize([self.make_report(s) for s in range(3)])
        rec = summary.to_record(config_hash="deadbeef")
        assert rec["record"] == "summary"
        assert rec["n_classes"] == 4
        assert SummaryReport.from_record(rec) == summary

    def test_summarize_against_statistics_module(self):
        reports = [self.make_report(s) for s in range(5)]
        summary = summarize(reports)
        uars = [r.uar for r in reports]
        accs = [r.accuracy for r in reports]
        assert summary.n_runs == 5
        assert summary.mean_uar == pytest.approx(statistics.fmean(uars))
        assert summary.std_uar == pytest.approx(statistics.pstdev(uars))
        assert summary.mean_accuracy == pytest.approx(statistics.fmean(accs))
        assert summary.std_accuracy == pytest.approx(statistics.pstdev(accs))
        assert summary.run_uars == tuple(uars)
        want_cm = np.sum([np.array(r.confusion) for r in reports], axis=0)
        np.testing.assert_array_equal(np.array(summary.confusion), want_cm)

    def test_summarize_rejects_mixed_conditions(self):
        with pytest.raises(ValueError):
            summarize([self.make_report(0, "clean"),
                       self.make_report(1, "snr+10dB")])
        with pytest.raises(EmptyList):
            summarize([])

    def test_report_file_round_trip(self, tmp_path):
        runs = [self.make_report(s) for s in range(3)]
        summaries = [summarize(runs)]
        path = write_report(tmp_path / "report.jsonl", runs, summaries,
                            config_hash="cafe")
        got_runs, got_summaries = read_report(path)
        assert got_runs == runs
        assert got_summaries == summaries


class TestRendering:
    def test_format_cell(self):
        assert format_cell(0.641, 0.013) == "64.1 ± 1.3"
        assert format_cell(1.0, 0.0) == "100.0 ± 0.0"
        assert format_cell(0.0495, 0.0) == "5.0 ± 0.0"

    def test_render_report_contains_the_cells(self):
        summary = SummaryReport(
            fold_id="spk00", condition="snr+10dB", n_runs=10,
            mean_uar=0.641, std_uar=0.013, mean_accuracy=0.66,
            std_accuracy=0.02, run_uars=(0.64,) * 10,
            confusion=((1, 0), (0, 1)))
        text = render_report([summary], title="demo")
        assert text.splitlines()[0] == "demo"
        assert "64.1 ± 1.3" in text
        assert "snr+10dB" in text
        assert "UAR [%]" in text

    def test_render_confusion_lists_labels_and_counts(self):
        rng = np.random.default_rng(2)
        rep = EvalReport.from_predictions(
            "spk01", "clean", np.repeat(np.arange(4), 5),
            rng.integers(0, 4, size=20))
        text = render_confusion(rep)
        for name in ("angry", "happy", "neutral", "sad"):
            assert name in text
        assert "spk01" in text


class TestPosteriorAveraging:
    def test_matches_per_segment_brute_force(self):
        rng = np.random.default_rng(3)
        model = StubModel()
        norm = identity_normalizer()
        feats = [rng.standard_normal((128, n)).astype(np.float32)
                 for n in (200, 256, 300, 700)]
        got = posteriors_from_features(model, feats, normalizer=norm, hop=256)
        for i, arr in enumerate(feats):
            segs = segment_features(norm.apply(arr), 256)
            outs = []
            for seg in segs:
                with torch.no_grad():
                    outs.append(model(torch.as_tensor(seg[None]))
                                .numpy()[0].astype(np.float64))
            np.testing.assert_allclose(got[i], np.mean(outs, axis=0),
                                       rtol=0, atol=1e-6)

    def test_batch_size_does_not_change_the_answer(self):
        rng = np.random.default_rng(4)
        model = StubModel()
        feats = [rng.standard_normal((128, 600)).astype(np.float32)
                 for _ in range(3)]
        a = posteriors_from_features(model, feats,
                                     normalizer=identity_normalizer(),
                                     batch_size=2)
        b = posteriors_from_features(model, feats,
                                     normalizer=identity_normalizer(),
                                     batch_size=32)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)

    def test_requires_a_normalizer(self):
        model = StubModel()
        with pytest.raises(ValueError):
            posteriors_from_features(model, [np.zeros((128, 300),
                                                      dtype=np.float32)])
        with pytest.raises(EmptyList):
            posteriors_from_features(model, [],
                                     normalizer=identity_normalizer())

    def test_utterance_posteriors_reads_the_cache(self, small_corpus,
                                                  small_cache):
        ids = [u.id for u in small_corpus.utterances[:3]]
        post = utterance_posteriors(StubModel(), small_cache, ids,
                                    normalizer=identity_normalizer())
        assert post.shape == (3, 4)
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-6)


class TestEvaluateFold:
    def test_constant_model_gets_chance_uar(self, small_corpus, small_cache):
        fold = loso_folds(small_corpus)[0]
        model = ConstantModel()
        model.normalizer = identity_normalizer()
        rep = evaluate_fold(model, small_cache, small_corpus, fold)
        assert rep.condition == "clean"
        assert rep.fold_id == fold.fold_id
        assert rep.n_utterances == len(fold.test_utterances)
        assert rep.uar == pytest.approx(0.25)
        assert rep.per_class_recall == (1.0, 0.0, 0.0, 0.0)

    def test_report_fields_from_a_real_model(self, trained, small_corpus,
                                             small_cache):
        fold, model = trained
        rep = evaluate_fold(model, small_cache, small_corpus, fold)
        assert 0.0 <= rep.uar <= 1.0
        assert sum(sum(row) for row in rep.confusion) == rep.n_utterances


class TestEvaluateNoisy:
    def test_infinite_snr_equals_the_clean_path(self, trained, small_corpus,
                                                small_cache):
        fold, model = trained
        noise = np.random.default_rng(5).standard_normal(32000)
        (rep,) = evaluate_noisy(model, small_corpus, fold, noise,
                                snrs=[math.inf])
        clean = evaluate_fold(model, small_cache, small_corpus, fold)
        assert rep.condition == "clean"
        assert rep.confusion == clean.confusion
        assert rep.uar == clean.uar

    def test_condition_names_and_params(self, trained, small_corpus,
                                        noise_dir):
        fold, model = trained
        bank = load_noise_bank(noise_dir)
        reports = evaluate_noisy(model, small_corpus, fold, bank,
                                 snrs=[0, 10], seed=3)
        assert [r.condition for r in reports] == ["snr+0dB", "snr+10dB"]
        assert dict(reports[0].params) == {"snr_db": 0.0, "seed": 3}

    def test_seed_reproducibility(self, trained, small_corpus, noise_dir):
        fold, model = trained
        bank = load_noise_bank(noise_dir)
        a = evaluate_noisy(model, small_corpus, fold, bank, snrs=[5], seed=9)
        b = evaluate_noisy(model, small_corpus, fold, bank, snrs=[5], seed=9)
        assert a == b

    def test_normalizer_is_not_refit(self, trained, small_corpus, noise_dir):
        fold, model = trained
        digest = model.normalizer.digest()
        evaluate_noisy(model, small_corpus, fold, load_noise_bank(noise_dir),
                       snrs=[0])
        assert model.normalizer.digest() == digest

    def test_empty_bank_is_an_error(self, trained, small_corpus):
        fold, model = trained
        with pytest.raises(EmptyList):
            evaluate_noisy(model, small_corpus, fold, {}, snrs=[0])


class TestEvaluateAdversarial:
    def test_fgsm_report_shape(self, trained, small_corpus, small_cache):
        fold, model = trained
        rep = evaluate_adversarial(model, small_cache, small_corpus, fold,
                                   attack="fgsm", epsilon=0.08)
        assert rep.condition == "fgsm@eps0.08"
        assert dict(rep.params) == {"method": "fgsm", "epsilon": 0.08}
        assert rep.n_utterances == len(fold.test_utterances)

    def test_bim_condition_encodes_steps(self, trained, small_corpus,
                                         small_cache):
        fold, model = trained
        rep = evaluate_adversarial(model, small_cache, small_corpus, fold,
                                   attack="bim", epsilon=0.05, steps=3)
        assert rep.condition == "bim3@eps0.05"
        assert dict(rep.params) == {"method": "bim", "epsilon": 0.05,
                                    "steps": 3, "step_size": 0.01}

    def test_unknown_attack(self, trained, small_corpus, small_cache):
        fold, model = trained
        with pytest.raises(ValueError):
            evaluate_adversarial(model, small_cache, small_corpus, fold,
                                 attack="pgd")


class TestReadLeaks:
    def test_flags_test_set_reads_only(self, small_corpus, tmp_path):
        from serobust.features import FeatureCache
        cache = FeatureCache(tmp_path / "cache")
        cache.build(small_corpus)
        fold = loso_folds(small_corpus)[0]
        cache.reset_read_counts()
        assert read_leak_audit(cache, fold) == []
        cache.get(fold.train_utterances[0])
        assert read_leak_audit(cache, fold) == []
        leaked = fold.test_utterances[0]
        cache.get(leaked)
        assert read_leak_audit(cache, fold) == [leaked]
        cache.reset_read_counts()
        assert read_leak_audit(cache, fold) == []
