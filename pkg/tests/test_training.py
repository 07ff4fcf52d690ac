"""Training loop behaviour: the plateau schedule, config validation, the
checkpoint container, and short end-to-end fits on the small fixture corpus.

The schedule is pure state-in state-out, so scripted accuracy traces can be
checked against a hand-simulated run step by step.
"""

import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from serobust.augment import augment_corpus_sp
from serobust.corpus import loso_folds
from serobust.errors import (BadConfig, ConfigMismatch, DivergedTraining,
                             EmptyTrainSet, NonFiniteGradient)
from serobust.features import FeatureCache, fold_normalizer
from serobust.network import ModelConfig, build_model
from serobust.training import (ADAM_BETAS, ADAM_EPS, AUGMENTATIONS,
                               HALT_PATIENCE, LR_INITIAL, PLATEAU_PATIENCE,
                               ScheduleState, TrainConfig, config_hash,
                               load_checkpoint, repeat_runs, save_checkpoint,
                               schedule_step, train_fold, write_history)

MICRO = ModelConfig(init_channels=4, blocks=((1, 4), (1, 4)), lstm_units=8,
                    highway_layers=1, highway_dim=8, seed=0)


def run_schedule(val_accs, plateau=5, halt=20, lr0=1e-3):
    """Feed a scripted accuracy trace through the schedule, collecting the
    state after each step."""
    state = ScheduleState(lr=lr0)
    trace = []
    for acc in val_accs:
        state = schedule_step(state, acc, plateau, halt)
        trace.append(state)
    return trace


class TestScheduleOracle:
    def test_flat_trace_halves_every_five_and_stops_at_twenty(self):
        # one improvement, then 20 flat epochs: the counter runs 1..20,
        # halving at 5, 10, 15, 20 and stopping exactly at 20
        trace = run_schedule([0.5] + [0.5] * 20)
        assert trace[0].epochs_since_improve == 0
        expected_lr = 1e-3
        for k, state in enumerate(trace[1:], start=1):
            if k % 5 == 0:
                expected_lr /= 2.0
            assert state.epochs_since_improve == k
            assert state.lr == expected_lr
            assert state.stop == (k >= 20)
        assert trace[-1].lr == 1e-3 / 16.0

    def test_hand_simulated_mixed_trace(self):
        # accuracy improves at epochs 1, 2, 4, and 12, with plateaus between
        accs = [0.40, 0.50, 0.45, 0.60,            # improve, improve, flat, improve
                0.60, 0.55, 0.60, 0.58, 0.60,      # five flat epochs -> halve
                0.59, 0.60, 0.65,                  # two more flat, then improve
                0.65, 0.65, 0.65, 0.65, 0.65]      # five flat again -> halve
        trace = run_schedule(accs)
        since = [s.epochs_since_improve for s in trace]
        assert since == [0, 0, 1, 0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5]
        lrs = [s.lr for s in trace]
        assert lrs == ([1e-3] * 8 + [5e-4] * 8 + [2.5e-4])
        assert not any(s.stop for s in trace)
        assert trace[-1].best_val_acc == 0.65

    def test_equal_accuracy_is_not_improvement(self):
        state = schedule_step(ScheduleState(lr=1e-3), 0.5)
        state = schedule_step(state, 0.5)
        assert state.epochs_since_improve == 1

    def test_improvement_mid_plateau_resets_without_touching_lr(self):
        trace = run_schedule([0.5, 0.4, 0.4, 0.4, 0.6])
        assert trace[-1].epochs_since_improve == 0
        assert trace[-1].lr == 1e-3
        assert trace[-1].best_val_acc == 0.6

    def test_counter_keeps_running_after_a_halving(self):
        # the counter is epochs since improvement, not since the last halving
        trace = run_schedule([0.5] + [0.4] * 7)
        assert trace[-1].epochs_since_improve == 7
        assert trace[-1].lr == 5e-4

    def test_rejects_bad_patience(self):
        with pytest.raises(BadConfig):
            schedule_step(ScheduleState(lr=1e-3), 0.5, plateau_patience=0)
        with pytest.raises(BadConfig):
            schedule_step(ScheduleState(lr=1e-3), 0.5,
                          plateau_patience=10, halt_patience=5)

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0,
                              allow_nan=False), min_size=1, max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_lr_stays_a_power_of_two_fraction(self, accs):
        state = ScheduleState(lr=1e-3)
        best = -math.inf
        for acc in accs:
            state = schedule_step(state, acc)
            best = max(best, acc)
            ratio = 1e-3 / state.lr
            assert ratio == 2.0 ** round(math.log2(ratio))
            assert state.best_val_acc == best
            assert state.stop == (state.epochs_since_improve >= 20)

    def test_defaults(self):
        assert PLATEAU_PATIENCE == 5
        assert HALT_PATIENCE == 20
        assert LR_INITIAL == 1e-3
        assert ADAM_BETAS == (0.9, 0.999)
        assert ADAM_EPS == 1e-8


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        {"batch_size": 0},
        {"max_epochs": 0},
        {"repeats": 0},
        {"lr": 0.0},
        {"lr": -1e-3},
        {"plateau_patience": 0},
        {"plateau_patience": 10, "halt_patience": 5},
        {"augmentation": "speed"},
        {"mixup_alpha": 0.0},
        {"mixup_mode": "gamma"},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(BadConfig):
            TrainConfig(**kwargs)

    def test_augmentation_switches(self):
        assert AUGMENTATIONS == ("none", "sp", "mixup", "sp+mixup")
        flags = {a: (TrainConfig(augmentation=a).uses_sp,
                     TrainConfig(augmentation=a).uses_mixup)
                 for a in AUGMENTATIONS}
        assert flags == {"none": (False, False), "sp": (True, False),
                         "mixup": (False, True), "sp+mixup": (True, True)}


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, small_corpus, small_cache,
                                     tmp_path):
        fold = loso_folds(small_corpus)[0]
        model = build_model(MICRO)
        model.normalizer = fold_normalizer(small_cache,
                                           fold.train_utterances)
        path = save_checkpoint(tmp_path / "m.ckpt", model,
                               extra={"fold_id": fold.fold_id, "note": 1})
        loaded, extra = load_checkpoint(path)
        assert extra == {"fold_id": fold.fold_id, "note": 1}
        assert loaded.config == model.config
        for name, tensor in model.state_dict().items():
            assert torch.equal(loaded.state_dict()[name], tensor), name
        assert loaded.normalizer.digest() == model.normalizer.digest()
        assert not loaded.training

    def test_save_is_deterministic(self, tmp_path):
        model = build_model(MICRO)
        model.normalizer = None
        a = save_checkpoint(tmp_path / "a.ckpt", model).read_bytes()
        b = save_checkpoint(tmp_path / "b.ckpt", model).read_bytes()
        assert a == b

    def test_bad_magic_is_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(ConfigMismatch):
            load_checkpoint(path)

    def test_tampered_header_is_rejected(self, tmp_path):
        model = build_model(MICRO)
        model.normalizer = None
        path = save_checkpoint(tmp_path / "m.ckpt", model)
        blob = bytearray(path.read_bytes())
        # flip the stored lstm size inside the JSON header
        idx = blob.find(b'"lstm_units": 8')
        assert idx > 0
        blob[idx:idx + 15] = b'"lstm_units": 9'
        path.write_bytes(bytes(blob))
        with pytest.raises(ConfigMismatch):
            load_checkpoint(path)

    def test_expected_config_mismatch(self, tmp_path):
        from dataclasses import replace
        model = build_model(MICRO)
        model.normalizer = None
        path = save_checkpoint(tmp_path / "m.ckpt", model)
        load_checkpoint(path, expected_config=MICRO)
        with pytest.raises(ConfigMismatch):
            load_checkpoint(path, expected_config=replace(MICRO, seed=99))

    def test_config_hash_tracks_content(self):
        from dataclasses import replace
        assert config_hash(MICRO) == config_hash(ModelConfig(
            init_channels=4, blocks=((1, 4), (1, 4)), lstm_units=8,
            highway_layers=1, highway_dim=8, seed=0))
        assert config_hash(MICRO) != config_hash(replace(MICRO, seed=1))
        assert len(config_hash(MICRO)) == 64


@pytest.fixture(scope="module")
def fitted(small_corpus, small_cache):
    fold = loso_folds(small_corpus)[0]
    config = TrainConfig(batch_size=8, max_epochs=3, seed=0, repeats=1)
    model, state = train_fold(MICRO, config, fold, small_corpus, small_cache)
    return fold, config, model, state


class TestTrainFold:
    def test_history_shape(self, fitted):
        _, config, _, state = fitted
        assert state.n_epochs_run == len(state.history) == config.max_epochs
        for row in state.history:
            assert set(row) == {"epoch", "train_loss", "val_acc", "val_uar",
                                "lr", "epochs_since_improve", "halved"}
            assert 0.0 <= row["val_acc"] <= 1.0
            assert np.isfinite(row["train_loss"])
        assert [r["epoch"] for r in state.history] == [1, 2, 3]

    def test_best_epoch_is_the_accuracy_argmax(self, fitted):
        _, _, _, state = fitted
        accs = [r["val_acc"] for r in state.history]
        assert state.best_val_acc == max(accs)
        # ties resolve to the earliest epoch because improvement is strict
        assert state.best_epoch == accs.index(max(accs)) + 1

    def test_normalizer_is_fit_on_training_audio_only(self, fitted,
                                                      small_cache):
        fold, _, model, _ = fitted
        direct = fold_normalizer(small_cache, fold.train_utterances)
        assert model.normalizer.digest() == direct.digest()

    def test_segment_count_matches_manual_cut(self, fitted, small_cache):
        from serobust.features import segment_starts
        fold, config, _, state = fitted
        want = sum(len(segment_starts(small_cache.get(i).shape[1],
                                      config.train_hop))
                   for i in fold.train_utterances)
        assert state.n_train_segments == want
        assert state.n_train_sources == len(fold.train_utterances)

    def test_same_seed_reproduces_weights(self, small_corpus, small_cache):
        fold = loso_folds(small_corpus)[0]
        config = TrainConfig(batch_size=8, max_epochs=2, seed=4, repeats=1)
        m1, _ = train_fold(MICRO, config, fold, small_corpus, small_cache)
        m2, _ = train_fold(MICRO, config, fold, small_corpus, small_cache)
        for name, tensor in m1.state_dict().items():
            assert torch.equal(m2.state_dict()[name], tensor), name

    def test_sp_without_widened_corpus_is_a_config_error(self, small_corpus,
                                                         small_cache):
        fold = loso_folds(small_corpus)[0]
        config = TrainConfig(batch_size=8, max_epochs=1, repeats=1,
                             augmentation="sp")
        with pytest.raises(BadConfig):
            train_fold(MICRO, config, fold, small_corpus, small_cache)

    def test_sp_on_widened_corpus_triples_the_sources(self, small_corpus,
                                                      tmp_path):
        widened = augment_corpus_sp(small_corpus, tmp_path / "sp")
        cache = FeatureCache(tmp_path / "cache")
        cache.build(widened)
        fold = loso_folds(widened)[0]
        config = TrainConfig(batch_size=8, max_epochs=1, repeats=1,
                             augmentation="sp")
        _, state = train_fold(MICRO, config, fold, widened, cache)
        plain = TrainConfig(batch_size=8, max_epochs=1, repeats=1)
        _, base = train_fold(MICRO, plain, fold, widened, cache)
        assert state.n_train_sources == 3 * base.n_train_sources

    def test_mixup_switch_trains(self, small_corpus, small_cache):
        fold = loso_folds(small_corpus)[0]
        config = TrainConfig(batch_size=8, max_epochs=2, repeats=1,
                             augmentation="mixup", mixup_alpha=0.2)
        model, state = train_fold(MICRO, config, fold, small_corpus,
                                  small_cache)
        assert state.n_epochs_run == 2
        assert np.isfinite(state.history[-1]["train_loss"])

    def test_runaway_learning_rate_diverges(self, small_corpus, small_cache):
        # Overflow can strike the loss or the gradients first depending on
        # where the blown-up weights saturate; either way the failure must
        # surface as a structured training error, never silent garbage.
        fold = loso_folds(small_corpus)[0]
        config = TrainConfig(batch_size=8, max_epochs=5, lr=1e6, repeats=1)
        with pytest.raises((DivergedTraining, NonFiniteGradient)):
            train_fold(MICRO, config, fold, small_corpus, small_cache)

    def test_empty_training_set(self, small_corpus, small_cache):
        fold = loso_folds(small_corpus)[0]
        from dataclasses import replace
        empty = replace(fold, train_utterances=())
        config = TrainConfig(batch_size=8, max_epochs=1, repeats=1)
        with pytest.raises(EmptyTrainSet):
            train_fold(MICRO, config, empty, small_corpus, small_cache)


class TestRepeatRuns:
    def test_two_runs_two_reports_one_summary(self, small_corpus,
                                              small_cache):
        fold = loso_folds(small_corpus)[0]
        config = TrainConfig(batch_size=8, max_epochs=2, seed=10, repeats=2)
        reports, summaries, models, states = repeat_runs(
            MICRO, config, fold, small_corpus, small_cache)
        assert len(reports) == len(models) == len(states) == 2
        assert [s.seed for s in states] == [10, 11]
        assert len(summaries) == 1
        summary = summaries[0]
        assert summary.n_runs == 2
        assert summary.condition == "clean"
        uars = [r.uar for r in reports]
        assert summary.mean_uar == pytest.approx(np.mean(uars))
        assert summary.std_uar == pytest.approx(np.std(uars))

    def test_custom_evaluate_sees_every_model(self, small_corpus,
                                              small_cache):
        fold = loso_folds(small_corpus)[0]
        config = TrainConfig(batch_size=8, max_epochs=1, seed=0, repeats=2)
        seen = []

        def evaluate(model):
            from serobust.evaluation import evaluate_fold
            seen.append(model)
            return evaluate_fold(model, small_cache, small_corpus, fold)

        reports, summaries, models, _ = repeat_runs(
            MICRO, config, fold, small_corpus, small_cache,
            evaluate=evaluate)
        assert seen == models
        assert len(reports) == 2


class TestWriteHistory:
    def test_file_layout(self, small_corpus, small_cache, tmp_path):
        fold = loso_folds(small_corpus)[0]
        config = TrainConfig(batch_size=8, max_epochs=2, repeats=1)
        _, state = train_fold(MICRO, config, fold, small_corpus, small_cache)
        path = write_history(tmp_path / "history.jsonl", state,
                             run_seed=0, config_hash="abc")
        lines = [json.loads(line)
                 for line in path.read_text().splitlines()]
        assert len(lines) == state.n_epochs_run + 1
        for rec in lines[:-1]:
            assert rec["record"] == "epoch"
            assert rec["run_seed"] == 0
            assert rec["config_hash"] == "abc"
        end = lines[-1]
        assert end["record"] == "end"
        assert end["best_epoch"] == state.best_epoch
        assert end["best_val_acc"] == state.best_val_acc
        assert end["n_train_segments"] == state.n_train_segments
