import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamtta import harness
from streamtta.adaptation import AdaptConfig
from streamtta.checkpoint import load_session, save_session, session_bytes
from streamtta.errors import FormatError, UnknownSubject
from streamtta.harness import (
    TrainConfig, apply_preset, compute_ece, frozen_predictions, loso_split, run_ablation_grid,
    run_online_session, train_offline,
)
from streamtta.synth_data import GeneratorSpec, Session, generate_corpus

SMALL = GeneratorSpec(n_subjects=4, n_trials_per_subject=20, channels=4, samples=32, classes=2,
                      subject_shift_strength=0.3, seed=3)
QUICK = TrainConfig(epochs=60, batch_size=16, lr=0.3, seed=1, hidden=6)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SMALL)


@pytest.fixture(scope="module")
def trained(corpus):
    return train_offline(loso_split(corpus, 0), corpus, QUICK)


class TestSplit:
    def test_four_subjects(self, corpus):
        plan = loso_split(corpus, 0)
        assert plan.held_out == 0 and plan.train_subjects == (1, 2, 3)

    def test_twenty_percent(self):
        plan = loso_split([Session(0, np.zeros((10, 1, 2)), np.zeros(10, int)),
                           Session(1, np.zeros((10, 1, 2)), np.zeros(10, int))], 0)
        assert plan.n_val(10) == 2
        x_tr, _, x_val, _ = plan.partition([Session(1, np.arange(20.0).reshape(10, 1, 2), np.zeros(10, int))])
        assert len(x_tr) == 8 and len(x_val) == 2
        assert x_val[0, 0, 0] == 16.0  # trailing slice

    def test_held_out_never_used(self, corpus):
        plan = loso_split(corpus, 2)
        x_tr, _, x_val, _ = plan.partition(corpus)
        held = corpus[2].x.reshape(len(corpus[2]), -1)
        for x in np.concatenate([x_tr, x_val]).reshape(-1, held.shape[1]):
            assert not np.any(np.all(held == x, axis=1))

    def test_unknown_subject(self, corpus):
        with pytest.raises(UnknownSubject):
            loso_split(corpus, 99)


class TestTraining:
    def test_deterministic(self, corpus, trained):
        again = train_offline(loso_split(corpus, 0), corpus, QUICK)
        assert again.a_val == trained.a_val
        for a, b in zip(again.params.arrays(), trained.params.arrays()):
            assert np.array_equal(a, b)

    def test_untrained_is_near_chance(self, corpus):
        untrained = train_offline(loso_split(corpus, 0), corpus, TrainConfig(epochs=0, hidden=6))
        assert abs(untrained.a_val - 0.5) <= 0.35

    def test_learns(self, trained):
        assert trained.a_val > 0.75

    def test_protocol_hygiene(self, corpus, trained):
        # corrupting the held-out subject must not change anything training produces
        tainted = [Session(s.subject_id, np.full_like(s.x, np.nan) if s.subject_id == 0 else s.x, s.y)
                   for s in corpus]
        other = train_offline(loso_split(tainted, 0), tainted, QUICK)
        assert other.a_val == trained.a_val
        assert np.array_equal(other.aligner.reference, trained.aligner.reference)
        for a, b in zip(other.params.arrays(), trained.params.arrays()):
            assert np.array_equal(a, b)

    def test_separable_no_shift_reaches_ceiling(self):
        spec = GeneratorSpec(n_subjects=4, n_trials_per_subject=40, channels=4, samples=64, classes=2,
                             subject_shift_strength=0.0, noise_level=0.0, seed=0)
        corpus = generate_corpus(spec)
        state = train_offline(loso_split(corpus, 0), corpus, TrainConfig(epochs=60, lr=0.3, hidden=8))
        assert state.a_val >= 0.99
        assert np.mean(frozen_predictions(state, corpus[0]).argmax(1) == corpus[0].y) >= 0.99


class TestEce:
    def test_hand_example(self):
        probs = np.array([[0.95, 0.05], [0.95, 0.05], [0.55, 0.45], [0.55, 0.45]])
        labels = np.array([0, 1, 0, 1])
        assert compute_ece(probs, labels, 10) == pytest.approx(0.25, abs=1e-15)

    def test_perfectly_calibrated(self):
        probs = np.array([[0.75, 0.25]] * 4 + [[0.5, 0.5]] * 2)
        labels = np.array([0, 0, 0, 1, 0, 1])
        assert compute_ece(probs, labels) == pytest.approx(0.0, abs=1e-15)

    def test_confident_and_correct(self):
        assert compute_ece(np.eye(3), np.arange(3)) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_ece(np.eye(3), np.arange(2))

    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 20))
    def test_bounds(self, seed, n, bins):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(3), size=n)
        ece = compute_ece(probs, rng.integers(0, 3, n), bins)
        assert 0.0 <= ece <= 1.0


class TestSession:
    def test_all_off_equals_frozen_baseline(self, corpus):
        raw = train_offline(loso_split(corpus, 0), corpus, QUICK, use_ea=False)
        record = run_online_session(raw, corpus[0], apply_preset("baseline"))
        frozen = frozen_predictions(raw, corpus[0])
        np.testing.assert_array_equal(record.probs, frozen)
        assert record.accuracy == np.mean(frozen.argmax(1) == corpus[0].y)

    def test_replay_is_identical(self, corpus, trained):
        a = run_online_session(trained, corpus[0], apply_preset("full"))
        b = run_online_session(trained, corpus[0], apply_preset("full"))
        assert a.rows == b.rows and a.accuracy == b.accuracy

    def test_record_contents(self, corpus, trained):
        record = run_online_session(trained, corpus[0], AdaptConfig(a_val=0.123))
        assert record.accuracy == np.mean([r.correct for r in record.rows])
        assert record.a_val == trained.a_val  # measured value wins
        assert record.config["a_val"] == trained.a_val
        assert record.rows[-1].running_acc == record.accuracy
        assert [r.trial_idx for r in record.rows] == list(range(len(corpus[0])))

    def test_variant_mismatch_rejected(self, corpus, trained):
        with pytest.raises(ValueError):
            run_online_session(trained, corpus[0], apply_preset("bn_only"))


class TestGrid:
    def test_cardinality_and_baseline(self, corpus):
        presets = ["baseline", "full", "tent"]
        records = run_ablation_grid(corpus, presets, QUICK)
        assert len(records) == len(presets) * len(corpus)
        assert [r.preset for r in records] == [p for p in presets for _ in corpus]
        base = records[0]
        raw = train_offline(loso_split(corpus, base.subject), corpus, QUICK, use_ea=False)
        assert base.accuracy == run_online_session(raw, corpus[0], apply_preset("baseline")).accuracy

    def test_threads_do_not_change_results(self, corpus, monkeypatch):
        serial = run_ablation_grid(corpus, ["full"], QUICK)
        monkeypatch.setenv("TTA_THREADS", "3")
        threaded = run_ablation_grid(corpus, ["full"], QUICK)
        assert [r.rows for r in serial] == [r.rows for r in threaded]

    def test_presets(self):
        assert apply_preset("adabn").flags == (False, True, False)
        tent = apply_preset("tent")
        assert tent.flags == (False, True, True) and tent.lambda_ == 0.0
        assert tent.update_mask.value == "bn_affine"
        assert len(harness.TABLE_V_PRESETS) == 8
        assert {v for v in harness.TABLE_V_PRESETS.values()} == {
            (a, b, c) for a in (False, True) for b in (False, True) for c in (False, True)}
        with pytest.raises(KeyError):
            apply_preset("nope")

    def test_lambda_grid(self):
        grid = harness.lambda_grid()
        assert len(grid) == 19 and grid[0] == 0.1 and grid[-1] == 1.9

    def test_csv_columns(self, corpus, trained, tmp_path):
        record = run_online_session(trained, corpus[0], apply_preset("full"))
        path = harness.write_session_csv(record, tmp_path / "s.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "trial_idx,correct,entropy,calibrated_ce,total_loss,running_acc"
        assert len(lines) == len(corpus[0]) + 1


class TestCheckpoint:
    def test_round_trip(self, trained, tmp_path):
        cfg = AdaptConfig(eta=0.02, lambda_=1.3)
        path = save_session(tmp_path / "x.ckpt", trained, cfg)
        back, cfg_back = load_session(path)
        assert cfg_back == cfg
        assert back.a_val == trained.a_val and back.aligned == trained.aligned
        for a, b in zip(back.params.arrays(), trained.params.arrays()):
            assert a.tobytes() == b.tobytes()
        assert back.aligner.reference.tobytes() == trained.aligner.reference.tobytes()
        assert back.aligner.mass == trained.aligner.mass
        assert back.bn.var.tobytes() == trained.bn.var.tobytes()

    def test_bytes_deterministic(self, trained):
        assert session_bytes(trained, AdaptConfig()) == session_bytes(trained, AdaptConfig())

    def test_truncated(self, trained, tmp_path):
        blob = session_bytes(trained, AdaptConfig())
        (tmp_path / "t.ckpt").write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            load_session(tmp_path / "t.ckpt")
        (tmp_path / "m.ckpt").write_bytes(b"NOPE" + blob[4:])
        with pytest.raises(FormatError):
            load_session(tmp_path / "m.ckpt")


def test_below_chance_validation_accuracy_is_floored(corpus, trained):
    import dataclasses
    hopeless = dataclasses.replace(trained, a_val=0.0)
    record = run_online_session(hopeless, corpus[0], apply_preset("full"))
    assert record.a_val == 1.0 / trained.n_classes
    assert record.config["a_val"] == record.a_val
