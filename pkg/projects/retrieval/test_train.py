"""
Tests for config, Adam, the plateau schedule, checkpoints and the training loop (Retrieval Project, Level 7)
Run: pytest test_train.py -k "TestLevel1" -v
"""

import numpy as np
import pytest

from data_io import SynthSpec, generate_synthetic, read_features, write_corpus
from errors import ConfigError, DimensionError, FormatError, NumericalError
from metrics import render_records
from tensor import Tensor
from train import (AdamState, Checkpoint, Corpus, Model, TrainConfig, adam_step, embed, evaluate,
                   evaluate_model, load_checkpoint, load_config, load_corpus, lr_schedule,
                   save_checkpoint, train)


def tiny_config(tmp_path, **changes):
    base = dict(video_d_in=8, video_hidden=4, video_smsdc_n=2, video_smsdc_m=1, text_d_model=8,
                text_heads=2, text_ffn=16, text_layers=1, text_smsdc_n=2, text_smsdc_m=1,
                embed_dim=16, batch_size=16, lr=1e-2, epochs=6, paths_output=str(tmp_path / "run"))
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    spec = SynthSpec(pairs=64, val_pairs=32, latent_dim=4, video_width=8, text_width=8, seed=1)
    return Corpus(*generate_synthetic(spec))


# ============================================================
# Level 1: Config
# ============================================================

class TestLevel1:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.alpha == 0.2 and cfg.embed_dim == 2048 and cfg.batch_size == 64
        assert cfg.encoder_config().video_fused_width == 1024 + 8192
        assert cfg.encoder_config().text_fused_width == 768 + 4608

    def test_dotted_keys(self):
        keys = TrainConfig.keys()
        assert "video.smsdc.n" in keys and "smsdc.stacked" in keys and "paths.manifest" in keys

    def test_file_with_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# toy run\nalpha = 0.3\nsmsdc.stacked = false  # single stage\n\nvideo.smsdc.n = 3\n")
        cfg = load_config(path)
        assert cfg.alpha == 0.3
        assert cfg.smsdc_stacked is False
        assert cfg.video_smsdc_n == 3

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 10\n")
        cfg = load_config(path, ["epochs=2", "text.encoder=bigru"])
        assert cfg.epochs == 2 and cfg.text_encoder == "bigru"

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("learning_rate = 0.1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["smsdc.local=maybe"])
        with pytest.raises(ConfigError):
            load_config(overrides=["batch_size=two"])
        with pytest.raises(ConfigError):
            load_config(overrides=["batch_size=1"])
        with pytest.raises(ConfigError):
            load_config(overrides=["smsdc.sigma=gelu"])

    def test_line_without_equals(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("alpha 0.3\n")
        with pytest.raises(FormatError):
            load_config(path)

    def test_undecodable_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_bytes(b"epochs = 2\nalpha = \xff\n")
        with pytest.raises(FormatError) as info:
            load_config(path)
        assert info.value.offset == 19

    def test_toy_preset(self):
        cfg = TrainConfig.toy(epochs=3)
        assert cfg.video_d_in == 64 and cfg.text_d_model == 48 and cfg.epochs == 3
        assert load_config(base=cfg) is cfg

    def test_json_snapshot(self):
        cfg = TrainConfig.toy(alpha=0.35, smsdc_centered=True)
        assert TrainConfig.from_json(cfg.to_json()) == cfg


# ============================================================
# Level 2: Adam and the plateau schedule
# ============================================================

class TestLevel2:
    def test_zero_gradient_no_move(self):
        p = Tensor([1.0, -2.0])
        adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), 0.1)
        assert p.data.tolist() == [1.0, -2.0]

    def test_first_step_moves_by_lr(self):
        p = Tensor([0.5])
        adam_step({"p": p}, {"p": np.ones(1)}, AdamState(), 0.1)
        assert p.data[0] == pytest.approx(0.4, abs=1e-7)

    def test_minimizes_quadratic(self):
        p = Tensor([1.0])
        state = AdamState()
        for _ in range(500):
            adam_step({"p": p}, {"p": 2.0 * p.data}, state, 0.05)
        assert abs(p.data[0]) < 1e-2
        assert state.t == 500

    def test_missing_gradient_skipped(self):
        p, q = Tensor([1.0]), Tensor([1.0])
        state = adam_step({"p": p, "q": q}, {"p": np.ones(1), "q": None}, AdamState(), 0.1)
        assert q.data[0] == 1.0 and "q" not in state.m

    def test_nan_gradient(self):
        with pytest.raises(NumericalError) as info:
            adam_step({"p": Tensor([1.0])}, {"p": np.array([np.nan])}, AdamState(), 0.1)
        assert "p" in str(info.value)

    def test_improving_history_keeps_lr(self):
        assert lr_schedule([10.0, 20.0, 30.0, 40.0], 1e-3) == 1e-3

    @pytest.mark.parametrize("history, halved", [
        ([100.0, 99.0, 98.0, 97.0], True),
        ([100.0, 99.0, 98.0], False),
        ([100.0, 99.0, 98.0, 97.0, 96.0], False),
        ([50.0, 100.0, 100.0, 100.0, 100.0], True),
        ([100.0, 90.0, 101.0, 90.0, 90.0], False),
        ([1.0], False),
    ])
    def test_halving_cases(self, history, halved):
        assert lr_schedule(history, 0.5) == (0.25 if halved else 0.5)

    def test_repeated_halvings_exact(self):
        history = [100.0] + [90.0] * 9
        lr = 1e-3
        for epoch in range(1, len(history) + 1):
            lr = lr_schedule(history[:epoch], lr)
        assert lr == 1e-3 * 2 ** -3

    def test_empty_history(self):
        with pytest.raises(ConfigError):
            lr_schedule([], 0.1)


# ============================================================
# Level 3: Checkpoints
# ============================================================

class TestLevel3:
    def test_round_trip_bit_exact(self, tmp_path, corpus):
        cfg = tiny_config(tmp_path)
        model = Model(cfg.encoder_config(), cfg.embed_dim, cfg.seed)
        # move the BN running stats away from their initial values
        model.embed_videos([corpus.videos.features(v) for v in range(16)], "train")
        adam = AdamState()
        ckpt = Checkpoint.capture(model, cfg, adam, 4, 123.4, 5e-3)
        path = tmp_path / "c.smck"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.epoch == 4 and loaded.best_rsum == 123.4 and loaded.lr == 5e-3
        assert loaded.config == cfg
        clone = loaded.build_model()
        videos = [corpus.videos.features(v) for v in range(64, 72)]
        texts = [corpus.texts.features(c) for c in range(64, 72)]
        assert model.embed_videos(videos, "infer").data.tobytes() == clone.embed_videos(videos, "infer").data.tobytes()
        assert model.embed_texts(texts, "infer").data.tobytes() == clone.embed_texts(texts, "infer").data.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.smck"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        cfg = tiny_config(tmp_path)
        model = Model(cfg.encoder_config(), cfg.embed_dim, cfg.seed)
        path = tmp_path / "c.smck"
        save_checkpoint(Checkpoint.capture(model, cfg, AdamState(), 0, None, cfg.lr), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    @pytest.mark.parametrize("old, new", [
        (b'{"adam_t": 0,', b'{"adam_t"; 0,'),
        (b'"epoch"', b'"epoxh"'),
        (b"\x04\x00\x00\x00meta", b"\x04\x00\x00\x00\xffeta"),
        (b'"lr": 0.1}', b'"lr": \xff.1}'),
    ])
    def test_corrupt_records(self, tmp_path, old, new):
        cfg = tiny_config(tmp_path, lr=0.1)
        model = Model(cfg.encoder_config(), cfg.embed_dim, cfg.seed)
        path = tmp_path / "c.smck"
        save_checkpoint(Checkpoint.capture(model, cfg, AdamState(), 0, None, cfg.lr), path)
        blob = path.read_bytes()
        assert blob.count(old) == 1
        path.write_bytes(blob.replace(old, new))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_shape_mismatch_on_build(self, tmp_path):
        cfg = tiny_config(tmp_path)
        ckpt = Checkpoint.capture(Model(cfg.encoder_config(), cfg.embed_dim, 0), cfg, AdamState(), 0, None, 0.1)
        ckpt.config = tiny_config(tmp_path, embed_dim=12)
        with pytest.raises(DimensionError):
            ckpt.build_model()


# ============================================================
# Level 4: Training, evaluation and embedding
# ============================================================

class TestLevel4:
    def test_zero_epochs(self, tmp_path, corpus):
        cfg = tiny_config(tmp_path, epochs=0)
        result = train(cfg, corpus)
        assert result.history == []
        assert result.best.epoch == 0 and result.best.best_rsum is None
        assert (tmp_path / "run" / "train.log").read_text() == "epoch loss lr val_rsum best\n"
        assert load_checkpoint(result.checkpoint_path).params.keys() == result.best.params.keys()

    def test_training_improves_retrieval(self, tmp_path, corpus):
        cfg = tiny_config(tmp_path)
        untrained = Model(cfg.encoder_config(), cfg.embed_dim, cfg.seed)
        _, _, before = evaluate_model(untrained, corpus, corpus.split("val"))
        result = train(cfg, corpus)
        losses = [r.loss for r in result.history]
        assert len(losses) == 6
        assert min(losses[1:]) < losses[0]
        assert all(0.0 <= loss <= 2 * (cfg.alpha + 2) for loss in losses)
        assert result.best.best_rsum > before
        assert result.best.best_rsum == max(r.val_rsum for r in result.history)
        log = (tmp_path / "run" / "train.log").read_text().splitlines()
        assert len(log) == 7 and log[1].split()[0] == "1"

    def test_identical_runs_identical_bytes(self, tmp_path, corpus):
        runs = []
        for _ in range(2):
            result = train(tiny_config(tmp_path, epochs=2), corpus)
            report = render_records(*evaluate(result.checkpoint_path, "val", corpus))
            runs.append((result.checkpoint_path.read_bytes(), report))
        assert runs[0] == runs[1]

    def test_learns_synthetic_pairing(self, tmp_path):
        reduced = Corpus(*generate_synthetic(SynthSpec()))
        cfg = TrainConfig.toy(epochs=2, paths_output=str(tmp_path / "run"))
        _, _, untrained = evaluate_model(Model(cfg.encoder_config(), cfg.embed_dim, cfg.seed),
                                         reduced, reduced.split("val"))
        result = train(cfg, reduced)
        t2v, _, rsum = evaluate(result.best, "val", reduced)
        assert t2v.r_at[1] >= 0.70
        assert rsum >= 10 * untrained

    def test_evaluate_deterministic(self, tmp_path, corpus):
        result = train(tiny_config(tmp_path, epochs=1), corpus)
        a = evaluate(result.checkpoint_path, "val", corpus)
        b = evaluate(result.checkpoint_path, "val", corpus)
        assert a == b
        assert a[2] == pytest.approx(result.best.best_rsum)

    def test_embed_writes_feature_file(self, tmp_path, corpus):
        result = train(tiny_config(tmp_path, epochs=0), corpus)
        out = tmp_path / "text_joint.smdc"
        embed(result.best, "text", out, corpus)
        written = read_features(out)
        assert written.width == 16 and written.max_length == 1
        assert written.ids() == corpus.texts.ids()

    def test_embed_unknown_side(self, tmp_path, corpus):
        result = train(tiny_config(tmp_path, epochs=0), corpus)
        with pytest.raises(ConfigError):
            embed(result.best, "audio", tmp_path / "x.smdc", corpus)

    def test_load_corpus_checks_widths(self, tmp_path):
        paths = write_corpus(tmp_path / "data", *generate_synthetic(
            SynthSpec(pairs=4, val_pairs=2, video_width=8, text_width=6)))
        cfg = tiny_config(tmp_path, paths_video_features=str(paths["video"]),
                          paths_text_features=str(paths["text"]), paths_manifest=str(paths["manifest"]))
        with pytest.raises(DimensionError):
            load_corpus(cfg)

    def test_load_corpus_needs_paths(self, tmp_path):
        with pytest.raises(ConfigError):
            load_corpus(tiny_config(tmp_path))
