"""
Tests for the command-line surface (Retrieval Project, Level 8)
Run: pytest test_cli.py -k "TestLevel1" -v
"""

import pytest

from cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from data_io import read_features, read_manifest

TINY = ["video.d_in=8", "video.hidden=4", "video.smsdc.n=2", "video.smsdc.m=1", "text.d_model=8",
        "text.heads=2", "text.ffn=16", "text.layers=1", "text.smsdc.n=2", "text.smsdc.m=1",
        "embed_dim=16", "batch_size=8"]


def synth(out):
    return main(["synth-data", "--out", str(out), "--spec", "pairs=16", "val_pairs=8",
                 "latent_dim=4", "video_width=8", "text_width=8"])


def write_config(tmp_path, data, **extra):
    lines = [f"paths.video_features = {data / 'video.smdc'}",
             f"paths.text_features = {data / 'text.smdc'}",
             f"paths.manifest = {data / 'manifest.tsv'}",
             f"paths.output = {tmp_path / 'run'}"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def overrides():
    return [arg for pair in TINY for arg in ("--override", pair)]


# ============================================================
# Level 1: Usage errors
# ============================================================

class TestLevel1:
    def test_train_needs_config(self):
        with pytest.raises(SystemExit) as info:
            main(["train"])
        assert info.value.code == EXIT_USAGE

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["evaluate", "--checkpoint", "x.smck", "--colour"])
        assert info.value.code == EXIT_USAGE

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            main(["serve"])
        assert info.value.code == EXIT_USAGE

    def test_bad_synth_spec(self, tmp_path):
        assert main(["synth-data", "--out", str(tmp_path), "--spec", "colour=red"]) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("learning_rate = 1\n")
        assert main(["train", "--config", str(path)]) == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path):
        assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.smck")]) == EXIT_DATA

    def test_corrupt_checkpoint(self, tmp_path):
        path = tmp_path / "bad.smck"
        path.write_bytes(b"garbage")
        assert main(["evaluate", "--checkpoint", str(path)]) == EXIT_DATA

    def test_undecodable_config_is_data_error(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_bytes(b"alpha = \xff\n")
        assert main(["train", "--config", str(path)]) == EXIT_DATA

    def test_corrupt_checkpoint_meta(self, tmp_path):
        data = tmp_path / "data"
        assert synth(data) == EXIT_OK
        config = write_config(tmp_path, data, epochs=0)
        assert main(["train", "--config", str(config), *overrides()]) == EXIT_OK
        checkpoint = tmp_path / "run" / "best.smck"
        blob = checkpoint.read_bytes()
        checkpoint.write_bytes(blob.replace(b'{"adam_t": 0,', b'{"adam_t"; 0,'))
        assert main(["evaluate", "--checkpoint", str(checkpoint)]) == EXIT_DATA


# ============================================================
# Level 2: Commands end to end
# ============================================================

class TestLevel2:
    def test_synth_data_writes_corpus(self, tmp_path, capsys):
        assert synth(tmp_path) == EXIT_OK
        videos, texts = read_features(tmp_path / "video.smdc"), read_features(tmp_path / "text.smdc")
        manifests = read_manifest(tmp_path / "manifest.tsv", videos, texts)
        assert len(manifests["train"].entries) == 16 and len(manifests["val"].entries) == 8
        assert "least-squares pairing accuracy" in capsys.readouterr().out

    def test_grad_check_loss(self, capsys):
        assert main(["grad-check", "--module", "loss"]) == EXIT_OK
        assert capsys.readouterr().out.split()[-1] == "ok"

    def test_grad_check_video_encoder(self, capsys):
        assert main(["grad-check", "--module", "video_encoder"]) == EXIT_OK
        assert capsys.readouterr().out.split()[-1] == "ok"

    def test_train_evaluate_embed(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert synth(data) == EXIT_OK
        config = write_config(tmp_path, data, epochs=1)
        assert main(["train", "--config", str(config), *overrides()]) == EXIT_OK
        checkpoint = tmp_path / "run" / "best.smck"
        assert checkpoint.exists()
        capsys.readouterr()

        assert main(["evaluate", "--checkpoint", str(checkpoint), "--split", "val"]) == EXIT_OK
        header, values = capsys.readouterr().out.strip().splitlines()
        assert header.split()[-1] == "RSum" and len(values.split()) == 13

        assert main(["evaluate", "--checkpoint", str(checkpoint), "--records"]) == EXIT_OK
        assert capsys.readouterr().out.strip().splitlines()[-1].startswith("all RSum ")

        out = tmp_path / "video_joint.smdc"
        assert main(["embed", "--checkpoint", str(checkpoint), "--side", "video", "--out", str(out)]) == EXIT_OK
        written = read_features(out)
        assert written.width == 16 and len(written.items) == 24

    def test_width_mismatch_is_data_error(self, tmp_path):
        data = tmp_path / "data"
        assert synth(data) == EXIT_OK
        config = write_config(tmp_path, data, epochs=1)
        # default text.d_model is 768, the corpus has width 8
        assert main(["train", "--config", str(config), "--override", "video.d_in=8"]) == 2

    def test_undecodable_manifest_is_data_error(self, tmp_path):
        data = tmp_path / "data"
        assert synth(data) == EXIT_OK
        manifest = data / "manifest.tsv"
        manifest.write_bytes(b"# \xff\n" + manifest.read_bytes())
        config = write_config(tmp_path, data, epochs=1)
        assert main(["train", "--config", str(config), *overrides()]) == EXIT_DATA
