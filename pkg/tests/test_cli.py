"""End-to-end CLI tests at tiny scale."""

import numpy as np
import pytest
import yaml

from wmse.cli import main
from wmse.data import load_wav, philox, save_wav, synthesize_corpus, write_corpus


def run_cli(*argv, capsys=None):
    return main([str(a) for a in argv])


@pytest.fixture
def tiny_config(tmp_path):
    def make(**overrides):
        cfg = {
            "task": "iem",
            "output_dir": str(tmp_path / "run"),
            "corpus": {"n_train": 3, "n_test": 2, "segment_length": 2400, "seed": 1},
            "model": {"name": "FCN-55", "channels": 4},
            "train": {"max_epochs": 2, "batch_size": 2, "seed": 1,
                      "run_all_epochs": True},
        }
        for key, value in overrides.items():
            if isinstance(value, dict):
                cfg.setdefault(key, {}).update(value)
            else:
                cfg[key] = value
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(cfg))
        return path
    return make


class TestGenerate:
    def test_writes_corpus(self, tmp_path):
        rc = run_cli("generate", "--task", "iem", "--n", 2, "--seed", 3,
                     "--segment-length", 2400, "--out", tmp_path / "c")
        assert rc == 0
        assert (tmp_path / "c" / "manifest.jsonl").exists()
        assert (tmp_path / "c" / "utt0000_ch1.wav").exists()

    def test_same_seed_identical_manifest(self, tmp_path):
        for d in ("a", "b"):
            assert run_cli("generate", "--task", "dm", "--n", 2, "--seed", 7,
                           "--segment-length", 2400, "--out", tmp_path / d) == 0
        assert ((tmp_path / "a" / "manifest.jsonl").read_bytes()
                == (tmp_path / "b" / "manifest.jsonl").read_bytes())


class TestTrainCommand:
    def test_train_writes_checkpoint_and_echo(self, tmp_path, tiny_config):
        cfg = tiny_config()
        assert run_cli("train", "--config", cfg) == 0
        out = tmp_path / "run"
        assert (out / "model.wmse").exists()
        assert (out / "trainlog.csv").exists()
        echoed = yaml.safe_load((out / "config.yaml").read_text())
        assert echoed["corpus"]["segment_length"] == 2400
        assert echoed["train"]["learning_rate"] == 0.001   # defaults echoed

    def test_unknown_key_rejected(self, tmp_path, tiny_config, capsys):
        cfg = tiny_config(train={"momentum": 0.9})
        assert run_cli("train", "--config", cfg) == 2
        assert "error: config:" in capsys.readouterr().err

    def test_bad_task_rejected(self, tmp_path, tiny_config, capsys):
        cfg = tiny_config(task="studio")
        assert run_cli("train", "--config", cfg) == 2
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1


class TestEnhance:
    @pytest.fixture
    def checkpoint(self, tmp_path, tiny_config):
        run_cli("train", "--config", tiny_config())
        return tmp_path / "run" / "model.wmse"

    def test_enhances_two_mono_files(self, tmp_path, checkpoint):
        seg = synthesize_corpus("iem", 1, 5, 2400)[0]
        ins = []
        for c in range(2):
            p = tmp_path / f"ch{c}.wav"
            save_wav(p, seg.channels[c])
            ins.append(p)
        out = tmp_path / "enh.wav"
        assert run_cli("enhance", "--checkpoint", checkpoint,
                       "--in", *ins, "--out", out) == 0
        wf = load_wav(out)
        assert len(wf) == 2400
        assert np.max(np.abs(wf.samples)) <= 1.0

    def test_channel_mismatch_error(self, tmp_path, checkpoint, capsys):
        p = tmp_path / "mono.wav"
        save_wav(p, np.zeros(2400) + 0.1)
        assert run_cli("enhance", "--checkpoint", checkpoint,
                       "--in", p, "--out", tmp_path / "x.wav") == 2
        assert "channel-mismatch" in capsys.readouterr().err

    def test_corrupt_checkpoint_error(self, tmp_path, checkpoint, capsys):
        raw = bytearray(checkpoint.read_bytes())
        raw[-1] ^= 0x01
        bad = tmp_path / "bad.wmse"
        bad.write_bytes(bytes(raw))
        p = tmp_path / "c0.wav"
        save_wav(p, np.zeros(2400))
        assert run_cli("enhance", "--checkpoint", bad,
                       "--in", p, p, "--out", tmp_path / "x.wav") == 2
        assert "checksum" in capsys.readouterr().err


class TestEvaluate:
    def test_metrics_csv(self, tmp_path, tiny_config):
        run_cli("train", "--config", tiny_config())
        corpus_dir = tmp_path / "testset"
        write_corpus(synthesize_corpus("iem", 2, 77, 2400), corpus_dir)
        out = tmp_path / "metrics.csv"
        assert run_cli("evaluate", "--checkpoint", tmp_path / "run" / "model.wmse",
                       "--corpus", corpus_dir, "--out", out) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "utterance_id,stoi,mse"
        assert len(lines) == 4                     # 2 utterances + header + mean


class TestAnalyze:
    def test_filters_and_features(self, tmp_path, tiny_config):
        run_cli("train", "--config", tiny_config(model={"name": "SincFCN-251",
                                                        "channels": 4}))
        ck = tmp_path / "run" / "model.wmse"
        assert run_cli("analyze", "--checkpoint", ck, "--what", "filters",
                       "--out", tmp_path / "filt") == 0
        assert (tmp_path / "filt" / "filters.csv").exists()
        wav = tmp_path / "probe.wav"
        save_wav(wav, 0.5 * np.sin(2 * np.pi * 440 * np.arange(2400) / 16000))
        assert run_cli("analyze", "--checkpoint", ck, "--what", "features",
                       "--wav", wav, "--out", tmp_path / "feat") == 0
        assert (tmp_path / "feat" / "features.png").exists()

    def test_features_require_wav(self, tmp_path, tiny_config, capsys):
        run_cli("train", "--config", tiny_config())
        assert run_cli("analyze", "--checkpoint", tmp_path / "run" / "model.wmse",
                       "--what", "features", "--out", tmp_path / "f") == 2
        assert "error: usage" in capsys.readouterr().err


class TestCompare:
    def test_grid_csv_with_means(self, tmp_path):
        out = tmp_path / "cmp.csv"
        rc = run_cli("compare", "--task", "iem", "--models", "FCN-55,FCN-55@1",
                     "--seeds", 1, "--n-train", 3, "--n-test", 2,
                     "--segment-length", 2400, "--epochs", 1, "--out", out)
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "model,seed,mean_stoi,mean_mse,best_val_mse"
        assert len(lines) == 5                     # 2 runs + 2 means + header
        assert sum(",mean," in l for l in lines) == 2

    def test_idempotent(self, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{tag}.csv"
            run_cli("compare", "--task", "iem", "--models", "FCN-55",
                    "--seeds", 1, "--n-train", 3, "--n-test", 2,
                    "--segment-length", 2400, "--epochs", 1, "--out", out)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
