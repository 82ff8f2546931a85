"""Command-line interface: argument handling, outputs, and exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from gridflow.cli import main
from gridflow.conditioner import MelConfig
from gridflow.io import DatasetEntry, ModelConfig, write_dataset_manifest
from gridflow.model import build_model, save_checkpoint
from gridflow.signal import Waveform, read_wav, write_wav

TINY_CONFIG = {
    "height": 4,
    "n_flows": 1,
    "n_layers": 2,
    "residual_channels": 4,
    "conditioned": False,
}


@pytest.fixture
def corpus(tmp_path):
    """Two short sine files, a manifest, and a tiny config on disk."""
    rng = np.random.default_rng(0)
    entries = []
    for i, freq in enumerate((220.0, 330.0)):
        t = np.arange(4096) / 22050.0
        x = 0.3 * np.sin(2 * np.pi * freq * t) + 0.01 * rng.standard_normal(4096)
        p = tmp_path / f"u{i}.wav"
        write_wav(p, Waveform(x, 22050))
        entries.append(DatasetEntry(path=str(p), duration=4096 / 22050.0))
    manifest = tmp_path / "data.ndjson"
    write_dataset_manifest(manifest, entries)
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY_CONFIG))
    return tmp_path, manifest, config


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestPresetsCommand:
    def test_lists_names(self, capsys):
        assert run_cli("presets") == 0
        out = capsys.readouterr().out
        assert "wf-h16-c64" in out and "wf-h64-c64" in out

    def test_json(self, capsys):
        assert run_cli("presets", "--json") == 0
        d = json.loads(capsys.readouterr().out)
        assert len(d["presets"]) == 6


class TestVerifyCommand:
    def test_fast_level_passes(self, capsys):
        assert run_cli("verify", "--level", "fast") == 0
        out = capsys.readouterr().out
        assert "[pass]" in out and "[FAIL]" not in out

    def test_json_structure(self, capsys):
        assert run_cli("verify", "--level", "fast", "--json") == 0
        d = json.loads(capsys.readouterr().out)
        assert d["passed"] is True
        assert all(c["passed"] for c in d["checks"])


class TestTrainSynthLoglik:
    def test_full_pipeline(self, corpus, capsys):
        tmp_path, manifest, config = corpus
        out_dir = tmp_path / "run"
        code = run_cli(
            "train",
            "--config", config,
            "--data", manifest,
            "--out-dir", out_dir,
            "--steps", 2,
            "--batch", 2,
            "--clip", 512,
            "--checkpoint-interval", 2,
            "--precision", "fp64",
        )
        assert code == 0
        ckpt = out_dir / "ckpt-000002"
        assert (out_dir / "ckpt-000002.manifest.json").exists()

        # likelihood of one of the training files
        code = run_cli(
            "loglik", "--checkpoint", ckpt, "--wav", tmp_path / "u0.wav", "--json"
        )
        assert code == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert np.isfinite(report["total"])
        assert report["n_dims"] == 4096

        # unconditioned synthesis to a playable file
        wav_out = tmp_path / "gen.wav"
        code = run_cli(
            "synth",
            "--checkpoint", ckpt,
            "--samples", 200,
            "--out", wav_out,
            "--json",
        )
        assert code == 0
        info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert info["n_samples"] == 200
        assert info["row_steps"] == 4  # one flow, four grid rows
        generated = read_wav(wav_out)
        assert len(generated) == 200

    def test_train_json_metrics(self, corpus, capsys):
        tmp_path, manifest, config = corpus
        code = run_cli(
            "train",
            "--config", config,
            "--data", manifest,
            "--out-dir", tmp_path / "run2",
            "--steps", 2,
            "--batch", 1,
            "--clip", 512,
            "--json",
        )
        assert code == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
        record = json.loads(lines[-1])
        assert record["step"] == 2
        assert np.isfinite(record["loss"])

    def test_resume_continues_step_counter(self, corpus, capsys):
        tmp_path, manifest, config = corpus
        run_cli(
            "train", "--config", config, "--data", manifest,
            "--out-dir", tmp_path / "r1", "--steps", 2, "--batch", 1,
            "--clip", 512, "--checkpoint-interval", 2,
        )
        code = run_cli(
            "train", "--config", config, "--data", manifest,
            "--out-dir", tmp_path / "r2", "--steps", 2, "--batch", 1,
            "--clip", 512, "--checkpoint-interval", 2,
            "--resume", tmp_path / "r1" / "ckpt-000002",
        )
        assert code == 0
        assert (tmp_path / "r2" / "ckpt-000004.manifest.json").exists()
        capsys.readouterr()


class TestMelCommand:
    def test_writes_tensor_file(self, corpus, capsys):
        tmp_path, _, _ = corpus
        out = tmp_path / "mel-u0"
        assert run_cli("mel", "--wav", tmp_path / "u0.wav", "--out", out, "--json") == 0
        info = json.loads(capsys.readouterr().out)
        assert info["n_frames"] == 16  # ceil(4096 / 256)
        assert info["n_mels"] == 80
        from gridflow.io import load_tensors

        tensors, manifest = load_tensors(out)
        assert tensors["mel"].shape == (16, 80)
        assert manifest["n_samples"] == 4096

    def test_config_selects_analysis_geometry(self, corpus, capsys):
        tmp_path, _, _ = corpus
        cfg = dict(TINY_CONFIG)
        cfg["mel"] = {"n_mels": 8, "n_fft": 64, "hop": 16, "win": 64}
        config_path = tmp_path / "mel-cfg.json"
        config_path.write_text(json.dumps(cfg))
        out = tmp_path / "mel-tiny"
        assert (
            run_cli(
                "mel", "--wav", tmp_path / "u0.wav", "--out", out,
                "--config", config_path, "--json",
            )
            == 0
        )
        info = json.loads(capsys.readouterr().out)
        assert info["n_frames"] == 256  # ceil(4096 / 16)
        assert info["n_mels"] == 8


class TestConditionedSynth:
    def _save_conditioned(self, tmp_path):
        cfg = ModelConfig(
            height=4,
            n_flows=2,
            n_layers=2,
            residual_channels=4,
            conditioned=True,
        )
        model = build_model(cfg, seed=0)
        save_checkpoint(model, tmp_path / "cond-ck")
        return tmp_path / "cond-ck"

    def test_wav_conditioning(self, corpus, capsys):
        tmp_path, _, _ = corpus
        ckpt = self._save_conditioned(tmp_path)
        out = tmp_path / "cond-gen.wav"
        code = run_cli(
            "synth", "--checkpoint", ckpt, "--wav", tmp_path / "u0.wav",
            "--out", out, "--json",
        )
        assert code == 0
        info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert info["n_samples"] == 4096

    def test_mel_file_conditioning(self, corpus, capsys):
        tmp_path, _, _ = corpus
        ckpt = self._save_conditioned(tmp_path)
        mel_base = tmp_path / "mel-u0"
        run_cli("mel", "--wav", tmp_path / "u0.wav", "--out", mel_base)
        out = tmp_path / "mel-gen.wav"
        code = run_cli(
            "synth", "--checkpoint", ckpt, "--mel", mel_base, "--out", out,
        )
        assert code == 0
        assert len(read_wav(out)) == 4096
        capsys.readouterr()

    def test_missing_conditioning_is_validation_error(self, corpus, capsys):
        tmp_path, _, _ = corpus
        ckpt = self._save_conditioned(tmp_path)
        code = run_cli("synth", "--checkpoint", ckpt, "--out", tmp_path / "x.wav")
        assert code == 1
        assert "mel" in capsys.readouterr().err


class TestBenchCommand:
    def test_fresh_model_report(self, corpus, capsys):
        _, _, config = corpus
        code = run_cli("bench", "--config", config, "--seconds", "0.01", "--json")
        assert code == 0
        d = json.loads(capsys.readouterr().out)
        assert d["n_flows"] == 1
        assert d["speedup"] > 0
        assert d["real_time_factor"] > 0

    def test_needs_model_source(self, capsys):
        assert run_cli("bench") == 1
        assert "needs" in capsys.readouterr().err


class TestExitCodes:
    def test_missing_checkpoint_is_one(self, tmp_path, capsys):
        code = run_cli(
            "loglik", "--checkpoint", tmp_path / "none", "--wav", tmp_path / "x.wav"
        )
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_preset_is_one(self, tmp_path, capsys):
        code = run_cli(
            "train", "--config", "wf-h9999", "--data", tmp_path / "d.ndjson",
            "--out-dir", tmp_path,
        )
        assert code == 1
        capsys.readouterr()

    def test_numerical_abort_is_two(self, corpus, capsys):
        tmp_path, _, _ = corpus
        cfg = ModelConfig(**TINY_CONFIG)
        model = build_model(cfg, seed=0)
        model.stack.nets[0].out_head.data[0, 0, 0, 0] = np.inf
        save_checkpoint(model, tmp_path / "bad-ck")
        with np.errstate(invalid="ignore"):
            code = run_cli(
                "loglik", "--checkpoint", tmp_path / "bad-ck",
                "--wav", tmp_path / "u0.wav",
            )
        assert code == 2
        assert "numerical" in capsys.readouterr().err

    def test_no_command_prints_help(self, capsys):
        assert run_cli() == 0
        assert "usage" in capsys.readouterr().out


class TestInstalledEntryPoint:
    def test_console_script(self):
        proc = subprocess.run(["gridflow", "presets"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "wf-h16-c64" in proc.stdout
