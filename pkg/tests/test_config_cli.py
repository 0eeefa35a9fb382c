"""Tests for run configuration loading and the command-line entry point."""

import csv
import json

import numpy as np
import pytest

import restore_cli
from diffusion.exceptions import ConfigError
from diffusion.guidance import GuidanceConfig, NoGuidance, sample_with_guidance
from diffusion.oracles import OracleResult
from utils.audio_utils import (
    ToyHarmonicConfig,
    Waveform,
    gen_toy_harmonic,
    read_mel_tensor,
    wav_read,
    wav_write,
    write_mel_tensor,
)
from utils.config_utils import LOG_LEVEL_ENV, RunConfig, load_run_config
from utils.model_factory import create_denoiser, load_checkpoint, save_checkpoint

TINY = [
    "--model.channels", "4",
    "--model.blocks", "2",
    "--model.fourier_features", "4",
    "--model.precision", "float64",
    "--schedule.num_steps", "5",
    "--run.progress", "false",
]


class TestRunConfig:
    def test_defaults(self):
        config = load_run_config()
        assert config.get("schedule.num_steps") == 200
        assert config.get("guidance.xi0") == 1.0
        assert config.schedule().num_steps == 200

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[guidance]\nxi0 = 3.5\nmode = reconstruction\n\n[run]\nseed = 7\n")
        config = load_run_config(path, {"guidance.xi0": "9", "run.output_dir": None})
        assert config.get("guidance.xi0") == 9.0
        assert config.get("guidance.mode") == "reconstruction"
        assert config.seed == 7
        assert config.get("run.output_dir") == "out"

    @pytest.mark.parametrize(
        "text",
        [
            "[nonsense]\nx = 1\n",
            "[guidance]\nnot_a_key = 1\n",
            "[guidance]\nxi0 = fast\n",
            "[run]\neval = maybe\n",
            "[guidance]\nmode = recon\n",
            "[guidance]\nxi_scaling = sigma\n",
        ],
    )
    def test_bad_files(self, tmp_path, text):
        path = tmp_path / "bad.ini"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.ini")

    @pytest.mark.parametrize(
        "overrides",
        [
            {"guidance.num_chains": "0"},
            {"model.precision": "float16"},
            {"lowpass.cutoff_hz": "8000"},
            {"guidance.mode": "magic"},
            {"schedule.beta_max": "1.5"},
            {"run.log_level": "LOUD"},
            {"sample.count": "0"},
        ],
    )
    def test_invalid_values(self, overrides):
        with pytest.raises(ConfigError):
            load_run_config(overrides=overrides)

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"guidance.strength": "1"})

    def test_booleans(self):
        assert load_run_config(overrides={"run.degrade": "yes"}).get("run.degrade") is True
        assert load_run_config(overrides={"run.eval": "off"}).get("run.eval") is False

    def test_ini_round_trip(self, tmp_path):
        config = load_run_config(overrides={"guidance.xi0": "2.5", "run.degrade": "true", "io.input": "a.wav"})
        path = tmp_path / "effective.ini"
        path.write_text(config.to_ini())
        assert load_run_config(path).values == config.values

    def test_env_log_level(self, monkeypatch):
        monkeypatch.setenv(LOG_LEVEL_ENV, "debug")
        assert RunConfig().log_level() == "DEBUG"

    def test_typed_settings(self):
        config = load_run_config(overrides={"mel.fmax": "6000", "lowpass.cutoff_hz": "3000"})
        assert config.mel_spec().fmax_hz == 6000.0
        assert config.lowpass_spec().cutoff_hz == 3000.0
        assert config.train_config().segment_length == 8000


@pytest.fixture
def workspace(tmp_path):
    """Output dir, checkpoint path and two short toy recordings."""
    out = tmp_path / "out"
    checkpoint = tmp_path / "model.npz"
    waves = gen_toy_harmonic(ToyHarmonicConfig(duration=0.1, seed=4), 2)
    inputs = []
    for i, wave in enumerate(waves):
        path = tmp_path / f"clean{i}.wav"
        wav_write(path, Waveform(wave, 16000))
        inputs.append(path)
    base = TINY + ["--run.output_dir", str(out), "--model.checkpoint", str(checkpoint)]
    return {"out": out, "checkpoint": checkpoint, "inputs": inputs, "base": base, "tmp": tmp_path}


def _written(ws, command):
    return sorted(p.name for p in ws["out"].glob(f"{command}_*"))


def _train(ws):
    args = ws["base"] + [
        "--train.max_steps", "2",
        "--train.num_examples", "4",
        "--train.batch_size", "2",
        "--train.segment_seconds", "0.05",
        "--data.duration", "0.1",
    ]
    return restore_cli.main(["train"] + args)


class TestCommands:
    def test_train_writes_checkpoint_and_history(self, workspace):
        assert _train(workspace) == 0
        assert workspace["checkpoint"].is_file()
        with (workspace["out"] / "loss_history.csv").open() as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "loss"]
        assert len(rows) == 3
        assert (workspace["out"] / "train_config.ini").is_file()

    def test_sample(self, workspace):
        assert _train(workspace) == 0
        code = restore_cli.main(["sample"] + workspace["base"] + ["--sample.count", "2", "--sample.seconds", "0.01"])
        assert code == 0
        for i in range(2):
            assert wav_read(workspace["out"] / f"sample_{i:03d}.wav").samples.size == 160
        assert (workspace["out"] / "sample_trace.csv").is_file()

    def test_bwe_with_degrade(self, workspace):
        assert _train(workspace) == 0
        args = ["bwe"] + workspace["base"] + ["--io.input", str(workspace["inputs"][0]), "--run.degrade", "true"]
        assert restore_cli.main(args) == 0
        out = workspace["out"]
        assert wav_read(out / "bwe_restored.wav").samples.size == 1600
        assert (out / "bwe_input.wav").is_file()
        metrics = json.loads((out / "bwe_metrics.json").read_text())
        assert metrics["task"] == "bwe"
        assert {"lsd_low_band", "input_lsd"} <= set(metrics["extras"])

    def test_declip_multiple_chains(self, workspace):
        assert _train(workspace) == 0
        args = ["declip"] + workspace["base"] + [
            "--io.input", str(workspace["inputs"][0]),
            "--run.degrade", "true",
            "--clip.target_sdr_db", "10",
            "--guidance.num_chains", "2",
        ]
        assert restore_cli.main(args) == 0
        out = workspace["out"]
        assert (out / "declip_restored_0.wav").is_file()
        assert (out / "declip_restored_1.wav").is_file()
        assert json.loads((out / "declip_metrics.json").read_text())["extras"]["clip_threshold"] < 0.95

    def test_vocode_from_wav_then_from_mel(self, workspace):
        assert _train(workspace) == 0
        out = workspace["out"]
        args = ["vocode"] + workspace["base"] + ["--io.input", str(workspace["inputs"][0]), "--run.degrade", "true"]
        assert restore_cli.main(args) == 0
        mel_path = out / "vocode_input.melt"
        assert read_mel_tensor(mel_path).shape == (80, 8)
        assert wav_read(out / "vocode_restored.wav").samples.size == 7 * 256

        args = ["vocode"] + workspace["base"] + ["--io.input", str(mel_path), "--run.eval", "false"]
        assert restore_cli.main(args) == 0

    def test_vocode_wav_without_degrade_is_config_error(self, workspace):
        assert _train(workspace) == 0
        args = ["vocode"] + workspace["base"] + ["--io.input", str(workspace["inputs"][0])]
        assert restore_cli.main(args) == 2
        assert _written(workspace, "vocode") == []

    def test_separate_with_degrade(self, workspace):
        assert _train(workspace) == 0
        a, b = workspace["inputs"]
        args = ["separate"] + workspace["base"] + ["--io.input", str(a), "--io.input2", str(b), "--run.degrade", "true"]
        assert restore_cli.main(args) == 0
        out = workspace["out"]
        for name in ("separate_mixture.wav", "separated_1.wav", "separated_2.wav", "separate_trace.csv"):
            assert (out / name).is_file()
        assert "swapped" in json.loads((out / "separate_metrics.json").read_text())["extras"]


    @pytest.mark.parametrize("command", ["sample", "bwe", "declip"])
    def test_same_seed_gives_identical_files(self, workspace, command):
        assert _train(workspace) == 0
        extra = ["--run.seed", "5", "--sample.count", "2", "--sample.seconds", "0.01"]
        if command != "sample":
            extra += ["--io.input", str(workspace["inputs"][0]), "--run.degrade", "true"]
        outputs = []
        for run in ("a", "b"):
            out = workspace["tmp"] / run
            assert restore_cli.main([command] + workspace["base"] + extra + ["--run.output_dir", str(out)]) == 0
            outputs.append(out)
        wavs = sorted(p.name for p in outputs[0].glob("*.wav"))
        assert wavs
        for name in wavs:
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()

    def test_declip_without_guidance_is_the_unconditional_sample(self, workspace):
        assert _train(workspace) == 0
        args = ["declip"] + workspace["base"] + [
            "--io.input", str(workspace["inputs"][0]),
            "--run.degrade", "true",
            "--run.seed", "11",
            "--guidance.xi0", "0",
        ]
        assert restore_cli.main(args) == 0

        model = load_checkpoint(workspace["checkpoint"], precision="float64")
        unconditional, _ = sample_with_guidance(
            model, model.schedule, (1600,), NoGuidance(), GuidanceConfig(mode="none", seed=11)
        )
        expected = workspace["tmp"] / "unconditional.wav"
        wav_write(expected, Waveform(unconditional, 16000))
        assert (workspace["out"] / "declip_restored.wav").read_bytes() == expected.read_bytes()


class TestExitCodes:
    def test_unknown_flag(self, workspace):
        with pytest.raises(SystemExit) as exc:
            restore_cli.main(["sample", "--guidance.strength", "2"])
        assert exc.value.code == 2

    def test_bad_value(self, workspace):
        assert restore_cli.main(["sample"] + workspace["base"] + ["--guidance.xi0", "lots"]) == 2

    def test_missing_checkpoint(self, workspace):
        args = ["bwe"] + workspace["base"] + ["--io.input", str(workspace["inputs"][0])]
        assert restore_cli.main(args) == 2

    def test_missing_input(self, workspace):
        assert _train(workspace) == 0
        args = ["bwe"] + workspace["base"] + ["--io.input", str(workspace["tmp"] / "absent.wav")]
        assert restore_cli.main(args) == 2

    def test_separate_degrade_needs_second_source(self, workspace):
        assert _train(workspace) == 0
        args = ["separate"] + workspace["base"] + ["--io.input", str(workspace["inputs"][0]), "--run.degrade", "true"]
        assert restore_cli.main(args) == 2

    def test_unreadable_wav(self, workspace):
        assert _train(workspace) == 0
        bad = workspace["tmp"] / "bad.wav"
        bad.write_text("not audio")
        assert restore_cli.main(["bwe"] + workspace["base"] + ["--io.input", str(bad)]) == 3

    def test_sample_rate_mismatch(self, workspace):
        assert _train(workspace) == 0
        path = workspace["tmp"] / "eight_k.wav"
        wav_write(path, Waveform(0.1 * np.ones(1600), 8000))
        assert restore_cli.main(["declip"] + workspace["base"] + ["--io.input", str(path)]) == 3

    def test_non_finite_checkpoint(self, workspace):
        model = create_denoiser(restore_cli.load_run_config(overrides={"schedule.num_steps": "5"}).schedule(),
                                channels=4, blocks=2, fourier_features=4)
        flat = model.get_flat_params()
        flat[-1] = np.nan
        model.set_flat_params(flat)
        save_checkpoint(workspace["checkpoint"], model)
        code = restore_cli.main(["sample"] + workspace["base"] + ["--sample.count", "1", "--sample.seconds", "0.01"])
        assert code == 4

    def test_oracle_failure(self, workspace, monkeypatch):
        monkeypatch.setattr(restore_cli, "run_oracle_suites", lambda quick, seed: [OracleResult("x", False, 2.0, 1.0)])
        assert restore_cli.main(["oracle_check", "--run.output_dir", str(workspace["out"])]) == 4
        record = json.loads((workspace["out"] / "oracle_report.jsonl").read_text().splitlines()[0])
        assert record["passed"] is False

    def test_oracle_success(self, workspace, monkeypatch):
        monkeypatch.setattr(restore_cli, "run_oracle_suites", lambda quick, seed: [OracleResult("x", True, 0.0, 1.0)])
        assert restore_cli.main(["oracle_check", "--run.output_dir", str(workspace["out"])]) == 0

    def test_schedule_mismatch_writes_nothing(self, workspace):
        assert _train(workspace) == 0
        args = ["bwe"] + workspace["base"] + [
            "--io.input", str(workspace["inputs"][0]),
            "--run.degrade", "true",
            "--schedule.num_steps", "6",
        ]
        assert restore_cli.main(args) == 2
        assert _written(workspace, "bwe") == []

    def test_truncated_checkpoint(self, workspace):
        assert _train(workspace) == 0
        with np.load(workspace["checkpoint"], allow_pickle=False) as data:
            contents = {name: data[name] for name in data.files}
        contents["params"] = contents["params"][:-1]
        with workspace["checkpoint"].open("wb") as f:
            np.savez(f, **contents)
        args = ["declip"] + workspace["base"] + ["--io.input", str(workspace["inputs"][0]), "--run.degrade", "true"]
        assert restore_cli.main(args) == 2
        assert _written(workspace, "declip") == []

    def test_mel_tensor_with_wrong_band_count(self, workspace):
        assert _train(workspace) == 0
        path = workspace["tmp"] / "forty_bands.melt"
        write_mel_tensor(path, np.zeros((40, 8)))
        assert restore_cli.main(["vocode"] + workspace["base"] + ["--io.input", str(path)]) == 3
        assert _written(workspace, "vocode") == []

    def test_unequal_sources(self, workspace):
        assert _train(workspace) == 0
        short = workspace["tmp"] / "short.wav"
        wav_write(short, Waveform(0.1 * np.ones(800), 16000))
        args = ["separate"] + workspace["base"] + [
            "--io.input", str(workspace["inputs"][0]),
            "--io.input2", str(short),
            "--run.degrade", "true",
        ]
        assert restore_cli.main(args) == 3
        assert _written(workspace, "separate") == []

    def test_guidance_mode_that_cannot_run_the_task(self, workspace):
        assert _train(workspace) == 0
        args = ["declip"] + workspace["base"] + [
            "--io.input", str(workspace["inputs"][0]),
            "--run.degrade", "true",
            "--guidance.mode", "separation",
        ]
        assert restore_cli.main(args) == 2
        assert _written(workspace, "declip") == []
