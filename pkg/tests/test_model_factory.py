"""Tests for denoiser creation and checkpoint persistence."""

import json

import numpy as np
import pytest

from diffusion.exceptions import ConfigError
from diffusion.schedule import make_linear_schedule
from utils.config_utils import RunConfig
from utils.model_factory import create_denoiser, create_denoiser_from_config, load_checkpoint, save_checkpoint


def _rewrite(path, **arrays):
    """Replace arrays inside a saved checkpoint."""
    with np.load(path, allow_pickle=False) as data:
        contents = {name: data[name] for name in data.files}
    contents.update(arrays)
    with path.open("wb") as f:
        np.savez(f, **contents)


@pytest.fixture
def model():
    m = create_denoiser(make_linear_schedule(50), channels=4, blocks=2, fourier_features=4, seed=2, precision="float64")
    m.set_flat_params(np.random.default_rng(0).standard_normal(m.num_parameters) * 0.1)
    return m


class TestCreate:
    def test_precision(self):
        m = create_denoiser(make_linear_schedule(10), channels=2, blocks=1, fourier_features=2, precision="float32")
        assert m.params["in_w"].dtype == np.float32
        with pytest.raises(ConfigError):
            create_denoiser(make_linear_schedule(10), precision="float16")

    def test_from_config(self):
        config = RunConfig()
        config.set("model.channels", "6")
        config.set("model.blocks", "3")
        m = create_denoiser_from_config(config, config.schedule())
        assert (m.channels, m.blocks, m.fourier_features) == (6, 3, 16)


class TestCheckpoint:
    def test_round_trip(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "ckpt" / "model.ckpt", model)
        assert path == tmp_path / "ckpt" / "model.ckpt"
        assert path.is_file()

        loaded = load_checkpoint(path, expected_schedule=make_linear_schedule(50), precision="float64")
        np.testing.assert_array_equal(loaded.get_flat_params(), model.get_flat_params())
        np.testing.assert_array_equal(loaded.fourier_freqs, model.fourier_freqs)
        assert loaded.schedule.params() == model.schedule.params()

        x = np.random.default_rng(1).standard_normal((2, 40))
        np.testing.assert_array_equal(loaded.predict_eps(x, 17), model.predict_eps(x, 17))

    def test_float32_inference(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "model.npz", model)
        loaded = load_checkpoint(path)
        x = np.random.default_rng(2).standard_normal(40)
        np.testing.assert_allclose(loaded.predict_eps(x, 5), model.predict_eps(x, 5), rtol=1e-4, atol=1e-5)

    def test_schedule_mismatch(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "model.npz", model)
        with pytest.raises(ConfigError):
            load_checkpoint(path, expected_schedule=make_linear_schedule(200))

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.npz")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_text("junk")
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_missing_arrays(self, tmp_path):
        path = tmp_path / "partial.npz"
        with path.open("wb") as f:
            np.savez(f, params=np.zeros(3))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_unknown_precision(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "model.npz", model)
        with pytest.raises(ConfigError):
            load_checkpoint(path, precision="int8")

    def test_truncated_params(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "model.npz", model)
        _rewrite(path, params=model.get_flat_params()[:-1])
        with pytest.raises(ConfigError, match="parameters"):
            load_checkpoint(path)

    @pytest.mark.parametrize("key", ["schedule", "architecture", "param_layout"])
    def test_missing_meta_entry(self, model, tmp_path, key):
        path = save_checkpoint(tmp_path / "model.npz", model)
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
        del meta[key]
        _rewrite(path, meta=np.array(json.dumps(meta)))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_malformed_meta_values(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "model.npz", model)
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
        meta["architecture"]["channels"] = "wide"
        _rewrite(path, meta=np.array(json.dumps(meta)))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_meta_must_be_a_mapping(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "model.npz", model)
        _rewrite(path, meta=np.array(json.dumps([1, 2])))
        with pytest.raises(ConfigError):
            load_checkpoint(path)
