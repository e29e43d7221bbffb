import os

import pytest
import yaml

from onestepvc.config import OneStepVCConfig, flat_fields
from onestepvc.constants import FULL_SCALE_T_PRIME, FULL_SCALE_TIMESTEPS
from onestepvc.exceptions import ConfigurationError


def test_config_defaults(tmp_path, clean_env):
    config = OneStepVCConfig(root_path=tmp_path)
    assert config.mel.n_mels == 80
    assert config.mel.f_max == 22050 / 2
    assert config.diffusion.timesteps == FULL_SCALE_TIMESTEPS
    assert config.train.t_prime == FULL_SCALE_T_PRIME
    assert config.train.mode == "adcd"
    assert config.train.weights.lambda_dist == 45
    assert config.runs_root == (tmp_path / "runs").resolve()
    assert config.validate() == []


def test_config_env_override(tmp_path, clean_env):
    os.environ["ONESTEPVC_BATCH_SIZE"] = "5"
    os.environ["ONESTEPVC_USE_INVERSE"] = "false"
    config = OneStepVCConfig(root_path=tmp_path)
    assert config.train.batch_size == 5
    assert config.train.use_inverse is False


def test_config_yaml_override(tmp_path, clean_env, sample_yaml_config):
    os.environ["ONESTEPVC_BATCH_SIZE"] = "5"
    config = OneStepVCConfig(root_path=tmp_path)
    assert config.train.batch_size == 8
    assert config.train.mode == "direct"
    assert config.debug is True


def test_overrides_beat_yaml(tmp_path, clean_env, sample_yaml_config):
    config = OneStepVCConfig(root_path=tmp_path, overrides={"batch_size": 2})
    assert config.train.batch_size == 2


def test_explicit_config_path_must_exist(tmp_path, clean_env):
    with pytest.raises(ConfigurationError):
        OneStepVCConfig(root_path=tmp_path, config_path=tmp_path / "absent.yaml")


def test_malformed_yaml(tmp_path, clean_env):
    (tmp_path / "onestepvc.yaml").write_text("- just\n- a list\n")
    with pytest.raises(ConfigurationError):
        OneStepVCConfig(root_path=tmp_path)


def test_unknown_key_rejected(tmp_path, clean_env):
    with pytest.raises(ConfigurationError, match="Unknown config key"):
        OneStepVCConfig(root_path=tmp_path, overrides={"learning_rat": 1e-3})


def test_bad_value_rejected(tmp_path, clean_env):
    with pytest.raises(ConfigurationError):
        OneStepVCConfig(root_path=tmp_path, overrides={"batch_size": "many"})


@pytest.mark.parametrize(
    "overrides",
    [
        {"hop": 2048},
        {"filterbank": "bark"},
        {"t_prime": 0},
        {"t_prime": 51},
        {"mode": "consistency"},
        {"discriminator_domain": "spectrogram"},
        {"denoiser_layers": 3},
    ],
)
def test_validate_errors(tiny_config, overrides):
    with pytest.raises(ConfigurationError):
        tiny_config.derive(overrides).validate()


def test_validate_warnings(tiny_config):
    assert tiny_config.validate() == []
    warnings = tiny_config.derive({"t_prime": 10, "segment_frames": 15}).validate()
    assert len(warnings) == 2


def test_negative_weight_rejected(tiny_config):
    with pytest.raises(ConfigurationError):
        tiny_config.derive({"lambda_fm": -1.0}).train


def test_derive_leaves_original(tiny_config):
    derived = tiny_config.derive({"mode": "fastvoicegrad", "mel_scales": [1]})
    assert derived.train.mode == "fastvoicegrad"
    assert derived.network.mel_scales == (1,)
    assert tiny_config.train.mode == "adcd"


def test_snapshot_is_yaml_safe(tiny_config, tmp_path):
    snapshot = tiny_config.snapshot()
    assert list(snapshot) == sorted(snapshot)
    assert set(snapshot) == set(flat_fields())
    assert snapshot["mel_scales"] == [1, 2]
    restored = yaml.safe_load(yaml.safe_dump(snapshot))
    config = OneStepVCConfig(root_path=tmp_path, overrides=restored)
    assert config.snapshot() == snapshot


def test_flat_fields_sections():
    fields = flat_fields()
    assert fields["n_mels"] == ("mel", 80)
    assert fields["lambda_inv_dist"][0] == "train"
    assert fields["judge_command"] == ("eval", None)
    assert "weights" not in fields
