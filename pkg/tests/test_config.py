import pytest
import yaml

from deem.config import ENV_PREFIX, ConfigError, env_overrides, from_dict, load_config


def write(tmp_path, data, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def test_defaults_and_nested_stage(tmp_path):
    data_file = tmp_path / "d.jsonl"
    data_file.write_text("")
    cfg = load_config(write(tmp_path, {"seed": 3, "dim": 64, "data": [{"path": str(data_file), "weight": 2}],
                                       "stages": {"S1": {"total_steps": 5, "lam": 2.5}}}), environ={})
    assert cfg.seed == 3 and cfg.model.dim == 64
    assert cfg.stage("S1").total_steps == 5 and cfg.stage("S1").lam == 2.5
    assert cfg.stage("S2").freeze == {"VFM": True, "LLM": False, "DM": True}
    assert cfg.data[0].weight == 2.0


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        from_dict({"sed": 1})
    with pytest.raises(ConfigError, match="unknown keys in stage"):
        from_dict({"stages": {"S1": {"lr": 1}}})
    with pytest.raises(ConfigError):
        from_dict({"stages": {"S9": {}}})
    with pytest.raises(ConfigError):
        from_dict({"data": [{"path": "x", "wieght": 1}]})


def test_type_checks():
    with pytest.raises(ConfigError):
        from_dict({"seed": "seven"})
    with pytest.raises(ConfigError):
        from_dict({"stages": {"S1": {"compute_csr": 1}}})
    with pytest.raises(ConfigError):
        from_dict({"stages": {"S1": {"lam": -1.0}}})


def test_missing_data_path(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(write(tmp_path, {"data": [str(tmp_path / "nope.jsonl")]}), environ={})
    with pytest.raises(ConfigError, match="empty"):
        load_config(write(tmp_path, {}), environ={})


def test_env_overrides(tmp_path):
    env = {f"{ENV_PREFIX}SEED": "11", f"{ENV_PREFIX}S1__TOTAL_STEPS": "7", "OTHER": "x"}
    assert env_overrides(env) == {"seed": 11, "stages": {"S1": {"total_steps": 7}}}
    data_file = tmp_path / "d.jsonl"
    data_file.write_text("")
    cfg = load_config(write(tmp_path, {"seed": 1, "data": [str(data_file)], "stages": {"S1": {"batch_size": 2}}}), environ=env)
    assert cfg.seed == 11
    assert cfg.stage("S1").total_steps == 7 and cfg.stage("S1").batch_size == 2
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, {"data": [str(data_file)]}), environ={f"{ENV_PREFIX}BOGUS": "1"})


def test_to_dict_round_trips():
    cfg = from_dict({"seed": 5, "resolution": 32, "data": ["a"], "stages": {"S3": {"batch_size": 1}}})
    again = from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
