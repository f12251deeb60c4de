from importlib import resources

import pytest

from wavemotif.config import ConfigError, RunConfig


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.model.order == 3 and cfg.model.trend_window == 2 and cfg.model.period_window == 7
    assert cfg.wavelet.name == "db4" and cfg.wavelet.level == 3


def test_load_round_trip(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('version = 1\n[model]\norder = 2\n[training]\nepochs = 5\nlearning_rate = 0.001\n'
                 '[paths]\nmatrix = "m.csv"\n')
    cfg = RunConfig.load(p)
    assert cfg.model.order == 2 and cfg.training.epochs == 5 and cfg.paths.matrix == "m.csv"
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("text,match", [
    ("[model]\nwidth = 3\n", "unknown key model.width"),
    ("[extras]\nx = 1\n", "unknown config section"),
    ("version = 2\n", "version"),
    ("[model]\norder = 11\n", r"model.order = 11 outside \[0, 10\]"),
    ("[wavelet]\nmode = 'zero'\n", "wavelet.mode"),
    ("[model\n", "run.toml"),
])
def test_load_errors(tmp_path, text, match):
    p = tmp_path / "run.toml"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        RunConfig.load(p)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load("/nonexistent/run.toml")


def test_override_converts_types():
    cfg = RunConfig()
    cfg.override("training.learning_rate", "0.5")
    cfg.override("model.order", "4")
    cfg.override("training.gradient_clip", "none")
    cfg.override("wavelet.policy", "split")
    assert cfg.training.learning_rate == 0.5 and cfg.model.order == 4
    assert cfg.training.gradient_clip is None and cfg.wavelet.policy == "split"
    with pytest.raises(ConfigError, match="unknown key"):
        cfg.override("model.nope", "1")
    with pytest.raises(ConfigError, match="bad override"):
        cfg.override("order", "1")
    with pytest.raises(ConfigError):
        cfg.override("model.order", "99")


def test_check_files(tmp_path):
    cfg = RunConfig()
    cfg.paths.graph = str(tmp_path / "missing.edges")
    cfg.validate()
    with pytest.raises(ConfigError, match="paths.graph"):
        cfg.validate(check_files=True)


def test_packaged_benchmark_config_present():
    assert resources.files("wavemotif").joinpath("configs/benchmark_synthetic.toml").is_file()
