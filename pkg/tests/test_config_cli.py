import json

import pytest

from privcxr.cli import main
from privcxr.config import ConfigError, ExperimentConfig, load_config, parse_config_text, render_config, resolve

TINY = ["--n", "120", "--image-size", "16", "--epochs", "1", "--bootstrap-redraws", "5"]


def test_defaults_resolve_by_mode():
    priv = load_config()
    assert (priv.activation, priv.augmentation, priv.lr) == ("mish", False, 5e-4)
    plain = load_config(overrides={"mode": "non-private"})
    assert (plain.activation, plain.augmentation, plain.lr) == ("relu", True, 5e-5)


def test_private_augmentation_rejected():
    with pytest.raises(ConfigError, match="augmentation"):
        load_config(overrides={"augmentation": "true"})


def test_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nmode = non-private\nepochs = 3  # inline\nseparability=2.5\ncohort_seed = none\n")
    cfg = load_config(p, {"epochs": "4"})
    assert (cfg.mode, cfg.epochs, cfg.separability, cfg.cohort_seed) == ("non-private", 4, 2.5, None)


@pytest.mark.parametrize("text", ["nokey", "bogus = 1", "epochs = many", "stem_pool = maybe"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


@pytest.mark.parametrize("override", [{"delta": "2"}, {"mode": "dp"}, {"epochs": "0"}, {"widths": "8,16,32,62"},
                                      {"target_epsilon": "-1"}, {"gap_group": "age:7"}])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        load_config(overrides=override)


def test_render_round_trip():
    cfg = load_config(overrides={"mode": "non-private", "seed": "5", "noise_multiplier": "none"})
    assert resolve(ExperimentConfig(**parse_config_text(render_config(cfg)))) == cfg


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("PRIVCXR_OUTPUT_ROOT", str(tmp_path))
    cfg = load_config(overrides={"seed": "2"})
    assert cfg.output_path() == tmp_path / "eps7.89_seed2"


def test_calibrate_cli(capsys, tmp_path):
    code = main(["calibrate", "--target-epsilon", "7.89", "--delta", "6e-6", "--sampling-rate", "8e-4",
                 "--steps", "187500", "--json", str(tmp_path / "c.json")])
    assert code == 0
    out = dict(line.split("=", 1) for line in capsys.readouterr().out.strip().splitlines())
    assert float(out["sigma"]) == pytest.approx(0.5994, rel=1e-3)
    assert float(out["epsilon"]) <= 7.89
    assert json.loads((tmp_path / "c.json").read_text())["sigma"] == float(out["sigma"])


def test_config_error_exit(capsys):
    assert main(["calibrate", "--target-epsilon", "1", "--delta", "2", "--sampling-rate", "0.01", "--steps", "10"]) == 2
    assert main(["train", "--augmentation", "true"]) == 2
    assert main(["train", "--no-such-flag"]) == 2
    assert main(["train", "--config", "/nonexistent.cfg"]) == 2


def test_budget_violation_exit(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("PRIVCXR_OUTPUT_ROOT", str(tmp_path))
    assert main(["train", *TINY, "--noise-multiplier", "0.3", "--target-epsilon", "1"]) == 3
    assert "budget" in capsys.readouterr().err


def test_numeric_failure_exit(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("PRIVCXR_OUTPUT_ROOT", str(tmp_path))
    assert main(["train", *TINY, "--mode", "non-private", "--lr-non-private", "1e300", "--batch-size", "32"]) == 4
    assert "numeric" in capsys.readouterr().err


def test_generate_cohort_cli(tmp_path, capsys):
    assert main(["generate-cohort", "--n", "30", "--image-size", "8", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "metadata.csv").exists()
    assert len(list((tmp_path / "c" / "images").iterdir())) == 30
