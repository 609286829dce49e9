import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeir.cli import build_parser, resolve_config
from spikeir.config import RunConfig, apply_overrides, dump_config, load_config, parse_config
from spikeir.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "e.cfg").write_text("")
    cfg = load_config(tmp_path / "e.cfg")
    assert cfg == RunConfig(out=cfg.out)
    assert cfg.gamma == 0.12 and cfg.lambda_freq == 0.1 and cfg.kd == "decoder"
    assert cfg.n_epochs == 51 and cfg.noise_sigma == 15.0


def test_values_and_comments():
    cfg = parse_config("gamma = 0.5  # stronger\n\nlambda = 0.2\nkd = 3,4\nattention = off\n")
    assert (cfg.gamma, cfg.lambda_freq, cfg.attention) == (0.5, 0.2, False)
    assert cfg.kd_config().stages == (3, 4)


def test_type_error_names_line():
    with pytest.raises(ConfigError, match=r"line 3: 'gamma' expects a float, got 'banana'"):
        parse_config("seed = 1\n\ngamma = banana\n")


@pytest.mark.parametrize("text,pattern", [
    ("seed = 1\ncolour = red\n", r"line 2: unknown key 'colour'"),
    ("gamma = 1\ngamma = 2\n", r"line 2: .*already set on line 1"),
    ("just words\n", r"line 1: expected"),
    ("task = unknown\n", "unknown task"),
    ("epochs = 0\n", "epochs"),
])
def test_rejections(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.cfg")


def test_presets():
    assert parse_config("task = denoise-sigma50").noise_sigma == 50.0
    assert parse_config("task = motion-deblur").n_epochs == 77
    with pytest.raises(ConfigError):
        parse_config("task = dehaze").noise_sigma
    with pytest.raises(ConfigError):
        parse_config("kd = 0,9").kd_config()


def test_relative_paths_resolve_against_file(tmp_path):
    (tmp_path / "r.cfg").write_text("train_manifest = data/train.txt\n")
    assert load_config(tmp_path / "r.cfg").train_manifest == str(tmp_path / "data/train.txt")


def test_precedence_flags_over_file_over_defaults(tmp_path):
    (tmp_path / "p.cfg").write_text("gamma = 0.3\nseed = 4\n")
    args = build_parser().parse_args(["eval", "--config", str(tmp_path / "p.cfg"), "--seed", "9"])
    cfg = resolve_config(args)
    assert (cfg.gamma, cfg.seed, cfg.lambda_freq) == (0.3, 9, 0.1)
    assert apply_overrides(cfg, {"gamma": None}).gamma == 0.3


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10, allow_nan=False), st.integers(0, 2**31), st.sampled_from(["all", "mid", "decoder", "none"]),
       st.booleans())
def test_dump_parse_round_trip(gamma, seed, kd, attention):
    cfg = RunConfig(gamma=gamma, seed=seed, kd=kd, attention=attention, channels=(4, 8), levels=2)
    assert parse_config(dump_config(cfg)) == cfg
