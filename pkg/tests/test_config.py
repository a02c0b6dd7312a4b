import pytest
import tomli

from drgt.config import RunConfig, dump_toml, from_dict, load_config, parse_override
from drgt.model import ConfigError


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_validate():
    cfg = load_config()
    assert cfg.model.task == cfg.preprocess.task == "classification"
    assert cfg.graph.dg_zero_padding and not cfg.graph.dc_zero_edges


def test_precedence_cli_over_file_over_default(tmp_path):
    p = write(tmp_path, "[model]\nepochs = 500\nlr = 0.002\n")
    cfg = load_config(p, ["model.epochs=700"])
    assert cfg.model.epochs == 700      # command line
    assert cfg.model.lr == 0.002        # file
    assert cfg.model.heads == 4         # default


@pytest.mark.parametrize("text,key", [
    ("[model]\nbogus = 1\n", "model.bogus"),
    ("[nonsense]\nx = 1\n", "nonsense"),
    ("[search.space]\nfoo = 1\n", "search.space.foo"),
])
def test_unknown_keys_rejected(tmp_path, text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(write(tmp_path, text))


@pytest.mark.parametrize("override,key", [
    ("model.epochs=50", "model.epochs"),
    ("model.hidden=[128,64,32]", "model.hidden.h1"),
    ("model.lr=0.5", "model.lr"),
    ("model.heads=1", "model.heads"),
    ("model.heads=9", "model: layer width 256 is not divisible by heads=9"),
])
def test_out_of_range_names_key(override, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(None, [override])


def test_ranges_can_be_relaxed_for_small_runs():
    cfg = load_config(None, ["enforce_ranges=false", "model.epochs=20", "model.hidden=[8,8,8]", "model.heads=2"])
    assert cfg.model.epochs == 20 and cfg.model.hidden == (8, 8, 8)


@pytest.mark.parametrize("override", ["split.test=4", "preprocess.task=ranking", "pubmed.transport=ftp",
                                      "split.axis=gene", "preprocess.percentile_scope=local"])
def test_invalid_choices(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_task_propagates_to_model():
    assert load_config(None, ["preprocess.task=regression"]).model.task == "regression"


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/run.toml")


def test_paths_resolve_relative_to_file(tmp_path):
    sub = tmp_path / "cfg"
    sub.mkdir()
    p = write(sub, '[data]\nresponse = "r.csv"\nexpression = "/abs/e.csv"\n')
    cfg = load_config(p)
    assert cfg.data.response == str(sub / "r.csv")
    assert cfg.data.expression == "/abs/e.csv"


@pytest.mark.parametrize("text,expected", [
    ("a.b=3", (["a", "b"], 3)),
    ("a.b=true", (["a", "b"], True)),
    ("a.b=False", (["a", "b"], False)),
    ("a.b=[1, 2]", (["a", "b"], [1, 2])),
    ("a.b=hello", (["a", "b"], "hello")),
    ("a.b=1e-3", (["a", "b"], 1e-3)),
])
def test_parse_override(text, expected):
    assert parse_override(text) == expected


def test_parse_override_needs_equals():
    with pytest.raises(ConfigError):
        parse_override("model.epochs")


def test_dump_round_trip():
    cfg = load_config(None, ["model.epochs=800", "search.space={'lr': [0.001, 0.01]}", "output=out/x"])
    back = from_dict(tomli.loads(dump_toml(cfg))).validate()
    assert back.to_dict() == cfg.to_dict()
    assert isinstance(back, RunConfig)
