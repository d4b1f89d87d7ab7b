import json
from pathlib import Path

import pytest

import config
from errors import ConfigError


def write_doc(tmp_path: Path, doc) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return path


def load(tmp_path, params_cls, doc, **flags) -> config.RunConfig:
    return config.load_run_config("test", params_cls, write_doc(tmp_path, doc), **flags)


def test_defaults_without_a_document(out_root):
    cfg = config.load_run_config("simulate-mra", config.SimulateMraParams)
    assert cfg.params == config.SimulateMraParams()
    assert cfg.params.n == 41 and cfg.seed == 0 and cfg.workers == 1
    assert cfg.out_dir == out_root / "simulate-mra"


def test_nested_sections_take_defaults(tmp_path):
    cfg = load(tmp_path, config.TrainEncoderParams, {"train": {"batch_size": 32}})
    assert cfg.params.train.batch_size == 32
    assert cfg.params.train.schedule == ((1e-3, 20), (1e-4, 10), (1e-5, 5))
    assert cfg.params.heads == ("rho", "v")


def test_lists_become_tuples(tmp_path):
    cfg = load(tmp_path, config.ReconCryoParams, {"recon": {"schedule": [[1e-3, 10], [1e-4, 2]]}})
    assert cfg.params.recon.schedule == ((1e-3, 10), (1e-4, 2))
    assert isinstance(cfg.params.recon.schedule[0][0], float)


@pytest.mark.parametrize("params_cls, doc, path", [
    (config.SimulateMraParams, {"x": 1}, "$.x"),
    (config.TrainEncoderParams, {"train": {"epochs": 3}}, "$.train.epochs"),
])
def test_unknown_keys_are_rejected(tmp_path, params_cls, doc, path):
    with pytest.raises(ConfigError, match="unknown key") as info:
        load(tmp_path, params_cls, doc)
    assert info.value.path == path


@pytest.mark.parametrize("params_cls, doc, path, message", [
    (config.SimulateMraParams, {"n": "41"}, "$.n", "integer"),
    (config.SimulateMraParams, {"n": 4.5}, "$.n", "integer"),
    (config.SimulateMraParams, {"n": True}, "$.n", "integer"),
    (config.SimulateCryoParams, {"moments_only": 1}, "$.moments_only", "boolean"),
    (config.InvertSpectralParams, {"method": "qr"}, "$.method", "one of"),
    (config.TrainEncoderParams, {"heads": ["rho", "z"]}, "$.heads[1]", "one of"),
    (config.SimulateMraParams, {"stddev_range": [0.1]}, "$.stddev_range", "2 entries"),
    (config.ReconMraParams, {"recon": 3}, "$.recon", "object"),
])
def test_type_errors_name_the_path(tmp_path, params_cls, doc, path, message):
    with pytest.raises(ConfigError, match=message) as info:
        load(tmp_path, params_cls, doc)
    assert info.value.path == path
    assert str(info.value).startswith(path)


@pytest.mark.parametrize("params_cls, doc, path", [
    (config.SimulateMraParams, {"n": 2}, "$.n"),
    (config.SimulateMraParams, {"sigma": -0.1}, "$.sigma"),
    (config.SimulateMraParams, {"stddev_range": [0.3, 0.1]}, "$.stddev_range"),
    (config.SimulateMraParams, {"stddev_range": [0.0, 0.1]}, "$.stddev_range"),
    (config.InvertSpectralParams, {"tol": 0}, "$.tol"),
    (config.TrainEncoderParams, {"train": {"test_fraction": 1.0}}, "$.train.test_fraction"),
    (config.TrainEncoderParams, {"train": {"schedule": [[1e-3, 5], [0, 5]]}}, "$.train.schedule[1][0]"),
    (config.TrainEncoderParams, {"train": {"schedule": [[1e-3, -1]]}}, "$.train.schedule[0][1]"),
    (config.ReconCryoParams, {"recon": {"lam": -1}}, "$.recon.lam"),
    (config.ReconCryoParams, {"align_q1": 0}, "$.align_q1"),
    (config.EvalFscParams, {"threshold": 1.0}, "$.threshold"),
])
def test_range_errors_name_the_path(tmp_path, params_cls, doc, path):
    with pytest.raises(ConfigError) as info:
        load(tmp_path, params_cls, doc)
    assert info.value.path == path


def test_range_message(tmp_path):
    with pytest.raises(ConfigError, match=r"\$\.n: must be >= 3"):
        load(tmp_path, config.SimulateMraParams, {"n": 2})


def test_optional_fields(tmp_path):
    cfg = load(tmp_path, config.MomentsMraParams, {"sigma": None})
    assert cfg.params.sigma is None
    cfg = load(tmp_path, config.MomentsMraParams, {"sigma": 2})
    assert cfg.params.sigma == 2.0
    with pytest.raises(ConfigError, match=r"\$\.sigma"):
        load(tmp_path, config.MomentsMraParams, {"sigma": "high"})


def test_flags_override_the_document(tmp_path):
    doc = {"seed": 5, "workers": 2, "n": 9}
    cfg = load(tmp_path, config.SimulateMraParams, doc)
    assert (cfg.seed, cfg.workers, cfg.params.n) == (5, 2, 9)
    cfg = load(tmp_path, config.SimulateMraParams, doc, seed=11, workers=3, out_dir=tmp_path / "x")
    assert (cfg.seed, cfg.workers, cfg.out_dir) == (11, 3, tmp_path / "x")


@pytest.mark.parametrize("doc, path", [
    ({"seed": -1}, "$.seed"),
    ({"seed": 1.5}, "$.seed"),
    ({"workers": 0}, "$.workers"),
    ({"workers": True}, "$.workers"),
])
def test_seed_and_workers_in_the_document(tmp_path, doc, path):
    with pytest.raises(ConfigError) as info:
        load(tmp_path, config.SimulateMraParams, doc)
    assert info.value.path == path


def test_bad_flags():
    with pytest.raises(ConfigError, match="workers"):
        config.load_run_config("x", config.SimulateMraParams, workers=0)
    with pytest.raises(ConfigError, match="seed"):
        config.load_run_config("x", config.SimulateMraParams, seed=-3)


def test_unreadable_documents(tmp_path):
    with pytest.raises(ConfigError, match="invalid JSON"):
        load(tmp_path, config.SimulateMraParams, "{not json")
    with pytest.raises(ConfigError, match="object"):
        load(tmp_path, config.SimulateMraParams, [1, 2])
    with pytest.raises(ConfigError, match="cannot read"):
        config.load_run_config("x", config.SimulateMraParams, tmp_path / "missing.json")


def test_to_dict_is_json_ready(tmp_path):
    cfg = load(tmp_path, config.ReconMraParams, {"recon": {"iterations": 10}}, out_dir=tmp_path)
    doc = cfg.to_dict()
    assert json.loads(json.dumps(doc)) == doc
    assert doc["params"]["recon"]["iterations"] == 10
    assert doc["params"]["study"]["instances"] == 0
    assert doc["out_dir"] == str(tmp_path)


def test_default_out_dir_follows_the_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(config.OUT_ENV, str(tmp_path))
    assert config.default_out_dir("eval-fsc") == tmp_path / "eval-fsc"
    monkeypatch.delenv(config.OUT_ENV)
    assert config.default_out_dir("eval-fsc") == Path("runs") / "eval-fsc"
