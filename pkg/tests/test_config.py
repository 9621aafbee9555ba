import json

import pytest

from msdistill.config import ConfigError, PipelineConfig, config_from_dict, load_config


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.lam == 0.8 and cfg.p == 12.0
    assert cfg.training.learning_rate == 0.01 and cfg.training.weight_decay == 1e-4


def test_roundtrip(tmp_path):
    cfg = PipelineConfig(seed=7, metric="cka")
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert load_config(p) == cfg
    assert load_config(p).digest() == cfg.digest()


def test_partial_document_fills_defaults():
    cfg = config_from_dict({"schema_version": 1, "data": {"n_total": 50}})
    assert cfg.data.n_total == 50 and cfg.data.labeled_fraction == 0.2


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"bogus": 1}, "unknown keys"),
        ({"data": {"n_totl": 5}}, r"data: unknown keys \['n_totl'\]"),
        ({"schema_version": 2}, "schema_version"),
        ({"metric": "euclid"}, "metric"),
        ({"lam": 1.5}, "lam"),
        ({"schemes": ["median"]}, "unknown scheme"),
        ({"data": {"labeled_fraction": 0}}, "labeled_fraction"),
        ({"universe": 3}, "expected an object"),
    ],
)
def test_rejected(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_digest_ignores_output_dir():
    a = PipelineConfig(output_dir="x")
    b = PipelineConfig(output_dir="y")
    assert a.digest() == b.digest()
    assert a.digest() != PipelineConfig(seed=1).digest()


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_json_is_sorted():
    doc = json.loads(PipelineConfig().to_json())
    assert list(doc) == sorted(doc)
