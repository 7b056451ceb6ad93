import json

import pytest

from transmix.config import ConfigError, RunConfig, envelope_warning, parse_config


def test_roundtrip_lossless():
    cfg = parse_config({"command": "spectrum", "N": 12, "beta_list": [-0.25, 1], "epsilon": 0.05})
    again = parse_config(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_lambda_alias():
    cfg = parse_config({"command": "heat", "lambda": 1.0, "nu": 0.01})
    assert cfg.lam == 1.0


def test_unknown_keys():
    with pytest.raises(ConfigError, match="unknown keys: bogus"):
        parse_config({"command": "spectrum", "bogus": 1})
    cfg = parse_config({"command": "spectrum", "bogus": 1}, strict=False)
    assert cfg.command == "spectrum"


def test_all_errors_reported_together():
    with pytest.raises(ConfigError) as info:
        parse_config({"command": "spectrum", "N": "big", "T": "long", "paths": 1.5})
    assert len(info.value.errors) == 3


def test_type_and_json_errors():
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config("{")
    with pytest.raises(ConfigError, match="top level"):
        parse_config("[1, 2]")
    with pytest.raises(ConfigError, match="missing key: command"):
        parse_config({})
    with pytest.raises(ConfigError, match="integer"):
        parse_config({"command": "spectrum", "N": True})


@pytest.mark.parametrize("raw,msg", [
    ({"command": "fly"}, "command"),
    ({"command": "heat", "lam": 1.0}, "nu > 0"),
    ({"command": "spectrum", "lam": 1.0}, "lam = nu = 0"),
    ({"command": "spectrum", "p_list": [1.0]}, "exceed 1"),
    ({"command": "spectrum", "kappa": 0}, "kappa"),
    ({"command": "spectrum", "kappa": "auto"}, "only meaningful for euler"),
    ({"command": "euler", "d": 3}, "two-dimensional"),
    ({"command": "euler", "alpha": 0.0}, "alpha"),
    ({"command": "euler", "grid": 30 + 1}, "grid"),
    ({"command": "orbits"}, "step vector"),
    ({"command": "report"}, "inputs"),
    ({"command": "transport-mc", "paths": 1}, "paths"),
    ({"command": "spectrum", "truncation": "periodic"}, "truncation"),
    ({"command": "spectrum", "theta": {"family": "gauss"}}, "theta.family"),
])
def test_validation_messages(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(raw)


def test_epsilon_gate():
    # beta = 1/4 in d = 2: epsilon must lie in (0, beta(d - 2 beta)/d^2) = (0, 0.09375)
    assert parse_config({"command": "spectrum", "beta_list": [-0.25], "epsilon": 0.09}).epsilon == 0.09
    with pytest.raises(ConfigError, match="0.09375"):
        parse_config({"command": "spectrum", "beta_list": [-0.25], "epsilon": 0.1})
    with pytest.raises(ConfigError, match="only used"):
        parse_config({"command": "spectrum", "beta_list": [1.0], "epsilon": 0.01})


def test_hash_key_ignores_output_and_workers():
    a = RunConfig("spectrum", output="x", workers=1)
    b = RunConfig("spectrum", output="y", workers=4)
    assert a.hash_key() == b.hash_key()
    assert json.loads(a.to_json())["output"] == "x"


def test_envelope_warning():
    cfg = parse_config({"command": "transport-mc", "lambda_target": 5.0})
    with pytest.warns(UserWarning):
        assert envelope_warning(cfg, 2.0) is not None
    cfg = parse_config({"command": "transport-mc", "lambda_target": 1.0})
    assert envelope_warning(cfg, 2.0) is None
