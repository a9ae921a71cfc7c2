from __future__ import annotations

import copy
import json

import numpy as np
import pytest

from fairlend.config import (
    PRESETS,
    config_from_dict,
    env_config_from_dict,
    env_config_to_dict,
    load_config,
    preset_document,
)
from fairlend.env import MINUS, PLUS, ConfigError


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load_without_a_file(name):
    env, train = load_config(name)
    assert env.num_levels == 7 and env.horizon == 20
    assert train.algo in ("ppo", "ppo-c", "ppo-cb")


def mean_score(p):
    return float(np.arange(1, len(p) + 1) @ p)


def test_preset_structure():
    s1, _ = load_config("setting1")
    s2, _ = load_config("setting2")
    s3, _ = load_config("setting3")
    # settings 1 and 2 share starts, with the s- group lower, and differ in repayment
    np.testing.assert_array_equal(s1.init_score_dist, s2.init_score_dist)
    assert mean_score(s1.init_score_dist[MINUS]) < mean_score(s1.init_score_dist[PLUS])
    assert not np.array_equal(s1.repay_prob, s2.repay_prob)
    for cfg in (s1, s2):
        assert np.all(np.diff(cfg.repay_prob, axis=1) > 0)
        np.testing.assert_array_equal(cfg.drift_dist, [[0.1, 0.8, 0.1]] * 2)
    # setting 3: equal starts, s- drifts down more and up less
    np.testing.assert_array_equal(s3.init_score_dist[PLUS], s3.init_score_dist[MINUS])
    assert s3.drift_dist[MINUS, 0] > s3.drift_dist[PLUS, 0]
    assert s3.drift_dist[MINUS, 2] < s3.drift_dist[PLUS, 2]


def test_round_trip(tmp_path):
    env, _ = load_config("setting2")
    doc = {"env": env_config_to_dict(env), "train": {"algo": "ppo-cb", "beta_lambda": 2.0}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    env2, train2 = load_config(path)
    np.testing.assert_array_equal(env2.repay_prob, env.repay_prob)
    assert train2.algo == "ppo-cb" and train2.beta_lambda == 2.0


def _doc():
    return copy.deepcopy(preset_document("setting1"))


def test_unknown_keys_are_named():
    doc = _doc()
    doc["env"]["groups"]["plus"]["repay"] = [0.5] * 7
    with pytest.raises(ConfigError, match="'repay'"):
        config_from_dict(doc)
    doc = _doc()
    doc["train"] = {"learning_rat": 0.1}
    with pytest.raises(ConfigError, match="'learning_rat'"):
        config_from_dict(doc)
    doc = _doc()
    doc["extra"] = 1
    with pytest.raises(ConfigError, match="'extra'"):
        config_from_dict(doc)


def test_bad_probabilities_are_reported():
    doc = _doc()
    doc["env"]["groups"]["minus"]["repay_prob"] = [0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 1.2]
    with pytest.raises(ConfigError, match="repay_prob"):
        config_from_dict(doc)
    doc = _doc()
    doc["env"]["groups"]["plus"]["init_score_dist"] = [0.2] * 7
    with pytest.raises(ConfigError, match=r"sum to 1\.4"):
        config_from_dict(doc)


def test_schema_errors_name_the_field(tmp_path):
    doc = _doc()
    doc["env"]["num_levels"] = 1
    with pytest.raises(ConfigError, match="num_levels"):
        config_from_dict(doc)
    doc = _doc()
    del doc["env"]["groups"]["minus"]["drift_dist"]
    with pytest.raises(ConfigError, match="drift_dist"):
        config_from_dict(doc)
    doc = _doc()
    doc["env"]["groups"]["plus"]["repay_prob"] = [0.5] * 6
    with pytest.raises(ConfigError, match="repay_prob"):
        config_from_dict(doc)
    doc = _doc()
    doc["env"]["horizon"] = 2.5
    with pytest.raises(ConfigError, match="horizon"):
        config_from_dict(doc)
    doc = _doc()
    doc["train"] = {"beta_kl": "ten"}
    with pytest.raises(ConfigError, match="train"):
        config_from_dict(doc)
    doc = _doc()
    doc["env"]["groups"]["plus"]["gain_potential"] = list(range(7))
    with pytest.raises(ConfigError, match="gain_potential"):
        env_config_from_dict(doc["env"])
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
