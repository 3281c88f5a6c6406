import json

import pytest
from hypothesis import given, settings, strategies as st

from cosingan.config import ExperimentParams, RunConfig, ScheduleParams
from cosingan.core import ConfigError
from cosingan.data import PhantomSpec
from cosingan.trainer import StageTrainConfig


def test_roundtrip_desk_and_paper(tmp_path):
    for cfg in (RunConfig(), RunConfig.paper()):
        assert RunConfig.from_json(cfg.to_json()) == cfg
        p = cfg.save(tmp_path / "c.json")
        assert RunConfig.load(p) == cfg


def test_paper_profile_values():
    cfg = RunConfig.paper()
    tc = cfg.trainer_config()
    assert tc.schedule.gen_depths == (4, 4, 5, 5, 6, 6, 7, 7, 8)
    assert cfg.super_cfg == StageTrainConfig.paper_super()
    assert tc.stage_cfg("super", 8).batch_size == 2
    assert cfg.experiment.deltas == (16, 16, 32)


def test_partial_dict_fills_defaults():
    cfg = RunConfig.from_dict({"seed": 5, "super_cfg": {"epochs": 7}})
    assert cfg.seed == 5 and cfg.super_cfg.epochs == 7
    assert cfg.super_cfg.batch_size == RunConfig().super_cfg.batch_size
    assert cfg.restore_cfg == RunConfig().restore_cfg


@pytest.mark.parametrize("bad", [
    {"nope": 1},
    {"super_cfg": {"epochz": 3}},
    {"super_cfg": 3},
    {"combine": "multiply"},
    {"phantom": {"size": 48}},
    {"schedule": {"max_size": 32, "n_scales": 1}},
    {"experiment": {"probes": ["regressor"]}},
    {"experiment": {"deltas": [100, 100, 100]}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    with pytest.raises(ConfigError):
        RunConfig.from_json("[1, 2]")


def test_json_is_sorted_and_stable():
    a = RunConfig().to_json()
    assert a == RunConfig().to_json()
    keys = list(json.loads(a))
    assert keys == sorted(keys)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), epochs=st.integers(0, 500), size=st.sampled_from([32, 48, 64]),
       n=st.integers(2, 3), ms_fvl=st.floats(0, 20))
def test_roundtrip_property(seed, epochs, size, n, ms_fvl):
    cfg = RunConfig.from_dict({"seed": seed, "schedule": {"max_size": size, "n_scales": n},
                               "phantom": {"size": size}, "super_cfg": {"epochs": epochs},
                               "loss_weights": {"ms_fvl": ms_fvl}})
    assert RunConfig.from_json(cfg.to_json()) == cfg
    assert cfg.with_seed(seed + 1).seed == seed + 1


def test_nested_defaults_types():
    cfg = RunConfig()
    assert isinstance(cfg.schedule, ScheduleParams) and isinstance(cfg.phantom, PhantomSpec)
    assert isinstance(cfg.experiment, ExperimentParams)
    assert cfg.trainer_config(seed=9).seed == 9
