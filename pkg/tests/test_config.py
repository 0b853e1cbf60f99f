from dataclasses import replace
from pathlib import Path

import pytest

from ssa_tta.config import (ConfigError, ExperimentConfig, SweepConfig, config_digest,
                            default_config, dump_config, experiment_from_dict, load_config,
                            save_config, to_dict)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


class TestRoundTrip:
    @pytest.mark.parametrize("task", ["classification", "dense"])
    def test_yaml_round_trip(self, task, tmp_path):
        cfg = default_config(task)
        back = load_config(save_config(cfg, tmp_path / "c.yaml"))
        assert back == cfg
        assert dump_config(back) == dump_config(cfg)

    @pytest.mark.parametrize("name", ["classification", "dense"])
    def test_shipped_configs_are_defaults(self, name):
        assert load_config(CONFIGS / f"{name}.yaml") == default_config(name)

    def test_tuples_and_none(self, tmp_path):
        cfg = experiment_from_dict({"adapt": {"window": [2, 3], "c_align": [0, 2],
                                              "tau_par": "knee"}})
        assert cfg.adapt.window == (2, 3) and cfg.adapt.c_align == (0, 2)
        assert cfg.adapt.tau_par == "knee"
        assert load_config(save_config(cfg, tmp_path / "c.yaml")) == cfg

    def test_partial_section_keeps_defaults(self):
        cfg = experiment_from_dict({"adapt": {"tau_neg": 0.7}})
        base = ExperimentConfig()
        assert cfg.adapt == replace(base.adapt, tau_neg=0.7)

    def test_dense_base(self):
        cfg = default_config("dense")
        assert cfg.dense and cfg.data.dims == 4
        assert cfg.adapt.lr_extractor == pytest.approx(0.005)
        assert cfg.data.target_shift.gain == pytest.approx(1.3)

    def test_with_seed(self):
        cfg = default_config().with_seed(7)
        assert cfg.seed == 7 and cfg.adapt.seed == 7


class TestErrors:
    @pytest.mark.parametrize("doc,path", [
        ({"adapt": {"tau_pos": "high"}}, "adapt.tau_pos"),
        ({"adapt": {"bogus": 1}}, "adapt.bogus"),
        ({"data": {"n_classes": 2.5}}, "data.n_classes"),
        ({"data": {"target_shift": {"angle": 3}}}, "data.target_shift.angle"),
        ({"adapt": {"window": [1, 2, 3]}}, "adapt.window"),
        ({"model": {"width": True}}, "model.width"),
        ({"sweep": {"axes": {"tau_neg": [0.5]}}}, "sweep"),
        ({"sweep": {"axes": {"alpha": [0.1, 0.2]}}}, "sweep"),
        ({"adapt": {"tau_pos": 1.5}}, "adapt"),
        ({"surprise": {}}, "surprise"),
    ])
    def test_paths(self, doc, path):
        with pytest.raises(ConfigError) as info:
            experiment_from_dict(doc)
        assert info.value.path == path

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("adapt: [unclosed")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(p)

    def test_sweep_validation(self):
        with pytest.raises(ValueError, match="2 points"):
            SweepConfig(axes={"tau_neg": (0.5,)})


class TestDigest:
    def test_stable(self):
        assert config_digest(default_config()) == config_digest(default_config())

    @pytest.mark.parametrize("change", [
        lambda c: replace(c, seed=1),
        lambda c: replace(c, adapt=replace(c.adapt, tau_neg=0.8)),
        lambda c: replace(c, data=replace(c.data, radius=4.5)),
        lambda c: replace(c, sweep=replace(c.sweep, seeds=(0, 1))),
    ])
    def test_changes_with_any_field(self, change):
        cfg = default_config()
        assert config_digest(change(cfg)) != config_digest(cfg)

    def test_to_dict_plain(self):
        d = to_dict(default_config())
        assert isinstance(d["sweep"]["axes"]["tau_neg"], list)
        assert d["data"]["task"] == "classification"
