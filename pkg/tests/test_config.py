import json

import pytest

from energyadapt.config import (
    BENCHMARK_STEP_SIZE,
    ConfigError,
    RunConfig,
    apply_overrides,
    from_dict,
    load,
)


class TestFromDict:
    def test_empty_gives_defaults(self):
        cfg = from_dict({})
        assert cfg.train.sgld.step_size == BENCHMARK_STEP_SIZE
        assert cfg.train.iterations == 2000 and cfg.eval.num_chains == 5

    def test_round_trip(self):
        cfg = from_dict({"seed": 3, "benchmark": {"per_class": 10, "holdout": 0.5},
                         "train": {"sgld": {"num_steps": 7}, "weights": {"kl": 0.5}},
                         "eval": {"aggregations": ["ensemble", "most_confident"]}})
        again = from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict() and again.hash() == cfg.hash()
        assert again.train.seed == 3 and again.holdout == 0.5
        assert again.train.sgld.num_steps == 7 and again.train.weights.kl == 0.5

    def test_seed_is_copied_into_training(self):
        assert from_dict({"seed": 9}).train.seed == 9

    @pytest.mark.parametrize("doc", [
        {"colour": 1},
        {"train": {"lr": 1}},
        {"train": {"sgld": {"steps": 3}}},
        {"train": {"seed": 1}},
        {"benchmark": {"holdout": 1.5}},
        {"benchmark": {"source_angles": [0], "target_angles": [0]}},
        {"eval": {"latent_mode": "posterior"}},
        {"eval": {"aggregations": ["vote"]}},
        {"sweep": {"steps": []}},
        {"train": {"sgld": {"step_size": -1}}},
        {"model": []},
        [],
    ])
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            from_dict(doc)

    def test_eval_steps_default_to_training_chain(self):
        cfg = from_dict({"train": {"sgld": {"num_steps": 11}}})
        assert cfg.sgld_for_eval().num_steps == 11
        cfg = from_dict({"train": {"sgld": {"num_steps": 11}}, "eval": {"num_steps": 0}})
        assert cfg.sgld_for_eval().num_steps == 0

    def test_hash_changes_with_content(self):
        assert RunConfig().hash() != from_dict({"seed": 1}).hash()


class TestFiles:
    def test_load(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"seed": 4}))
        assert load(tmp_path / "c.json") == {"seed": 4}

    def test_missing(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{seed: 4")
        with pytest.raises(ConfigError):
            load(tmp_path / "c.json")


class TestOverrides:
    def test_nested_json_values(self):
        out = apply_overrides({"train": {"iterations": 5}},
                              ["train.iterations=7", "train.sgld.step_size=1.5", "eval.latent_mode=oracle",
                               "benchmark.source_angles=[30,45]"])
        assert out["train"] == {"iterations": 7, "sgld": {"step_size": 1.5}}
        assert out["eval"]["latent_mode"] == "oracle"
        assert out["benchmark"]["source_angles"] == [30, 45]

    def test_does_not_mutate_input(self):
        base = {"train": {"iterations": 5}}
        apply_overrides(base, ["train.iterations=1"])
        assert base["train"]["iterations"] == 5

    def test_malformed(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["train.iterations"])
