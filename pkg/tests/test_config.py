import json

import pytest
from hypothesis import given, settings, strategies as st

from glip import config
from glip.config import SCENARIOS, ConfigError, normalize

MODEL = {"noise": {"kind": "gaussian"}, "operator": {"kind": "dense", "matrix": [[1.0]]}, "x_true": [0.5]}


def raw(scenario):
    out = {"scenario": scenario}
    if scenario == "Custom":
        out["model"] = json.loads(json.dumps(MODEL))
    return out


class TestNormalize:
    @pytest.mark.parametrize("scenario", SCENARIOS)
    def test_idempotent(self, scenario):
        once = normalize(raw(scenario))
        assert normalize(once) == once

    @pytest.mark.parametrize("scenario", SCENARIOS)
    def test_dump_round_trip(self, scenario):
        once = normalize(raw(scenario))
        assert normalize(json.loads(config.dump(once))) == once

    def test_defaults(self):
        cfg = normalize({"scenario": "WellPosedGaussian"})
        assert len(cfg["taus"]) == 6 and cfg["taus"][0] == pytest.approx(1e-2) and cfg["taus"][-1] == pytest.approx(1e-5)
        assert (cfg["replicates"], cfg["inner_draws"], cfg["seed"]) == (200, 2000, 0)
        assert cfg["gamma_rule"] == {"kind": "constant", "gamma": 1.0}

    def test_schedule_defaults(self):
        assert normalize({"scenario": "IllPosedGaussian"})["gamma_rule"]["kind"] == "ill-posed"
        spectral = normalize({"scenario": "SpectralPoisson", "params": {"beta": 2.0}})
        assert spectral["params"] == {"alpha": 1.0, "beta": 2.0, "p": 100, "kappa": 2.0}

    def test_input_untouched(self):
        data = {"scenario": "WellPosedGaussian"}
        normalize(data)
        assert data == {"scenario": "WellPosedGaussian"}

    @settings(max_examples=30)
    @given(seed=st.integers(0, 2**40), reps=st.integers(50, 1000), scenario=st.sampled_from(SCENARIOS))
    def test_idempotent_with_overrides(self, seed, reps, scenario):
        data = raw(scenario) | {"seed": seed, "replicates": reps}
        once = normalize(data)
        assert normalize(once) == once and once["seed"] == seed


class TestRejects:
    @pytest.mark.parametrize(
        "data, match",
        [
            ({"scenario": "WellPosedGaussian", "taus": [1e-3, 1e-2]}, "decreasing"),
            ({"scenario": "WellPosedGaussian", "taus": [0.3, 1e-2]}, "0.3"),
            ({"scenario": "WellPosedGaussian", "replicates": 49}, "50"),
            ({"scenario": "Custom"}, "model"),
            ({"scenario": "WellPosedGaussian", "model": MODEL}, "model"),
            ({"scenario": "WellPosedGaussian", "gamma_rule": {"kind": "spectral"}}, "spectral"),
            ({"scenario": "WellPosedGaussian", "colour": "red"}, "Additional"),
            ({"scenario": "Tomography"}, "scenario"),
            ({"scenario": "WellPosedGaussian", "delta": {"alpha": 3.0}}, "delta/alpha"),
            ({"scenario": "WellPosedGaussian", "inner_draws": 10}, "inner_draws"),
        ],
    )
    def test_semantic_and_schema_errors(self, data, match):
        with pytest.raises(ConfigError, match=match):
            normalize(data)

    def test_small_r_allowed_outside_slope_scenarios(self):
        assert normalize({"scenario": "BoundaryPoisson", "replicates": 5})["replicates"] == 5

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            config.load(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{scenario:")
        with pytest.raises(ConfigError, match="invalid JSON"):
            config.load(bad)
        arr = tmp_path / "arr.json"
        arr.write_text("[]")
        with pytest.raises(ConfigError, match="object"):
            config.load(arr)
