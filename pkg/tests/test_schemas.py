import math

import orjson
import pytest

from app.api.schemas import (
    ExperimentConfig,
    format_fixed_weight,
    parse_fixed_weight,
    parse_snr,
    snr_label,
)
from app.core.exceptions import ConfigurationError
from app.models.game import FixedWeight


class TestFixedWeightSpec:
    def test_one_based_spec(self):
        assert parse_fixed_weight("player=1,index=5,value=2.0") == FixedWeight(player=0, index=4, value=2.0)

    def test_whitespace_and_case(self):
        assert parse_fixed_weight(" Player=2 , INDEX=1 , value=0.5 ") == FixedWeight(player=1, index=0, value=0.5)

    @pytest.mark.parametrize("spec", ["player=1,index=5", "player=0,index=1,value=1", "player=1;index=1;value=1"])
    def test_invalid_specs(self, spec):
        with pytest.raises(ValueError):
            parse_fixed_weight(spec)

    def test_format_is_parseable(self):
        fw = FixedWeight(player=1, index=4, value=2.0)
        assert format_fixed_weight(fw) == "player=2,index=5,value=2.0"
        assert parse_fixed_weight(format_fixed_weight(fw)) == fw


class TestSnr:
    @pytest.mark.parametrize("text", ["inf", "Infinity", "∞", "+inf"])
    def test_infinity_spellings(self, text):
        assert parse_snr(text) == math.inf

    def test_labels(self):
        assert snr_label(math.inf) == "inf"
        assert snr_label(20.0) == "20"
        assert snr_label(12.5) == "12.5"

    def test_comma_separated_override(self):
        config = ExperimentConfig(snr="30,inf")
        assert config.snr == [30.0, math.inf]

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(snr=["nan"])


class TestExperimentConfig:
    """Experiment configuration loading."""

    def test_defaults(self):
        config = ExperimentConfig()
        assert config.system == "ball-on-beam"
        assert config.concept == "cg"
        assert config.snr == [15.0, 20.0, 25.0, 30.0, math.inf]
        assert config.pipelines == ["CG", "NOLN", "LOLN", "FB"]
        assert config.seeds == 20
        assert config.feature_samples == 2_000
        assert config.mle_scale is None

    @pytest.mark.parametrize("alias, concept", [("OL", "ol-nash"), ("feedback", "fb-nash"), ("Pareto", "cg")])
    def test_concept_aliases(self, alias, concept):
        assert ExperimentConfig(concept=alias).concept == concept

    def test_unknown_fields_rejected(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig.load(overrides={"horizn": 10})

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_bytes(orjson.dumps({"seed": 3, "concept": "fb", "pipelines": ["loln"]}))
        config = ExperimentConfig.load(path, {"seed": 9, "concept": None})
        assert config.seed == 9
        assert config.concept == "fb-nash"
        assert config.pipelines == ["LOLN"]

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ExperimentConfig.load(tmp_path / "absent.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        with pytest.raises(ConfigurationError):
            ExperimentConfig.load(broken)
        listed = tmp_path / "list.json"
        listed.write_text("[1, 2]")
        with pytest.raises(ConfigurationError):
            ExperimentConfig.load(listed)

    def test_resolved_settings(self, settings):
        config = ExperimentConfig(dt=0.1, horizon=11, d_variant="plain", workers=3, seed=5)
        resolved = config.resolved_settings(settings)
        assert resolved.dt == 0.1
        assert resolved.horizon == 11
        assert resolved.d_variant == "plain"
        assert resolved.workers == 3
        assert settings.dt == 0.02

    def test_inline_lq_game(self, settings):
        config = ExperimentConfig(
            lq={"A": [[1.0]], "B": [[[1.0]], [[1.0]]], "theta": [[1.0, 1.0], [1.0, 1.0]], "discrete": True, "dt": 1.0},
            horizon=2,
            x1=[2.0],
        )
        system = config.build_system(config.resolved_settings(settings))
        assert system.game.horizon == 2
        assert system.x1.tolist() == [2.0]
        assert system.is_linear

    def test_bare_lq_document(self, settings, tmp_path):
        """A file holding just the game (A and B at the top level) is read as the inline game."""
        path = tmp_path / "game.json"
        doc = {
            "name": "scalar",
            "A": [[1.0]],
            "B": [[[1.0]], [[1.0]]],
            "theta": [[1.0, 1.0], [1.0, 1.0]],
            "discrete": True,
            "dt": 1.0,
            "horizon": 2,
            "x1": [2.0],
            "concept": "ol",
        }
        path.write_bytes(orjson.dumps(doc))
        config = ExperimentConfig.load(path)
        assert config.lq["A"] == [[1.0]]
        assert config.lq["discrete"] is True
        assert config.concept == "ol-nash"
        system = config.build_system(config.resolved_settings(settings))
        assert system.is_linear
        assert system.game.name == "scalar"
        assert system.game.horizon == 2
        assert system.x1.tolist() == [2.0]

    def test_mle_scale_reaches_the_settings(self, settings):
        assert ExperimentConfig(mle_scale="fixed").resolved_settings(settings).mle_scale == "fixed"
        assert ExperimentConfig().resolved_settings(settings).mle_scale == "profile"

    def test_theta_override_keeps_control_weights_fixed(self, settings):
        config = ExperimentConfig(system="ball-on-beam-lq", theta=[[1, 1, 1, 1, 4], [1, 1, 1, 1, 5]], horizon=3)
        system = config.build_system(config.resolved_settings(settings))
        assert [fw.value for fw in system.theta.fixed] == [4.0, 5.0]
        assert config.fixed_weights(system) == system.theta.fixed

    def test_theta_override_checks_shape(self, settings):
        config = ExperimentConfig(system="ball-on-beam-lq", theta=[[1, 1]], horizon=3)
        with pytest.raises(ConfigurationError):
            config.build_system(config.resolved_settings(settings))

    def test_echo_uses_spec_strings(self):
        config = ExperimentConfig(fixed=["player=1,index=5,value=2.0"], snr=["inf"])
        echoed = config.echo()
        assert echoed["fixed"] == ["player=1,index=5,value=2.0"]
        assert echoed["snr"] == ["inf"]
        assert echoed["out"] == "results"
