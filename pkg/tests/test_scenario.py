"""Scenario loading, defaults and dotted overrides."""
import pytest

from src.services.scenario import (
    ConfigError,
    ScenarioConfig,
    apply_overrides,
    build_scenario,
    dump_config,
    load_fleet_file,
    load_scenario,
)
from tests.conftest import SCENARIOS


def test_golden_scenario_loads():
    config = load_scenario(SCENARIOS / "golden.yaml")
    assert config.fleet.devices == 100
    assert len(config.fleet.device_classes) == 5
    assert config.policy.k == 10
    assert config.policy.rounds == 50
    assert config.policy.name == "smartsplit"
    assert config.resolve(config.model.profile).is_file()


def test_defaults_fill_missing_sections():
    config = build_scenario({})
    assert config == ScenarioConfig(base_dir=".")
    assert config.policy.bo.eval_budget == 60
    assert config.policy.baselines.fgc_time == 1.4
    assert config.dynamics.gamma == 0.7


def test_policy_shorthand_override():
    config = load_scenario(SCENARIOS / "golden.yaml", ["policy=fedavg", "policy.k=5", "seed=3"])
    assert config.policy.name == "fedavg"
    assert config.policy.k == 5
    assert config.seed == 3


def test_override_parses_yaml_values():
    raw = apply_overrides({}, ["policy.u_split=false", "dynamics.gamma=0.5", "model.profile=profiles/vgg16.yaml"])
    assert raw == {
        "policy": {"u_split": False},
        "dynamics": {"gamma": 0.5},
        "model": {"profile": "profiles/vgg16.yaml"},
    }


def test_override_does_not_touch_input():
    raw = {"policy": {"k": 4}}
    apply_overrides(raw, ["policy.k=2"])
    assert raw == {"policy": {"k": 4}}


def test_unknown_key_names_itself():
    with pytest.raises(ConfigError) as err:
        load_scenario(SCENARIOS / "golden.yaml", ["policy.bogus=1"])
    assert err.value.key == "policy.bogus"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["seed.deeper=1"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])


def test_invalid_values_name_the_key():
    with pytest.raises(ConfigError) as err:
        build_scenario({"policy": {"name": "nope"}})
    assert err.value.key.startswith("policy.name")
    with pytest.raises(ConfigError) as err:
        build_scenario({"policy": {"bo": {"eval_budget": 5, "initial_design": 10}}})
    assert err.value.key.startswith("policy.bo")


def test_k_must_fit_the_fleet():
    with pytest.raises(ConfigError, match="exceeds"):
        load_scenario(SCENARIOS / "golden.yaml", ["fleet.devices=5"])


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_scenario(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("policy: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_scenario(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_scenario(scalar)


def test_fleet_file_validation(tmp_path):
    fleet = load_fleet_file(SCENARIOS / "toy_fleet.yaml")
    assert len(fleet.devices) == 6
    assert fleet.devices[0].budget_trace == [(0.0, 4.0e6)]
    bad = tmp_path / "fleet.yaml"
    bad.write_text("classes: 2\ndevices:\n  - {id: 0, flops_per_second: -1}\n")
    with pytest.raises(ConfigError) as err:
        load_fleet_file(bad)
    assert err.value.key.startswith("fleet.devices")


def test_dump_round_trips():
    config = load_scenario(SCENARIOS / "toy.yaml")
    again = build_scenario(dump_config(config), base_dir=config.base_dir)
    assert again == config
