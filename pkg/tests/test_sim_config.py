import pytest
import yaml

from conftest import DATA_DIR, load_raw
from errors import ConfigError
from sim_config import ScenarioConfig, apply_overrides, dump_config, load_config, validate_config


def _write(tmp_path, text):
    path = tmp_path / "scenario.yaml"
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.mark.parametrize("path", sorted(DATA_DIR.glob("*.yaml")), ids=lambda p: p.stem)
def test_bundled_scenarios_validate(path):
    config = load_config(str(path))
    assert config.name == path.stem
    assert config.build_catalog()


def test_error_names_field_and_line(tmp_path):
    path = _write(tmp_path, "name: x\nsnic:\n  regions: 0\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.field == "snic.regions"
    assert info.value.line == 3


def test_error_inside_a_list(tmp_path):
    path = _write(tmp_path, "catalog:\n  - {id: a}\n  - {id: b, area: 0}\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.field == "catalog.1.area"
    assert info.value.line == 3


def test_unknown_fields_are_rejected():
    with pytest.raises(ConfigError) as info:
        validate_config({"snic": {"regoins": 3}})
    assert info.value.field == "snic.regoins"


@pytest.mark.parametrize("raw", [
    {"duration_us": 10, "warmup_us": 10},
    {"catalog": [{"id": "a"}, {"id": "a"}]},
    {"dags": [{"uid": "d", "owner": "U1", "nodes": ["a"], "requested_gbps": 1, "snic": 1}]},
    {"catalog": [{"id": "a", "luts": 5000}]},
])
def test_cross_checks(raw):
    with pytest.raises(ConfigError) as info:
        validate_config(raw)
    assert info.value.field is None


def test_region_bitstream_must_fit_the_reconfiguration_limit():
    with pytest.raises(ConfigError) as info:
        validate_config({"snic": {"pr": {"region_bitstream_mb": 6.0}}})
    assert info.value.field == "snic.pr"
    assert validate_config({"snic": {"pr": {"region_bitstream_mb": 6.0, "max_bitstream_mb": 8.0}}})


def test_trace_workload_needs_path():
    with pytest.raises(ConfigError):
        validate_config({"workloads": [{"process": "trace"}]})


def test_invalid_yaml_and_non_mapping(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "snic: [1, 2\n"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "- 1\n- 2\n"))


def test_overrides_keep_yaml11_words_as_strings():
    raw = apply_overrides({}, ["snic.parallelism=off", "rack.distribution=false", "snic.regions=5",
                               "fairness.epoch_us=2.5"])
    assert raw == {"snic": {"parallelism": "off", "regions": 5},
                   "rack": {"distribution": False}, "fairness": {"epoch_us": 2.5}}
    config = validate_config(raw)
    assert config.snic.parallelism == "off"
    assert config.rack.distribution is False


def test_overrides_index_into_lists():
    raw = apply_overrides(load_raw("shared_nts"), ["workloads.1.rate_gbps=12"])
    assert raw["workloads"][1]["rate_gbps"] == 12
    with pytest.raises(ConfigError):
        apply_overrides({}, ["snic.regions"])


def test_load_applies_overrides(tmp_path):
    path = _write(tmp_path, "name: x\n")
    assert load_config(path, ["snic.credits=1"]).snic.credits == 1


@pytest.mark.parametrize("name", ["shared_nts", "migration"])
def test_dump_reloads_to_the_same_config(name):
    config = validate_config(load_raw(name))
    assert validate_config(yaml.safe_load(dump_config(config))).model_dump() == config.model_dump()


def test_catalog_area_from_luts():
    config = validate_config({"snic": {"lut_per_area_unit": 1000},
                              "catalog": [{"id": "a", "luts": 2500}, {"id": "b", "luts": 10}]})
    catalog = config.build_catalog()
    assert catalog["a"].area == 3
    assert catalog["b"].area == 1


def test_catalog_reports_bad_nt():
    config = validate_config({"catalog": [{"id": "s", "stateful": True}]})
    with pytest.raises(ConfigError) as info:
        config.build_catalog()
    assert info.value.field == "catalog.s"


def test_defaults_and_clock():
    config = ScenarioConfig()
    assert config.snic.regions == 3
    assert config.clock_mhz == pytest.approx(250.0)
    assert config.stem == "scenario"
    assert validate_config({"asic_projection": True}).clock_mhz > 250.0
