import pytest

from capex import MODELS, CostParams, compare_models, compute_capex


def test_default_rack_totals():
    totals = {r.model: r.total for r in compare_models(CostParams())}
    assert totals == pytest.approx({
        "traditional": 27200.0,
        "snic-ring": 12832.0,
        "snic-direct": 14112.0,
        "mhnic-ring": 23920.0,
        "mhnic-direct": 25200.0,
    })


def test_snic_device_cost_ratio():
    params = CostParams()
    assert params.capex_ratio == pytest.approx(0.307)
    assert params.pool_devices == 8


def test_snic_ring_saves_over_half():
    params = CostParams()
    traditional = compute_capex(params, "traditional")
    assert compute_capex(params, "snic-ring").saving_vs(traditional) > 0.5


def test_breakdown_adds_up():
    for model in MODELS:
        result = compute_capex(CostParams(endpoints=10), model)
        assert sum(result.breakdown.values()) == pytest.approx(result.total)


def test_pool_rounds_up():
    assert CostParams(endpoints=10).pool_devices == 3


@pytest.mark.parametrize("kwargs", [{"endpoints": 0}, {"nic": -1.0}, {"consolid_ratio": 0}])
def test_invalid_params(kwargs):
    with pytest.raises(ValueError):
        CostParams(**kwargs)


def test_unknown_model():
    with pytest.raises(ValueError):
        compute_capex(CostParams(), "smartnic-star")
