"""
Rack CapEx calculator.

Compares a traditional rack (one NIC, cable and switch port per endpoint)
with racks where endpoints keep a down-scaled NIC and share pooled devices,
either sNICs or multi-host NICs, connected as a ring or directly.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List

logger = logging.getLogger(__name__)

MODELS = ("traditional", "snic-ring", "snic-direct", "mhnic-ring", "mhnic-direct")


@dataclass(frozen=True)
class CostParams:
    endpoints: int = 32
    switch_port: float = 250.0
    nic: float = 500.0
    cable: float = 100.0
    ds_nic_factor: float = 0.2
    ds_cable_factor: float = 0.6
    consolid_ratio: int = 4
    nt_cost_ratio: float = 0.9
    capex_consolid_ratio: float = 0.23

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0 or (value == 0 and name in ("endpoints", "consolid_ratio")):
                raise ValueError(f"cost parameter {name} must be positive, got {value}")

    @property
    def pool_devices(self) -> int:
        return math.ceil(self.endpoints / self.consolid_ratio)

    @property
    def capex_ratio(self) -> float:
        return (1.0 - self.nt_cost_ratio) + self.nt_cost_ratio * self.capex_consolid_ratio

    @property
    def mhnic_device(self) -> float:
        # rack-total multi-host NIC cost spread over the pool devices
        return self.nic * self.consolid_ratio

    @property
    def snic_device(self) -> float:
        return self.mhnic_device * self.capex_ratio


@dataclass
class CapexResult:
    model: str
    total: float
    breakdown: Dict[str, float] = field(default_factory=dict)

    def saving_vs(self, baseline: "CapexResult") -> float:
        return 1.0 - self.total / baseline.total


def compute_capex(params: CostParams, model: str) -> CapexResult:
    """
    Rack cost for one deployment model.

    Args:
        params: Unit costs and ratios
        model: One of MODELS

    Returns:
        CapexResult with the total and the per-component split
    """
    if model not in MODELS:
        raise ValueError(f"unknown CapEx model '{model}', expected one of {', '.join(MODELS)}")
    n, m = params.endpoints, params.pool_devices

    if model == "traditional":
        breakdown = {
            "endpoint_nics": n * params.nic,
            "endpoint_cables": n * params.cable,
            "switch_ports": n * params.switch_port,
        }
        return CapexResult(model, sum(breakdown.values()), breakdown)

    pooled, topology = model.split("-")
    device = params.snic_device if pooled == "snic" else params.mhnic_device
    endpoint_cable = params.cable * (params.ds_cable_factor if topology == "ring" else 1.0)
    breakdown = {
        "endpoint_nics": n * params.nic * params.ds_nic_factor,
        "endpoint_cables": n * endpoint_cable,
        f"{pooled}_devices": m * device,
        "device_cables": m * params.cable,
        "switch_ports": m * params.switch_port,
    }
    return CapexResult(model, sum(breakdown.values()), breakdown)


def compare_models(params: CostParams, models: List[str] = MODELS) -> List[CapexResult]:
    results = [compute_capex(params, m) for m in models]
    logger.debug("capex %s", {r.model: r.total for r in results})
    return results
