"""
Scenario configuration: pydantic models, YAML loading with line diagnostics,
and command-line overrides.
"""

import copy
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core_model import NetworkTask, NtDag
from engine import ASIC_CLOCK_MHZ, BASE_CLOCK_MHZ, LinkModel
from errors import ConfigError, InvalidNetworkTask
from workload import LoadStep, WorkloadSpec

logger = logging.getLogger(__name__)

YAML11_WORDS = ("on", "off", "yes", "no", "y", "n")


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LinkConfig(Strict):
    bandwidth_gbps: float = Field(100.0, gt=0)
    latency_ns: float = Field(100.0, ge=0)
    loss_rate: float = Field(0.0, ge=0, lt=1)

    def model(self) -> LinkModel:
        return LinkModel(self.bandwidth_gbps, self.latency_ns, self.loss_rate)


class PrConfig(Strict):
    throughput_mb_s: float = Field(800.0, gt=0)
    region_bitstream_mb: float = Field(4.0, gt=0)
    max_bitstream_mb: float = Field(5.0, gt=0)

    @model_validator(mode="after")
    def _region_fits_limit(self):
        # a full region must be loadable by partial reconfiguration
        if self.region_bitstream_mb > self.max_bitstream_mb:
            raise ValueError(f"region_bitstream_mb {self.region_bitstream_mb} exceeds max_bitstream_mb "
                             f"{self.max_bitstream_mb}")
        return self


class VictimConfig(Strict):
    keep_fraction: float = Field(0.5, ge=0, le=1)


class AutoscaleConfig(Strict):
    enabled: bool = False
    up: float = Field(0.9, gt=0)
    down: float = Field(0.5, ge=0)
    sustain_epochs: int = Field(1, ge=1)


class SnicConfig(Strict):
    regions: int = Field(3, ge=1)
    region_capacity: int = Field(2, ge=1)
    credits: int = Field(8, ge=1)
    buffer_depth: int = Field(4096, ge=1)
    scheduler_delay_cycles: int = Field(16, ge=0)
    scheduling_mode: Literal["chain", "per_nt"] = "chain"
    skip_mask_cycles: int = Field(0, ge=0)
    port_bandwidth_gbps: float = Field(100.0, gt=0)
    host_link: LinkConfig = Field(default_factory=LinkConfig)
    pr: PrConfig = Field(default_factory=PrConfig)
    memory_gb: float = Field(10.0, gt=0)
    state_bandwidth_gbytes: float = Field(10.0, gt=0)
    swap_enabled: bool = False
    boot_loaded: bool = False
    usable_regions: Optional[int] = Field(None, ge=1)
    victim: VictimConfig = Field(default_factory=VictimConfig)
    parallelism: Literal["auto", "on", "off"] = "auto"
    instances: Optional[float] = Field(None, gt=0)
    autoscale: AutoscaleConfig = Field(default_factory=AutoscaleConfig)
    shaper_depth: int = Field(256, ge=1)
    shaper_burst_bytes: int = Field(16 * 1024, ge=1)
    lut_per_area_unit: Optional[float] = Field(None, gt=0)


class FairnessConfig(Strict):
    mode: Literal["snic", "drf_only", "static"] = "snic"
    oversubscription_rule: Literal["intended", "requested_ratio"] = "intended"
    demand_form: Literal["product", "ratio"] = "product"
    epoch_us: float = Field(20.0, gt=0)
    ewma_keep: float = Field(0.25, ge=0, lt=1)


class SnicOverride(Strict):
    regions: Optional[int] = Field(None, ge=1)
    usable_regions: Optional[int] = Field(None, ge=1)


class RackConfig(Strict):
    snics: int = Field(1, ge=1)
    topology: Literal["ring", "line", "full", "star"] = "ring"
    link: LinkConfig = Field(default_factory=lambda: LinkConfig(bandwidth_gbps=100.0, latency_ns=500.0))
    gossip_period_us: float = Field(100.0, gt=0)
    distribution: bool = False
    overrides: Dict[int, SnicOverride] = Field(default_factory=dict)


class NtConfig(Strict):
    id: str
    area: Optional[int] = Field(None, ge=1)
    luts: Optional[int] = Field(None, ge=1)
    max_bandwidth_gbps: float = Field(10.0, gt=0)
    proc_latency_cycles: int = Field(10, ge=1)
    stateful: bool = False
    state_size: int = Field(0, ge=0)
    mem_footprint: int = Field(0, ge=0)
    shareable: bool = True
    kind: str = "generic"
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _area_source(self):
        if self.area is None and self.luts is None:
            self.area = 1
        return self


class DagConfig(Strict):
    uid: str
    owner: str
    nodes: List[str]
    edges: List[Tuple[str, str]] = Field(default_factory=list)
    requested_gbps: float = Field(gt=0)
    memory_bytes: int = Field(0, ge=0)
    snic: int = Field(0, ge=0)
    deploy_at_us: float = Field(0.0, ge=0)

    def dag(self) -> NtDag:
        return NtDag(self.uid, self.owner, list(self.nodes), [tuple(e) for e in self.edges],
                     self.requested_gbps, self.memory_bytes)


class LoadStepConfig(Strict):
    at_us: float = Field(ge=0)
    rate_gbps: float = Field(ge=0)
    size_bytes: Optional[int] = Field(None, ge=1)


class WorkloadConfig(Strict):
    user: str = ""
    dag_uid: Optional[str] = None
    process: Literal["constant", "poisson", "on_off", "trace"] = "constant"
    rate_gbps: float = Field(1.0, ge=0)
    size_bytes: int = Field(1024, ge=1)
    size_distribution: str = "fixed"
    timeline: List[LoadStepConfig] = Field(default_factory=list)
    start_us: float = Field(0.0, ge=0)
    stop_us: Optional[float] = Field(None, ge=0)
    on_us: float = Field(10.0, gt=0)
    off_us: float = Field(10.0, ge=0)
    flows: int = Field(16, ge=1)
    zipf_keys: Optional[int] = Field(None, ge=1)
    zipf_theta: float = Field(0.99, ge=0)
    sequenced: bool = False
    trace_path: Optional[str] = None
    snic: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _trace_needs_path(self):
        if self.process == "trace" and not self.trace_path:
            raise ValueError("trace workloads need trace_path")
        return self

    def spec(self) -> WorkloadSpec:
        data = self.model_dump()
        data["timeline"] = [LoadStep(**s) for s in data["timeline"]]
        return WorkloadSpec(**data)


class EventConfig(Strict):
    at_us: float = Field(ge=0)
    action: Literal["deschedule", "deploy"]
    dag_uid: str
    snic: Optional[int] = Field(None, ge=0)


class OutputConfig(Strict):
    dir: str = "results"
    stem: Optional[str] = None
    trace: bool = False


class ScenarioConfig(Strict):
    name: str = "scenario"
    seed: int = 1
    duration_us: float = Field(1000.0, gt=0)
    warmup_us: float = Field(0.0, ge=0)
    asic_projection: bool = False
    max_events: int = Field(50_000_000, ge=1)
    snic: SnicConfig = Field(default_factory=SnicConfig)
    fairness: FairnessConfig = Field(default_factory=FairnessConfig)
    rack: RackConfig = Field(default_factory=RackConfig)
    catalog: List[NtConfig] = Field(default_factory=list)
    dags: List[DagConfig] = Field(default_factory=list)
    workloads: List[WorkloadConfig] = Field(default_factory=list)
    events: List[EventConfig] = Field(default_factory=list)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.warmup_us >= self.duration_us:
            raise ValueError("warmup_us must be shorter than duration_us")
        ids = [nt.id for nt in self.catalog]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate NT ids in catalog")
        uids = [d.uid for d in self.dags]
        if len(uids) != len(set(uids)):
            raise ValueError("duplicate DAG uids")
        for d in self.dags:
            if d.snic >= self.rack.snics:
                raise ValueError(f"dag {d.uid} placed on sNIC {d.snic}, rack has {self.rack.snics}")
        if any(nt.luts is not None and nt.area is None for nt in self.catalog) and not self.snic.lut_per_area_unit:
            raise ValueError("NTs given by luts need snic.lut_per_area_unit")
        return self

    @property
    def clock_mhz(self) -> float:
        return ASIC_CLOCK_MHZ if self.asic_projection else BASE_CLOCK_MHZ

    @property
    def stem(self) -> str:
        return self.output.stem or self.name

    def build_catalog(self) -> Dict[str, NetworkTask]:
        catalog = {}
        for nt in self.catalog:
            area = nt.area
            if area is None:
                area = max(1, -(-nt.luts // int(self.snic.lut_per_area_unit)))
            try:
                catalog[nt.id] = NetworkTask(nt.id, area, nt.max_bandwidth_gbps, nt.proc_latency_cycles,
                                             nt.stateful, nt.state_size, nt.mem_footprint, nt.shareable,
                                             nt.kind, float(nt.params.get("replicas", 1))
                                             if nt.kind == "kv_replication" else 1.0)
            except InvalidNetworkTask as exc:
                raise ConfigError(str(exc), field=f"catalog.{nt.id}") from exc
        return catalog

    def behavior_params(self) -> Dict[str, Tuple[str, Dict[str, Any]]]:
        return {nt.id: (nt.kind, dict(nt.params)) for nt in self.catalog}


# ---------- Loading ----------
def _line_of(node: Optional[yaml.Node], path: Sequence[Any]) -> Optional[int]:
    """1-based line of the YAML node at a pydantic error location (deepest match)."""
    line = None
    for part in path:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for key, value in node.value:
                if str(key.value) == str(part):
                    nxt = value
                    line = key.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
        else:
            node = None
    if node is not None:
        line = node.start_mark.line + 1
    return line


def _raise_config_error(exc: ValidationError, root: Optional[yaml.Node]) -> None:
    err = exc.errors()[0]
    loc = [p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-after"))]
    field = ".".join(str(p) for p in loc) or None
    raise ConfigError(err["msg"], field=field, line=_line_of(root, loc) if root is not None else None) from exc


def validate_config(raw: Dict[str, Any], root: Optional[yaml.Node] = None) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(raw or {})
    except ValidationError as exc:
        _raise_config_error(exc, root)


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` overrides to the raw tree (values parsed as YAML)."""
    tree = copy.deepcopy(raw) if raw else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        parsed = yaml.safe_load(value)
        if isinstance(parsed, bool) and value.strip().lower() in YAML11_WORDS:
            # pydantic still reads these as booleans; Literal fields need the word
            parsed = value.strip()
        if isinstance(node, list):
            node[int(last)] = parsed
        else:
            node[last] = parsed
    return tree


def read_raw(path: str) -> Tuple[Dict[str, Any], Optional[yaml.Node]]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", line=mark.line + 1 if mark else None) from exc
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must contain a mapping")
    return raw, root


def load_config(path: str, overrides: Sequence[str] = ()) -> ScenarioConfig:
    """
    Load and validate a scenario file.

    Raises:
        ConfigError: with the dotted field path and file line of the first problem
    """
    raw, root = read_raw(path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    config = validate_config(raw, root)
    logger.info("loaded scenario %s from %s", config.name, path)
    return config


def dump_config(config: ScenarioConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def save_config(config: ScenarioConfig, path: str) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")


if __name__ == "__main__":
    print(dump_config(ScenarioConfig()))
