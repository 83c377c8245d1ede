"""
SuperNIC simulation pipeline
Runs scenarios, sweeps and the CapEx calculator, and writes the reports
"""

import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import typer
from joblib import Parallel, delayed
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from tqdm import tqdm

from capex import MODELS, CostParams, compare_models
from errors import ConfigError, SnicError
from metrics import write_reports
from rack import Rack
from sim_config import ScenarioConfig, dump_config, load_config

logger = logging.getLogger(__name__)
console = Console()
app = typer.Typer(add_completion=False, help="SuperNIC rack simulator")

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class SnicPipeline:
    """
    One scenario run: build the rack, simulate, write the reports.

    Features:
    - Deterministic for a fixed config and seed
    - CSV time series, utilization and JSON summary per run
    - Console summary of throughput, latency and drops per user
    """

    def __init__(self, config: ScenarioConfig, out_dir: Optional[str] = None):
        self.config = config
        self.out_dir = out_dir or config.output.dir
        self.rack: Optional[Rack] = None
        self.summary: Optional[Dict] = None
        self.report_files: List[Path] = []

    def run(self, save_results: bool = True) -> Dict:
        start = time.time()
        self.rack = Rack(self.config)
        self.summary = self.rack.run()
        self.summary["events_executed"] = self.rack.clock.events_executed
        if save_results:
            self.report_files = write_reports(self.rack.metrics, self.summary, self.out_dir, self.config.stem)
        # wall time stays out of the written reports so reruns are byte-identical
        self.summary["wall_time_s"] = round(time.time() - start, 3)
        logger.info("%s finished in %.2fs (%d events)", self.config.name, self.summary["wall_time_s"],
                    self.summary["events_executed"])
        return self.summary

    def print_summary(self) -> None:
        """Print per-user results and run counters."""
        summary = self.summary or {}
        table = Table(title=f"{self.config.name} ({self.config.duration_us:.0f} us simulated)")
        for col in ("user", "admitted", "delivered", "dropped", "Gbps", "mean ns", "p95 ns"):
            table.add_column(col, justify="left" if col == "user" else "right")
        for user, row in summary.get("users", {}).items():
            table.add_row(user, str(row["admitted"]), str(row["delivered"]), str(row["dropped"]),
                          f"{row['throughput_gbps']:.3f}", f"{row['latency_ns']['mean']:.0f}",
                          f"{row['latency_ns']['p95']:.0f}")
        console.print(table)
        if summary.get("drops"):
            console.print(f"drops: {summary['drops']}")
        console.print(f"exactly-once violations: {summary.get('exactly_once_violations', 0)}  "
                      f"allocation events: {len(summary.get('allocation_events', []))}  "
                      f"migrations: {len(summary.get('migrations', []))}")
        for path in self.report_files:
            console.print(f" saved {path}")


def run_scenario(config: ScenarioConfig, out_dir: Optional[str] = None) -> Tuple[Dict, List[Path]]:
    """Run one config end to end (module level so sweep workers can pickle it)."""
    pipeline = SnicPipeline(config, out_dir)
    summary = pipeline.run()
    return summary, pipeline.report_files


def parse_sweep(spec: str) -> Tuple[str, List[str]]:
    if "=" not in spec:
        raise ConfigError(f"sweep '{spec}' is not key=v1,v2,...")
    key, values = spec.split("=", 1)
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"sweep '{spec}' lists no values", field=key)
    return key.strip(), items


def sweep_configs(path: str, spec: str, overrides: Sequence[str] = ()) -> List[ScenarioConfig]:
    """One validated config per sweep value; each run gets its own report stem."""
    key, values = parse_sweep(spec)
    base = load_config(path, overrides)
    leaf = key.split(".")[-1]
    return [
        load_config(path, [*overrides, f"{key}={value}", f"output.stem={base.stem}_{leaf}_{value}"])
        for value in values
    ]


def run_sweep(configs: List[ScenarioConfig], jobs: int = 1, out_dir: Optional[str] = None) -> List[Dict]:
    if jobs == 1:
        return [run_scenario(c, out_dir)[0] for c in tqdm(configs, desc="sweep")]
    results = Parallel(n_jobs=jobs)(delayed(run_scenario)(c, out_dir) for c in tqdm(configs, desc="sweep"))
    return [summary for summary, _ in results]


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def _fail(exc: Exception) -> None:
    if isinstance(exc, ConfigError):
        console.print(f"[red]config error:[/red] {exc}")
        raise typer.Exit(EXIT_CONFIG)
    console.print(f"[red]run failed:[/red] {exc}")
    raise typer.Exit(EXIT_RUNTIME)


@app.command()
def run(config: Path = typer.Argument(..., exists=True, dir_okay=False, help="Scenario YAML"),
        set_: List[str] = typer.Option([], "--set", help="Override a.b.c=value"),
        sweep: Optional[str] = typer.Option(None, "--sweep", help="Fan out key=v1,v2,..."),
        jobs: int = typer.Option(1, "--jobs", "-j", help="Parallel sweep workers"),
        out: Optional[str] = typer.Option(None, "--out", help="Report directory"),
        verbose: bool = typer.Option(False, "--verbose", "-v")):
    """Validate and run a scenario, writing its reports."""
    setup_logging(verbose)
    try:
        if sweep:
            _print_sweep(run_sweep(sweep_configs(str(config), sweep, set_), jobs, out), sweep)
            return
        pipeline = SnicPipeline(load_config(str(config), set_), out)
        pipeline.run()
        pipeline.print_summary()
    except (SnicError, ValueError, RuntimeError) as exc:
        _fail(exc)


@app.command("sweep")
def sweep_command(config: Path = typer.Argument(..., exists=True, dir_okay=False),
                  spec: str = typer.Option(..., "--sweep", help="key=v1,v2,..."),
                  set_: List[str] = typer.Option([], "--set"),
                  jobs: int = typer.Option(1, "--jobs", "-j"),
                  out: Optional[str] = typer.Option(None, "--out"),
                  verbose: bool = typer.Option(False, "--verbose", "-v")):
    """Run one scenario per sweep value."""
    setup_logging(verbose)
    try:
        _print_sweep(run_sweep(sweep_configs(str(config), spec, set_), jobs, out), spec)
    except (SnicError, ValueError, RuntimeError) as exc:
        _fail(exc)


def _print_sweep(summaries: List[Dict], spec: str) -> None:
    key, values = parse_sweep(spec)
    table = Table(title=f"sweep {key}")
    table.add_column(key)
    table.add_column("total Gbps", justify="right")
    table.add_column("drops", justify="right")
    for value, summary in zip(values, summaries):
        table.add_row(value, f"{summary['total_throughput_gbps']:.3f}", str(sum(summary["drops"].values())))
    console.print(table)


@app.command()
def capex(endpoints: int = typer.Option(32, "--endpoints", "-n"),
          consolid_ratio: int = typer.Option(4, "--consolid-ratio"),
          nt_cost_ratio: float = typer.Option(0.9, "--nt-cost-ratio"),
          capex_consolid_ratio: float = typer.Option(0.23, "--capex-consolid-ratio"),
          model: Optional[str] = typer.Option(None, "--model", help=f"One of {', '.join(MODELS)}")):
    """Rack CapEx per deployment model."""
    setup_logging(False)
    try:
        params = CostParams(endpoints=endpoints, consolid_ratio=consolid_ratio, nt_cost_ratio=nt_cost_ratio,
                            capex_consolid_ratio=capex_consolid_ratio)
        results = compare_models(params, [model] if model else list(MODELS))
    except ValueError as exc:
        console.print(f"[red]config error:[/red] {exc}")
        raise typer.Exit(EXIT_CONFIG)
    baseline = compare_models(params, ["traditional"])[0]
    table = Table(title=f"CapEx, {params.endpoints} endpoints, {params.pool_devices} pooled devices")
    table.add_column("model")
    table.add_column("total $", justify="right")
    table.add_column("saving", justify="right")
    table.add_column("breakdown")
    for result in results:
        parts = ", ".join(f"{k}={v:,.0f}" for k, v in result.breakdown.items())
        table.add_row(result.model, f"{result.total:,.0f}", f"{result.saving_vs(baseline):.1%}", parts)
    console.print(table)


@app.command()
def validate(config: Path = typer.Argument(..., exists=True, dir_okay=False),
             set_: List[str] = typer.Option([], "--set")):
    """Check a scenario file without running it."""
    setup_logging(False)
    try:
        scenario = load_config(str(config), set_)
        scenario.build_catalog()
    except SnicError as exc:
        _fail(exc)
    console.print(f"[green]ok[/green] {scenario.name}: {len(scenario.dags)} DAG(s), "
                  f"{len(scenario.workloads)} workload(s), {scenario.rack.snics} sNIC(s)")


@app.command("dump-defaults")
def dump_defaults(out: Optional[Path] = typer.Option(None, "--out", help="Write to a file instead of stdout")):
    """Emit the fully defaulted scenario config."""
    text = dump_config(ScenarioConfig())
    if out is None:
        typer.echo(text)
    else:
        out.write_text(text, encoding="utf-8")


# Main execution
if __name__ == "__main__":
    app()
