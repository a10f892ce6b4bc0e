import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import track
from rich.table import Table

from core.config import (CONTROLLER_PATH, DEFAULT_OUT, MODEL_PATH, SEARCH_PATH, HookcarryConfig, load_config,
                         load_scenario, load_search)
from core.controller import VARIANTS
from core.errors import ConfigError, HookcarryError
from core.feasibility import WindowSearchResult, grasp_window_search, placement_window_search
from core.report import build_report, write_json, write_run
from core.scenario import sample_scenarios, with_deviation
from core.sim import deviation_table, iter_batch, run_closed_loop, summarize, timing_overhead

console = Console()
logger = logging.getLogger("hookcarry")

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(message)s",
                        handlers=[RichHandler(console=console, show_path=False)], force=True)


def _load(args) -> HookcarryConfig:
    return load_config(args.model, args.config)


def _seconds(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.2f}"


def cmd_run(args) -> int:
    cfg = _load(args)
    scn = load_scenario(args.scenario, cfg.dt)
    if args.seed is not None:
        scn = replace(scn, seed=args.seed)

    console.print(Panel.fit(f"[bold]{scn.name}[/bold]  controller={args.controller}  seed={scn.seed}",
                            title="hookcarry run"))
    result = run_closed_loop(scn, args.controller, cfg)
    out_dir = Path(args.out) / f"{scn.name}_{args.controller}"
    write_run(result, out_dir)

    table = Table(title="Run summary")
    table.add_column("Status", style="cyan")
    table.add_column("T_g [s]", style="magenta")
    table.add_column("T_p [s]", style="magenta")
    table.add_column("Cost", style="yellow")
    table.add_column("Max violation", style="yellow")
    table.add_row(result.status.value, _seconds(result.T_g), _seconds(result.T_p), f"{result.cost:.2f}",
                  f"{result.max_violation():.2e}")
    console.print(table)
    console.print(f"[green]Artifacts: {out_dir}[/green]")
    return EXIT_OK if result.success else EXIT_FAILED


def cmd_batch(args) -> int:
    cfg = _load(args)
    search = load_search(args.search, cfg.dt)
    study = search.study
    n = study.n_scenarios if args.n is None else args.n
    if n < 1:
        console.print("[red]Scenario set is empty[/red]")
        return EXIT_INPUT
    master_seed = study.master_seed if args.seed is None else args.seed
    scenarios = sample_scenarios(n, master_seed, study.windows, study.bounds)
    controllers = VARIANTS if args.controller is None else (args.controller,)

    console.print(Panel.fit(f"{n} scenarios x {len(study.deviations)} mass deviations x "
                            f"{len(controllers)} controllers, master seed {master_seed}",
                            title="hookcarry batch"))
    parts = []
    for deviation in study.deviations:
        batch = with_deviation(scenarios, deviation)
        for controller in controllers:
            rows = list(track(iter_batch(batch, controller, cfg, args.jobs), total=len(batch),
                              description=f"{controller:>7} {100 * deviation:+4.0f}%", console=console))
            parts.append(summarize(rows).rows)
    rows = pd.concat(parts, ignore_index=True)
    table_frame = deviation_table(rows)

    out_dir = Path(args.out) / "batch"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows.to_csv(out_dir / "rows.csv", index=False)
    table_frame.to_csv(out_dir / "table.csv", index=False)
    write_json(out_dir / "summary.json", {
        'master_seed': master_seed, 'n_scenarios': n, 'deviations': list(study.deviations),
        'table': table_frame.to_dict(orient='records'), 'solve_time_overhead': timing_overhead(table_frame),
        'errors': int((rows['status'] == 'ERROR').sum()),
    })

    table = Table(title="Success rate [%] and average cost per mass deviation")
    table.add_column("Deviation [%]", style="cyan")
    table.add_column("Controller", style="cyan")
    table.add_column("Success [%]", style="magenta")
    table.add_column("Avg cost", style="yellow")
    table.add_column("Mean solve [ms]", style="yellow")
    for rec in table_frame.to_dict(orient='records'):
        cost = "-" if rec['avg_cost'] is None or pd.isna(rec['avg_cost']) else f"{rec['avg_cost']:.1f}"
        table.add_row(f"{rec['deviation_pct']:.0f}", rec['controller'], f"{rec['success_rate']:.0f}", cost,
                      f"{1e3 * rec['solve_time_mean']:.1f}")
    console.print(table)
    console.print(f"[green]Artifacts: {out_dir}[/green]")
    return EXIT_OK


def _certificate_table(result: WindowSearchResult) -> Table:
    table = Table(title=f"{result.kind.capitalize()} window certificate")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="magenta")
    for key, value in result.as_dict().items():
        if key == 'trace':
            continue
        if isinstance(value, float):
            value = f"{value:.3f}"
        elif isinstance(value, list):
            value = "[" + ", ".join(f"{v:.3f}" for v in value) + "]"
        table.add_row(key, str(value))
    return table


def cmd_windows(args) -> int:
    cfg = _load(args)
    search = load_search(args.search, cfg.dt)
    if args.seed is not None:
        search = replace(search, seed=args.seed)
    controller = args.controller or 'ramp'
    kinds = ['grasp', 'placement'] if args.kind == 'both' else [args.kind]

    out_dir = Path(args.out) / "windows"
    feasible = True
    for kind in kinds:
        console.print(Panel.fit(f"{kind} window search, seed {search.seed}", title="hookcarry windows"))
        with console.status(f"Searching {kind} window..."):
            if kind == 'grasp':
                result = grasp_window_search(search, cfg, controller, args.jobs)
            else:
                result = placement_window_search(search, cfg, controller, args.jobs)
        write_json(out_dir / f"{kind}.json", result.as_dict())
        console.print(_certificate_table(result))
        if result.advice:
            console.print(f"[red]{result.advice}[/red]")
        feasible = feasible and result.feasible
    console.print(f"[green]Artifacts: {out_dir}[/green]")
    return EXIT_OK if feasible else EXIT_FAILED


def cmd_report(args) -> int:
    runs = Path(args.runs or args.out)
    trajectories, estimation = build_report(runs, Path(args.out) / "report")
    console.print(f"[green]{len(trajectories)} trajectory files, estimation table {estimation}[/green]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Robust adaptive MPC for aerial pick-and-place")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(CONTROLLER_PATH), help="Controller configuration file")
    common.add_argument("--model", default=str(MODEL_PATH), help="Plant model file")
    common.add_argument("--search", default=str(SEARCH_PATH), help="Search and study settings file")
    common.add_argument("--seed", type=int, help="Override the scenario, master or search seed")
    common.add_argument("--out", default=DEFAULT_OUT, help="Output directory (env HOOKCARRY_OUT)")
    common.add_argument("--jobs", type=int, default=1, help="Worker processes for batches and searches")
    common.add_argument("--controller", choices=VARIANTS, help="Controller variant")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="Run one scenario")
    run.add_argument("--scenario", required=True, help="Scenario file")
    run.set_defaults(func=cmd_run, controller_default='ramp')

    batch = sub.add_parser("batch", parents=[common], help="Nominal versus robust study over mass deviations")
    batch.add_argument("--n", type=int, help="Number of scenarios (default from the search file)")
    batch.set_defaults(func=cmd_batch)

    windows = sub.add_parser("windows", parents=[common], help="Admissible grasp/placement window search")
    windows.add_argument("--kind", choices=["grasp", "placement", "both"], default="both")
    windows.set_defaults(func=cmd_windows)

    report = sub.add_parser("report", parents=[common], help="Plot-ready CSVs from existing runs")
    report.add_argument("--runs", help="Directory holding run outputs (default --out)")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    if args.command == "run" and args.controller is None:
        args.controller = args.controller_default
    if args.jobs < 1:
        console.print("[red]--jobs must be >= 1[/red]")
        return EXIT_INPUT
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        console.print(f"[red]Error: {e}[/red]")
        return EXIT_INPUT
    except (HookcarryError, ValueError, RuntimeError, np.linalg.LinAlgError) as e:
        logger.debug("run aborted", exc_info=True)
        console.print(f"[red]Failed: {e}[/red]")
        return EXIT_FAILED
    except KeyboardInterrupt:
        console.print("[yellow]Interrupted[/yellow]")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
