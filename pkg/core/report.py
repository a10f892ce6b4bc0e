"""
Run artifacts on disk and the tidy, plot-ready tables built from them.

A run directory holds steps.csv (per-step log, fixed column order),
timing.csv (controller wall time per step) and summary.json.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from .sim import SimResult

logger = logging.getLogger(__name__)

STEPS_FILE = "steps.csv"
TIMING_FILE = "timing.csv"
SUMMARY_FILE = "summary.json"
TRAJECTORY_COLUMNS = ['t', 'x', 'y', 'z', 'hook_x', 'hook_y', 'hook_z', 'phase']


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_json(path: Path, data: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_run(result: SimResult, out_dir: Path) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = out_dir / STEPS_FILE
    result.to_frame().to_csv(steps, index=False)
    timing = out_dir / TIMING_FILE
    result.timing_frame().to_csv(timing, index=False)
    summary = result.summary()
    summary['scenario'] = result.scenario.as_dict()
    paths = {'steps': steps, 'timing': timing, 'summary': write_json(out_dir / SUMMARY_FILE, summary)}
    logger.info("wrote run artifacts to %s", out_dir)
    return paths


def collect_runs(root: Path) -> List[Path]:
    """Run directories below root, sorted by path."""
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p.parent for p in root.rglob(SUMMARY_FILE) if (p.parent / STEPS_FILE).is_file())


def trajectory_frame(steps: pd.DataFrame) -> pd.DataFrame:
    return steps[TRAJECTORY_COLUMNS].copy()


def estimation_frame(steps: pd.DataFrame, summary: Dict, run: str) -> pd.DataFrame:
    """Mass estimate with its 3-sigma band from the grasp on, time measured from the grasp."""
    T_g = summary.get('T_g')
    if T_g is None:
        return pd.DataFrame(columns=['run', 't_since_grasp', 'm_L_hat', 'lower', 'upper', 'true_mass'])
    after = steps[steps['t'] >= T_g]
    return pd.DataFrame({
        'run': run,
        't_since_grasp': after['t'].to_numpy() - T_g,
        'm_L_hat': after['m_L_hat'].to_numpy(),
        'lower': after['m_L_hat'].to_numpy() - 3.0 * after['m_L_std'].to_numpy(),
        'upper': after['m_L_hat'].to_numpy() + 3.0 * after['m_L_std'].to_numpy(),
        'true_mass': summary.get('true_mass'),
    })


def build_report(runs_root: Path, out_dir: Path) -> Tuple[List[Path], Path]:
    """One trajectory CSV per run and a single estimation CSV over all runs."""
    runs = collect_runs(runs_root)
    if not runs:
        raise FileNotFoundError(f"no run directories with {SUMMARY_FILE} and {STEPS_FILE} under {runs_root}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajectories, estimates = [], []
    for run in runs:
        rel = run.relative_to(Path(runs_root))
        name = run.name if rel == Path('.') else rel.as_posix().replace('/', '__')
        steps = pd.read_csv(run / STEPS_FILE)
        summary = json.loads((run / SUMMARY_FILE).read_text(encoding="utf-8"))
        path = out_dir / f"trajectory_{name}.csv"
        trajectory_frame(steps).to_csv(path, index=False)
        trajectories.append(path)
        estimates.append(estimation_frame(steps, summary, name))
    estimation = out_dir / "estimation.csv"
    pd.concat(estimates, ignore_index=True).to_csv(estimation, index=False)
    logger.info("report over %d runs written to %s", len(runs), out_dir)
    return trajectories, estimation
