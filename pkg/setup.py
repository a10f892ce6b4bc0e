#!/usr/bin/env python3
"""
Hookcarry Setup Script
Installs the solver stack, checks the QP backend, validates the shipped
configuration and optionally flies one representative scenario.
"""

import argparse
import os
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent
MIN_PYTHON = (3, 10)
QP_BACKEND = "quadprog"


def run_step(args, description, tail=20):
    """Run one setup step without a shell; on failure show the last lines of its output."""
    print(f"🔄 {description}...")
    proc = subprocess.run(args, cwd=ROOT, capture_output=True, text=True)
    if proc.returncode == 0:
        print(f"✅ {description}")
        return True
    print(f"❌ {description} failed (exit {proc.returncode})")
    lines = (proc.stdout + proc.stderr).strip().splitlines()
    for line in lines[-tail:]:
        print(f"   {line}")
    return False


def check_interpreter():
    """numpy/scipy wheels for the solver stack need Python 3.10+."""
    found = sys.version_info[:2]
    if found < MIN_PYTHON:
        print(f"❌ hookcarry needs Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+, found {found[0]}.{found[1]}")
        return False
    print(f"✅ Python {found[0]}.{found[1]}")
    return True


def create_directories():
    """Output tree under HOOKCARRY_OUT (default runs/)."""
    out = Path(os.environ.get("HOOKCARRY_OUT", ROOT / "runs"))
    for directory in (out, out / "batch", out / "windows"):
        directory.mkdir(parents=True, exist_ok=True)
    print(f"✅ Output directory: {out}")


def install_dependencies():
    return run_step([sys.executable, "-m", "pip", "install", "-r", str(ROOT / "requirements.txt")],
                    "Installing dependencies")


def check_qp_backend():
    """qpsolvers only lists backends whose packages import cleanly."""
    check = (f"import sys, qpsolvers; "
             f"sys.exit(0 if '{QP_BACKEND}' in qpsolvers.available_solvers else "
             f"'{QP_BACKEND} missing, available: ' + ', '.join(qpsolvers.available_solvers))")
    return run_step([sys.executable, "-c", check], f"Checking the {QP_BACKEND} QP backend")


def run_tests():
    """Fast suite only; closed-loop scenarios and window searches are marked slow."""
    return run_step([sys.executable, "-m", "pytest", "-q", "-m", "not slow"], "Running fast tests")


def validate_configuration():
    """Load every shipped config and scenario file through the schema checks."""
    check = ("from core.config import SCENARIO_DIR, load_config, load_scenario, load_search; "
             "cfg = load_config(); load_search(dt=cfg.dt); "
             "[load_scenario(p, cfg.dt) for p in sorted(SCENARIO_DIR.glob('*.yaml'))]")
    return run_step([sys.executable, "-c", check], "Validating configuration and scenarios")


def fly_representative_scenario():
    scenario = ROOT / "content" / "scenarios" / "representative_2.yaml"
    return run_step([sys.executable, str(ROOT / "cli.py"), "run", "--scenario", str(scenario)],
                    f"Flying {scenario.name}")


def main():
    parser = argparse.ArgumentParser(description="Set up hookcarry")
    parser.add_argument("--skip-install", action="store_true", help="Skip dependency installation")
    parser.add_argument("--skip-tests", action="store_true", help="Skip the fast test suite")
    parser.add_argument("--with-scenario", action="store_true", help="Also fly one full scenario (about a minute)")
    args = parser.parse_args()

    print("🚁 Hookcarry Setup")
    print("=" * 50)

    if not check_interpreter():
        sys.exit(1)
    create_directories()

    if not args.skip_install and not install_dependencies():
        sys.exit(1)
    if not check_qp_backend():
        print(f"⚠️  Install {QP_BACKEND} (pip install {QP_BACKEND}) or set solver.qp_backend in models/controller.yaml")
        sys.exit(1)
    if not validate_configuration():
        sys.exit(1)

    if not args.skip_tests and not run_tests():
        print("⚠️  Some fast tests failed, continuing")
    if args.with_scenario and not fly_representative_scenario():
        print("⚠️  The scenario did not succeed, see its steps.csv under the output directory")

    print("\n" + "=" * 50)
    print("🎉 Setup complete")
    print("\n📋 Next steps:")
    print("   python cli.py run --scenario content/scenarios/representative_1.yaml")
    print("   python cli.py batch --n 20 --jobs 4")
    print("   python cli.py windows --kind grasp")
    print("\n📚 See HOW_TO_RUN.md")


if __name__ == "__main__":
    main()
