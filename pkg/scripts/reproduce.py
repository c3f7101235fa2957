"""Run every shipped experiment and collect the outputs under one directory.

    python3 scripts/reproduce.py [--out results] [--quick]

Layout of the output directory:

    prepare/        state-preparation check (paper.cfg)
    teleport/       teleportation, preparation regime (paper.cfg)
    process-tomo/   process matrix (paper.cfg)
    heralded/       teleportation, heralded regime (paper-heralded.cfg)
    rates/          rate and noise budget (paper.cfg)
    sweep-P_A/      P_A from 3e-3 down to 3e-4
    sweep-tau/      memory lifetime 50, 129, 500 us

``--quick`` divides every cycle count by 20 for a smoke run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ensemble_teleport import cli, config

ROOT = Path(__file__).resolve().parent.parent
PAPER = ROOT / "configs" / "paper.cfg"
HERALDED = ROOT / "configs" / "paper-heralded.cfg"

RUNS = [
    ("prepare", ["prepare", "--config", str(PAPER)], PAPER),
    ("teleport", ["teleport", "--config", str(PAPER)], PAPER),
    ("process-tomo", ["process-tomo", "--config", str(PAPER)], PAPER),
    ("heralded", ["teleport", "--config", str(HERALDED)], HERALDED),
    ("rates", ["rates", "--config", str(PAPER)], PAPER),
    ("sweep-P_A", ["sweep", "--config", str(PAPER), "P_A", "3e-3", "2e-3", "1e-3", "6e-4", "3e-4"], PAPER),
    ("sweep-tau", ["sweep", "--config", str(PAPER), "lifetime_tau", "50", "129", "500"], PAPER),
]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results")
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    worst = 0
    for name, argv, cfg_path in RUNS:
        extra = ["--out", str(Path(args.out) / name)]
        if args.quick:
            per_target = max(config.load(cfg_path).schedule.values()) // 20
            extra += ["--cycles", str(per_target)]
        print(f"== {name}", flush=True)
        code = cli.main(argv + extra)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
