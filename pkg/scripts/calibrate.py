"""Fit the free noise knobs of configs/paper.cfg and configs/paper-heralded.cfg.

The published experiment quotes these figures but no noise rates:

    preparation check:               prepared-state fidelity 0.975
    preparation regime (P_A = 3e-3): mean fidelity 0.95, process fidelity 0.87
    heralded regime    (P_A = 3e-4): mean fidelity 0.93, F_her = F * eta_her 0.88

Only the knobs without a quoted value are scanned: read-out noise factor,
two-photon visibility, dark-count probability and the photon-1 analysis
misalignment. Every figure is evaluated at infinite statistics from the exact
per-attempt event distribution, so the scan is deterministic and fast. Points
are ranked by the squared distance to the quoted figures among those at least MARGIN inside the
acceptance windows (the preparation fidelity has no window).

    python3 scripts/calibrate.py [--base configs/paper.cfg] [--top 10]
"""

from __future__ import annotations

import argparse
import itertools
from dataclasses import replace

from ensemble_teleport import config
from ensemble_teleport.analysis import expected_figures

GRID = {
    "readout_noise_factor": (0.2, 0.35, 0.5),
    "bsm_visibility": (0.85, 0.88, 0.9),
    "dark_count_prob": (1e-5, 3e-5, 5e-5),
    "rsp_rotation": ((0.0, 0.0, 0.0), (0.0, 0.1, 0.0), (0.0, 0.2, 0.0)),
}
HERALDED_P_A = 3e-4

TARGETS = {"Fprep": 0.975, "F1": 0.95, "Fproc": 0.87, "F2": 0.93, "Fher": 0.88}
# distance kept from each window edge so Monte Carlo scatter at the shipped cycle counts stays inside
MARGIN = 0.005
WINDOWS = {"F1": (0.93, 0.97), "Fproc": (0.84, 0.90), "F2": (0.91, 0.95), "Fher": (0.81, 0.95)}


def evaluate(noise, timing) -> dict:
    prep = expected_figures(noise, timing)
    her = expected_figures(replace(noise, P_A=HERALDED_P_A), timing, reference_noise=noise)
    return {
        "Fprep": prep["prep_fidelity"],
        "F1": prep["teleport_fidelity"],
        "Fproc": prep["process_fidelity"],
        "F2": her["teleport_fidelity"],
        "Fher": her["heralded_fidelity"],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--base", default="configs/paper.cfg")
    ap.add_argument("--top", type=int, default=10)
    args = ap.parse_args()
    base = config.load(args.base)

    rows = []
    names = list(GRID)
    for values in itertools.product(*GRID.values()):
        noise = replace(base.noise, **dict(zip(names, values)))
        figs = evaluate(noise, base.timing)
        inside = all(lo + MARGIN <= figs[k] <= hi - MARGIN for k, (lo, hi) in WINDOWS.items())
        dist = sum((figs[k] - v) ** 2 for k, v in TARGETS.items())
        rows.append((not inside, dist, values, figs))
    rows.sort(key=lambda r: (r[0], r[1]))

    print("  ".join(f"{n:>20}" for n in names) + "   Fprep     F1  Fproc     F2   Fher  in-window")
    for outside, _dist, values, f in rows[: args.top]:
        vals = "  ".join(f"{str(v):>20}" for v in values)
        print(
            f"{vals}  {f['Fprep']:.4f} {f['F1']:.4f} {f['Fproc']:.4f} {f['F2']:.4f} {f['Fher']:.4f}  {'no' if outside else 'yes'}"
        )
    print(f"\nbase config {args.base}:")
    f = evaluate(base.noise, base.timing)
    print("  " + "  ".join(f"{k} {v:.4f}" for k, v in f.items()))


if __name__ == "__main__":
    main()
