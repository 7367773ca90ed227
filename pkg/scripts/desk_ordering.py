#!/usr/bin/env python3
"""Run fine-tuning, EWC and CSQN-S(10) on the desk Rotated MNIST preset and compare."""
import json
import sys
from pathlib import Path

import numpy as np

from csqn.commands.experiments import cmd_run
from csqn.commands.reports import cmd_report
from csqn.config import OUTPUT_ROOT, configure_logging

PRESET = Path(__file__).resolve().parent.parent / "configs" / "desk_mnist.json"
METHODS = ("finetune", "ewc", "csqn-s")
SEEDS = (0, 1, 2)


def main() -> int:
    configure_logging()
    root = Path(OUTPUT_ROOT) / "desk"
    run_dirs = []
    summary = {}
    for method in METHODS:
        accs, bwts = [], []
        for seed in SEEDS:
            out = root / f"{method}-seed{seed}"
            print(f"Running {method} (seed {seed})...")
            code = cmd_run(str(PRESET), [f"method={method}"], out=str(out), seed=seed)
            if code != 0:
                print(f"{method} seed {seed} failed with exit code {code}")
                return code
            metrics = json.loads((out / "metrics.json").read_text())
            accs.append(metrics["acc"])
            bwts.append(metrics["bwt"])
            run_dirs.append(str(out))
        summary[method] = (float(np.mean(accs)), float(np.mean(bwts)))

    print()
    print(f"{'method':<10} {'ACC':>8} {'BWT':>8}")
    for method, (acc, bwt) in summary.items():
        print(f"{method:<10} {100 * acc:8.2f} {100 * bwt:8.2f}")

    ft, ewc, csqn = (summary[m] for m in METHODS)
    checks = {
        "CSQN-S beats EWC by 2 points": csqn[0] - ewc[0] >= 0.02,
        "EWC beats fine-tuning by 5 points": ewc[0] - ft[0] >= 0.05,
        "fine-tuning forgets": ft[1] < 0,
        "CSQN-S forgets less than EWC": abs(csqn[1]) < abs(ewc[1]),
    }
    for name, ok in checks.items():
        print(f"[{'ok' if ok else 'FAIL'}] {name}")

    cmd_report(run_dirs, out=str(root / "report"))
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
