"""Compare the three fusion strategies (pco, amplified_clean, plain_clean) on one config.

    python3 scripts/run_fusion_ablation.py --config configs/blobs-smoke.cfg --out runs/fusion

plain_clean runs with gamma = 1, the other two with the configured gamma.
Prints final clean / FGSM / PGD-10 accuracy and the detector verdict per mode.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from fastadv.config import parse_config
from fastadv.harness import run_experiment
from fastadv.trainers import FUSION_MODES


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/blobs-smoke.cfg")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/fusion")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)

    print(f"{'fusion':<16} {'clean':>6} {'fgsm':>6} {'pgd10':>6}  overfit")
    for mode in FUSION_MODES:
        extra = ["train.method=FGSM_PCO", f"train.fusion_mode={mode}"]
        if mode == "plain_clean":
            extra.append("train.gamma=1")
        out = Path(args.out) / mode
        cfg = parse_config(args.config, [*args.override, *extra], seed=args.seed, out=str(out))
        status = run_experiment(cfg)
        summary = json.loads((out / "summary.json").read_text())
        last = summary["last"] or {}
        print(f"{mode:<16} {last.get('clean_acc') or 0:>6.3f} {last.get('fgsm_acc') or 0:>6.3f} "
              f"{last.get('pgd10_acc') or 0:>6.3f}  {summary['overfit']}"
              + ("" if status == 0 else "  (diverged)"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
