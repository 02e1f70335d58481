"""Run the catastrophic-overfitting scenario for FGSM-RS and FGSM-PCO over several seeds.

    python3 scripts/run_overfit_scenario.py --config configs/desk-mnist-co.cfg \
        --seeds 0 1 2 --out runs/co

Writes one run directory per (method, seed) plus ``scenario.json`` holding
the final PGD-10 accuracy and detector verdict of every run and the
comparative gate: PCO's final PGD-10 accuracy is at least RS's on every
seed, RS is flagged on at least two seeds, and PCO is never flagged.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from fastadv.config import parse_config
from fastadv.harness import run_experiment

METHODS = ("FGSM_RS", "FGSM_PCO")


def run_scenario(config: str, seeds, out_root, overrides=()) -> dict:
    out_root = Path(out_root)
    runs = {}
    for method in METHODS:
        for seed in seeds:
            out = out_root / f"{method}_seed{seed}"
            cfg = parse_config(config, [f"train.method={method}", *overrides], seed=seed,
                               out=str(out))
            t0 = time.perf_counter()
            status = run_experiment(cfg)
            summary = json.loads((out / "summary.json").read_text())
            runs[f"{method}/{seed}"] = {
                "status": status,
                "final_pgd10": summary["last"]["pgd10_acc"] if summary["last"] else None,
                "final_clean": summary["last"]["clean_acc"] if summary["last"] else None,
                "overfit": summary["overfit"],
                "seconds": round(time.perf_counter() - t0, 1),
            }
    return {"config": str(config), "overrides": list(overrides), "seeds": list(seeds),
            "runs": runs, "gate": gate(runs, seeds)}


def gate(runs: dict, seeds) -> dict:
    rs = [runs[f"FGSM_RS/{s}"] for s in seeds]
    pco = [runs[f"FGSM_PCO/{s}"] for s in seeds]
    rs_flagged = sum(r["overfit"]["detected"] for r in rs)
    pco_flagged = sum(r["overfit"]["detected"] for r in pco)
    pco_not_worse = all(p["final_pgd10"] is not None and r["final_pgd10"] is not None
                        and p["final_pgd10"] >= r["final_pgd10"] for p, r in zip(pco, rs))
    return {
        "rs_flagged": rs_flagged,
        "pco_flagged": pco_flagged,
        "pco_not_worse_every_seed": pco_not_worse,
        "passed": pco_not_worse and rs_flagged >= min(2, len(seeds)) and pco_flagged == 0,
    }


def format_table(result: dict) -> str:
    lines = [f"{'run':<16} {'clean':>6} {'pgd10':>6} {'flagged':>8} {'epoch':>5} {'reason':>8}"]
    for name, r in result["runs"].items():
        v = r["overfit"]
        lines.append(f"{name:<16} {r['final_clean']:>6.3f} {r['final_pgd10']:>6.3f} "
                     f"{str(v['detected']):>8} {str(v['epoch'] or '-'):>5} "
                     f"{str(v['reason'] or '-'):>8}")
    g = result["gate"]
    lines.append(f"RS flagged {g['rs_flagged']}/{len(result['seeds'])}, PCO flagged "
                 f"{g['pco_flagged']}/{len(result['seeds'])}, PCO >= RS on every seed: "
                 f"{g['pco_not_worse_every_seed']} -> {'PASS' if g['passed'] else 'FAIL'}")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk-mnist-co.cfg")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/co")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    result = run_scenario(args.config, args.seeds, args.out, args.override)
    Path(args.out, "scenario.json").write_text(json.dumps(result, indent=2))
    print(format_table(result))
    return 0 if result["gate"]["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
