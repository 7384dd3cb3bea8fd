"""Re-evaluate the trained desk checkpoints under other PGD budgets.

Reads the checkpoints written by ``desk_mnist.py`` (same DeskConfig defaults),
recalibrates the equal-proportion policy on validation, and runs the cross
matrix on a prefix of the test split for each requested budget. Results go to
``<out>/sweep-<key>.json``; budgets already present there are skipped.

    python scripts/desk_attack_sweep.py --budget 40:0.01 --budget 20:0.03 --test-limit 500
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from rdinet.attacks import Solver
from rdinet.evaluation import cross_matrix, default_workers, render_table
from rdinet.experiments import SCHEME_NAMES, DeskConfig, _split
from rdinet.inference import calibrate_thresholds, equal_proportions
from rdinet.network import SMALLCNN, load_checkpoint

ROOT = Path(__file__).resolve().parents[1]


@dataclass(frozen=True)
class SweepConfig:
    desk: DeskConfig
    budgets: tuple[tuple[int, float], ...] = ((40, 0.01),)
    test_limit: int = 500
    workers: int | None = None


def solver_for(steps: int, alpha: float, eps: float) -> Solver:
    return Solver("pgd", eps, alpha, steps, random_start=True)


def run(cfg: SweepConfig) -> dict:
    desk = cfg.desk
    out = Path(desk.out_dir)
    path = out / f"sweep-{desk.key()}.json"
    results = json.loads(path.read_text()) if path.exists() else {}
    val = _split(desk, "val", desk.val_limit)
    test = _split(desk, "test", cfg.test_limit)
    nets = {}
    for kind in desk.schemes:
        ckpt = out / kind / f"checkpoint-{desk.train_key(kind)}.rdi"
        if not ckpt.exists():
            sys.exit(f"missing {ckpt}; run desk_mnist.py first")
        net = load_checkpoint(ckpt, expected=SMALLCNN)
        nets[kind] = (net, calibrate_thresholds(net, val.images, equal_proportions(net.num_exits)))

    for steps, alpha in cfg.budgets:
        solver = solver_for(steps, alpha, desk.eval_solver.epsilon)
        name = f"PGD-{steps} alpha={alpha} n={cfg.test_limit}"
        if name in results:
            print(results[name]["table"])
            continue
        reports = {}
        for kind, (net, policy) in nets.items():
            reports[SCHEME_NAMES[kind]] = cross_matrix(net, policy, test.images, test.labels, solver, seed=desk.seed, workers=cfg.workers or default_workers())
        results[name] = {
            "worst_case": {k: r.ata_worst_case for k, r in reports.items()},
            "ata": {k: r.ata for k, r in reports.items()},
            "table": render_table(reports),
        }
        print(name)
        print(results[name]["table"], flush=True)
        path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


def parse_budget(text: str) -> tuple[int, float]:
    steps, alpha = text.split(":")
    return int(steps), float(alpha)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default=str(ROOT / "data" / "mnist-desk"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "desk"))
    ap.add_argument("--budget", action="append", type=parse_budget, help="STEPS:ALPHA, repeatable (default 40:0.01)")
    ap.add_argument("--test-limit", type=int, default=500)
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()
    desk = replace(DeskConfig(), data_dir=args.data, out_dir=args.out)
    run(SweepConfig(desk, tuple(args.budget or [(40, 0.01)]), args.test_limit, args.workers))


if __name__ == "__main__":
    main()
