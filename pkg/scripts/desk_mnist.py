"""Train Standard / Main-Branch / Max-Average SmallCNNs on the bundled digit
subset and print the TA / ATA / saving table.

Resumable: finished stages are cached under ``--out`` and reused.

    python scripts/desk_mnist.py                 # full run (hours on one core)
    python scripts/desk_mnist.py --steps 200 --test-limit 200   # quick look
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from rdinet.experiments import DeskConfig, run_desk

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default=str(ROOT / "data" / "mnist-desk"))
    p.add_argument("--out", default=str(ROOT / "runs" / "desk"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--schemes", help="comma-separated, e.g. standard,max_average")
    p.add_argument("--workers", type=int)
    args = p.parse_args()

    changes = {"data_dir": args.data, "out_dir": args.out}
    for name in ("steps", "batch_size", "lr", "test_limit"):
        if getattr(args, name) is not None:
            changes[name] = getattr(args, name)
    if args.schemes:
        changes["schemes"] = tuple(args.schemes.split(","))
    cfg = dataclasses.replace(DeskConfig(), **changes)
    print(f"desk key {cfg.key()}", flush=True)
    summary = run_desk(cfg, workers=args.workers, log=sys.stdout)
    print(summary["table"])


if __name__ == "__main__":
    main()
