"""Desk-scale MNIST comparison of defense schemes on SmallCNN.

Trains one network per scheme, calibrates an equal-proportion routing policy
on the validation split, and evaluates the full attack cross matrix. Each
stage is cached on disk under a key covering the experiment config and the
source of every module that can change a number, so an interrupted run
resumes and a finished one is reused.
"""
from __future__ import annotations

import ast
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackBudget, Solver
from .container import canonical_json, sha256_hex
from .data import Dataset, load_idx
from .evaluation import EvalReport, cross_matrix, default_workers, render_table
from .inference import calibrate_thresholds, equal_proportions
from .network import SMALLCNN, build_network, load_checkpoint, save_checkpoint
from .training import DefenseScheme, TrainConfig, train

RESULT_MODULES = ("tensor", "network", "attacks", "training", "inference", "evaluation", "data", "container", "experiments")
# modules a trained checkpoint depends on; its key also records the TrainConfig by value
TRAIN_MODULES = ("tensor", "network", "attacks", "training", "data", "container")
SCHEME_NAMES = {"standard": "Standard", "main_branch": "Main-Branch", "average": "Average", "max_average": "Max-Average"}


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def source_digest(modules: tuple[str, ...] = RESULT_MODULES) -> str:
    """Hash of the code that can change a number; comments and docstrings excluded."""
    here = Path(__file__).parent
    dumps = [ast.dump(_strip_docstrings(ast.parse((here / f"{m}.py").read_text()))) for m in modules]
    return sha256_hex("\n".join(dumps).encode())


@dataclass(frozen=True)
class DeskConfig:
    data_dir: str = "data/mnist-desk"
    train_limit: int = 10_000
    val_limit: int = 1_000
    test_limit: int = 2_000
    schemes: tuple[str, ...] = ("standard", "main_branch", "max_average")
    steps: int = 2000
    batch_size: int = 32
    lr: float = 0.01
    lr_drop_at: float = 0.9  # fraction of training after which lr is divided by 10
    momentum: float = 0.9
    train_attack: AttackBudget = field(default_factory=lambda: AttackBudget(0.3, 0.01, 10, random_start=True))
    eval_solver: Solver = field(default_factory=lambda: Solver("pgd", 0.3, 0.01, 20, random_start=True))
    init_seed: int = 0
    seed: int = 0
    out_dir: str = "runs/desk"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            (1.0,) * SMALLCNN.num_exits,
            lr=self.lr,
            milestones=((int(self.steps * self.lr_drop_at), 0.1),),
            steps=self.steps,
            batch_size=self.batch_size,
            momentum=self.momentum,
            seed=self.seed,
            log_every=50,
        )

    def scheme(self, kind: str) -> DefenseScheme:
        return DefenseScheme(kind) if kind == "standard" else DefenseScheme(kind, self.train_attack)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        d["schemes"] = list(self.schemes)
        return d

    def data_files(self) -> list[Path]:
        d = Path(self.data_dir)
        return [d / f"{s}-{part}" for s in ("train", "val", "test") for part in ("images-idx3-ubyte.gz", "labels-idx1-ubyte.gz")]

    def data_digests(self) -> list[str]:
        # identify the data by content so keys do not depend on where it lives
        return [sha256_hex(p.read_bytes()) for p in self.data_files()]

    def train_key(self, kind: str) -> str:
        """Key of a trained checkpoint; evaluation settings do not enter it."""
        d = {
            "data": self.data_digests(),
            "train_limit": self.train_limit,
            "train": dataclasses.asdict(self.train_config()),
            "scheme": dataclasses.asdict(self.scheme(kind)),
            "init_seed": self.init_seed,
            "arch": SMALLCNN.fingerprint(),
        }
        return sha256_hex(canonical_json({"config": d, "source": source_digest(TRAIN_MODULES)}))[:16]

    def key(self, kind: str | None = None) -> str:
        d = self.to_dict()
        d["data_dir"] = self.data_digests()
        if kind is not None:
            # a scheme's artifacts do not depend on which other schemes run
            d.pop("schemes")
            d["scheme"] = kind
        return sha256_hex(canonical_json({"config": d, "source": source_digest()}))[:16]


def _split(cfg: DeskConfig, split: str, limit: int) -> Dataset:
    files = {p.name: p for p in cfg.data_files()}
    ds = load_idx(files[f"{split}-images-idx3-ubyte.gz"], files[f"{split}-labels-idx1-ubyte.gz"], split)
    if len(ds) < limit:
        raise ValueError(f"{split} split has {len(ds)} samples, {limit} requested")
    return ds.subset(slice(0, limit), split)


def _log(msg: str, stream) -> None:
    if stream is not None:
        print(msg, file=stream, flush=True)


def run_scheme(cfg: DeskConfig, kind: str, data: dict[str, Dataset], workers: int, log=None) -> tuple[EvalReport, dict]:
    out = Path(cfg.out_dir) / kind
    out.mkdir(parents=True, exist_ok=True)
    key, tkey = cfg.key(kind), cfg.train_key(kind)
    timing = {}

    ckpt = out / f"checkpoint-{tkey}.rdi"
    if ckpt.exists():
        net = load_checkpoint(ckpt, expected=SMALLCNN)
        timing["train_s"] = net.metadata.get("train_s")
        _log(f"[{kind}] reusing {ckpt.name}", log)
    else:
        t0 = time.time()
        net = build_network(SMALLCNN, cfg.init_seed)
        with open(out / f"metrics-{tkey}.log", "w") as metrics:
            net, hist = train(net, data["train"].images, data["train"].labels, cfg.scheme(kind), cfg.train_config(), metrics=metrics)
        timing["train_s"] = time.time() - t0
        save_checkpoint(net, ckpt, {"train_s": timing["train_s"], "train_key": tkey})
        _log(f"[{kind}] trained in {timing['train_s']:.0f}s, final loss {hist.loss[-1]:.4f}", log)

    report_path = out / f"report-{key}.jsonl"
    if report_path.exists():
        rep = EvalReport.read(report_path)
        rep.check(cfg.test_limit)
        timing["eval_s"] = rep.meta.get("eval_s")
        return rep, timing

    policy = calibrate_thresholds(net, data["val"].images, equal_proportions(net.num_exits))
    t0 = time.time()
    test = data["test"]
    rep = cross_matrix(net, policy, test.images, test.labels, cfg.eval_solver, seed=cfg.seed, workers=workers)
    timing["eval_s"] = time.time() - t0
    rep.meta.update(scheme=kind, policy=policy.to_dict(), eval_s=timing["eval_s"])
    rep.write(out, f"report-{key}")
    _log(f"[{kind}] TA {rep.ta:.4f} worst-case ATA {rep.ata_worst_case:.4f} saving {rep.computation_saving:.4f}", log)
    return rep, timing


def run_desk(cfg: DeskConfig, workers: int | None = None, log=None) -> dict:
    """Run (or resume) every scheme and write ``summary-<key>.json`` plus a table."""
    out = Path(cfg.out_dir)
    summary_path = out / f"summary-{cfg.key()}.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text())
    workers = workers or default_workers()
    data = {
        "train": _split(cfg, "train", cfg.train_limit),
        "val": _split(cfg, "val", cfg.val_limit),
        "test": _split(cfg, "test", cfg.test_limit),
    }
    reports, results = {}, {}
    for kind in cfg.schemes:
        rep, timing = run_scheme(cfg, kind, data, workers, log)
        reports[SCHEME_NAMES[kind]] = rep
        results[kind] = {
            "ta": rep.ta,
            "ata_worst_case": rep.ata_worst_case,
            "saving": rep.computation_saving,
            "avg_mflops": rep.avg_mflops,
            "ata": rep.ata,
            "histogram": rep.clean.histogram,
            "thresholds": rep.meta["policy"]["thresholds"],
            **timing,
        }
    table = render_table(reports)
    (out / f"table-{cfg.key()}.txt").write_text(table)
    summary = {
        "key": cfg.key(),
        "config": cfg.to_dict(),
        "source_digest": source_digest(),
        "numpy_version": np.__version__,
        "results": results,
        "table": table,
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cached_summary(cfg: DeskConfig) -> dict | None:
    path = Path(cfg.out_dir) / f"summary-{cfg.key()}.json"
    return json.loads(path.read_text()) if path.exists() else None
