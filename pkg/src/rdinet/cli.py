"""``rdinet`` command line: train, attack, calibrate, evaluate, report."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackForm, Solver, is_feasible, linf_distance, run_attack, save_adversarial
from .config import ConfigError, RunConfig, manifest, write_manifest
from .container import ContainerError
from .evaluation import EvalReport, cross_matrix, default_workers, render_table
from .inference import RoutingPolicy, calibrate_thresholds
from .network import FingerprintMismatchError, build_network, load_checkpoint, save_checkpoint
from .training import train


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rdinet", description="Robust multi-exit networks")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="run config (JSON)")
        sp.add_argument("--out", help="output directory (overrides config out_dir)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="worker threads (default: RDINET_THREADS or CPU count)")

    t = sub.add_parser("train", help="train a multi-exit network")
    common(t)
    t.add_argument("--scheme", choices=["standard", "main_branch", "average", "max_average"])
    t.add_argument("--steps", type=int, help="training steps")
    t.add_argument("--lr", type=float)
    t.add_argument("--epsilon", type=float, help="training attack epsilon")

    for name, help_ in (("attack", "write an adversarial dataset"), ("evaluate", "TA/ATA report")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--form", help="main | single:K | average | max_average | random:SEED")
        sp.add_argument("--solver", choices=["pgd", "fgsm", "wrm"])
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--steps", type=int, help="attack steps")
        sp.add_argument("--split", default="test", choices=["train", "val", "test"])
        if name == "evaluate":
            sp.add_argument("--policy", help="policy JSON (default: config routing or calibrate)")

    c = sub.add_parser("calibrate", help="fit entropy thresholds on validation data")
    common(c)
    c.add_argument("--checkpoint")
    c.add_argument("--targets", help="comma-separated exit proportions (default: config)")

    r = sub.add_parser("report", help="render stored reports")
    r.add_argument("reports", nargs="+", help="report .jsonl files, optionally NAME=PATH")
    r.add_argument("--out", help="directory for table.txt and histograms.jsonl")
    return p


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    changes = {}
    if args.out:
        changes["out_dir"] = str(Path(args.out).resolve())
    if args.seed is not None:
        changes["seed"] = args.seed
        changes["train"] = {**cfg.train, "seed": args.seed}
    if getattr(args, "scheme", None):
        changes["scheme"] = args.scheme
    if args.command == "train":
        tr = dict(changes.get("train", cfg.train))
        if args.steps is not None:
            tr["steps"] = args.steps
        if args.lr is not None:
            tr["lr"] = args.lr
        changes["train"] = tr
        if args.epsilon is not None:
            changes["train_attack"] = {**cfg.train_attack, "epsilon": args.epsilon}
    elif args.command in ("attack", "evaluate"):
        sv = dict(cfg.eval_solver)
        if args.solver:
            sv["name"] = args.solver
        if args.epsilon is not None:
            sv["epsilon"] = args.epsilon
        if args.steps is not None:
            sv["steps"] = args.steps
        changes["eval_solver"] = sv
        if args.form:
            if args.command == "attack":
                changes["attack"] = {**cfg.attack, "form": args.form}
            else:
                changes["eval_forms"] = [args.form]
    if args.workers is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(cfg: RunConfig) -> int:
    return cfg.workers if cfg.workers else default_workers()


def _checkpoint(cfg: RunConfig, args):
    path = Path(args.checkpoint) if args.checkpoint else _out_dir(cfg) / "checkpoint.rdi"
    return load_checkpoint(path, expected=cfg.spec()), path


def cmd_train(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg)
    ds = cfg.dataset("train")
    net = build_network(cfg.spec(), cfg.init_seed)
    tc = cfg.train_config()
    with open(out / "metrics.log", "w") as log:
        trained, hist = train(net, ds.images, ds.labels, cfg.defense(), tc, metrics=log)
    ckpt = out / "checkpoint.rdi"
    save_checkpoint(trained, ckpt, {"config_hash": cfg.hash()})
    (out / "history.json").write_text(json.dumps({"step": hist.steps, "loss": hist.loss, "lr": hist.lr}))
    write_manifest(out / "manifest.train.json", manifest(cfg, "train", {"checkpoint": ckpt.name}))
    return {"checkpoint": str(ckpt), "final_loss": hist.loss[-1] if hist.loss else None}


def cmd_attack(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg)
    net, ckpt = _checkpoint(cfg, args)
    ds = cfg.dataset(args.split)
    form = AttackForm.parse(cfg.attack.get("form", "average"), net.num_exits)
    solver = cfg.solver()
    ids = np.arange(len(ds))
    chunks = [slice(s, s + 100) for s in range(0, len(ds), 100)]
    adv = np.concatenate([run_attack(net, form, ds.images[s], ds.labels[s], solver, cfg.seed, ids[s]) for s in chunks])
    # WRM has no hard radius; its file records the radius actually used
    eps = solver.epsilon if solver.name != "wrm" else linf_distance(adv, ds.images)
    path = out / "adversarial.rdiadv"
    header = save_adversarial(path, adv, ds.images, ds.labels, eps, form, solver, cfg.seed, {"split": args.split})
    write_manifest(out / "manifest.attack.json", manifest(cfg, "attack", {"adversarial": path.name}, {"checkpoint": str(ckpt)}))
    return {
        "adversarial": str(path),
        "n": len(ds),
        "epsilon": eps,
        "linf": header["linf"],
        "feasible": is_feasible(adv, ds.images, eps),
        "changed": int(np.sum(np.any(adv != ds.images, axis=(1, 2, 3)))),
    }


def _calibrate(cfg: RunConfig, net, targets=None) -> RoutingPolicy:
    val = cfg.dataset("val")
    return calibrate_thresholds(net, val.images, targets or cfg.calibration_targets(), cfg.routing.get("eps", 1e-12))


def cmd_calibrate(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg)
    net, ckpt = _checkpoint(cfg, args)
    targets = [float(t) for t in args.targets.split(",")] if args.targets else None
    policy = _calibrate(cfg, net, targets)
    path = out / "policy.json"
    path.write_text(json.dumps(policy.to_dict(), indent=2) + "\n")
    write_manifest(out / "manifest.calibrate.json", manifest(cfg, "calibrate", {"policy": path.name}, {"checkpoint": str(ckpt)}))
    return {"policy": str(path), "thresholds": list(policy.thresholds)}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg)
    net, ckpt = _checkpoint(cfg, args)
    if args.policy:
        policy = RoutingPolicy.from_dict(json.loads(Path(args.policy).read_text()))
    elif cfg.fixed_policy() is not None:
        policy = cfg.fixed_policy()
    elif (out / "policy.json").exists():
        policy = RoutingPolicy.from_dict(json.loads((out / "policy.json").read_text()))
    else:
        policy = _calibrate(cfg, net)
    ds = cfg.dataset(args.split)
    forms = [AttackForm.parse(f, net.num_exits) for f in cfg.eval_forms] if cfg.eval_forms else None
    extra = [(AttackForm.parse(c["form"], net.num_exits), Solver(**c["solver"])) for c in cfg.extra_cells]
    rep = cross_matrix(net, policy, ds.images, ds.labels, cfg.solver(), forms, extra, seed=cfg.seed, workers=_workers(cfg))
    rep.meta.update(policy=policy.to_dict(), scheme=net.metadata.get("scheme"), split=args.split)
    paths = rep.write(out, "report")
    write_manifest(
        out / "manifest.evaluate.json",
        manifest(cfg, "evaluate", {k: p.name for k, p in paths.items()}, {"checkpoint": str(ckpt)}),
    )
    return {"report": str(paths["jsonl"]), "ta": rep.ta, "ata_worst_case": rep.ata_worst_case, "saving": rep.computation_saving}


def cmd_report(args) -> dict:
    reports = {}
    for item in args.reports:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, Path(item).parent.name or Path(item).stem
        rep = EvalReport.read(path)
        rep.check()
        reports[name] = rep
    table = render_table(reports)
    sys.stdout.write(table)
    result = {"reports": len(reports)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table)
        with open(out / "histograms.jsonl", "w") as f:
            for name, rep in reports.items():
                for r in rep.histogram_records():
                    f.write(json.dumps({"report": name, **r}, sort_keys=True) + "\n")
        result["out"] = str(out)
    return result


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "calibrate": cmd_calibrate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        if args.command == "report":
            result = cmd_report(args)
        else:
            cfg = _load_config(args)
            result = COMMANDS[args.command](cfg, args)
    except (CliError, ConfigError, ContainerError, FingerprintMismatchError, ValueError, OSError) as exc:
        print(json.dumps({"status": "error", "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps({"status": "ok", "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
