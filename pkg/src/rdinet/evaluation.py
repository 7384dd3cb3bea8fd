"""TA / ATA measurement, the attack cross matrix and report rendering."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackForm, Solver, max_average_from_candidates, run_attack, solve_omega
from .inference import BatchRouting, RoutingPolicy, route_logits
from .network import MultiExitNet, flops_to_exit, forward_all_exits

EVAL_CHUNK = 100


class ReportIntegrityError(AssertionError):
    pass


def default_workers() -> int:
    env = os.environ.get("RDINET_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class Score:
    accuracy: float
    avg_mflops: float
    saving: float
    histogram: list[int]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "avg_mflops": self.avg_mflops, "saving": self.saving, "histogram": self.histogram}


def _score(net: MultiExitNet, exits: np.ndarray, correct: np.ndarray, mflops: np.ndarray) -> Score:
    n = len(exits)
    if n == 0:
        raise ValueError("cannot score an empty dataset")
    hist = np.bincount(exits - 1, minlength=net.num_exits).tolist()
    # integer op counts keep the all-main-exit case exactly at zero saving
    total = sum(c * f for c, f in zip(hist, net.flops_per_exit))
    full = net.flops_per_exit[-1] * n
    return Score(float(np.mean(correct)), total / n / 1e6, 1.0 - total / full, hist)


def _route_chunk(net, policy, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r: BatchRouting = route_logits(net, forward_all_exits(net, x), policy)
    return r.exit_index, r.predicted == y, r.mflops


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def _map(fn, items, workers: int):
    # chunk boundaries never depend on the worker count, so neither do results
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def test_accuracy(net: MultiExitNet, policy: RoutingPolicy, x, y, chunk: int = EVAL_CHUNK, workers: int = 1) -> Score:
    """Clean accuracy at the routed exits, with average cost and exit histogram."""
    x, y = T.as_tensor(x), np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty test set")
    parts = _map(lambda s: _route_chunk(net, policy, x[s], y[s]), _chunks(len(x), chunk), workers)
    return _score(net, *(np.concatenate(p) for p in zip(*parts)))


def adversarial_test_accuracy(
    net: MultiExitNet,
    policy: RoutingPolicy,
    x,
    y,
    form: AttackForm,
    solver: Solver,
    seed: int = 0,
    chunk: int = EVAL_CHUNK,
    workers: int = 1,
) -> Score:
    """Attack every sample against the full model, then route the result."""
    x, y = T.as_tensor(x), np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty test set")
    ids = np.arange(len(x))

    def job(s):
        adv = run_attack(net, form, x[s], y[s], solver, seed, ids[s])
        return _route_chunk(net, policy, adv, y[s])

    parts = _map(job, _chunks(len(x), chunk), workers)
    return _score(net, *(np.concatenate(p) for p in zip(*parts)))


def core_forms(num_exits: int) -> list[AttackForm]:
    return [AttackForm.single(i) for i in range(1, num_exits + 1)] + [AttackForm.average(), AttackForm.max_average()]


@dataclass
class Cell:
    form: AttackForm
    solver: Solver
    core: bool
    label: str
    score: Score | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.score is None

    def record(self) -> dict:
        d = {
            "type": "cell",
            "label": self.label,
            "form": self.form.to_dict(),
            "solver": self.solver.to_dict(),
            "solver_label": self.solver.label(),
            "core": self.core,
            "status": "failed" if self.failed else "ok",
        }
        if self.failed:
            d["error"] = self.error
        else:
            d.update(ata=self.score.accuracy, avg_mflops=self.score.avg_mflops, saving=self.score.saving, histogram=self.score.histogram)
        return d


@dataclass
class EvalReport:
    num_exits: int
    full_mflops: float
    clean: Score
    cells: list[Cell] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def ta(self) -> float:
        return self.clean.accuracy

    @property
    def avg_mflops(self) -> float:
        return self.clean.avg_mflops

    @property
    def computation_saving(self) -> float:
        return self.clean.saving

    @property
    def ata(self) -> dict[str, float | None]:
        return {c.label: (None if c.failed else c.score.accuracy) for c in self.cells}

    @property
    def ata_worst_case(self) -> float | None:
        vals = [c.score.accuracy for c in self.cells if c.core and not c.failed]
        return min(vals) if vals else None

    def check(self, dataset_size: int | None = None) -> None:
        """Raise ReportIntegrityError unless the report is self-consistent."""
        core = [c.score.accuracy for c in self.cells if c.core and not c.failed]
        if core and self.ata_worst_case != min(core):
            raise ReportIntegrityError("worst-case ATA is not the minimum core row")
        scores = [self.clean] + [c.score for c in self.cells if not c.failed]
        n = dataset_size if dataset_size is not None else sum(self.clean.histogram)
        for s in scores:
            if sum(s.histogram) != n:
                raise ReportIntegrityError(f"histogram sums to {sum(s.histogram)}, dataset has {n}")
            if s.avg_mflops > self.full_mflops * (1 + 1e-12):
                raise ReportIntegrityError("average cost exceeds full-depth cost")

    # -- serialization -----------------------------------------------------

    def records(self) -> list[dict]:
        recs = [{"type": "meta", "num_exits": self.num_exits, "full_mflops": self.full_mflops, **self.meta}]
        recs.append({"type": "clean", "ta": self.ta, "avg_mflops": self.avg_mflops, "saving": self.computation_saving, "histogram": self.clean.histogram})
        recs += [c.record() for c in self.cells]
        recs.append({"type": "worst_case", "ata": self.ata_worst_case})
        return recs

    def histogram_records(self) -> list[dict]:
        out = []
        sets = [("clean", self.clean)] + [(f"{c.label} ({c.solver.label()})", c.score) for c in self.cells if not c.failed]
        for name, s in sets:
            out += [{"dataset": name, "exit": k, "count": cnt} for k, cnt in enumerate(s.histogram, start=1)]
        return out

    def write(self, out_dir, stem: str = "report") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "jsonl": out_dir / f"{stem}.jsonl",
            "table": out_dir / f"{stem}.txt",
            "histogram": out_dir / f"{stem}.hist.jsonl",
        }
        paths["jsonl"].write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records()))
        paths["table"].write_text(render_table({stem: self}))
        paths["histogram"].write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.histogram_records()))
        return paths

    @classmethod
    def from_records(cls, records: list[dict]) -> "EvalReport":
        meta = next(r for r in records if r["type"] == "meta")
        clean = next(r for r in records if r["type"] == "clean")
        rep = cls(
            meta["num_exits"],
            meta["full_mflops"],
            Score(clean["ta"], clean["avg_mflops"], clean["saving"], clean["histogram"]),
            meta={k: v for k, v in meta.items() if k not in ("type", "num_exits", "full_mflops")},
        )
        for r in records:
            if r["type"] != "cell":
                continue
            f, s = r["form"], r["solver"]
            cell = Cell(AttackForm(f["kind"], f["exit"], f["seed"]), Solver(**s), r["core"], r["label"])
            if r["status"] == "ok":
                cell.score = Score(r["ata"], r["avg_mflops"], r["saving"], r["histogram"])
            else:
                cell.error = r.get("error", "failed")
            rep.cells.append(cell)
        return rep

    @classmethod
    def read(cls, path) -> "EvalReport":
        lines = Path(path).read_text().splitlines()
        return cls.from_records([json.loads(line) for line in lines if line.strip()])


def cross_matrix(
    net: MultiExitNet,
    policy: RoutingPolicy,
    x,
    y,
    solver: Solver,
    forms: list[AttackForm] | None = None,
    extra: list[tuple[AttackForm, Solver]] = (),
    seed: int = 0,
    chunk: int = EVAL_CHUNK,
    workers: int = 1,
) -> EvalReport:
    """TA plus one ATA row per requested cell.

    ``forms`` (default: the K+1 singles, average and max-average) are solved
    with ``solver`` and form the core rows that the worst case is taken over.
    Max-average reuses the single-attack solutions already computed for the
    core rows. ``extra`` adds opt-in (form, solver) rows outside the core.
    A cell whose attack raises is marked failed; the other cells still run.
    """
    x, y = T.as_tensor(x), np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty test set")
    policy.check(net)
    n_exits = net.num_exits
    forms = core_forms(n_exits) if forms is None else list(forms)
    cells = [Cell(f, solver, f.kind != "random", f.label(n_exits)) for f in forms]
    cells += [Cell(f, s, False, f.label(n_exits)) for f, s in extra]
    ids = np.arange(len(x))
    need_omega = any(c.form.kind == "max_average" and c.solver == solver for c in cells)

    def job(s):
        xs, ys = x[s], y[s]
        clean = _route_chunk(net, policy, xs, ys)
        singles: dict[int, np.ndarray] = {}
        results = []
        if need_omega:
            try:
                singles = dict(zip(range(1, n_exits + 1), solve_omega(net, xs, ys, solver, seed, ids[s])))
            except Exception:  # each single cell retries on its own and reports the failure
                singles = {}
        for c in cells:
            try:
                f = c.form
                if f.kind == "single" and c.solver == solver and f.exit in singles:
                    adv = singles[f.exit]
                elif f.kind == "max_average" and c.solver == solver and len(singles) == n_exits:
                    adv = max_average_from_candidates(net, [singles[k] for k in range(1, n_exits + 1)], ys)[0]
                else:
                    adv = run_attack(net, f, xs, ys, c.solver, seed, ids[s])
                results.append(_route_chunk(net, policy, adv, ys))
            except Exception as exc:
                results.append(f"{type(exc).__name__}: {exc}")
        return clean, results

    parts = _map(job, _chunks(len(x), chunk), workers)
    clean = _score(net, *(np.concatenate(p) for p in zip(*[c for c, _ in parts])))
    for j, cell in enumerate(cells):
        res = [r[j] for _, r in parts]
        errs = [r for r in res if isinstance(r, str)]
        if errs:
            cell.error = errs[0]
            continue
        cell.score = _score(net, *(np.concatenate(p) for p in zip(*res)))
    report = EvalReport(n_exits, flops_to_exit(net, n_exits), clean, cells, {"seed": seed, "n": len(x)})
    report.check(len(x))
    return report


def _pct(v) -> str:
    return "failed" if v is None else f"{100 * v:.2f}%"


def render_table(reports: dict[str, EvalReport]) -> str:
    """Rows: TA, one ATA per attack, worst case, average MFlops, saving; one column per report."""
    names = list(reports)
    row_keys: list[str] = []
    for rep in reports.values():
        for c in rep.cells:
            key = c.label if c.core else f"{c.label} ({c.solver.label()})"
            if key not in row_keys:
                row_keys.append(key)

    def cell_value(rep: EvalReport, key: str):
        for c in rep.cells:
            if (c.label if c.core else f"{c.label} ({c.solver.label()})") == key:
                return "failed" if c.failed else _pct(c.score.accuracy)
        return "-"

    rows = [["", *names], ["TA", *[_pct(r.ta) for r in reports.values()]]]
    rows += [[f"ATA ({k})", *[cell_value(r, k) for r in reports.values()]] for k in row_keys]
    rows.append(["ATA (Worst-Case)", *[_pct(r.ata_worst_case) if r.ata_worst_case is not None else "-" for r in reports.values()]])
    rows.append(["Average MFlops", *[f"{r.avg_mflops:.2f}" for r in reports.values()]])
    rows.append(["Computation Saving", *[_pct(r.computation_saving) for r in reports.values()]])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths))).rstrip() for row in rows]
    return "\n".join(lines) + "\n"
