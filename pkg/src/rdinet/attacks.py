"""White-box attacks on multi-exit networks.

An attack *form* says which objective to maximize (one exit's loss, the mean
of all exit losses, a randomly weighted mean, or the max-average selection
over solved single attacks); a *solver* (PGD, FGSM, WRM) does the
maximization. All solvers work on a batch, but every sample is attacked
independently: the batch objective is the sum of per-sample objectives and
all randomness is drawn per sample from ``(seed, sample_id)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .network import MultiExitNet, exit_label


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    step_size: float
    steps: int
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")


@dataclass(frozen=True)
class AttackForm:
    kind: str  # single | average | max_average | random
    exit: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("single", "average", "max_average", "random"):
            raise ValueError(f"unknown attack form {self.kind!r}")
        if self.kind == "single" and (self.exit is None or self.exit < 1):
            raise ValueError("single attack needs an exit index >= 1")

    @classmethod
    def single(cls, exit: int) -> "AttackForm":
        return cls("single", exit)

    @classmethod
    def average(cls) -> "AttackForm":
        return cls("average")

    @classmethod
    def max_average(cls) -> "AttackForm":
        return cls("max_average")

    @classmethod
    def random(cls, seed: int = 0) -> "AttackForm":
        return cls("random", seed=seed)

    def label(self, num_exits: int) -> str:
        if self.kind == "single":
            return exit_label(self.exit, num_exits)
        return {"average": "Average", "max_average": "Max-Average", "random": "Random"}[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "exit": self.exit, "seed": self.seed}

    @classmethod
    def parse(cls, text: str, num_exits: int) -> "AttackForm":
        """Parse ``single:2``, ``main``, ``average``, ``max_average``, ``random:7``."""
        name, _, arg = text.partition(":")
        name = name.strip().lower().replace("-", "_")
        if name == "main":
            return cls.single(num_exits)
        if name == "single":
            return cls.single(int(arg) if arg else num_exits)
        if name == "random":
            return cls.random(int(arg) if arg else 0)
        return cls(name)


@dataclass(frozen=True)
class Solver:
    """Attacker algorithm plus its budget.

    ``pgd`` uses ``epsilon``/``step_size``/``steps``/``random_start``; ``fgsm``
    only ``epsilon``; ``wrm`` uses ``gamma``, ``lr`` and ``steps``.
    """

    name: str = "pgd"
    epsilon: float = 0.3
    step_size: float = 0.01
    steps: int = 40
    random_start: bool = False
    gamma: float = 1.3
    lr: float = 0.05

    def __post_init__(self):
        if self.name not in ("pgd", "fgsm", "wrm"):
            raise ValueError(f"unknown solver {self.name!r}")

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget(self.epsilon, self.step_size, self.steps, self.random_start)

    def label(self) -> str:
        if self.name == "pgd":
            return f"PGD-{self.steps}"
        if self.name == "wrm":
            return f"WRM-{self.steps}"
        return "FGSM"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True)
class LossGraph:
    """Net graph extended with per-sample fused losses.

    ``per_sample`` is a ``[B]`` node, ``total`` its sum. ``weight_inputs``
    names the per-exit ``[B]`` fusion-weight inputs (random form only).
    """

    graph: T.Graph
    per_sample: str
    total: str
    weight_inputs: tuple[str, ...] = ()


def _exit_losses(gb: T.GraphBuilder, net: MultiExitNet, exits):
    return [gb.op(f"loss.{e}", "softmax_xent", net.exits[e - 1], "y") for e in exits]


def fused_loss(net: MultiExitNet, form: AttackForm) -> LossGraph:
    """Graph for the per-sample objective of ``form``.

    single(i): loss of exit i; average: mean over exits; random: mean of
    ``c_j * loss_j`` with the weights bound at ``c1..cN``.
    """
    if form.kind == "max_average":
        raise ValueError("max-average is a selection over single attacks, not a fused objective")
    key = ("fused", form.kind, form.exit)
    if key in net._cache:
        return net._cache[key]
    n = net.num_exits
    gb = T.GraphBuilder(net.graph)
    gb.input("y")
    weights: tuple[str, ...] = ()
    if form.kind == "single":
        if not 1 <= form.exit <= n:
            raise ValueError(f"exit {form.exit} outside 1..{n}")
        per = _exit_losses(gb, net, [form.exit])[0]
    else:
        losses = _exit_losses(gb, net, range(1, n + 1))
        if form.kind == "random":
            weights = tuple(gb.input(f"c{j}") for j in range(1, n + 1))
            losses = [gb.op(f"wloss{j}", "mul", l, c) for j, (l, c) in enumerate(zip(losses, weights), 1)]
        s = gb.op("fused.sum", "add", *losses)
        per = gb.op("fused", "scale", s, factor=1.0 / n)
    gb.op("fused.total", "sum", per)
    lg = LossGraph(gb.build(), per, "fused.total", weights)
    net._cache[key] = lg
    return lg


def random_fusion_weights(seed: int, sample_ids, num_exits: int) -> np.ndarray:
    """Per-sample fusion vectors c ~ U[0,1]^N, shape ``[B, N]``."""
    return np.stack(
        [np.random.default_rng([seed, int(i), 0x5EED]).uniform(0.0, 1.0, num_exits) for i in sample_ids]
    ) if len(sample_ids) else np.zeros((0, num_exits))


class Objective:
    """Per-sample objective value and input gradient for a batch."""

    def __init__(self, net: MultiExitNet, form: AttackForm, y, sample_ids=None, weights=None):
        self.net = net
        self.lg = fused_loss(net, form)
        self.y = T.as_tensor(y)
        self.extra = {"y": self.y}
        if self.lg.weight_inputs:
            if weights is None:
                ids = np.arange(len(y)) if sample_ids is None else sample_ids
                weights = random_fusion_weights(form.seed, ids, net.num_exits)
            weights = T.as_tensor(weights)
            for j, name in enumerate(self.lg.weight_inputs):
                self.extra[name] = np.ascontiguousarray(weights[:, j])

    def __call__(self, x):
        vals, grads = T.value_and_grad(
            self.lg.graph, self.lg.total, self.net.bindings(x, **self.extra), wrt=["x"], extra_outputs=[self.lg.per_sample]
        )
        return vals[self.lg.per_sample], grads["x"]

    def value(self, x):
        return T.evaluate(self.lg.graph, self.net.bindings(x, **self.extra), [self.lg.per_sample])[self.lg.per_sample]


# ---------------------------------------------------------------------------
# solvers on a generic objective


def _rng_uniform(seed, sample_ids, shape, eps):
    return np.stack([np.random.default_rng([seed, int(i)]).uniform(-eps, eps, shape) for i in sample_ids])


def _project(x, x0, eps):
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def pgd_ascent(
    objective: Callable,
    x0: np.ndarray,
    budget: AttackBudget,
    seed: int = 0,
    sample_ids=None,
    value: Callable | None = None,
) -> np.ndarray:
    """Sign-gradient ascent projected onto the l_inf ball and [0, 1].

    Returns, per sample, the iterate with the highest objective among the
    clean input, every visited iterate and the final one (strict improvement
    needed to replace an earlier best).
    """
    x0 = T.as_tensor(x0)
    eps = budget.epsilon
    if eps == 0:
        return x0.copy()
    value = value or (lambda z: objective(z)[0])
    if budget.random_start:
        ids = np.arange(len(x0)) if sample_ids is None else sample_ids
        x = _project(x0 + _rng_uniform(seed, ids, x0.shape[1:], eps), x0, eps)
        best_loss, best_x = value(x0), x0.copy()
    else:
        x = x0.copy()
        best_loss = best_x = None
    for step in range(budget.steps):
        loss, g = objective(x)
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(loss)):
            raise AttackError(f"non-finite gradient at step {step}")
        if best_loss is None:
            best_loss, best_x = loss.copy(), x.copy()
        else:
            better = loss > best_loss
            best_loss = np.where(better, loss, best_loss)
            best_x[better] = x[better]
        x = _project(x + budget.step_size * np.sign(g), x0, eps)
    loss = value(x)
    better = loss > best_loss
    best_x[better] = x[better]
    return best_x


def wrm_ascent(objective: Callable, x0: np.ndarray, gamma: float, steps: int, lr: float) -> np.ndarray:
    """Ascent on ``loss(x) - gamma/2 * ||x - x0||^2`` clipped to [0, 1].

    The quadratic penalty is applied as an exact proximal step,
    ``x <- (x + lr*grad + lr*gamma*x0) / (1 + lr*gamma)``, which has the same
    stationary points as plain gradient ascent but stays stable for large
    ``gamma``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    x0 = T.as_tensor(x0)
    x = x0.copy()
    for step in range(steps):
        _, g = objective(x)
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at step {step}")
        x = np.clip((x + lr * g + lr * gamma * x0) / (1.0 + lr * gamma), 0.0, 1.0)
    return x


# ---------------------------------------------------------------------------
# network-level attacks


def pgd(net, form, x, y, budget: AttackBudget, seed: int = 0, sample_ids=None, weights=None):
    if form.kind == "max_average":
        return max_average_attack(net, x, y, budget, "pgd", seed=seed, sample_ids=sample_ids)
    obj = Objective(net, form, y, sample_ids, weights)
    return pgd_ascent(obj, x, budget, seed, sample_ids, value=obj.value)


def fgsm(net, form, x, y, epsilon: float, seed: int = 0, sample_ids=None, weights=None):
    """One signed step of size epsilon; identical to 1-step PGD with step epsilon."""
    if epsilon == 0:
        return T.as_tensor(x).copy()
    return pgd(net, form, x, y, AttackBudget(epsilon, epsilon, 1, False), seed, sample_ids, weights)


def wrm(net, form, x, y, gamma: float = 1.3, steps: int = 15, lr: float = 0.05, sample_ids=None, weights=None):
    if form.kind == "max_average":
        raise ValueError("use max_average_attack with solver='wrm'")
    if steps == 0:
        return T.as_tensor(x).copy()
    obj = Objective(net, form, y, sample_ids, weights)
    return wrm_ascent(obj, x, gamma, steps, lr)


def average_exit_loss(net: MultiExitNet, x, y) -> np.ndarray:
    """Per-sample mean of all exit losses (the max-average selection score)."""
    obj = Objective(net, AttackForm.average(), y)
    return obj.value(T.as_tensor(x))


def select_max_average(scores: np.ndarray) -> np.ndarray:
    """Index of the best candidate per sample; ties go to the smallest exit.

    ``scores`` is ``[num_candidates, B]``.
    """
    return np.argmax(scores, axis=0)


def solve_omega(net, x, y, solver: Solver, seed: int = 0, sample_ids=None, exits=None) -> list[np.ndarray]:
    """Single-attack solutions for each exit (all exits by default)."""
    exits = range(1, net.num_exits + 1) if exits is None else exits
    return [run_attack(net, AttackForm.single(i), x, y, solver, seed, sample_ids) for i in exits]


def max_average_from_candidates(net, candidates: list[np.ndarray], y) -> tuple[np.ndarray, np.ndarray]:
    """Pick per sample the candidate with the highest average exit loss."""
    scores = np.stack([average_exit_loss(net, c, y) for c in candidates])
    idx = select_max_average(scores)
    stacked = np.stack(candidates)
    return stacked[idx, np.arange(stacked.shape[1])], idx


def max_average_attack(net, x, y, budget: AttackBudget | Solver, solver: str = "pgd", seed: int = 0, sample_ids=None, exits=None):
    """Solve all single attacks, keep the one maximizing the mean exit loss."""
    if isinstance(budget, Solver):
        sv = budget
    else:
        sv = Solver(solver, budget.epsilon, budget.step_size, budget.steps, budget.random_start)
    cands = solve_omega(net, x, y, sv, seed, sample_ids, exits)
    return max_average_from_candidates(net, cands, y)[0]


def run_attack(net, form: AttackForm, x, y, solver: Solver, seed: int = 0, sample_ids=None) -> np.ndarray:
    """Dispatch ``form`` to ``solver``; the returned batch is always feasible."""
    x = T.as_tensor(x)
    if form.kind == "max_average":
        return max_average_attack(net, x, y, solver, seed=seed, sample_ids=sample_ids)
    if solver.name == "pgd":
        return pgd(net, form, x, y, solver.budget, seed, sample_ids)
    if solver.name == "fgsm":
        return fgsm(net, form, x, y, solver.epsilon, seed, sample_ids)
    return wrm(net, form, x, y, solver.gamma, solver.steps, solver.lr, sample_ids)


def linf_distance(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def is_feasible(x_adv, x0, epsilon: float, tol: float = 1e-12) -> bool:
    x_adv = np.asarray(x_adv)
    return (
        linf_distance(x_adv, x0) <= epsilon + tol
        and bool(np.all(x_adv >= 0.0))
        and bool(np.all(x_adv <= 1.0))
    )


# ---------------------------------------------------------------------------
# adversarial dataset files

ADVERSARIAL_MAGIC = b"RDIADV1"


class InfeasibleAdversarialError(AttackError):
    pass


def save_adversarial(path, x_adv, x_src, y, epsilon: float, form: AttackForm, solver: Solver, seed: int, extra: dict | None = None) -> dict:
    """Store perturbed images with their source batch; refuses infeasible sets."""
    from .container import array_digest, write_container

    x_adv, x_src = T.as_tensor(x_adv), T.as_tensor(x_src)
    if not is_feasible(x_adv, x_src, epsilon):
        raise InfeasibleAdversarialError(f"adversarial set leaves the eps={epsilon} ball or [0, 1]")
    header = {
        "source_sha256": array_digest(x_src, np.asarray(y, dtype=np.float64)),
        "epsilon": float(epsilon),
        "form": form.to_dict(),
        "solver": solver.to_dict(),
        "seed": seed,
        "linf": linf_distance(x_adv, x_src),
        **(extra or {}),
    }
    write_container(path, ADVERSARIAL_MAGIC, header, {"x_adv": x_adv, "x_src": x_src, "y": np.asarray(y, dtype=np.float64)})
    return header


def load_adversarial(path, verify: bool = True) -> tuple[dict, dict[str, np.ndarray]]:
    from .container import CorruptFileError, array_digest, read_container

    header, blobs = read_container(path, ADVERSARIAL_MAGIC)
    if verify:
        if array_digest(blobs["x_src"], blobs["y"]) != header["source_sha256"]:
            raise CorruptFileError(f"{path}: source data does not match its recorded hash")
        if not is_feasible(blobs["x_adv"], blobs["x_src"], header["epsilon"]):
            raise InfeasibleAdversarialError(f"{path}: adversarial set is not feasible for eps={header['epsilon']}")
    blobs["y"] = blobs["y"].astype(np.int64)
    return header, blobs
