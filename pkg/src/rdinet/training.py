"""Standard and adversarial training of multi-exit networks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import tensor as T
from .attacks import AttackBudget, AttackError, AttackForm, Solver, max_average_from_candidates, pgd, solve_omega
from .network import MultiExitNet

log = logging.getLogger(__name__)

SCHEMES = ("standard", "main_branch", "average", "max_average")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DefenseScheme:
    kind: str
    budget: AttackBudget | None = None
    # solve only this many randomly chosen single attacks per step (max_average)
    omega_subset: int | None = None

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown defense scheme {self.kind!r}")
        if self.kind == "standard" and self.budget is not None:
            raise ValueError("standard training carries no attack budget")
        if self.kind != "standard" and self.budget is None:
            raise ValueError(f"{self.kind} defense needs an attack budget")

    @property
    def label(self) -> str:
        return {"standard": "Standard", "main_branch": "Main Branch", "average": "Average", "max_average": "Max-Average"}[self.kind]


@dataclass(frozen=True)
class TrainConfig:
    exit_weights: tuple[float, ...]
    lr: float = 0.033
    milestones: tuple[tuple[int, float], ...] = ((12000, 0.1), (12900, 0.1))
    steps: int = 13100
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "exit_weights", tuple(float(w) for w in self.exit_weights))
        object.__setattr__(self, "milestones", tuple((int(s), float(f)) for s, f in self.milestones))
        if any(w < 0 for w in self.exit_weights) or not any(w > 0 for w in self.exit_weights):
            raise ValueError("exit weights must be non-negative with at least one positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("bad batch size or step count")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for at, factor in self.milestones:
            if step >= at:
                lr *= factor
        return lr


MNIST_TRAIN = TrainConfig(exit_weights=(1.0, 1.0, 1.0))
MNIST_PGD40 = AttackBudget(0.3, 0.01, 40)
CIFAR_PGD10 = AttackBudget(8 / 255, 2 / 255, 10)
CIFAR_PGD20 = AttackBudget(8 / 255, 2 / 255, 20)


def rdi_loss_graph(net: MultiExitNet, weights, adversarial: bool) -> tuple[T.Graph, str]:
    """Weighted hybrid loss over a batch.

    With ``adversarial`` the bound ``x``/``y`` are the clean batch followed by
    its adversarial copy (2B rows), and each exit term is
    ``2 * mean(loss over 2B) = mean(clean) + mean(adv)``.
    """
    weights = tuple(float(w) for w in weights)
    if len(weights) != net.num_exits:
        raise ValueError(f"{len(weights)} exit weights for a {net.num_exits}-exit network")
    key = ("rdi", weights, adversarial)
    if key in net._cache:
        return net._cache[key]
    gb = T.GraphBuilder(net.graph)
    gb.input("y")
    terms = []
    for k, w in enumerate(weights, start=1):
        if w == 0:
            continue
        per = gb.op(f"rdi.loss{k}", "softmax_xent", net.exits[k - 1], "y")
        m = gb.op(f"rdi.mean{k}", "mean", per)
        terms.append(gb.op(f"rdi.term{k}", "scale", m, factor=w * (2.0 if adversarial else 1.0)))
    gb.op("rdi.total", "add", *terms)
    out = (gb.build(), "rdi.total")
    net._cache[key] = out
    return out


def rdi_loss(net: MultiExitNet, x_clean, x_adv, y, weights, with_grads: bool = True):
    """Hybrid clean + adversarial loss and its parameter gradients.

    ``x_adv=None`` drops the adversarial term (standard training). Returns
    ``(loss, grads)``; ``grads`` maps every parameter name to its gradient.
    """
    adversarial = x_adv is not None
    g, node = rdi_loss_graph(net, weights, adversarial)
    x = T.as_tensor(x_clean)
    y = T.as_tensor(y)
    if adversarial:
        x = np.concatenate([x, T.as_tensor(x_adv)])
        y = np.concatenate([y, y])
    bind = net.bindings(x, y=y)
    if not with_grads:
        return float(T.evaluate(g, bind, [node])[node]), None
    vals, grads = T.value_and_grad(g, node, bind, wrt=list(net.graph.parameters))
    return float(vals[node]), grads


def adversarial_batch(net: MultiExitNet, scheme: DefenseScheme, x, y, seed: int, sample_ids, rng=None):
    """Inner maximization for one training batch under ``scheme``."""
    if scheme.kind == "standard":
        return None
    b = scheme.budget
    if scheme.kind == "main_branch":
        return pgd(net, AttackForm.single(net.num_exits), x, y, b, seed, sample_ids)
    if scheme.kind == "average":
        return pgd(net, AttackForm.average(), x, y, b, seed, sample_ids)
    exits = list(range(1, net.num_exits + 1))
    if scheme.omega_subset and scheme.omega_subset < len(exits):
        rng = rng or np.random.default_rng(seed)
        exits = sorted(rng.choice(exits, size=scheme.omega_subset, replace=False).tolist())
    solver = Solver("pgd", b.epsilon, b.step_size, b.steps, b.random_start)
    cands = solve_omega(net, x, y, solver, seed, sample_ids, exits)
    return max_average_from_candidates(net, cands, y)[0]


@dataclass
class History:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def smoothed(self, window: int = 100) -> np.ndarray:
        a = np.asarray(self.loss)
        if len(a) < window:
            window = max(1, len(a))
        return np.convolve(a, np.ones(window) / window, mode="valid")


class BatchStream:
    """Deterministic epoch-shuffled mini-batches (incomplete tail batches dropped)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < batch_size:
            raise ValueError(f"dataset of {n} samples is smaller than one batch of {batch_size}")
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng([seed, 0xDA7A])
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def train(
    net: MultiExitNet,
    images: np.ndarray,
    labels: np.ndarray,
    scheme: DefenseScheme,
    cfg: TrainConfig,
    metrics: TextIO | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[MultiExitNet, History]:
    """Momentum SGD on the hybrid loss with fresh adversarial examples each step.

    Returns a trained copy of ``net``; the input network is not modified.
    """
    if len(cfg.exit_weights) != net.num_exits:
        raise ValueError(f"{len(cfg.exit_weights)} exit weights for a {net.num_exits}-exit network")
    net = net.copy()
    images = T.as_tensor(images)
    labels = T.as_tensor(labels)
    stream = BatchStream(len(images), cfg.batch_size, cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    omega_rng = np.random.default_rng([cfg.seed, 0x0E6A])
    hist = History()
    for step in range(cfg.steps):
        idx = stream.next()
        x, y = images[idx], labels[idx]
        try:
            x_adv = adversarial_batch(net, scheme, x, y, seed=cfg.seed * 1_000_003 + step, sample_ids=idx, rng=omega_rng)
            loss, grads = rdi_loss(net, x, x_adv, y, cfg.exit_weights)
        except (T.NonFiniteError, AttackError) as exc:
            raise TrainingError(f"non-finite values at step {step} (scheme {scheme.kind}): {exc}") from exc
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} (scheme {scheme.kind})")
        lr = cfg.lr_at(step)
        for k, p in net.params.items():
            g = grads[k]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            v = velocity[k]
            v *= cfg.momentum
            v += g
            p -= lr * v
        hist.steps.append(step)
        hist.loss.append(loss)
        hist.lr.append(lr)
        if metrics is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            metrics.write(f"step={step} scheme={scheme.kind} loss={loss:.6f} lr={lr:.6g}\n")
            metrics.flush()
        if callback is not None:
            callback(step, loss)
    net.metadata.update({"scheme": scheme.kind, "steps": cfg.steps, "seed": cfg.seed})
    return net, hist


def accuracy_per_exit(net: MultiExitNet, images, labels, chunk: int = 256) -> list[float]:
    from .network import forward_all_exits

    correct = np.zeros(net.num_exits)
    for s in range(0, len(images), chunk):
        outs = forward_all_exits(net, images[s : s + chunk])
        for k, z in enumerate(outs):
            correct[k] += np.sum(np.argmax(z, axis=1) == labels[s : s + chunk])
    return (correct / len(images)).tolist()
