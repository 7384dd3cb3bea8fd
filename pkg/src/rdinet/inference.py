"""Entropy-thresholded early-exit routing and threshold calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import MultiExitNet, flops_to_exit

DEFAULT_ENTROPY_EPS = 1e-12

# thresholds reported for the three reference architectures
THRESHOLD_PRESETS = {
    "smallcnn": (0.023, 0.014),
    "resnet38": (0.32, 0.36, 0.39, 0.83, 1.12, 1.35),
    "mobilenetv2": (0.267, 0.765),
}


@dataclass(frozen=True)
class RoutingPolicy:
    """One entropy threshold per side exit; the main exit always answers."""

    thresholds: tuple[float, ...]
    eps: float = DEFAULT_ENTROPY_EPS

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if any(t < 0 or math.isnan(t) for t in self.thresholds):
            raise ValueError("thresholds must be non-negative")
        if not self.eps > 0:
            raise ValueError("entropy eps must be positive")

    @classmethod
    def preset(cls, name: str) -> "RoutingPolicy":
        return cls(THRESHOLD_PRESETS[name])

    @classmethod
    def main_only(cls, num_exits: int) -> "RoutingPolicy":
        return cls((0.0,) * (num_exits - 1))

    def check(self, net: MultiExitNet) -> None:
        if len(self.thresholds) != net.num_exits - 1:
            raise ValueError(f"policy has {len(self.thresholds)} thresholds, net has {net.num_exits - 1} side exits")

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "RoutingPolicy":
        return cls(tuple(d["thresholds"]), d.get("eps", DEFAULT_ENTROPY_EPS))


@dataclass(frozen=True)
class RoutedPrediction:
    exit_index: int
    predicted: int
    entropy: float
    flops_consumed: float


def entropies(probs: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise ``-sum_c (p_c + eps) log(p_c + eps)``."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0):
        raise ValueError("probabilities must be non-negative")
    q = probs + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def entropy(probs, eps: float = DEFAULT_ENTROPY_EPS) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("entropy expects a single probability vector")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {probs.sum()}, not 1")
    return float(entropies(probs, eps))


def route(net: MultiExitNet, x: np.ndarray, policy: RoutingPolicy) -> RoutedPrediction:
    """Answer one sample at the earliest exit whose entropy is below its threshold.

    Exits are evaluated lazily: layers past the taken exit are never run.
    """
    policy.check(net)
    x = T.as_tensor(x)
    if x.shape == tuple(net.spec.input_shape):
        x = x[None]
    net.check_input(x)
    if x.shape[0] != 1:
        raise ValueError("route takes a single sample; use route_batch for batches")
    cache: dict = {}
    bind = net.bindings(x)
    for k, name in enumerate(net.exits, start=1):
        logits = T.evaluate(net.graph, bind, [name], cache=cache)[name]
        probs = T.softmax(logits)[0]
        h = float(entropies(probs, policy.eps))
        if k == net.num_exits or h < policy.thresholds[k - 1]:
            return RoutedPrediction(k, int(np.argmax(probs)), h, flops_to_exit(net, k))
    raise AssertionError("unreachable")


@dataclass
class BatchRouting:
    exit_index: np.ndarray  # 1-based
    predicted: np.ndarray
    entropy: np.ndarray  # entropy at the taken exit
    mflops: np.ndarray
    exit_entropies: np.ndarray  # [B, num_exits]


def route_logits(net: MultiExitNet, logits: list[np.ndarray], policy: RoutingPolicy) -> BatchRouting:
    """Routing decisions from precomputed per-exit logits (same rule as :func:`route`)."""
    policy.check(net)
    b = logits[0].shape[0]
    n = net.num_exits
    ents = np.stack([entropies(T.softmax(z), policy.eps) for z in logits], axis=1) if b else np.zeros((0, n))
    taken = np.full(b, n, dtype=np.int64)
    undecided = np.ones(b, dtype=bool)
    for k in range(1, n):
        hit = undecided & (ents[:, k - 1] < policy.thresholds[k - 1])
        taken[hit] = k
        undecided &= ~hit
    rows = np.arange(b)
    stacked = np.stack(logits, axis=1) if b else np.zeros((0, n, net.spec.num_classes))
    pred = np.argmax(stacked[rows, taken - 1], axis=1) if b else np.zeros(0, dtype=np.int64)
    cost = np.array([flops_to_exit(net, k) for k in range(1, n + 1)])
    return BatchRouting(taken, pred, ents[rows, taken - 1], cost[taken - 1], ents)


def route_batch(net: MultiExitNet, x: np.ndarray, policy: RoutingPolicy, chunk: int = 256) -> BatchRouting:
    """Route a batch. Computes every exit for speed; decisions match :func:`route`."""
    from .network import forward_all_exits

    x = T.as_tensor(x)
    parts = []
    for s in range(0, max(len(x), 1), chunk):
        parts.append(forward_all_exits(net, x[s : s + chunk]))
    logits = [np.concatenate([p[k] for p in parts]) for k in range(net.num_exits)]
    return route_logits(net, logits, policy)


def lower_quantile_threshold(values: np.ndarray, p: float) -> float:
    """Threshold letting the lowest ``floor(p * n)`` values pass ``value < t``.

    The threshold is the largest observed value whose cumulative fraction is
    at most ``p``, nudged up by one ulp so that value itself passes the strict
    comparison. ``floor(p * n) == 0`` gives 0.
    """
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = len(values)
    j = int(math.floor(p * n + 1e-9))
    if j <= 0 or n == 0:
        return 0.0
    return float(np.nextafter(values[min(j, n) - 1], np.inf))


def calibrate_thresholds(
    net: MultiExitNet,
    x_val: np.ndarray,
    targets,
    eps: float = DEFAULT_ENTROPY_EPS,
) -> RoutingPolicy:
    """Pick thresholds so exit k takes about ``targets[k-1]`` of the validation set.

    Exits are calibrated in order on the samples still remaining; each
    target is a fraction of the whole set.
    """
    targets = [float(t) for t in targets]
    if len(targets) != net.num_exits - 1:
        raise ValueError(f"need {net.num_exits - 1} target proportions, got {len(targets)}")
    if any(t < 0 for t in targets) or sum(targets) > 1 + 1e-9:
        raise ValueError("target proportions must be non-negative and sum to at most 1")
    x_val = T.as_tensor(x_val)
    if len(x_val) == 0:
        raise ValueError("empty validation set")
    full = route_batch(net, x_val, RoutingPolicy.main_only(net.num_exits), chunk=256).exit_entropies
    n = len(x_val)
    remaining = np.ones(n, dtype=bool)
    thresholds = []
    for k, p in enumerate(targets):
        if not remaining.any():
            thresholds.append(0.0)
            continue
        ent = full[remaining, k]
        # fraction of the remaining samples that should leave here
        frac = min(1.0, p * n / remaining.sum())
        t = lower_quantile_threshold(ent, frac)
        thresholds.append(t)
        remaining &= ~(full[:, k] < t)
    return RoutingPolicy(tuple(thresholds), eps)


def equal_proportions(num_exits: int) -> list[float]:
    return [1.0 / num_exits] * (num_exits - 1)
