"""Run configuration (one JSON file) and reproducibility manifests."""
from __future__ import annotations

import dataclasses
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackBudget, Solver
from .container import canonical_json, sha256_hex
from .data import Dataset, load_idx, synth_blobs
from .inference import RoutingPolicy
from .network import PRESET_VERSIONS, ArchSpec, resolve_spec
from .training import DefenseScheme, TrainConfig


class ConfigError(ValueError):
    pass


OPERATIONAL_KEYS = ("out_dir", "workers")


@dataclass
class DataConfig:
    # IDX paths (relative paths resolve against the config file) or a synthetic spec
    train_images: str | None = None
    train_labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_limit: int | None = None
    val_limit: int | None = None
    test_limit: int | None = None
    synthetic: dict | None = None

    def files(self) -> list[str]:
        return [p for p in (self.train_images, self.train_labels, self.val_images, self.val_labels, self.test_images, self.test_labels) if p]


@dataclass
class RunConfig:
    arch: str | dict = "smallcnn"
    init_seed: int = 0
    scheme: str = "max_average"
    train: dict = field(default_factory=dict)
    train_attack: dict = field(default_factory=lambda: {"epsilon": 0.3, "step_size": 0.01, "steps": 40})
    omega_subset: int | None = None
    eval_solver: dict = field(default_factory=lambda: {"name": "pgd", "epsilon": 0.3, "step_size": 0.01, "steps": 20})
    eval_forms: list[str] | None = None
    extra_cells: list[dict] = field(default_factory=list)
    attack: dict = field(default_factory=lambda: {"form": "average"})
    routing: dict = field(default_factory=lambda: {"targets": "equal"})
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int | None = None
    base_dir: str = field(default=".", compare=False)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "data" in d:
            dnames = {f.name for f in dataclasses.fields(DataConfig)}
            bad = set(d["data"]) - dnames
            if bad:
                raise ConfigError(f"unknown data keys: {sorted(bad)}")
            d["data"] = DataConfig(**d["data"])
        cfg = cls(**d, base_dir=str(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if "config_hash" in d and "config" in d:
            # a run manifest: replay its exact config
            return cls.from_dict(d["config"], d.get("base_dir", path.parent))
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.spec()
            self.defense()
            self.train_config()
            self.solver()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        for p in self.data.files():
            if not self.path(p).exists():
                raise ConfigError(f"data file not found: {self.path(p)}")
        if not self.data.files() and self.data.synthetic is None:
            raise ConfigError("config names no data (IDX paths or data.synthetic)")

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # -- typed views -------------------------------------------------------

    def spec(self) -> ArchSpec:
        return resolve_spec(self.arch)

    def train_budget(self) -> AttackBudget:
        return AttackBudget(**self.train_attack)

    def defense(self) -> DefenseScheme:
        if self.scheme == "standard":
            return DefenseScheme("standard")
        return DefenseScheme(self.scheme, self.train_budget(), self.omega_subset)

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("exit_weights", (1.0,) * self.spec().num_exits)
        d.setdefault("seed", self.seed)
        return TrainConfig(**d)

    def solver(self) -> Solver:
        return Solver(**self.eval_solver)

    def fixed_policy(self) -> RoutingPolicy | None:
        if "thresholds" in self.routing:
            return RoutingPolicy(tuple(self.routing["thresholds"]), self.routing.get("eps", 1e-12))
        if "preset" in self.routing:
            return RoutingPolicy.preset(self.routing["preset"])
        return None

    def calibration_targets(self) -> list[float]:
        t = self.routing.get("targets", "equal")
        n = self.spec().num_exits
        if t == "equal":
            return [1.0 / n] * (n - 1)
        return [float(v) for v in t]

    # -- data --------------------------------------------------------------

    def dataset(self, split: str) -> Dataset:
        dc = self.data
        if dc.synthetic is not None:
            syn = dict(dc.synthetic)
            syn.setdefault("shape", tuple(self.spec().input_shape))
            syn["shape"] = tuple(syn["shape"])
            offset = {"train": 0, "val": 1, "test": 2}[split]
            # same centers for every split, different noise
            full = synth_blobs(**{**syn, "n_per_class": syn["n_per_class"] * 3}, split=split)
            k = syn["num_classes"]
            idx = np.arange(len(full)).reshape(-1, k)[offset::3].ravel()
            return full.subset(idx, split)
        imgs, labs = getattr(dc, f"{split}_images"), getattr(dc, f"{split}_labels")
        if not imgs:
            raise ConfigError(f"config has no {split} data")
        ds = load_idx(self.path(imgs), self.path(labs), split, self.spec().num_classes)
        limit = getattr(dc, f"{split}_limit")
        return ds.subset(slice(0, limit), split) if limit else ds

    def hash(self) -> str:
        # where results go and how many threads compute them never change the results
        d = self.to_dict()
        for k in OPERATIONAL_KEYS:
            d.pop(k)
        return sha256_hex(canonical_json(d))


def manifest(cfg: RunConfig, command: str, outputs: dict | None = None, extra: dict | None = None) -> dict:
    """Everything needed to rerun ``command`` and compare outputs bitwise."""
    from . import __version__

    files = {}
    for p in cfg.data.files():
        files[p] = sha256_hex(cfg.path(p).read_bytes())
    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "base_dir": str(Path(cfg.base_dir).resolve()),
        "seeds": {"run": cfg.seed, "init": cfg.init_seed, "train": cfg.train_config().seed},
        "preset_versions": dict(PRESET_VERSIONS),
        "arch_fingerprint": cfg.spec().fingerprint(),
        "data_sha256": files,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "outputs": outputs or {},
        **(extra or {}),
    }


def write_manifest(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
