"""Run configuration: one JSON document with simulator, model, training and eval sections.

Precedence is command-line flags over the config file over the profile
defaults. Two profiles are built in: ``paper-default`` and ``toy``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .network import ModelConfig
from .simulator import SimulatorConfig
from .training import SCHEMA_VERSION, TrainConfig


@dataclass
class EvalConfig:
    methods: tuple[str, ...] = ("afin", "afin+snis", "mcmc", "oracle")
    budgets: tuple[int, ...] = (100, 1000, 10000)
    projections: int = 128
    ref_samples: int = 10000
    ref_mcmc_iters: int = 200000

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.budgets = tuple(int(b) for b in self.budgets)
        if any(b < 2 for b in self.budgets):
            raise ValueError("budgets must be >= 2")
        if self.projections < 1 or self.ref_samples < 2 or self.ref_mcmc_iters < 1:
            raise ValueError("projections, ref_samples and ref_mcmc_iters must be positive")


@dataclass
class RunConfig:
    profile: str = "paper-default"
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        self.simulator.validate()
        self.model.validate()
        self.train.validate()
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.train.seed != self.seed:
            self.train.seed = self.seed
        out = Path(self.out_dir)
        probe = out if out.exists() else next((p for p in out.parents if p.exists()), Path("."))
        if not os.access(probe, os.W_OK):
            raise ValueError(f"output directory {self.out_dir} is not writable")

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "profile": self.profile,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "threads": self.threads,
            "simulator": self.simulator.to_json(),
            "model": self.model.to_json(),
            "train": self.train.to_json(),
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.eval).items()},
        }


def profile_sections(name: str) -> dict:
    """Default section documents of a built-in profile."""
    if name == "paper-default":
        return {
            "simulator": SimulatorConfig().to_json(),
            "model": ModelConfig().to_json(),
            "train": TrainConfig(steps=100_000, batch_size=32, accumulation=4, peak_lr=2e-4).to_json(),
            "eval": {},
        }
    if name == "toy":
        sim = SimulatorConfig(
            d_max=3, N_max=8, prior_types=("diag_gaussian",), likelihood_types=("lin_gaussian",)
        )
        model = ModelConfig(
            channels=8, hidden=32, n_layers=2, n_blocks=2, heads=2, adapter_hidden=16, adapter_layers=2,
            flow_hidden=16,
        )
        train = TrainConfig(
            steps=5000, batch_size=32, accumulation=1, peak_lr=3e-3, eval_every=1000, checkpoint_every=1000
        )
        return {
            "simulator": sim.to_json(),
            "model": model.to_json(),
            "train": train.to_json(),
            "eval": {"budgets": [100, 1000, 10000], "ref_mcmc_iters": 50_000},
        }
    raise ValueError(f"unknown profile {name!r}; choose 'paper-default' or 'toy'")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(profile: str | None = None, path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge profile defaults, an optional JSON file and flag overrides, then validate."""
    doc: dict = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"config schema_version {version} unsupported (expected {SCHEMA_VERSION})")
    name = profile or doc.get("profile") or "paper-default"
    merged = _merge(profile_sections(name), doc)
    merged = _merge(merged, overrides or {})
    merged["profile"] = name
    seed = int(merged.get("seed", 0))
    train_doc = dict(merged["train"])
    train_doc["seed"] = seed
    cfg = RunConfig(
        profile=name,
        seed=seed,
        out_dir=merged.get("out_dir", f"runs/{name}"),
        threads=int(merged.get("threads", 1)),
        simulator=SimulatorConfig.from_json(merged["simulator"]),
        model=ModelConfig.from_json(merged["model"]),
        train=TrainConfig.from_json(train_doc),
        eval=EvalConfig(**merged.get("eval", {})),
    )
    cfg.validate()
    return cfg
