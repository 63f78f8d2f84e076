"""Forward-KL training: loss, gradients, optimizer loop, EMA, gradient checks.

Gradients come from torch autograd. :func:`finite_difference_check` compares
them against central differences as an independent check.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .factors import TaskInstance, conjugate_posterior_oracle, is_conjugate, write_tasks
from .network import AFIN, ModelConfig, gaussian_log_prob, group_by_shape
from .simulator import BatchSpec, SimulatorConfig, simulate_microbatch

SCHEMA_VERSION = 1
_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    accumulation: int = 4
    peak_lr: float = 2e-4
    warmup_frac: float = 0.01
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    seed: int = 0
    dtype: str = "float64"
    log_every: int = 50
    eval_every: int = 500
    checkpoint_every: int = 1000
    eval_tasks: int = 64

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("batch_size", "accumulation", "log_every", "eval_every", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eval_tasks < 0:
            raise ValueError("eval_tasks must be >= 0")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.batch_size, self.accumulation)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["betas"] = list(self.betas)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


# --- loss and gradients ------------------------------------------------------


def latent_tensor(tasks: Sequence[TaskInstance], dtype=torch.float64) -> torch.Tensor:
    if any(t.latent is None for t in tasks):
        raise ValueError("every training task needs its ground-truth latent")
    return torch.as_tensor(np.stack([t.latent for t in tasks]), dtype=dtype)


def normalized_log_density(model: AFIN, tasks: Sequence[TaskInstance]) -> torch.Tensor:
    """``d^{-1} log q(z_true)`` per task, in input order."""
    out = [None] * len(tasks)
    for (d, _), idx in group_by_shape(tasks).items():
        group = [tasks[i] for i in idx]
        z = latent_tensor(group, model.dtype)[:, None, :]
        vals = model.log_prob(group, z)[:, 0] / d
        for j, i in enumerate(idx):
            out[i] = vals[j]
    vals = torch.stack(out)
    bad = ~torch.isfinite(vals)
    if bad.any():
        raise FloatingPointError(f"non-finite log density for task {int(bad.nonzero()[0, 0])}")
    return vals


def loss(model: AFIN, tasks: Sequence[TaskInstance]) -> torch.Tensor:
    """Negative mean of ``d^{-1} log q(z_true)`` over tasks."""
    return -normalized_log_density(model, tasks).mean()


def gaussian_loss(mean: torch.Tensor, precision: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Loss for explicit Gaussian parameters ``(B, d)``, ``(B, d, d)`` and latents ``(B, d)``."""
    lp = gaussian_log_prob(z[:, None, :], mean, torch.linalg.cholesky(precision))[:, 0]
    return -(lp / z.shape[-1]).mean()


def backward(model: AFIN, tasks: Sequence[TaskInstance]) -> dict[str, torch.Tensor]:
    """Loss gradients for every parameter; unused parameters get zeros."""
    params = dict(model.named_parameters())
    value = loss(model, tasks)
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    return {
        name: (torch.zeros_like(p) if g is None else g) for (name, p), g in zip(params.items(), grads)
    }


# --- finite-difference check --------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    probes: list[dict] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def perturbed_copy(model: AFIN, scale: float, seed: int) -> AFIN:
    """Copy with every parameter jittered, so zero-initialized heads carry gradient."""
    twin = copy.deepcopy(model)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in twin.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return twin


def finite_difference_check(
    model: AFIN,
    tasks: Sequence[TaskInstance],
    n_probes: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    floor: float | None = None,
    probes: Sequence[tuple[str, int]] | None = None,
    grad_hook: Callable[[dict], dict] | None = None,
) -> GradCheckReport:
    """Worst relative error between autograd and central differences.

    Parameters
    ----------
    model : AFIN
        Must hold float64 parameters.
    tasks : sequence of TaskInstance
    n_probes : int
        Number of random ``(tensor, entry)`` probes; a tensor is picked
        uniformly, then an entry within it.
    h : float
        Central-difference step.
    floor : float, optional
        Denominator floor of the relative error. Defaults to ``1e5 * eps * |L| / h``,
        where ``eps * |L| / h`` is the rounding resolution of the difference
        quotient, so a derivative that is zero up to roundoff is not judged on
        noise alone at a relative tolerance of ``1e-4``.
    probes : sequence of (name, flat index), optional
        Explicit probe set, overrides the random choice.
    grad_hook : callable, optional
        Applied to the analytic gradients before comparison (test hook).
    """
    if model.dtype != torch.float64:
        raise ValueError("finite-difference checks need float64 parameters")
    params = dict(model.named_parameters())
    grads = backward(model, tasks)
    if grad_hook is not None:
        grads = grad_hook(grads)
    if probes is None:
        rng = np.random.default_rng(seed)
        names = list(params)
        probes = []
        for _ in range(n_probes):
            name = names[rng.integers(len(names))]
            probes.append((name, int(rng.integers(params[name].numel()))))
    report = GradCheckReport(0.0, "")
    with torch.no_grad():
        if floor is None:
            floor = 1e5 * np.finfo(np.float64).eps * max(1.0, abs(loss(model, tasks).item())) / h
        for name, idx in probes:
            flat = params[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss(model, tasks).item()
            flat[idx] = orig - h
            down = loss(model, tasks).item()
            flat[idx] = orig
            fd = (up - down) / (2.0 * h)
            an = grads[name].reshape(-1)[idx].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), floor)
            report.probes.append({"name": name, "index": idx, "analytic": an, "fd": fd, "rel": rel})
            if rel >= report.max_rel_error:
                report.max_rel_error = rel
                report.worst = f"{name}[{idx}]"
    return report


# --- optimisation --------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_frac`` of the run, then cosine decay to 0."""
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps))) if cfg.warmup_frac > 0 else 0
    if step < warm:
        return cfg.peak_lr * (step + 1) / warm
    span = max(1, cfg.steps - warm)
    progress = min(1.0, (step - warm) / span)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class EMA:
    """Exponential moving average of parameters: ``s <- decay * s + (1 - decay) * p``."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for name, p in model.named_parameters():
            if self.decay == 0.0:
                self.shadow[name].copy_(p)
            else:
                self.shadow[name].mul_(self.decay).add_(p, alpha=1.0 - self.decay)

    def copy_to(self, model: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.shadow[name])


def build_model(model_cfg: ModelConfig, seed: int, dtype=torch.float64) -> AFIN:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return AFIN(model_cfg, dtype=dtype)


def heldout_tasks(sim_cfg: SimulatorConfig, seed: int, count: int) -> list[TaskInstance]:
    """Evaluation tasks from a stream disjoint from training (reserved step label)."""
    from .simulator import rng_stream, simulate_task

    return [simulate_task(sim_cfg, rng_stream(seed, 2**31, 0, 7, i)) for i in range(count)]


@torch.no_grad()
def conjugate_m1(model: AFIN, tasks: Sequence[TaskInstance]) -> tuple[float, float]:
    """Mean M1 of the decoder mean and of the prior mean against the closed-form posterior."""
    ours, base = [], []
    for task in tasks:
        oracle = conjugate_posterior_oracle(task)
        mean = model.forward([task]).mean[0].double().numpy()
        ours.append(float(np.linalg.norm(mean - oracle.mean)))
        base.append(float(np.linalg.norm(task.prior.theta["loc"] - oracle.mean)))
    return float(np.mean(ours)), float(np.mean(base))


class Trainer:
    """Owns the live model, AdamW state, EMA and the step counter.

    The batch at step ``s`` depends only on ``(seed, s)``, so a resumed run
    reproduces an uninterrupted one exactly.
    """

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        sim_cfg: SimulatorConfig,
        out_dir: str | Path | None = None,
    ):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.sim_cfg = sim_cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = build_model(model_cfg, train_cfg.seed, train_cfg.torch_dtype)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=lr_at(0, train_cfg),
            betas=train_cfg.betas,
            eps=train_cfg.adam_eps,
            weight_decay=train_cfg.weight_decay,
        )
        self.ema = EMA(self.model, train_cfg.ema_decay)
        self.step = 0
        self.history: list[dict] = []
        self._heldout = None

    # one optimizer step
    def microbatches(self, step: int) -> list[list[TaskInstance]]:
        spec = self.cfg.batch_spec
        return [simulate_microbatch(self.sim_cfg, self.cfg.seed, step, k, spec.B) for k in range(spec.K)]

    def train_step(self) -> float:
        step = self.step
        lr = lr_at(step, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total = 0.0
        batches = self.microbatches(step)
        for tasks in batches:
            try:
                value = loss(self.model, tasks) / len(batches)
            except FloatingPointError as exc:
                self._abort(step, tasks, str(exc))
            if not torch.isfinite(value):
                self._abort(step, tasks, "non-finite loss")
            value.backward()
            total += value.item()
        self.optimizer.step()
        self.ema.update(self.model)
        self.step += 1
        return total

    def _abort(self, step: int, tasks: Sequence[TaskInstance], reason: str):
        where = ""
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            dump = self.out_dir / f"nan_batch_step{step}.jsonl"
            write_tasks(dump, tasks)
            where = f"; batch written to {dump}"
        raise TrainingAborted(f"step {step}: {reason}{where}")

    def run(self, until: int | None = None, progress: Callable[[dict], None] | None = None) -> list[dict]:
        """Train up to step ``until`` (default: ``cfg.steps``), logging and checkpointing."""
        until = self.cfg.steps if until is None else min(until, self.cfg.steps)
        fh, metrics = self._open_log("metrics.csv", ["step", "loss", "lr", "wallclock_s"])
        start = time.perf_counter()
        try:
            while self.step < until:
                lr = lr_at(self.step, self.cfg)
                value = self.train_step()
                row = {"step": self.step, "loss": value, "lr": lr, "wallclock_s": time.perf_counter() - start}
                self.history.append(row)
                if metrics is not None:
                    metrics.writerow(row)
                if progress is not None and (self.step % self.cfg.log_every == 0 or self.step == until):
                    progress(row)
                if self.out_dir is not None and self.step % self.cfg.eval_every == 0:
                    self._eval_log()
                if self.out_dir is not None and self.step % self.cfg.checkpoint_every == 0:
                    self.save(self.out_dir / "checkpoint.afin")
        finally:
            if fh is not None:
                fh.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoint.afin")
        return self.history

    def _open_log(self, name: str, fields: list[str]):
        if self.out_dir is None:
            return None, None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        fresh = not path.exists() or self.step == 0
        fh = path.open("w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=fields)
        if fresh:
            writer.writeheader()
        return fh, writer

    def _eval_log(self) -> None:
        if self.cfg.eval_tasks == 0:
            return
        if self._heldout is None:
            self._heldout = heldout_tasks(self.sim_cfg, self.cfg.seed, self.cfg.eval_tasks)
        model = self.ema_model()
        with torch.no_grad():
            nll = loss(model, self._heldout).item()
        m1 = base = float("nan")
        if all(is_conjugate(t) for t in self._heldout):
            m1, base = conjugate_m1(model, self._heldout)
        path = self.out_dir / "eval.csv"
        new = not path.exists()
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["step", "heldout_loss", "heldout_m1", "prior_mean_m1"])
            w.writerow([self.step, nll, m1, base])

    def ema_model(self) -> AFIN:
        twin = copy.deepcopy(self.model)
        self.ema.copy_to(twin)
        return twin

    # persistence
    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"meta.step": np.array(float(self.step))}
        names = [n for n, _ in self.model.named_parameters()]
        for name, p in self.model.named_parameters():
            out[f"param.{name}"] = p.detach().numpy().copy()
        for name in names:
            out[f"ema.{name}"] = self.ema.shadow[name].numpy().copy()
        state = self.optimizer.state_dict()["state"]
        for i, name in enumerate(names):
            if i in state:
                s = state[i]
                out[f"adam.step.{name}"] = np.array(float(s["step"]))
                out[f"adam.exp_avg.{name}"] = s["exp_avg"].numpy().copy()
                out[f"adam.exp_avg_sq.{name}"] = s["exp_avg_sq"].numpy().copy()
        return out

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ckpt.write_tensors(path, self.state_tensors())
        sidecar = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.cfg.seed,
            "step": self.step,
            "model": self.model_cfg.to_json(),
            "train": self.cfg.to_json(),
            "simulator": self.sim_cfg.to_json(),
        }
        path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2))

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        names = [n for n, _ in self.model.named_parameters()]
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                p.copy_(torch.from_numpy(tensors[f"param.{name}"]))
                self.ema.shadow[name].copy_(torch.from_numpy(tensors[f"ema.{name}"]))
        sd = self.optimizer.state_dict()
        state = {}
        for i, name in enumerate(names):
            if f"adam.step.{name}" in tensors:
                state[i] = {
                    "step": torch.tensor(float(tensors[f"adam.step.{name}"]), dtype=torch.float32),
                    "exp_avg": torch.from_numpy(tensors[f"adam.exp_avg.{name}"].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[f"adam.exp_avg_sq.{name}"].copy()),
                }
        sd["state"] = state
        self.optimizer.load_state_dict(sd)
        self.step = int(tensors["meta.step"])

    @classmethod
    def resume(cls, path, out_dir=None, steps: int | None = None) -> "Trainer":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        train_doc = dict(meta["train"])
        if steps is not None:
            train_doc["steps"] = steps
        trainer = cls(
            ModelConfig.from_json(meta["model"]),
            TrainConfig.from_json(train_doc),
            SimulatorConfig.from_json(meta["simulator"]),
            out_dir,
        )
        trainer.load_state(ckpt.read_tensors(path))
        return trainer


def load_model(path, use_ema: bool = True) -> AFIN:
    """Model from a checkpoint written by :meth:`Trainer.save`."""
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    tensors = ckpt.read_tensors(path)
    dtype = _DTYPES[meta["train"].get("dtype", "float64")]
    model = AFIN(ModelConfig.from_json(meta["model"]), dtype=dtype)
    prefix = "ema." if use_ema else "param."
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(tensors[prefix + name]))
    return model
