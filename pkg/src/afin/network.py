"""The inference network: adapters, shared encoder, merge stack, decoders.

Tasks are processed in groups sharing ``(d, N)``. Token 0 of every task is
the prior factor, tokens ``1..N`` are the likelihood factors in list order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .box import BoxMLPNodePair, BoxTransformerBlock, CoordMLP, NodePair, nodepair_inputs, sym
from .descriptors import NODE_WIDTHS, PAIR_WIDTHS, build_descriptors_batch
from .factors import FactorType, GaussianDistribution, TaskInstance

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    """Widths and options of the network; no field depends on ``d`` or ``N``."""

    channels: int = 40
    hidden: int = 192
    n_layers: int = 4
    n_blocks: int = 4
    heads: int = 4
    adapter_hidden: int = 64
    adapter_layers: int = 2
    decoder: str = "gaussian"
    flow_layers: int = 4
    flow_hidden: int = 32
    flow_context: int | None = None
    flow_scale_bound: float = 2.0
    whiten: bool = True
    eps_lambda: float = 1e-4

    def __post_init__(self):
        if self.flow_context is None:
            self.flow_context = self.channels
        self.validate()

    def validate(self) -> None:
        for name in ("channels", "hidden", "n_layers", "heads", "adapter_hidden", "adapter_layers",
                     "flow_layers", "flow_hidden", "flow_context"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.decoder not in ("gaussian", "flow"):
            raise ValueError(f"decoder must be 'gaussian' or 'flow', got {self.decoder!r}")
        if self.flow_scale_bound <= 0 or self.eps_lambda <= 0:
            raise ValueError("flow_scale_bound and eps_lambda must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


class DescriptorGroup(NamedTuple):
    factor_type: FactorType
    index: torch.Tensor  # flat token positions b * T + t
    node: torch.Tensor  # (n, d, w_node)
    pair: torch.Tensor  # (n, d, d, w_pair)


class TaskBatch(NamedTuple):
    d: int
    n_tokens: int
    size: int
    groups: list[DescriptorGroup]


def featurize(tasks: Sequence[TaskInstance], dtype=torch.float64) -> TaskBatch:
    """Descriptors of tasks sharing ``(d, N)``, grouped by factor type."""
    if not tasks:
        raise ValueError("empty task batch")
    d, n = tasks[0].d, tasks[0].N
    if any(t.d != d or t.N != n for t in tasks):
        raise ValueError("tasks in one batch must share (d, N); use group_by_shape")
    T = n + 1
    by_type: dict[FactorType, tuple[list, list]] = {}
    for b, task in enumerate(tasks):
        for t, factor in enumerate(task.factors):
            idx, facs = by_type.setdefault(factor.factor_type, ([], []))
            idx.append(b * T + t)
            facs.append(factor)
    groups = []
    for ft in sorted(by_type, key=lambda f: f.value):
        idx, facs = by_type[ft]
        node, pair = build_descriptors_batch(facs, d)
        groups.append(DescriptorGroup(
            ft,
            torch.tensor(idx, dtype=torch.long),
            torch.as_tensor(node, dtype=dtype),
            torch.as_tensor(np.ascontiguousarray(pair), dtype=dtype),
        ))
    return TaskBatch(d, T, len(tasks), groups)


def group_by_shape(tasks: Sequence[TaskInstance]) -> dict[tuple[int, int], list[int]]:
    """Indices of tasks keyed by ``(d, N)``, keys in first-seen order."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, t in enumerate(tasks):
        groups.setdefault((t.d, t.N), []).append(i)
    return groups


class Adapter(nn.Module):
    def __init__(self, factor_type: FactorType, channels: int, hidden: int, n_layers: int):
        super().__init__()
        self.node = CoordMLP(NODE_WIDTHS[factor_type], channels, hidden, n_layers)
        self.pair = CoordMLP(PAIR_WIDTHS[factor_type], channels, hidden, n_layers)

    def forward(self, node_desc: torch.Tensor, pair_desc: torch.Tensor) -> NodePair:
        return NodePair(self.node(node_desc), sym(self.pair(pair_desc)))


def gaussian_log_prob(z: torch.Tensor, mean: torch.Tensor, chol: torch.Tensor) -> torch.Tensor:
    """``log N(z; mean, (L L^T)^{-1})`` with ``z`` of shape ``(B, S, d)``."""
    d = mean.shape[-1]
    white = torch.einsum("bsi,bij->bsj", z - mean[:, None, :], chol)
    half_logdet = torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
    return half_logdet[:, None] - 0.5 * d * LOG_2PI - 0.5 * (white * white).sum(-1)


class GaussianDecoder(nn.Module):
    """Mean and positive-definite precision from the pooled state.

    The precision has off-diagonal entries ``sym(P)_ij`` and diagonal
    ``softplus(D_i) + eps + sum_{j != i} |sym(P)_ij|``, which is strictly
    diagonally dominant and therefore positive definite.
    """

    def __init__(self, channels: int, hidden: int, n_layers: int, eps: float):
        super().__init__()
        self.node_head = CoordMLP(6 * channels, 2, hidden, n_layers, zero_init=True)
        self.pair_head = CoordMLP(6 * channels, 1, hidden, n_layers, zero_init=True)
        self.eps = eps

    def forward(self, node: torch.Tensor, pair: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        node_in, pair_in = nodepair_inputs(node, pair)
        out = self.node_head(node_in)
        mean, raw_diag = out[..., 0], out[..., 1]
        p = self.pair_head(pair_in)[..., 0]
        p = 0.5 * (p + p.transpose(-1, -2))
        eye = torch.eye(p.shape[-1], dtype=p.dtype, device=p.device)
        off = p * (1.0 - eye)
        diag = F.softplus(raw_diag) + self.eps + off.abs().sum(-1)
        precision = off + torch.diag_embed(diag)
        if not (torch.isfinite(mean).all() and torch.isfinite(precision).all()):
            raise FloatingPointError("decoder produced non-finite Gaussian parameters")
        return mean, precision


class CouplingLayer(nn.Module):
    """Affine coupling on the coordinates with ``i % 2 != parity``.

    The conditioner sees the kept coordinates, the mask, and the task context
    through a small node-pair BoxMLP, and emits a bounded log-scale ``s`` and
    shift ``t`` per coordinate.
    """

    def __init__(self, parity: int, context: int, hidden: int, bound: float):
        super().__init__()
        self.parity = parity
        self.bound = bound
        self.node_proj = nn.Linear(context + 2, hidden)
        self.pair_proj = nn.Linear(context + 1, hidden)
        self.refine = BoxMLPNodePair(hidden, hidden, 2)
        self.head = CoordMLP(6 * hidden, 2, hidden, 2, zero_init=True)

    def mask(self, d: int, dtype, device=None) -> torch.Tensor:
        return (torch.arange(d, device=device) % 2 == self.parity).to(dtype)

    def conditioner(self, kept: torch.Tensor, m: torch.Tensor, c_node: torch.Tensor, c_pair: torch.Tensor):
        B, S, d = kept.shape
        node = torch.cat(
            [kept[..., None], m.expand(B, S, d)[..., None], c_node[:, None].expand(B, S, d, -1)], dim=-1
        )
        outer = (kept[..., :, None] * kept[..., None, :])[..., None]
        pair = torch.cat([c_pair[:, None].expand(B, S, d, d, -1), outer], dim=-1)
        h = self.refine(self.node_proj(node), self.pair_proj(pair))
        raw = self.head(nodepair_inputs(*h)[0])
        s = self.bound * torch.tanh(raw[..., 0] / self.bound)
        return s * (1.0 - m), raw[..., 1] * (1.0 - m)

    def forward(self, v, c_node, c_pair):
        m = self.mask(v.shape[-1], v.dtype, v.device)
        s, t = self.conditioner(v * m, m, c_node, c_pair)
        return v * torch.exp(s) + t, s.sum(-1)

    def inverse(self, y, c_node, c_pair):
        m = self.mask(y.shape[-1], y.dtype, y.device)
        s, t = self.conditioner(y * m, m, c_node, c_pair)
        return (y - t) * torch.exp(-s), s.sum(-1)


class FlowDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C, G = cfg.channels, cfg.flow_context
        self.context_node = CoordMLP(6 * C, G, cfg.hidden, cfg.n_layers)
        self.context_pair = CoordMLP(6 * C, G, cfg.hidden, cfg.n_layers)
        self.affine_head = CoordMLP(6 * C, 2, cfg.hidden, cfg.n_layers, zero_init=True)
        self.couplings = nn.ModuleList(
            CouplingLayer(s % 2, G, cfg.flow_hidden, cfg.flow_scale_bound) for s in range(cfg.flow_layers)
        )

    def forward(self, node, pair, mean=None, chol=None) -> "FlowPosterior":
        node_in, pair_in = nodepair_inputs(node, pair)
        affine = self.affine_head(node_in)
        return FlowPosterior(
            self,
            self.context_node(node_in),
            sym(self.context_pair(pair_in)),
            affine[..., 0],
            affine[..., 1],
            mean,
            chol,
        )


class FlowPosterior:
    """Conditional coupling flow for a batch of tasks.

    ``eps ~ N(0, I)`` passes through the couplings, then ``u = exp(l) v + tau``.
    With whitening ``z = mean + L^{-T} u`` where ``L L^T`` is the Gaussian
    decoder's precision; otherwise ``z = u``.
    """

    def __init__(self, decoder, c_node, c_pair, tau, log_scale, mean=None, chol=None):
        self.decoder = decoder
        self.c_node = c_node
        self.c_pair = c_pair
        self.tau = tau
        self.log_scale = log_scale
        self.mean = mean
        self.chol = chol

    @property
    def whitened(self) -> bool:
        return self.chol is not None

    def _to_z(self, u):
        if not self.whitened:
            return u, torch.zeros(u.shape[:2], dtype=u.dtype, device=u.device)
        x = torch.linalg.solve_triangular(self.chol.mT, u.mT, upper=True).mT
        half_logdet = torch.log(torch.diagonal(self.chol, dim1=-2, dim2=-1)).sum(-1)
        return self.mean[:, None] + x, -half_logdet[:, None].expand(u.shape[:2])

    def _from_z(self, z):
        if not self.whitened:
            return z, torch.zeros(z.shape[:2], dtype=z.dtype, device=z.device)
        u = torch.einsum("bsi,bij->bsj", z - self.mean[:, None], self.chol)
        half_logdet = torch.log(torch.diagonal(self.chol, dim1=-2, dim2=-1)).sum(-1)
        return u, half_logdet[:, None].expand(z.shape[:2])

    def sample(self, n: int, generator: torch.Generator | None = None):
        """Draw ``n`` samples per task: returns ``(z, log_q)`` of shapes ``(B, n, d)``, ``(B, n)``."""
        B, d = self.tau.shape
        eps = torch.randn(B, n, d, generator=generator, dtype=self.tau.dtype)
        return self.transform(eps)

    def transform(self, eps: torch.Tensor):
        """Push base draws ``(B, S, d)`` forward; returns ``(z, log_q)``."""
        d = eps.shape[-1]
        log_q = -0.5 * d * LOG_2PI - 0.5 * (eps * eps).sum(-1)
        v = eps
        for layer in self.decoder.couplings:
            v, ld = layer(v, self.c_node, self.c_pair)
            log_q = log_q - ld
        u = torch.exp(self.log_scale)[:, None] * v + self.tau[:, None]
        log_q = log_q - self.log_scale.sum(-1)[:, None]
        z, ld = self._to_z(u)
        return z, log_q - ld

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        """Exact log density at ``z`` of shape ``(B, S, d)``."""
        u, ld = self._from_z(z)
        log_q = ld - self.log_scale.sum(-1)[:, None]
        v = (u - self.tau[:, None]) * torch.exp(-self.log_scale)[:, None]
        for layer in reversed(self.decoder.couplings):
            v, ld = layer.inverse(v, self.c_node, self.c_pair)
            log_q = log_q - ld
        d = v.shape[-1]
        return log_q - 0.5 * d * LOG_2PI - 0.5 * (v * v).sum(-1)


class PosteriorOutput(NamedTuple):
    mean: torch.Tensor  # (B, d)
    precision: torch.Tensor  # (B, d, d)
    chol: torch.Tensor  # (B, d, d) lower Cholesky factor of precision
    flow: FlowPosterior | None


class AFIN(nn.Module):
    """Typed factors in, posterior approximation out.

    Parameters
    ----------
    cfg : ModelConfig
    dtype : torch.dtype
        Parameter dtype; float64 by default.
    """

    def __init__(self, cfg: ModelConfig | None = None, dtype=torch.float64):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.adapters = nn.ModuleDict({
            ft.value: Adapter(ft, cfg.channels, cfg.adapter_hidden, cfg.adapter_layers) for ft in FactorType
        })
        self.encoder = BoxMLPNodePair(cfg.channels, cfg.hidden, cfg.n_layers)
        self.blocks = nn.ModuleList(
            BoxTransformerBlock(cfg.channels, cfg.hidden, cfg.n_layers, cfg.heads) for _ in range(cfg.n_blocks)
        )
        self.gaussian = GaussianDecoder(cfg.channels, cfg.hidden, cfg.n_layers, cfg.eps_lambda)
        self.flow = FlowDecoder(cfg) if cfg.decoder == "flow" else None
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def featurize(self, tasks: Sequence[TaskInstance]) -> TaskBatch:
        return featurize(tasks, self.dtype)

    def encode(self, batch: TaskBatch) -> NodePair:
        """Per-token states ``(B, T, d, C)`` / ``(B, T, d, d, C)`` after adapters and encoder."""
        C, d = self.cfg.channels, batch.d
        flat = batch.size * batch.n_tokens
        node = torch.zeros(flat, d, C, dtype=self.dtype)
        pair = torch.zeros(flat, d, d, C, dtype=self.dtype)
        for g in batch.groups:
            an, ap = self.adapters[g.factor_type.value](g.node, g.pair)
            node = node.index_copy(0, g.index, an)
            pair = pair.index_copy(0, g.index, ap)
        node = node.reshape(batch.size, batch.n_tokens, d, C)
        pair = pair.reshape(batch.size, batch.n_tokens, d, d, C)
        return self.encoder(node, pair)

    def merge(self, node: torch.Tensor, pair: torch.Tensor) -> NodePair:
        for block in self.blocks:
            node, pair = block(node, pair)
        return NodePair(node, pair)

    @staticmethod
    def pool(node: torch.Tensor, pair: torch.Tensor) -> NodePair:
        return NodePair(node.sum(dim=1), sym(pair.sum(dim=1)))

    def embed(self, tasks: Sequence[TaskInstance] | TaskBatch) -> NodePair:
        """Pooled state ``(B, d, C)`` / ``(B, d, d, C)``."""
        batch = tasks if isinstance(tasks, TaskBatch) else self.featurize(tasks)
        return self.pool(*self.merge(*self.encode(batch)))

    def forward(self, tasks: Sequence[TaskInstance] | TaskBatch) -> PosteriorOutput:
        node, pair = self.embed(tasks)
        mean, precision = self.gaussian(node, pair)
        chol = torch.linalg.cholesky(precision)
        flow = None
        if self.flow is not None:
            if self.cfg.whiten:
                flow = self.flow(node, pair, mean, chol)
            else:
                flow = self.flow(node, pair)
        return PosteriorOutput(mean, precision, chol, flow)

    def log_prob(self, tasks: Sequence[TaskInstance] | TaskBatch, z: torch.Tensor) -> torch.Tensor:
        """``log q(z)`` for ``z`` of shape ``(B, S, d)``; uses the flow when present."""
        out = self.forward(tasks)
        if out.flow is not None:
            return out.flow.log_prob(z)
        return gaussian_log_prob(z, out.mean, out.chol)

    @torch.no_grad()
    def gaussian_posterior(self, task: TaskInstance) -> GaussianDistribution:
        out = self.forward([task])
        return GaussianDistribution(out.mean[0].double().numpy().copy(), out.precision[0].double().numpy().copy())


def parameter_registry(model: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every learned tensor, in registration order."""
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]


def count_parameters(model: AFIN) -> dict[str, int]:
    """Trainable parameter counts per top-level module plus ``total``."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = name.split(".")[0]
        counts[key] = counts.get(key, 0) + p.numel()
    counts["total"] = sum(counts.values())
    return counts


class FlowProposal:
    """Numpy sampling interface to a single-task flow posterior."""

    def __init__(self, model: AFIN, task: TaskInstance, chunk: int = 2048):
        self.model = model
        self.task = task
        self.chunk = chunk
        with torch.no_grad():
            self.flow = model.forward([task]).flow
        if self.flow is None:
            raise ValueError("model has no flow decoder")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((n, self.task.d))
        out = []
        with torch.no_grad():
            for start in range(0, n, self.chunk):
                part = torch.as_tensor(eps[start:start + self.chunk], dtype=self.model.dtype)[None]
                out.append(self.flow.transform(part)[0][0].double().numpy())
        return np.concatenate(out)

    def log_prob(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        out = []
        with torch.no_grad():
            for start in range(0, z.shape[0], self.chunk):
                part = torch.as_tensor(z[start:start + self.chunk], dtype=self.model.dtype)[None]
                out.append(self.flow.log_prob(part)[0].double().numpy())
        return np.concatenate(out)
