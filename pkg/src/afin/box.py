"""Dimension-independent building blocks over node-pair embeddings.

A node-pair state is a pair of tensors ``node`` with shape ``(..., d, C)`` and
``pair`` with shape ``(..., d, d, C)``. Every learned map acts on the channel
axis only, so no parameter shape depends on ``d``. Inside a transformer block
the leading axes are ``(B, T)``: tasks and factor tokens.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class NodePair(NamedTuple):
    node: torch.Tensor
    pair: torch.Tensor


def sym(pair: torch.Tensor) -> torch.Tensor:
    """Symmetrize over the two coordinate axes of ``(..., d, d, C)``."""
    return 0.5 * (pair + pair.transpose(-2, -3))


def boxmlp_scalar_forward(params: dict, z: torch.Tensor, activation=F.gelu) -> torch.Tensor:
    """Parameter-tied scalar BoxMLP on a vector ``z`` of any length.

    Parameters
    ----------
    params : dict
        ``alpha``, ``beta``, ``gamma``, ``omega`` of shape ``(H,)`` and a
        scalar ``delta``.
    z : Tensor
        Shape ``(..., d)``.
    activation : callable
        Elementwise nonlinearity.

    Returns
    -------
    Tensor
        Shape ``(..., d)``; ``o_j = delta + sum_l omega_l act(gamma_l +
        alpha_l z_j + beta_l mean(z))``.
    """
    zbar = z.mean(dim=-1, keepdim=True)
    pre = params["gamma"] + params["alpha"] * z[..., None] + params["beta"] * zbar[..., None]
    return params["delta"] + activation(pre) @ params["omega"]


class CoordMLP(nn.Module):
    """MLP applied independently at every coordinate (or coordinate pair).

    ``n_layers`` linear maps ``c_in -> hidden -> ... -> c_out`` with GELU in
    between. ``zero_init`` zeroes the last layer so the map starts at 0.
    """

    def __init__(self, c_in: int, c_out: int, hidden: int, n_layers: int, zero_init: bool = False):
        super().__init__()
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        widths = [c_in] + [hidden] * (n_layers - 1) + [c_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.c_in = c_in
        self.c_out = c_out
        if zero_init:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = F.gelu(layer(x))
        return self.layers[-1](x)


class Summaries(NamedTuple):
    row: torch.Tensor  # (..., d, C)
    col: torch.Tensor  # (..., d, C)
    diag: torch.Tensor  # (..., d, C)
    global_pair: torch.Tensor  # (..., C)
    global_node: torch.Tensor  # (..., C)


def invariant_summaries(node: torch.Tensor, pair: torch.Tensor) -> Summaries:
    """Row/column means, diagonal and global means of a node-pair state."""
    row = pair.mean(dim=-2)
    col = pair.mean(dim=-3)
    diag = torch.diagonal(pair, dim1=-3, dim2=-2).movedim(-1, -2)
    return Summaries(row, col, diag, pair.mean(dim=(-3, -2)), node.mean(dim=-2))


def nodepair_inputs(node: torch.Tensor, pair: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Six-block inputs ``(..., d, 6C)`` and ``(..., d, d, 6C)`` for the branches."""
    s = invariant_summaries(node, pair)
    lead = pair.shape[:-1]
    gp_node = s.global_pair.unsqueeze(-2).expand_as(node)
    node_in = torch.cat(
        [node, s.diag, s.row, s.col, gp_node, s.global_node.unsqueeze(-2).expand_as(node)], dim=-1
    )
    pair_in = torch.cat(
        [
            pair,
            s.row.unsqueeze(-2).expand(*lead, -1),
            s.col.unsqueeze(-3).expand(*lead, -1),
            node.unsqueeze(-2).expand(*lead, -1),
            node.unsqueeze(-3).expand(*lead, -1),
            s.global_pair[..., None, None, :].expand(*lead, -1),
        ],
        dim=-1,
    )
    return node_in, pair_in


class BoxMLPNodePair(nn.Module):
    """Node-pair BoxMLP with a node branch and a pair branch, both ``6C -> C``."""

    def __init__(self, channels: int, hidden: int, n_layers: int, zero_init: bool = False):
        super().__init__()
        self.channels = channels
        self.node_branch = CoordMLP(6 * channels, channels, hidden, n_layers, zero_init)
        self.pair_branch = CoordMLP(6 * channels, channels, hidden, n_layers, zero_init)

    def forward(self, node: torch.Tensor, pair: torch.Tensor, residual: bool = True) -> NodePair:
        """Return ``(node + dn, sym(pair + dp))`` or, if not residual, the raw ``(dn, dp)``."""
        if node.shape[-1] != self.channels or pair.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels")
        node_in, pair_in = nodepair_inputs(node, pair)
        dn = self.node_branch(node_in)
        dp = self.pair_branch(pair_in)
        if not residual:
            return NodePair(dn, dp)
        return NodePair(node + dn, sym(pair + dp))


class NodePairLayerNorm(nn.Module):
    """Channel-only layer norm with separate node and pair parameters."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.node_norm = nn.LayerNorm(channels, eps=eps)
        self.pair_norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, node: torch.Tensor, pair: torch.Tensor) -> NodePair:
        return NodePair(self.node_norm(node), self.pair_norm(pair))


def attention_weights(
    q: NodePair, k: NodePair, lambda_node: torch.Tensor, lambda_pair: torch.Tensor, heads: int
) -> torch.Tensor:
    """Softmax attention over the factor axis, shape ``(B, heads, T, T)``."""
    B, T, d, C = q.node.shape
    if C % heads:
        raise ValueError(f"{C} channels not divisible by {heads} heads")
    u = C // heads
    qn = q.node.reshape(B, T, d, heads, u)
    kn = k.node.reshape(B, T, d, heads, u)
    qp = q.pair.reshape(B, T, d, d, heads, u)
    kp = k.pair.reshape(B, T, d, d, heads, u)
    s_node = torch.einsum("bnihc,blihc->bhnl", qn, kn) / d
    s_pair = torch.einsum("bnijhc,blijhc->bhnl", qp, kp) / (d * d)
    return torch.softmax((lambda_node * s_node + lambda_pair * s_pair) / math.sqrt(u), dim=-1)


def factor_axis_attention(
    q: NodePair, k: NodePair, v: NodePair, lambda_node: torch.Tensor, lambda_pair: torch.Tensor, heads: int
) -> NodePair:
    """Multi-head attention across tokens with coordinate-averaged scores.

    Inputs have node shape ``(B, T, d, C)`` and pair shape ``(B, T, d, d, C)``.
    Values are mixed per head on matching channel slices of node and pair.
    """
    B, T, d, C = v.node.shape
    u = C // heads
    attn = attention_weights(q, k, lambda_node, lambda_pair, heads)
    vn = v.node.reshape(B, T, d, heads, u)
    vp = v.pair.reshape(B, T, d, d, heads, u)
    out_n = torch.einsum("bhnl,blihc->bnihc", attn, vn).reshape(B, T, d, C)
    out_p = torch.einsum("bhnl,blijhc->bnijhc", attn, vp).reshape(B, T, d, d, C)
    return NodePair(out_n, out_p)


class BoxTransformerBlock(nn.Module):
    """Pre-norm transformer block over the factor axis built from node-pair BoxMLPs."""

    def __init__(self, channels: int, hidden: int, n_layers: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm_attn = NodePairLayerNorm(channels)
        self.q_map = BoxMLPNodePair(channels, hidden, n_layers)
        self.k_map = BoxMLPNodePair(channels, hidden, n_layers)
        self.v_map = BoxMLPNodePair(channels, hidden, n_layers)
        self.out_map = BoxMLPNodePair(channels, hidden, n_layers)
        self.norm_ffn = NodePairLayerNorm(channels)
        self.ffn_map = BoxMLPNodePair(channels, hidden, n_layers)
        self.lambda_node = nn.Parameter(torch.ones(()))
        self.lambda_pair = nn.Parameter(torch.ones(()))

    def forward(self, node: torch.Tensor, pair: torch.Tensor) -> NodePair:
        """Update tokens ``(B, T, d, C)`` / ``(B, T, d, d, C)``."""
        h = self.norm_attn(node, pair)
        q = self.q_map(*h, residual=False)
        k = self.k_map(*h, residual=False)
        v = self.v_map(*h, residual=False)
        mixed = factor_axis_attention(q, k, v, self.lambda_node, self.lambda_pair, self.heads)
        dn, dp = self.out_map(*mixed, residual=False)
        node = node + dn
        pair = sym(pair + dp)
        dn, dp = self.ffn_map(*self.norm_ffn(node, pair), residual=False)
        return NodePair(node + dn, sym(pair + dp))


def stack_tokens(states: Sequence[NodePair]) -> NodePair:
    """Stack per-token states ``(d, C)`` / ``(d, d, C)`` into ``(1, T, ...)``."""
    dims = {s.node.shape[-2] for s in states} | {s.pair.shape[-2] for s in states}
    if len(dims) != 1:
        raise ValueError(f"tokens disagree on latent dimension: {sorted(dims)}")
    node = torch.stack([s.node for s in states])[None]
    pair = torch.stack([s.pair for s in states])[None]
    return NodePair(node, pair)
