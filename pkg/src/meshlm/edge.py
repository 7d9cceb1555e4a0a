"""Edge modules: trainable single-transformer-layer maps between vertices.

An edge has the same structure as one vertex layer (attention, feed-forward,
norms, residuals) plus an optional leading linear projection when source and
target widths differ. Standard initialization draws every projection from
N(0, 0.02^2); identity-preserving initialization zeroes the two residual
output projections so the edge is exactly the identity map until trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import engine
from .vertex import TransformerBlock, causal_mask, _init_normal

INIT_MODES = ("standard", "identity_preserving")


@dataclass(frozen=True)
class EdgeConfig:
    d_in: int
    d_out: int
    n_heads: int
    d_ff: int
    init_mode: str = "standard"

    def __post_init__(self) -> None:
        if self.d_out % self.n_heads != 0:
            raise ValueError(f"d_out {self.d_out} not divisible by n_heads {self.n_heads}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"unknown init_mode '{self.init_mode}'")
        if self.init_mode == "identity_preserving" and self.d_in != self.d_out:
            raise ValueError("identity_preserving init requires d_in == d_out")
        if self.d_in < 1 or self.d_ff < 1:
            raise ValueError("invalid edge dimensions")


class EdgeModule(nn.Module):
    """One transformer layer mapping n x d_in sequences to n x d_out."""

    def __init__(self, config: EdgeConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        if config.d_in != config.d_out:
            self.in_proj = nn.Parameter(torch.zeros(config.d_in, config.d_out, dtype=dtype))
        else:
            self.in_proj = None
        self.block = TransformerBlock(config.d_out, config.n_heads, config.d_ff, dtype)

    def init_weights(self, gen: torch.Generator) -> None:
        if self.in_proj is not None:
            _init_normal(self.in_proj, gen)
        self.block.init_weights(gen, zero_residual=self.config.init_mode == "identity_preserving")

    def _project(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.d_in:
            raise engine.ShapeMismatchError("edge_forward", x.shape, (self.config.d_in,))
        if self.in_proj is not None:
            x = engine.matmul(x, self.in_proj)
        return x

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self._project(x)
        if mask is None:
            mask = causal_mask(x.shape[-2])
        return self.block(x, mask)

    def attention_weights(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """[batch, heads, n, n] attention recorded from a forward pass."""
        x = self._project(x)
        if mask is None:
            mask = causal_mask(x.shape[-2])
        return self.block.attention_weights(x, mask)

    def projection_matrices(self) -> dict[str, torch.Tensor]:
        """Named q/k/v/output projection weights, for diagnostics."""
        attn = self.block.attn
        return {
            "q_proj": attn.q_proj.weight.detach(),
            "k_proj": attn.k_proj.weight.detach(),
            "v_proj": attn.v_proj.weight.detach(),
            "o_proj": attn.o_proj.weight.detach(),
        }


def init_edge(config: EdgeConfig, seed: int, dtype: torch.dtype = torch.float32) -> EdgeModule:
    edge = EdgeModule(config, dtype)
    gen = torch.Generator()
    gen.manual_seed(seed)
    edge.init_weights(gen)
    return edge


def edge_forward(edge: EdgeModule, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    return edge(x, mask)


def edge_attention(edge: EdgeModule, x: torch.Tensor) -> torch.Tensor:
    return edge.attention_weights(x)
