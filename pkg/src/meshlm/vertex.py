"""Stripped transformers: embedding E, transformer stack T, de-embedding D.

A vertex is the T part, a shape-preserving map on dense sequences. E and D are
detachable; :func:`strip` unbundles a full language model into the three parts
so dense vectors can flow directly between models. The transformer block here
(pre-norm, learned absolute positions added only inside E) is also reused by
edge modules, which have the same structure as one vertex layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import engine
from .engine import ParamGroup, ParamRegistry

INIT_STD = 0.02

_MASK_CACHE: dict[int, torch.Tensor] = {}


def causal_mask(n: int) -> torch.Tensor:
    """Shared lower-triangular attention mask; True marks visible positions."""
    mask = _MASK_CACHE.get(n)
    if mask is None:
        mask = torch.tril(torch.ones(n, n, dtype=torch.bool))
        _MASK_CACHE[n] = mask
    return mask


@dataclass(frozen=True)
class VertexConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    max_seq: int
    tie_embeddings: bool = False

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4 (BOS/EOS/PAD + one symbol)")
        if self.n_layers < 0 or self.max_seq < 1 or self.d_ff < 1:
            raise ValueError("invalid vertex dimensions")


def _init_normal(param: torch.Tensor, gen: torch.Generator, std: float = INIT_STD) -> None:
    # Draws happen in float32 regardless of model dtype so that a float64
    # build matches the float32 checkpoint encoding bit-exactly.
    values = torch.empty(param.shape, dtype=torch.float32)
    values.normal_(0.0, std, generator=gen)
    with torch.no_grad():
        param.copy_(values.to(param.dtype))


def _init_zeros(param: torch.Tensor) -> None:
    with torch.no_grad():
        param.zero_()


class CausalSelfAttention(nn.Module):
    """Multi-head self-attention with separate q/k/v/output projections."""

    def __init__(self, d_model: int, n_heads: int, dtype: torch.dtype):
        super().__init__()
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.q_proj = nn.Linear(d_model, d_model, dtype=dtype)
        self.k_proj = nn.Linear(d_model, d_model, dtype=dtype)
        self.v_proj = nn.Linear(d_model, d_model, dtype=dtype)
        self.o_proj = nn.Linear(d_model, d_model, dtype=dtype)
        # Low-rank adapters attach here as a plain dict (keys q_proj/k_proj/
        # v_proj/o_proj) so they stay out of this module's own parameter set;
        # they are registered and trained through the owning model's registry.
        self.adapters: dict[str, nn.Module] = {}

    def init_weights(self, gen: torch.Generator, zero_output: bool = False) -> None:
        for proj in (self.q_proj, self.k_proj, self.v_proj, self.o_proj):
            _init_normal(proj.weight, gen)
            _init_zeros(proj.bias)
        if zero_output:
            _init_zeros(self.o_proj.weight)

    def _project(self, name: str, module: nn.Linear, x: torch.Tensor) -> torch.Tensor:
        out = engine.linear(x, module.weight, module.bias)
        adapter = self.adapters.get(name)
        if adapter is not None:
            out = engine.add(out, adapter(x))
        return out

    def _weights(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        q = self._project("q_proj", self.q_proj, x)
        k = self._project("k_proj", self.k_proj, x)
        v = self._project("v_proj", self.v_proj, x)
        q = q.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        scores = engine.matmul(q, k.transpose(-2, -1)) * self.scale
        scores = scores.masked_fill(~mask[:n, :n], float("-inf"))
        attn = engine.softmax(scores, dim=-1)
        return attn, v

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        attn, v = self._weights(x, mask)
        out = engine.matmul(attn, v).transpose(1, 2).reshape(b, n, d)
        return self._project("o_proj", self.o_proj, out)

    def attention_weights(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """[batch, heads, n, n] attention distributions, detached."""
        attn, _ = self._weights(x, mask)
        return attn.detach()


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dtype: torch.dtype):
        super().__init__()
        self.fc_in = nn.Linear(d_model, d_ff, dtype=dtype)
        self.fc_out = nn.Linear(d_ff, d_model, dtype=dtype)

    def init_weights(self, gen: torch.Generator, zero_output: bool = False) -> None:
        _init_normal(self.fc_in.weight, gen)
        _init_zeros(self.fc_in.bias)
        _init_normal(self.fc_out.weight, gen)
        _init_zeros(self.fc_out.bias)
        if zero_output:
            _init_zeros(self.fc_out.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = engine.gelu(engine.linear(x, self.fc_in.weight, self.fc_in.bias))
        return engine.linear(h, self.fc_out.weight, self.fc_out.bias)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(ln1(x)), then x + ff(ln2(x))."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dtype: torch.dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model, dtype=dtype)
        self.attn = CausalSelfAttention(d_model, n_heads, dtype)
        self.ln2 = nn.LayerNorm(d_model, dtype=dtype)
        self.ff = FeedForward(d_model, d_ff, dtype)

    def init_weights(self, gen: torch.Generator, zero_residual: bool = False) -> None:
        with torch.no_grad():
            self.ln1.weight.fill_(1.0)
            self.ln1.bias.zero_()
            self.ln2.weight.fill_(1.0)
            self.ln2.bias.zero_()
        self.attn.init_weights(gen, zero_output=zero_residual)
        self.ff.init_weights(gen, zero_output=zero_residual)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = engine.layer_norm(x, self.ln1.weight, self.ln1.bias)
        x = engine.add(x, self.attn(h, mask))
        h = engine.layer_norm(x, self.ln2.weight, self.ln2.bias)
        return engine.add(x, self.ff(h))

    def attention_weights(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = engine.layer_norm(x, self.ln1.weight, self.ln1.bias)
        return self.attn.attention_weights(h, mask)


class EmbeddingLayer(nn.Module):
    """Token table plus learned absolute positions; positions enter here only."""

    def __init__(self, config: VertexConfig, dtype: torch.dtype):
        super().__init__()
        self.config = config
        self.token_table = nn.Parameter(torch.zeros(config.vocab_size, config.d_model, dtype=dtype))
        self.pos_table = nn.Parameter(torch.zeros(config.max_seq, config.d_model, dtype=dtype))

    def init_weights(self, gen: torch.Generator) -> None:
        _init_normal(self.token_table, gen)
        _init_normal(self.pos_table, gen)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        n = tokens.shape[-1]
        if n < 1:
            raise engine.EngineError("embed: empty token sequence")
        if n > self.config.max_seq:
            raise engine.EngineError(f"embed: sequence length {n} exceeds max_seq {self.config.max_seq}")
        x = engine.embedding(self.token_table, tokens)
        return engine.add(x, self.pos_table[:n])


class DeEmbeddingLayer(nn.Module):
    """Projects dense vectors to vocabulary logits; optionally tied to E."""

    def __init__(self, config: VertexConfig, dtype: torch.dtype, tied_to: EmbeddingLayer | None = None):
        super().__init__()
        self.config = config
        self.tied_to = tied_to
        if tied_to is None:
            self.projection = nn.Parameter(torch.zeros(config.d_model, config.vocab_size, dtype=dtype))
        else:
            self.projection = None

    def init_weights(self, gen: torch.Generator) -> None:
        if self.projection is not None:
            _init_normal(self.projection, gen)

    def _matrix(self) -> torch.Tensor:
        if self.tied_to is not None:
            return self.tied_to.token_table.t()
        return self.projection

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.d_model:
            raise engine.ShapeMismatchError("deembed", x.shape, (self.config.d_model, self.config.vocab_size))
        return engine.matmul(x, self._matrix())


class StrippedTransformer(nn.Module):
    """The vertex module: an n x d -> n x d map over dense sequences."""

    def __init__(self, config: VertexConfig, dtype: torch.dtype):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_model, config.n_heads, config.d_ff, dtype)
            for _ in range(config.n_layers)
        )

    def init_weights(self, gen: torch.Generator) -> None:
        for block in self.blocks:
            block.init_weights(gen)

    def transform(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.config.d_model:
            raise engine.ShapeMismatchError("transform", x.shape, (self.config.d_model,))
        if mask is None:
            mask = causal_mask(x.shape[-2])
        for block in self.blocks:
            x = block(x, mask)
        return x

    forward = transform


class LanguageModel:
    """A complete E/T/D model over discrete tokens.

    ``forward_tokens`` is literally deembed(transform(embed(x))), so stripping
    and recomposing is bit-exact by construction.
    """

    def __init__(self, config: VertexConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.config = config
        self.dtype = dtype
        self.seed = seed
        self.embedding = EmbeddingLayer(config, dtype)
        self.transformer = StrippedTransformer(config, dtype)
        self.deembedding = DeEmbeddingLayer(
            config, dtype, tied_to=self.embedding if config.tie_embeddings else None
        )
        self.embedding.init_weights(engine.substream(seed, "embedding"))
        self.transformer.init_weights(engine.substream(seed, "vertex"))
        self.deembedding.init_weights(engine.substream(seed, "deembedding"))

        self.registry = ParamRegistry()
        self.registry.register_module("embedding", self.embedding, ParamGroup.EMBEDDING)
        self.registry.register_module("vertex", self.transformer, ParamGroup.VERTEX)
        self.registry.register_module("deembedding", self.deembedding, ParamGroup.DEEMBEDDING)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def max_seq(self) -> int:
        return self.config.max_seq

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        mask = causal_mask(tokens.shape[-1])
        x = self.embedding(tokens)
        x = self.transformer.transform(x, mask)
        return self.deembedding(x)

    def fingerprint(self) -> str:
        return self.registry.fingerprint()


def strip(full_lm: LanguageModel) -> tuple[EmbeddingLayer, StrippedTransformer, DeEmbeddingLayer]:
    """Detach E and D from a full model so dense sequences flow directly."""
    return full_lm.embedding, full_lm.transformer, full_lm.deembedding
