"""Layer-wise fully connected networks of vertices and edges.

Widths [n_1..n_L] with single input and output vertices define the edge set
{(l,i,j) : 1 <= l < L, i <= n_l, j <= n_{l+1}}. The forward pass embeds once
at the input vertex, then for each layer sums incoming edge outputs in
ascending source order and runs the receiving vertex, and finally de-embeds
the single output vertex's state. One causal mask object is threaded through
every vertex and edge, so the whole network is causal end to end.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from . import engine
from .edge import EdgeConfig, EdgeModule
from .engine import ParamGroup, ParamRegistry
from .vertex import (
    DeEmbeddingLayer,
    EmbeddingLayer,
    LanguageModel,
    StrippedTransformer,
    VertexConfig,
    causal_mask,
)

SHARING_MODES = ("shared_vertex", "per_vertex")


def parse_widths(text: str) -> tuple[int, ...]:
    """Parse slash notation like "1/2/1" into a width tuple."""
    try:
        widths = tuple(int(part) for part in text.strip().split("/"))
    except ValueError as exc:
        raise ValueError(f"invalid widths string '{text}'") from exc
    return widths


def format_widths(widths: tuple[int, ...]) -> str:
    return "/".join(str(w) for w in widths)


@dataclass(frozen=True)
class NetworkSpec:
    widths: tuple[int, ...]
    vertex: VertexConfig
    edge: EdgeConfig
    sharing: str = "shared_vertex"
    fanin_scale: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.widths) < 2:
            raise ValueError("network needs at least 2 layers")
        if self.widths[0] != 1 or self.widths[-1] != 1:
            raise ValueError(f"first and last layer widths must be 1, got {self.widths}")
        if min(self.widths) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"unknown sharing mode '{self.sharing}'")
        if self.edge.d_in != self.vertex.d_model or self.edge.d_out != self.vertex.d_model:
            raise ValueError("edge widths must match vertex d_model in a uniform network")

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    def edge_keys(self) -> list[tuple[int, int, int]]:
        keys = []
        for l in range(1, len(self.widths)):
            for i in range(1, self.widths[l - 1] + 1):
                for j in range(1, self.widths[l] + 1):
                    keys.append((l, i, j))
        return keys

    def vertex_keys(self) -> list[tuple[int, int]]:
        return [(l + 1, i + 1) for l, n in enumerate(self.widths) for i in range(n)]


@dataclass
class Tap:
    """Observer attached to one forward pass; pure, never alters results."""

    record_hidden: bool = False
    record_time: bool = False
    vertex_in: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)
    vertex_out: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)
    vertex_seconds: dict[tuple[int, int], float] = field(default_factory=dict)
    edge_seconds: dict[tuple[int, int, int], float] = field(default_factory=dict)
    total_seconds: float = 0.0


class Network:
    """A built vertex/edge network with its parameter registry."""

    def __init__(
        self,
        spec: NetworkSpec,
        dtype: torch.dtype,
        embedding: EmbeddingLayer,
        vertices: dict[tuple[int, int], StrippedTransformer],
        edges: dict[tuple[int, int, int], EdgeModule],
        deembedding: DeEmbeddingLayer,
        registry: ParamRegistry,
    ):
        self.spec = spec
        self.dtype = dtype
        self.embedding = embedding
        self.vertices = vertices
        self.edges = edges
        self.deembedding = deembedding
        self.registry = registry
        self.prefix: torch.nn.Parameter | None = None
        self.adapters: dict[str, torch.nn.Module] = {}

    @property
    def vocab_size(self) -> int:
        return self.spec.vertex.vocab_size

    @property
    def max_seq(self) -> int:
        return self.spec.vertex.max_seq

    @property
    def d_model(self) -> int:
        return self.spec.vertex.d_model

    def fingerprint(self) -> str:
        return self.registry.fingerprint()

    def forward_tokens(self, tokens: torch.Tensor, tap: Tap | None = None) -> torch.Tensor:
        """Logits for a [batch, n] (or [n]) token tensor."""
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        widths = self.spec.widths
        depth = len(widths)
        started = time.perf_counter()

        x = self.embedding(tokens)
        prefix_len = 0
        if self.prefix is not None and self.prefix.shape[0] > 0:
            prefix_len = self.prefix.shape[0]
            expanded = self.prefix.unsqueeze(0).expand(x.shape[0], -1, -1)
            x = engine.concat([expanded, x], dim=1)
        mask = causal_mask(x.shape[-2])

        hidden: dict[tuple[int, int], torch.Tensor] = {}
        if tap is not None and tap.record_hidden:
            tap.vertex_in[(1, 1)] = x
        hidden[(1, 1)] = self._run_vertex((1, 1), x, mask, tap)

        for l in range(1, depth):
            for j in range(1, widths[l] + 1):
                acc = self._run_edge((l, 1, j), hidden[(l, 1)], mask, tap)
                for i in range(2, widths[l - 1] + 1):
                    acc = engine.add(acc, self._run_edge((l, i, j), hidden[(l, i)], mask, tap))
                if self.spec.fanin_scale and widths[l - 1] > 1:
                    acc = acc / widths[l - 1]
                if tap is not None and tap.record_hidden:
                    tap.vertex_in[(l + 1, j)] = acc
                hidden[(l + 1, j)] = self._run_vertex((l + 1, j), acc, mask, tap)

        out = hidden[(depth, 1)]
        if prefix_len:
            out = out[:, prefix_len:]
        logits = self.deembedding(out)
        if tap is not None:
            tap.total_seconds = time.perf_counter() - started
        return logits

    def _run_vertex(self, key, x, mask, tap: Tap | None):
        if tap is not None and tap.record_time:
            t0 = time.perf_counter()
            out = self.vertices[key].transform(x, mask)
            tap.vertex_seconds[key] = time.perf_counter() - t0
        else:
            out = self.vertices[key].transform(x, mask)
        if tap is not None and tap.record_hidden:
            tap.vertex_out[key] = out
        return out

    def _run_edge(self, key, x, mask, tap: Tap | None):
        if tap is not None and tap.record_time:
            t0 = time.perf_counter()
            out = self.edges[key](x, mask)
            tap.edge_seconds[key] = time.perf_counter() - t0
            return out
        return self.edges[key](x, mask)


def build_network(
    spec: NetworkSpec,
    dtype: torch.dtype = torch.float32,
    pretrained: LanguageModel | None = None,
) -> Network:
    """Deterministically construct a network from its spec.

    Every component draws from its own named substream of ``spec.seed``, so
    adding an edge or widening a layer does not perturb the other streams.
    With ``pretrained`` given, vertex/embedding/de-embedding weights are
    copied from that language model (every vertex starts from the same
    weights; in shared mode they also alias one storage).
    """
    if pretrained is not None:
        if pretrained.config != spec.vertex:
            raise ValueError("pretrained vertex config does not match network spec")

    embedding = EmbeddingLayer(spec.vertex, dtype)
    embedding.init_weights(engine.substream(spec.seed, "embedding"))

    vertices: dict[tuple[int, int], StrippedTransformer] = {}
    registry = ParamRegistry()
    registry.register_module("embedding", embedding, ParamGroup.EMBEDDING)

    if spec.sharing == "shared_vertex":
        shared = StrippedTransformer(spec.vertex, dtype)
        shared.init_weights(engine.substream(spec.seed, "vertex.shared"))
        registry.register_module("vertex.shared", shared, ParamGroup.VERTEX)
        for key in spec.vertex_keys():
            vertices[key] = shared
    else:
        for key in spec.vertex_keys():
            l, i = key
            v = StrippedTransformer(spec.vertex, dtype)
            v.init_weights(engine.substream(spec.seed, f"vertex.{l}.{i}"))
            registry.register_module(f"vertex.{l}.{i}", v, ParamGroup.VERTEX)
            vertices[key] = v

    edges: dict[tuple[int, int, int], EdgeModule] = {}
    for key in spec.edge_keys():
        l, i, j = key
        e = EdgeModule(spec.edge, dtype)
        e.init_weights(engine.substream(spec.seed, f"edge.{l}.{i}.{j}"))
        registry.register_module(f"edge.{l}.{i}.{j}", e, ParamGroup.EDGE)
        edges[key] = e

    deembedding = DeEmbeddingLayer(
        spec.vertex, dtype, tied_to=embedding if spec.vertex.tie_embeddings else None
    )
    deembedding.init_weights(engine.substream(spec.seed, "deembedding"))
    registry.register_module("deembedding", deembedding, ParamGroup.DEEMBEDDING)

    net = Network(spec, dtype, embedding, vertices, edges, deembedding, registry)

    if pretrained is not None:
        with torch.no_grad():
            for dst, src in zip(embedding.parameters(), pretrained.embedding.parameters()):
                dst.copy_(src.to(dtype))
            seen: set[int] = set()
            for v in vertices.values():
                if id(v) in seen:
                    continue
                seen.add(id(v))
                for dst, src in zip(v.parameters(), pretrained.transformer.parameters()):
                    dst.copy_(src.to(dtype))
            for dst, src in zip(deembedding.parameters(), pretrained.deembedding.parameters()):
                dst.copy_(src.to(dtype))
    return net


def network_forward(net: Network, tokens: torch.Tensor) -> torch.Tensor:
    return net.forward_tokens(tokens)


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


@dataclass
class ParamCount:
    per_group: dict[str, int]
    trainable_per_group: dict[str, int]
    n_edges: int
    per_edge: int

    @property
    def vertex_total(self) -> int:
        return self.per_group.get("vertex", 0)

    @property
    def edge_total(self) -> int:
        return self.per_group.get("edge", 0)

    @property
    def total(self) -> int:
        return sum(self.per_group.values())

    @property
    def trainable_total(self) -> int:
        return sum(self.trainable_per_group.values())


def count_parameters(net: Network) -> ParamCount:
    """Exact per-group counts; shared vertex storage is counted once."""
    reg = net.registry
    per_group = {g.value: reg.count(group=g) for g in reg.groups()}
    trainable = {g.value: reg.count(group=g, trainable_only=True) for g in reg.groups()}
    n_edges = len(net.edges)
    per_edge = sum(p.numel() for p in next(iter(net.edges.values())).parameters()) if n_edges else 0
    return ParamCount(per_group, trainable, n_edges, per_edge)


def edge_count(widths: tuple[int, ...]) -> int:
    return sum(widths[l] * widths[l + 1] for l in range(len(widths) - 1))


def closed_form_counts(
    widths: tuple[int, ...],
    per_vertex: int,
    per_edge: int,
    per_embedding: int = 0,
    per_deembedding: int = 0,
    sharing: str = "shared_vertex",
) -> ParamCount:
    """Counts from abstract per-component sizes, without building anything."""
    if sharing not in SHARING_MODES:
        raise ValueError(f"unknown sharing mode '{sharing}'")
    n_vertices = sum(widths) if sharing == "per_vertex" else 1
    n_edges = edge_count(widths)
    per_group = {
        "embedding": per_embedding,
        "vertex": n_vertices * per_vertex,
        "edge": n_edges * per_edge,
        "deembedding": per_deembedding,
    }
    return ParamCount(per_group, dict(per_group), n_edges, per_edge)


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


@dataclass
class TimingReport:
    vertex_seconds: dict[tuple[int, int], float]
    edge_seconds: dict[tuple[int, int, int], float]
    total_seconds: float

    def median_vertex(self) -> float:
        return _median(list(self.vertex_seconds.values()))

    def median_edge(self) -> float:
        return _median(list(self.edge_seconds.values()))


def _median(values: list[float]) -> float:
    values = sorted(values)
    if not values:
        return 0.0
    mid = len(values) // 2
    if len(values) % 2:
        return values[mid]
    return 0.5 * (values[mid - 1] + values[mid])


def profile_forward(net: Network, tokens: torch.Tensor) -> TimingReport:
    """Wall time per vertex and edge evaluation for one forward pass."""
    tap = Tap(record_time=True)
    with torch.no_grad():
        net.forward_tokens(tokens, tap=tap)
    return TimingReport(dict(tap.vertex_seconds), dict(tap.edge_seconds), tap.total_seconds)
