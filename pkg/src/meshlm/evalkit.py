"""Evaluation and diagnostics: perplexity, greedy decoding, edge inspection.

The inspection tools are pure observers. ``dump_edges`` records every edge's
attention pattern for a given input (first 100 positions) together with
summary statistics and downsampled heatmap grids of its q/k/v/output
projection matrices. ``probe_deembed`` applies the output de-embedding to an
interior vertex's aggregated input, a diagnostic with no correctness claim.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch

from .cli.checkpoint import DUMP_MAGIC, read_blob_file, write_blob_file
from .data import BOS_ID, EOS_ID, Batch, ByteTokenizer
from .topology import Network, Tap
from .trainer import loss_terms

EdgeKey = tuple[int, int, int]


@dataclass
class EvalReport:
    perplexity: float | None
    accuracy: float | None
    samples: int
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "accuracy": self.accuracy,
            "samples": self.samples,
            "fingerprint": self.fingerprint,
        }


def perplexity(model, batches: list[Batch]) -> float:
    """exp of the mean next-token NLL over non-pad positions."""
    total = 0.0
    count = 0
    with torch.no_grad():
        for batch in batches:
            logits = model.forward_tokens(batch.tokens)
            t, c = loss_terms(logits, batch.tokens, batch.mask)
            total += float(t)
            count += c
    if count == 0:
        raise ValueError("perplexity: no scorable positions")
    return math.exp(total / count)


def eval_perplexity(model, batches: list[Batch]) -> EvalReport:
    samples = sum(b.tokens.shape[0] for b in batches)
    return EvalReport(perplexity(model, batches), None, samples, model.fingerprint())


def greedy_generate(model, prompt_tokens: list[int], max_new: int) -> list[int]:
    """Deterministic argmax decoding; stops at EOS or after max_new tokens."""
    if not prompt_tokens:
        raise ValueError("greedy_generate: empty prompt")
    tokens = list(prompt_tokens)
    with torch.no_grad():
        for _ in range(max_new):
            if len(tokens) >= model.max_seq:
                break
            logits = model.forward_tokens(torch.tensor([tokens], dtype=torch.long))
            nxt = int(torch.argmax(logits[0, -1]))
            tokens.append(nxt)
            if nxt == EOS_ID:
                break
    return tokens


# ---------------------------------------------------------------------------
# Edge diagnostics
# ---------------------------------------------------------------------------


@dataclass
class ProjectionStats:
    min: float
    max: float
    mean: float
    std: float
    grid: torch.Tensor  # block-mean downsampled matrix, <= 128 per side


@dataclass
class EdgeDump:
    fingerprint: str
    input_hash: str
    attention: dict[EdgeKey, torch.Tensor] = field(default_factory=dict)  # [heads, n, n]
    projections: dict[EdgeKey, dict[str, ProjectionStats]] = field(default_factory=dict)


def _downsample(matrix: torch.Tensor, max_side: int = 128) -> torch.Tensor:
    rows = min(matrix.shape[0], max_side)
    cols = min(matrix.shape[1], max_side)
    row_blocks = torch.tensor_split(matrix, rows, dim=0)
    pooled_rows = torch.stack([b.mean(dim=0) for b in row_blocks])
    col_blocks = torch.tensor_split(pooled_rows, cols, dim=1)
    return torch.stack([b.mean(dim=1) for b in col_blocks], dim=1)


def _projection_stats(matrix: torch.Tensor) -> ProjectionStats:
    m = matrix.to(torch.float32)
    return ProjectionStats(
        min=float(m.min()),
        max=float(m.max()),
        mean=float(m.mean()),
        std=float(m.std()),
        grid=_downsample(m),
    )


def edge_weight_stats(net: Network) -> dict[EdgeKey, dict[str, ProjectionStats]]:
    stats: dict[EdgeKey, dict[str, ProjectionStats]] = {}
    for key, edge in net.edges.items():
        stats[key] = {name: _projection_stats(w) for name, w in edge.projection_matrices().items()}
    return stats


def _hash_tokens(tokens: torch.Tensor) -> str:
    raw = tokens.to(torch.int64).cpu().numpy().tobytes()
    return hashlib.sha256(raw).hexdigest()[:16]


def dump_edges(net: Network, tokens: torch.Tensor, max_positions: int = 100) -> EdgeDump:
    """Record every edge's attention for this input, plus weight summaries."""
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    dump = EdgeDump(fingerprint=net.fingerprint(), input_hash=_hash_tokens(tokens))
    tap = Tap(record_hidden=True)
    with torch.no_grad():
        net.forward_tokens(tokens, tap=tap)
        for key in sorted(net.edges):
            l, i, j = key
            source = tap.vertex_out[(l, i)][:1, :max_positions]
            attn = net.edges[key].attention_weights(source)
            dump.attention[key] = attn[0].detach().clone()
    dump.projections = edge_weight_stats(net)
    return dump


def save_edge_dump(dump: EdgeDump, path) -> None:
    tensors = []
    edges_meta = []
    for key, attn in dump.attention.items():
        name = "attn.{}.{}.{}".format(*key)
        tensors.append((name, attn.to(torch.float32).numpy()))
        proj_meta = {}
        for proj_name, stats in dump.projections.get(key, {}).items():
            grid_name = "grid.{}.{}.{}.{}".format(*key, proj_name)
            tensors.append((grid_name, stats.grid.numpy()))
            proj_meta[proj_name] = {
                "min": stats.min,
                "max": stats.max,
                "mean": stats.mean,
                "std": stats.std,
            }
        edges_meta.append({"edge": list(key), "projections": proj_meta})
    header = {
        "kind": "edge_dump",
        "format_version": 1,
        "fingerprint": dump.fingerprint,
        "input_hash": dump.input_hash,
        "edges": edges_meta,
    }
    write_blob_file(path, DUMP_MAGIC, header, tensors)


def load_edge_dump(path) -> EdgeDump:
    header, tensors = read_blob_file(path, DUMP_MAGIC)
    dump = EdgeDump(fingerprint=header["fingerprint"], input_hash=header["input_hash"])
    for entry in header["edges"]:
        key = tuple(entry["edge"])
        dump.attention[key] = torch.from_numpy(tensors["attn.{}.{}.{}".format(*key)])
        stats = {}
        for proj_name, meta in entry["projections"].items():
            grid = torch.from_numpy(tensors["grid.{}.{}.{}.{}".format(*key, proj_name)])
            stats[proj_name] = ProjectionStats(grid=grid, **meta)
        dump.projections[key] = stats
    return dump


# ---------------------------------------------------------------------------
# De-embedding probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    argmax_tokens: list[int]
    entropy: torch.Tensor  # nats per position
    logits: torch.Tensor

    @property
    def mean_entropy(self) -> float:
        return float(self.entropy.mean())


def probe_deembed(net: Network, tokens: torch.Tensor, layer: int, index: int) -> ProbeResult:
    """De-embed the dense sequence at vertex (layer, index) with the output D.

    For interior vertices (2 <= layer < L) the probed sequence is the
    aggregated edge input the vertex is about to consume; for the output
    vertex (layer == L) it is the sequence the de-embedding actually
    consumes, so the probe there reproduces the final logits exactly.
    """
    widths = net.spec.widths
    depth = len(widths)
    if layer < 2 or layer > depth or index < 1 or index > widths[layer - 1]:
        raise ValueError(f"probe_deembed: invalid vertex coordinates ({layer}, {index})")
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    tap = Tap(record_hidden=True)
    with torch.no_grad():
        net.forward_tokens(tokens, tap=tap)
        probed = tap.vertex_out[(depth, 1)] if layer == depth else tap.vertex_in[(layer, index)]
        logits = net.deembedding(probed)[0]
        probs = torch.softmax(logits, dim=-1)
        entropy = -torch.special.xlogy(probs, probs).sum(dim=-1)
    return ProbeResult(
        argmax_tokens=[int(t) for t in logits.argmax(dim=-1)],
        entropy=entropy,
        logits=logits,
    )


# ---------------------------------------------------------------------------
# Task evaluation
# ---------------------------------------------------------------------------


def task_accuracy(model, pairs: list[tuple[str, str]]) -> EvalReport:
    """Exact-match accuracy of greedy completions against answer spans."""
    if not pairs:
        raise ValueError("task_accuracy: empty dataset")
    tok = ByteTokenizer()
    hits = 0
    for prompt, answer in pairs:
        prompt_ids = [BOS_ID, *prompt.encode("utf-8")]
        expected = answer.encode("utf-8")
        out = greedy_generate(model, prompt_ids, max_new=len(expected) + 1)
        completion = tok.detokenize(out[len(prompt_ids) :])
        if completion[: len(expected)] == expected and len(completion) >= len(expected):
            hits += 1
    return EvalReport(None, hits / len(pairs), len(pairs), model.fingerprint())
