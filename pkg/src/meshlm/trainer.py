"""Autoregressive loss, phase schedules, adaptation modes, gradient checking.

Training follows the two-phase recipe: an edge-only phase brings the randomly
initialized communication pathways up to speed while the vertices stay
frozen, then a joint phase updates everything. Phases name the parameter
groups they train; frozen groups are verified bit-identical through per-group
checksums in every loss report. One AdamW instance lives across all phases so
moment state survives the phase boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import torch
from torch import nn

from . import engine
from .data import Batch
from .engine import GradRecord, ParamGroup, ParamRef
from .topology import Network
from .vertex import _init_normal

PEFT_MODES = ("edge_only", "prefix", "low_rank", "full")


@dataclass(frozen=True)
class OptimizerSettings:
    """Adaptive moment estimation with decoupled weight decay."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class PhaseSpec:
    groups: tuple[str, ...]
    steps: int
    lr: float
    batch_size: int = 8

    def __post_init__(self) -> None:
        if not self.groups:
            raise ValueError("a phase must name at least one trainable group")
        for g in self.groups:
            ParamGroup(g)
        if self.steps <= 0:
            raise ValueError("phase steps must be positive")


@dataclass(frozen=True)
class TrainPlan:
    phases: tuple[PhaseSpec, ...]
    optimizer: OptimizerSettings = OptimizerSettings()
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.phases:
            raise ValueError("train plan needs at least one phase")


@dataclass(frozen=True)
class PeftMode:
    mode: str
    k: int = 0  # prefix length
    r: int = 0  # adapter rank

    def __post_init__(self) -> None:
        if self.mode not in PEFT_MODES:
            raise ValueError(f"unknown adaptation mode '{self.mode}'")
        if self.mode == "prefix" and self.k < 0:
            raise ValueError("prefix length must be >= 0")
        if self.mode == "low_rank" and self.r < 1:
            raise ValueError("adapter rank must be >= 1")


@dataclass
class LossReport:
    step: int
    phase: int
    loss: float
    tokens_seen: int
    checksums: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "phase": self.phase,
                "loss": self.loss,
                "tokens": self.tokens_seen,
                "checksums": self.checksums,
            }
        )


class NumericAbortError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""

    def __init__(self, step: int, last_good_step: int, detail: str):
        self.step = step
        self.last_good_step = last_good_step
        super().__init__(f"numeric abort at step {step} ({detail}); last good step {last_good_step}")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def loss_terms(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, int]:
    """Summed next-token NLL over non-pad target positions, plus the count."""
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
        logits = logits.unsqueeze(0) if logits.dim() == 2 else logits
    if logits.shape[:2] != tokens.shape:
        raise engine.ShapeMismatchError("autoregressive_loss", logits.shape, tokens.shape)
    targets = tokens[:, 1:]
    nll = engine.token_cross_entropy(logits[:, :-1], targets)
    if mask is None:
        target_mask = torch.ones_like(targets, dtype=torch.bool)
    else:
        target_mask = mask[:, 1:].bool()
    count = int(target_mask.sum())
    if count == 0:
        raise engine.EngineError("autoregressive_loss: no unmasked target positions")
    total = (nll * target_mask.to(nll.dtype)).sum()
    return total, count


def autoregressive_loss(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean next-token cross-entropy over the whole sequence, head to tail."""
    total, count = loss_terms(logits, tokens, mask)
    return total / count


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


def make_optimizer(model, plan: TrainPlan) -> torch.optim.AdamW:
    """One AdamW over every registered parameter; lr is set per phase.

    Frozen parameters carry no gradient and are skipped entirely, so their
    values and moment state stay untouched across phases.
    """
    opt = plan.optimizer
    return torch.optim.AdamW(
        model.registry.parameters(),
        lr=plan.phases[0].lr,
        betas=(opt.beta1, opt.beta2),
        eps=opt.eps,
        weight_decay=opt.weight_decay,
    )


def run_phase(
    model,
    phase: PhaseSpec,
    batches: Iterator[Batch],
    optimizer: torch.optim.Optimizer,
    grad_clip: float = 1.0,
    phase_id: int = 1,
    start_tokens: int = 0,
) -> Iterator[LossReport]:
    """Run one phase, yielding a LossReport per step.

    Only the named groups change; every report carries per-group checksums so
    the freeze contract is externally checkable. Non-finite losses or
    gradient norms abort with the last good step recorded; the abort fires
    before the optimizer step whenever the failure is detected in time, which
    leaves parameters at their last good values.
    """
    model.registry.set_trainable(phase.groups)
    for group in optimizer.param_groups:
        group["lr"] = phase.lr
    trainable = model.registry.parameters(trainable_only=True)
    if not trainable:
        raise ValueError(f"phase names no unlockable trainable groups: {phase.groups}")

    tokens_seen = start_tokens
    # Per-op finiteness checks are replaced by the per-step loss and
    # gradient-norm checks below; on failure the forward is replayed with
    # checks on so the abort names the offending op (forward is deterministic).
    checks_were_on = engine.set_finite_checks(False)
    try:
        for step in range(1, phase.steps + 1):
            try:
                batch = next(batches)
            except StopIteration:
                raise ValueError("run_phase: data iterator exhausted") from None
            logits = model.forward_tokens(batch.tokens)
            total, count = loss_terms(logits, batch.tokens, batch.mask)
            loss = total / count
            if not bool(torch.isfinite(loss)):
                raise NumericAbortError(step, step - 1, _diagnose_nonfinite(model, batch))

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if grad_clip > 0:
                norm = torch.nn.utils.clip_grad_norm_(trainable, grad_clip)
                if not bool(torch.isfinite(norm)):
                    raise NumericAbortError(step, step - 1, "non-finite gradient norm")
            optimizer.step()

            tokens_seen += count
            yield LossReport(
                step=step,
                phase=phase_id,
                loss=float(loss.detach()),
                tokens_seen=tokens_seen,
                checksums=model.registry.group_checksums(),
            )
    finally:
        engine.set_finite_checks(checks_were_on)


def _diagnose_nonfinite(model, batch: Batch) -> str:
    engine.set_finite_checks(True)
    try:
        with torch.no_grad():
            model.forward_tokens(batch.tokens)
    except engine.NonFiniteError as exc:
        return str(exc)
    finally:
        engine.set_finite_checks(False)
    return "non-finite loss"


def run_plan(
    model,
    plan: TrainPlan,
    data_factory: Callable[[int, PhaseSpec], Iterator[Batch]],
    on_report: Callable[[LossReport], None] | None = None,
    on_phase_end: Callable[[int], None] | None = None,
) -> list[LossReport]:
    """Execute all phases in order with a single persistent optimizer."""
    optimizer = make_optimizer(model, plan)
    reports: list[LossReport] = []
    tokens_seen = 0
    for phase_id, phase in enumerate(plan.phases, start=1):
        batches = data_factory(phase_id, phase)
        for report in run_phase(
            model,
            phase,
            batches,
            optimizer,
            grad_clip=plan.grad_clip,
            phase_id=phase_id,
            start_tokens=tokens_seen,
        ):
            tokens_seen = report.tokens_seen
            reports.append(report)
            if on_report is not None:
                on_report(report)
        if on_phase_end is not None:
            on_phase_end(phase_id)
    return reports


# ---------------------------------------------------------------------------
# Parameter-efficient adaptation
# ---------------------------------------------------------------------------


class LowRankAdapter(nn.Module):
    """Additive A.B correction on a linear projection; starts as the zero map."""

    def __init__(self, d_in: int, d_out: int, rank: int, dtype: torch.dtype):
        super().__init__()
        self.down = nn.Parameter(torch.zeros(rank, d_in, dtype=dtype))
        self.up = nn.Parameter(torch.zeros(d_out, rank, dtype=dtype))

    def init_weights(self, gen: torch.Generator) -> None:
        _init_normal(self.down, gen)
        with torch.no_grad():
            self.up.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return engine.linear(engine.linear(x, self.down), self.up)


def _distinct_vertices(net: Network) -> list[tuple[str, object]]:
    named = []
    seen: set[int] = set()
    for (l, i), module in sorted(net.vertices.items()):
        if id(module) in seen:
            continue
        seen.add(id(module))
        prefix = "vertex.shared" if net.spec.sharing == "shared_vertex" else f"vertex.{l}.{i}"
        named.append((prefix, module))
    return named


def apply_peft(net: Network, mode: PeftMode) -> Network:
    """Configure an adaptation mode in place and return the network.

    edge_only freezes vertex/embedding/de-embedding; prefix(k) prepends k
    trainable d_model vectors to the embedded input (logits keep the original
    positions); low_rank(r) adds rank-r adapters on every vertex attention
    projection with the base weights frozen; full makes every group trainable.
    """
    if mode.mode == "full":
        net.registry.unlock_all()
        net.registry.set_trainable(list(ParamGroup))
        return net

    if mode.mode == "edge_only":
        net.registry.lock([ParamGroup.VERTEX, ParamGroup.EMBEDDING, ParamGroup.DEEMBEDDING])
        net.registry.set_trainable([ParamGroup.EDGE])
        return net

    if mode.mode == "prefix":
        if mode.k == 0:
            return net
        prefix = nn.Parameter(torch.zeros(mode.k, net.d_model, dtype=net.dtype))
        _init_normal(prefix, engine.substream(net.spec.seed, "prefix"))
        net.prefix = prefix
        net.registry.register("prefix.vectors", ParamGroup.PREFIX, prefix)
        return net

    # low_rank
    if mode.r >= net.d_model:
        raise ValueError(f"adapter rank {mode.r} must be below d_model {net.d_model}")
    for prefix, module in _distinct_vertices(net):
        for block_idx, block in enumerate(module.blocks):
            for proj_name in ("q_proj", "k_proj", "v_proj", "o_proj"):
                adapter = LowRankAdapter(net.d_model, net.d_model, mode.r, net.dtype)
                name = f"adapter.{prefix}.blocks.{block_idx}.attn.{proj_name}"
                adapter.init_weights(engine.substream(net.spec.seed, name))
                block.attn.adapters[proj_name] = adapter
                net.adapters[name] = adapter
                net.registry.register_module(name, adapter, ParamGroup.ADAPTER)
    net.registry.lock([ParamGroup.VERTEX, ParamGroup.EMBEDDING, ParamGroup.DEEMBEDDING])
    net.registry.set_trainable([ParamGroup.EDGE, ParamGroup.ADAPTER])
    return net


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_group: dict[str, float]
    loss: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "max_rel_err": self.max_rel_err,
                "worst_param": self.worst_param,
                "per_group": self.per_group,
                "loss": self.loss,
            }
        )


def grad_check(model, batch: Batch, eps: float = 1e-5, rel_floor: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    Covers every trainable parameter group reachable from the loss; requires
    a 64-bit model. Relative error uses a unit-scale floor (see
    engine.relative_error) so near-zero gradients are judged absolutely.
    """
    refs = model.registry.refs(trainable_only=True)
    if not refs:
        raise ValueError("grad_check: no trainable parameters")
    for ref in refs:
        if ref.param.dtype != torch.float64:
            raise engine.EngineError("grad_check requires a float64 model")

    def computation() -> torch.Tensor:
        logits = model.forward_tokens(batch.tokens)
        return autoregressive_loss(logits, batch.tokens, batch.mask)

    loss, analytic = engine.evaluate_and_backprop(computation, refs)
    numeric = engine.finite_diff_grads(computation, refs, eps)

    per_group: dict[str, float] = {}
    worst = ("", -1.0)
    for ref in refs:
        a = analytic.get(ref.name)
        if a is None:
            a = torch.zeros_like(ref.param)
        err = float(engine.relative_error(a, numeric[ref.name], rel_floor).max())
        group = ref.group.value
        per_group[group] = max(per_group.get(group, 0.0), err)
        if err > worst[1]:
            worst = (ref.name, err)
    return GradCheckReport(max_rel_err=worst[1], worst_param=worst[0], per_group=per_group, loss=loss)
