"""Numeric backbone: checked tensor ops, parameter bookkeeping, gradient oracles.

Dense values are plain ``torch.Tensor``s and reverse-mode gradients come from
torch autograd. What this module owns is the contract around that machinery:

* a small set of differentiable ops with shape and finiteness checking
  (every model forward in this package routes through them),
* the parameter registry (unique hierarchical names, immutable group tags,
  trainable flags, per-group checksums),
* ``evaluate_and_backprop`` / ``finite_diff_grads``, the analytic/central
  difference pair used for gradient verification. The finite-difference
  oracle perturbs raw parameter storage and never touches autograd, so the
  two routes stay independent.

Forward evaluation is deterministic: ops accumulate in torch's fixed
sequential order and all randomness flows through explicitly seeded
generators (see :func:`substream`).
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Iterator, Sequence

import torch

__all__ = [
    "EngineError",
    "ShapeMismatchError",
    "NonFiniteError",
    "set_finite_checks",
    "matmul",
    "add",
    "mul",
    "linear",
    "softmax",
    "layer_norm",
    "embedding",
    "gelu",
    "concat",
    "token_cross_entropy",
    "ParamGroup",
    "ParamRef",
    "ParamRegistry",
    "GradRecord",
    "evaluate_and_backprop",
    "finite_diff_grads",
    "relative_error",
    "derive_seed",
    "substream",
]


class EngineError(RuntimeError):
    """Fault raised by the numeric engine."""


class ShapeMismatchError(EngineError):
    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class NonFiniteError(EngineError):
    def __init__(self, op: str, shape: Sequence[int] = ()):
        self.op = op
        super().__init__(f"non-finite value produced by op '{op}' (shape {tuple(shape)})")


_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op finiteness checking; returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _checked(out: torch.Tensor, op: str) -> torch.Tensor:
    if _FINITE_CHECKS and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(op, out.shape)
    return out


# ---------------------------------------------------------------------------
# Differentiable op set
# ---------------------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return _checked(a @ b, "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        out = a + b
    except RuntimeError as exc:
        raise ShapeMismatchError("add", a.shape, b.shape) from exc
    return _checked(out, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        out = a * b
    except RuntimeError as exc:
        raise ShapeMismatchError("mul", a.shape, b.shape) from exc
    return _checked(out, "mul")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """x @ weight.T + bias, with weight stored [out_features, in_features]."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeMismatchError("linear", x.shape, weight.shape)
    return _checked(torch.nn.functional.linear(x, weight, bias), "linear")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # -inf entries (masked attention scores) are legal input; output must be finite.
    return _checked(torch.softmax(x, dim=dim), "softmax")


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeMismatchError("layer_norm", x.shape, gain.shape)
    out = torch.nn.functional.layer_norm(x, (x.shape[-1],), gain, bias, eps)
    return _checked(out, "layer_norm")


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() == 0:
        raise EngineError("embedding: empty id sequence")
    if int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]:
        raise EngineError(
            f"embedding: id out of range [0, {table.shape[0]}), got "
            f"min={int(ids.min())} max={int(ids.max())}"
        )
    return _checked(table[ids], "embedding")


def gelu(x: torch.Tensor) -> torch.Tensor:
    return _checked(torch.nn.functional.gelu(x), "gelu")


def concat(parts: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    try:
        out = torch.cat(list(parts), dim=dim)
    except RuntimeError as exc:
        raise ShapeMismatchError("concat", *[p.shape for p in parts]) from exc
    return _checked(out, "concat")


def token_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood; no reduction, no masking."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatchError("cross_entropy", logits.shape, targets.shape)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return _checked(nll, "cross_entropy")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParamGroup(str, Enum):
    VERTEX = "vertex"
    EDGE = "edge"
    EMBEDDING = "embedding"
    DEEMBEDDING = "deembedding"
    PREFIX = "prefix"
    ADAPTER = "adapter"


@dataclass
class ParamRef:
    """One named parameter tensor with an immutable group tag.

    ``locked`` is set by adaptation modes to keep a group frozen regardless of
    what a training phase asks for; the effective trainable state is the
    tensor's ``requires_grad``.
    """

    name: str
    group: ParamGroup
    param: torch.nn.Parameter
    locked: bool = False

    @property
    def trainable(self) -> bool:
        return bool(self.param.requires_grad)


class ParamRegistry:
    """Ordered name -> parameter map shared by models and checkpoints."""

    def __init__(self) -> None:
        self._refs: dict[str, ParamRef] = {}

    def register(self, name: str, group: ParamGroup, param: torch.nn.Parameter) -> ParamRef:
        if name in self._refs:
            raise EngineError(f"duplicate parameter name '{name}'")
        ref = ParamRef(name=name, group=ParamGroup(group), param=param)
        self._refs[name] = ref
        return ref

    def register_module(self, prefix: str, module: torch.nn.Module, group: ParamGroup) -> None:
        for sub_name, param in module.named_parameters():
            self.register(f"{prefix}.{sub_name}", group, param)

    def __contains__(self, name: str) -> bool:
        return name in self._refs

    def __getitem__(self, name: str) -> ParamRef:
        return self._refs[name]

    def __len__(self) -> int:
        return len(self._refs)

    def refs(self, group: ParamGroup | None = None, trainable_only: bool = False) -> list[ParamRef]:
        out = []
        for ref in self._refs.values():
            if group is not None and ref.group != group:
                continue
            if trainable_only and not ref.trainable:
                continue
            out.append(ref)
        return out

    def parameters(self, trainable_only: bool = False) -> list[torch.nn.Parameter]:
        return [r.param for r in self.refs(trainable_only=trainable_only)]

    def groups(self) -> list[ParamGroup]:
        seen: dict[ParamGroup, None] = {}
        for ref in self._refs.values():
            seen.setdefault(ref.group, None)
        return list(seen)

    def set_trainable(self, groups: Iterable[ParamGroup | str]) -> None:
        enabled = {ParamGroup(g) for g in groups}
        for ref in self._refs.values():
            ref.param.requires_grad = ref.group in enabled and not ref.locked

    def lock(self, groups: Iterable[ParamGroup | str]) -> None:
        locked = {ParamGroup(g) for g in groups}
        for ref in self._refs.values():
            if ref.group in locked:
                ref.locked = True
                ref.param.requires_grad = False

    def unlock_all(self) -> None:
        for ref in self._refs.values():
            ref.locked = False

    def group_bytes(self, group: ParamGroup) -> bytes:
        chunks = []
        for ref in self.refs(group=group):
            chunks.append(ref.param.detach().cpu().contiguous().numpy().tobytes())
        return b"".join(chunks)

    def group_checksum(self, group: ParamGroup) -> str:
        return f"{zlib.crc32(self.group_bytes(group)) & 0xFFFFFFFF:08x}"

    def group_checksums(self) -> dict[str, str]:
        return {g.value: self.group_checksum(g) for g in self.groups()}

    def count(self, group: ParamGroup | None = None, trainable_only: bool = False) -> int:
        return sum(r.param.numel() for r in self.refs(group=group, trainable_only=trainable_only))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for ref in self._refs.values():
            h.update(ref.name.encode())
            h.update(str(tuple(ref.param.shape)).encode())
            h.update(ref.param.detach().to(torch.float32).cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


@dataclass
class GradRecord:
    """Per-parameter gradient tensors keyed by registry name."""

    grads: dict[str, torch.Tensor] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.grads[name]

    def get(self, name: str, default: torch.Tensor | None = None) -> torch.Tensor | None:
        return self.grads.get(name, default)

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.grads.items())

    def names(self) -> list[str]:
        return list(self.grads)


def evaluate_and_backprop(
    computation: Callable[[], torch.Tensor],
    refs: Sequence[ParamRef],
) -> tuple[float, GradRecord]:
    """Run ``computation`` to a scalar loss and return exact reverse-mode grads.

    Only trainable parameters reached by the loss receive an entry.
    """
    for ref in refs:
        ref.param.grad = None
    loss = computation()
    if loss.dim() != 0:
        raise EngineError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("loss")
    loss.backward()
    grads = {
        ref.name: ref.param.grad.detach().clone()
        for ref in refs
        if ref.trainable and ref.param.grad is not None
    }
    return float(loss.detach()), GradRecord(grads)


def finite_diff_grads(
    computation: Callable[[], torch.Tensor],
    refs: Sequence[ParamRef],
    eps: float = 1e-5,
) -> GradRecord:
    """Central-difference gradients, (f(p+eps) - f(p-eps)) / (2 eps) per entry.

    The oracle is only meaningful in 64-bit; 32-bit parameters are refused.
    """
    if eps <= 0:
        raise EngineError("finite_diff_grads: eps must be positive")
    for ref in refs:
        if ref.param.dtype != torch.float64:
            raise EngineError(
                f"finite_diff_grads requires 64-bit parameters, '{ref.name}' is {ref.param.dtype}"
            )
    grads: dict[str, torch.Tensor] = {}
    # The oracle compares values, so per-op finiteness naming adds nothing
    # here; skip the checks for the 2 * n_params re-evaluations.
    checks_were_on = set_finite_checks(False)
    try:
        with torch.no_grad():
            for ref in refs:
                flat = ref.param.data.view(-1)
                grad = torch.zeros_like(flat)
                for idx in range(flat.numel()):
                    original = flat[idx].item()
                    flat[idx] = original + eps
                    f_plus = float(computation())
                    flat[idx] = original - eps
                    f_minus = float(computation())
                    flat[idx] = original
                    grad[idx] = (f_plus - f_minus) / (2.0 * eps)
                grads[ref.name] = grad.view_as(ref.param.data).clone()
    finally:
        set_finite_checks(checks_were_on)
    return GradRecord(grads)


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-3) -> torch.Tensor:
    """|a-b| / max(|a|, |b|, floor), elementwise.

    The floor makes the measure absolute for near-zero gradients so
    finite-difference roundoff noise is not amplified.
    """
    scale = torch.clamp(torch.maximum(a.abs(), b.abs()), min=floor)
    return (a - b).abs() / scale


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def derive_seed(seed: int, name: str) -> int:
    """Stable 63-bit seed for the named substream of a master seed."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def substream(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, name))
    return gen
