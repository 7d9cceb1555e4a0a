"""Run configuration: one YAML file fully determines a run.

Two runs from the same config and seed are bit-identical; every piece of
randomness (init, data order, adaptation modules) flows from named substreams
of the single seed. Widths use slash notation ("1/2/1").
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Iterator

import torch
import yaml

from ..data import (
    Batch,
    SyntheticTask,
    batch_stream,
    gen_task,
    load_corpus_dir,
    make_batches,
    make_chunked_batches,
    read_task_file,
    task_docs,
)
from ..edge import EdgeConfig
from ..engine import derive_seed
from ..topology import Network, NetworkSpec, build_network, parse_widths
from ..trainer import OptimizerSettings, PeftMode, PhaseSpec, TrainPlan, apply_peft
from ..vertex import VertexConfig

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def load_config(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    return normalize_config(raw)


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing '{key}' in {where}")
    return section[key]


def normalize_config(cfg: dict) -> dict:
    """Fill defaults and validate structure; returns a plain JSON-able dict."""
    out = dict(cfg)
    out.setdefault("seed", 0)
    dtype = out.setdefault("dtype", "float32")
    if dtype not in DTYPES:
        raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got '{dtype}'")

    network = dict(_require(out, "network", "config"))
    vertex = dict(_require(network, "vertex", "network"))
    for key in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq"):
        _require(vertex, key, "network.vertex")
    vertex.setdefault("tie_embeddings", False)
    edge = dict(network.get("edge") or {})
    edge.setdefault("n_heads", vertex["n_heads"])
    edge.setdefault("d_ff", vertex["d_ff"])
    edge.setdefault("init_mode", "standard")
    network["vertex"] = vertex
    network["edge"] = edge
    network.setdefault("sharing", "shared_vertex")
    network.setdefault("fanin_scale", False)
    _require(network, "widths", "network")
    out["network"] = network

    peft = out.get("peft")
    if peft is not None:
        peft = dict(peft)
        _require(peft, "mode", "peft")
        peft.setdefault("k", 0)
        peft.setdefault("r", 0)
        out["peft"] = peft

    train = out.get("train")
    if train is not None:
        train = dict(train)
        opt = dict(train.get("optimizer") or {})
        opt.setdefault("beta1", 0.9)
        opt.setdefault("beta2", 0.999)
        opt.setdefault("eps", 1e-8)
        opt.setdefault("weight_decay", 0.01)
        train["optimizer"] = opt
        train.setdefault("grad_clip", 1.0)
        phases = _require(train, "phases", "train")
        if not isinstance(phases, list) or not phases:
            raise ConfigError("train.phases must be a non-empty list")
        normalized_phases = []
        for idx, phase in enumerate(phases):
            phase = dict(phase)
            _require(phase, "groups", f"train.phases[{idx}]")
            _require(phase, "steps", f"train.phases[{idx}]")
            _require(phase, "lr", f"train.phases[{idx}]")
            phase.setdefault("batch_size", 8)
            normalized_phases.append(phase)
        train["phases"] = normalized_phases
        out["train"] = train

    data = out.get("data")
    if data is not None:
        data = dict(data)
        kind = _require(data, "kind", "data")
        if kind not in ("corpus", "task"):
            raise ConfigError(f"data.kind must be 'corpus' or 'task', got '{kind}'")
        _require(data, "seq_len", "data")
        data.setdefault("batching", "padded")
        if data["batching"] not in ("padded", "chunked"):
            raise ConfigError("data.batching must be 'padded' or 'chunked'")
        data.setdefault("eval_batch_size", 16)
        if kind == "corpus":
            _require(data, "dir", "data")
        else:
            task = dict(_require(data, "task", "data"))
            if "path" not in task:
                for key in ("kind", "alphabet_size", "min_len", "max_len"):
                    _require(task, key, "data.task")
                task.setdefault("seed", 0)
                task.setdefault("n", 128)
            data["task"] = task
        out["data"] = data
    return out


def spec_from_config(cfg: dict) -> NetworkSpec:
    network = cfg["network"]
    widths = network["widths"]
    if isinstance(widths, str):
        widths = parse_widths(widths)
    else:
        widths = tuple(int(w) for w in widths)
    try:
        vertex = VertexConfig(**network["vertex"])
        edge = EdgeConfig(d_in=vertex.d_model, d_out=vertex.d_model, **network["edge"])
        return NetworkSpec(
            widths=widths,
            vertex=vertex,
            edge=edge,
            sharing=network["sharing"],
            fanin_scale=network["fanin_scale"],
            seed=int(cfg["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def peft_from_config(cfg: dict) -> PeftMode | None:
    peft = cfg.get("peft")
    if peft is None:
        return None
    try:
        return PeftMode(mode=peft["mode"], k=int(peft.get("k", 0)), r=int(peft.get("r", 0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_from_config(cfg: dict) -> Network:
    cfg = normalize_config(cfg)
    spec = spec_from_config(cfg)
    net = build_network(spec, dtype=DTYPES[cfg["dtype"]])
    mode = peft_from_config(cfg)
    if mode is not None:
        try:
            apply_peft(net, mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return net


def plan_from_config(cfg: dict) -> TrainPlan:
    train = cfg.get("train")
    if train is None:
        raise ConfigError("config has no train section")
    opt = train["optimizer"]
    try:
        phases = tuple(
            PhaseSpec(
                groups=tuple(p["groups"]),
                steps=int(p["steps"]),
                lr=float(p["lr"]),
                batch_size=int(p["batch_size"]),
            )
            for p in train["phases"]
        )
        return TrainPlan(
            phases=phases,
            optimizer=OptimizerSettings(
                beta1=float(opt["beta1"]),
                beta2=float(opt["beta2"]),
                eps=float(opt["eps"]),
                weight_decay=float(opt["weight_decay"]),
            ),
            grad_clip=float(train["grad_clip"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _corpus_docs(cfg: dict) -> list[bytes]:
    data = cfg["data"]
    if data["kind"] == "corpus":
        return load_corpus_dir(data["dir"])
    return task_docs(load_task_pairs(cfg))


def load_task_pairs(cfg: dict) -> list[tuple[str, str]]:
    data = cfg.get("data")
    if data is None or data["kind"] != "task":
        raise ConfigError("config has no task data section")
    task_cfg = data["task"]
    if task_cfg.get("path"):
        return read_task_file(task_cfg["path"])
    task = SyntheticTask(
        kind=task_cfg["kind"],
        alphabet_size=int(task_cfg["alphabet_size"]),
        min_len=int(task_cfg["min_len"]),
        max_len=int(task_cfg["max_len"]),
        seed=int(task_cfg["seed"]),
    )
    return gen_task(task, int(task_cfg["n"]))


def data_factory(cfg: dict) -> Callable[[int, PhaseSpec], Iterator[Batch]]:
    """Per-phase endless batch stream, deterministically seeded."""
    data = cfg.get("data")
    if data is None:
        raise ConfigError("config has no data section")
    docs = _corpus_docs(cfg)
    seq_len = int(data["seq_len"])
    chunked = data["batching"] == "chunked"
    seed = int(cfg["seed"])

    def factory(phase_id: int, phase: PhaseSpec) -> Iterator[Batch]:
        return batch_stream(
            docs,
            seq_len,
            phase.batch_size,
            derive_seed(seed, f"data.phase{phase_id}"),
            chunked=chunked,
        )

    return factory


def eval_batches(cfg: dict) -> list[Batch]:
    """One deterministic epoch for evaluation."""
    data = cfg.get("data")
    if data is None:
        raise ConfigError("config has no data section")
    docs = _corpus_docs(cfg)
    make = make_chunked_batches if data["batching"] == "chunked" else make_batches
    return make(docs, int(data["seq_len"]), int(data["eval_batch_size"]), derive_seed(int(cfg["seed"]), "eval"))
