"""Command-line surface: build, train, eval, generate, inspect, gradcheck, paramcount.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric abort,
5 corrupt checkpoint. Commands never mutate their input checkpoint; the train
command owns its output directory exclusively through a lock file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from ..data import BOS_ID, ByteTokenizer
from ..engine import derive_seed
from ..evalkit import dump_edges, eval_perplexity, greedy_generate, save_edge_dump, task_accuracy
from ..topology import closed_form_counts, count_parameters, parse_widths
from ..trainer import NumericAbortError, grad_check, run_plan
from . import checkpoint as ckpt
from . import config as config_mod
from .config import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CORRUPT = 5


def _apply_overrides(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "dtype", None) is not None:
        cfg["dtype"] = args.dtype
    return config_mod.normalize_config(cfg)


def cmd_build(args) -> int:
    cfg = _apply_overrides(config_mod.load_config(args.config), args)
    net = config_mod.build_from_config(cfg)
    ckpt.save_checkpoint(net, cfg, args.out)
    counts = count_parameters(net)
    print(f"built network {net.fingerprint()}: {counts.total} parameters, {counts.n_edges} edges -> {args.out}")
    return EXIT_OK


class _Lock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(f"training directory is locked: {self.path}")
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def cmd_train(args) -> int:
    cfg = _apply_overrides(config_mod.load_config(args.config), args)
    stored_cfg, net = ckpt.load_checkpoint(args.checkpoint, dtype=cfg["dtype"])
    if stored_cfg["network"] != cfg["network"]:
        raise ConfigError("config network section does not match the checkpoint")
    if cfg.get("peft") and cfg.get("peft") != stored_cfg.get("peft"):
        from ..trainer import apply_peft

        apply_peft(net, config_mod.peft_from_config(cfg))

    plan = config_mod.plan_from_config(cfg)
    factory = config_mod.data_factory(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.jsonl"

    with _Lock(out_dir), open(log_path, "w", encoding="utf-8") as log:

        def on_report(report):
            log.write(report.to_json() + "\n")

        def on_phase_end(phase_id):
            ckpt.save_checkpoint(net, cfg, out_dir / f"phase_{phase_id}.bin")

        try:
            reports = run_plan(net, plan, factory, on_report=on_report, on_phase_end=on_phase_end)
        except NumericAbortError as exc:
            log.flush()
            print(f"aborted: {exc}", file=sys.stderr)
            raise
        ckpt.save_checkpoint(net, cfg, out_dir / "final.bin")
        final = reports[-1]
        print(f"trained {len(reports)} steps, final loss {final.loss:.6f} -> {out_dir / 'final.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.config:
        cfg = _apply_overrides(config_mod.load_config(args.config), args)
        _, net = ckpt.load_checkpoint(args.checkpoint, dtype=cfg["dtype"])
    else:
        cfg, net = ckpt.load_checkpoint(args.checkpoint)
        cfg = _apply_overrides(cfg, args)
    data = cfg.get("data")
    if data is None:
        raise ConfigError("eval needs a data section in the config or checkpoint")
    if data["kind"] == "task":
        report = task_accuracy(net, config_mod.load_task_pairs(cfg))
    else:
        report = eval_perplexity(net, config_mod.eval_batches(cfg))
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_generate(args) -> int:
    _, net = ckpt.load_checkpoint(args.checkpoint)
    tok = ByteTokenizer()
    prompt_ids = [BOS_ID, *args.prompt.encode("utf-8")]
    out = greedy_generate(net, prompt_ids, max_new=args.max_new)
    completion = tok.detokenize(out[len(prompt_ids) :])
    print(completion.decode("utf-8", errors="replace"))
    return EXIT_OK


def cmd_inspect(args) -> int:
    _, net = ckpt.load_checkpoint(args.checkpoint)
    tok = ByteTokenizer()
    tokens = torch.tensor([tok.tokenize(args.text)], dtype=torch.long)
    dump = dump_edges(net, tokens)
    save_edge_dump(dump, args.out)
    print(f"dumped {len(dump.attention)} edge attention maps -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, net = ckpt.load_checkpoint(args.checkpoint, dtype="float64")
    from ..data import Batch

    gen = torch.Generator()
    gen.manual_seed(derive_seed(int(cfg["seed"]), "gradcheck"))
    seq_len = min(args.seq_len, net.max_seq)
    tokens = torch.randint(0, net.vocab_size, (args.batch, seq_len), generator=gen)
    batch = Batch(tokens=tokens, mask=torch.ones_like(tokens, dtype=torch.bool), lengths=[seq_len] * args.batch)
    report = grad_check(net, batch, eps=args.eps)
    for group, err in sorted(report.per_group.items()):
        print(f"group {group:<12} max_rel_err {err:.3e}")
    print(f"max_rel_err {report.max_rel_err:.3e} (worst: {report.worst_param})")
    if report.max_rel_err > args.tol:
        print(f"FAIL: above tolerance {args.tol:.1e}", file=sys.stderr)
        return 1
    return EXIT_OK


def cmd_paramcount(args) -> int:
    if args.checkpoint:
        _, net = ckpt.load_checkpoint(args.checkpoint)
        counts = count_parameters(net)
    else:
        if args.widths is None or args.per_vertex is None or args.per_edge is None:
            raise ConfigError("paramcount needs --checkpoint or --widths with --per-vertex/--per-edge")
        counts = closed_form_counts(
            parse_widths(args.widths),
            per_vertex=args.per_vertex,
            per_edge=args.per_edge,
            per_embedding=args.per_embedding,
            per_deembedding=args.per_deembedding,
            sharing=args.sharing,
        )
    for group, total in counts.per_group.items():
        trainable = counts.trainable_per_group.get(group, 0)
        print(f"{group:<12} {total:>14} ({trainable} trainable)")
    print(f"{'edges':<12} {counts.n_edges:>14} modules of {counts.per_edge} parameters")
    print(f"{'total':<12} {counts.total:>14} ({counts.trainable_total} trainable)")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshlm", description=__doc__)
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, checkpoint=False, out=False):
        if config:
            p.add_argument("--config", required=config == "required")
        if checkpoint:
            p.add_argument("--checkpoint", required=checkpoint == "required")
        if out:
            p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--dtype", choices=sorted(config_mod.DTYPES), default=None)

    p = sub.add_parser("build", help="construct a network and save its initial checkpoint")
    common(p, config="required", out=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="run the configured phase schedule")
    common(p, config="required", checkpoint="required", out=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity or task accuracy")
    common(p, config=True, checkpoint="required")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="greedy completion for a prompt")
    common(p, checkpoint="required")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inspect", help="write an edge attention/weight dump")
    common(p, checkpoint="required", out=True)
    p.add_argument("--text", default="the quick brown fox jumps over the lazy dog")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="compare analytic gradients to finite differences")
    common(p, checkpoint="required")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seq-len", type=int, default=5)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("paramcount", help="per-group parameter totals")
    common(p, checkpoint=True)
    p.add_argument("--widths")
    p.add_argument("--per-vertex", type=int)
    p.add_argument("--per-edge", type=int)
    p.add_argument("--per-embedding", type=int, default=0)
    p.add_argument("--per-deembedding", type=int, default=0)
    p.add_argument("--sharing", choices=("shared_vertex", "per_vertex"), default="shared_vertex")
    p.set_defaults(func=cmd_paramcount)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.CheckpointError as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except NumericAbortError:
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
