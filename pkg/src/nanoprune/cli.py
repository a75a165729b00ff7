"""Command-line front end.

Each subcommand runs one pipeline stage on files; ``pipeline`` runs them all.
Set ``NANOPRUNE_THREADS`` to cap BLAS threads. Failures exit with status 2
and print ``error in stage <name>: ...`` to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import plots
from .budget import TagIds, filter_stream, metrics
from .checkpoint_io import load_checkpoint, save_checkpoint, save_quantized
from .config import pattern_string
from .data import MixedStream, TokenStream
from .fp8 import quantize_checkpoint
from .importance import CalibrationSet, ImportanceReport, build_report
from .memory import SearchSpace, enumerate_candidates, rank_candidates
from .model import init_checkpoint
from .pipeline import (PipelineConfig, PipelineError, default_config, load_config, run_pipeline,
                       width_prune)
from .prune import prune_layers
from .train import distill_run, lm_loss_value, merge_checkpoints, train_lm


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _config(path) -> PipelineConfig:
    return load_config(path) if path else PipelineConfig.from_dict(default_config())


def _stream(cfg: PipelineConfig, mix: float) -> MixedStream:
    d = cfg.data
    primary = TokenStream(d.primary, d.n_chars, seed=cfg.seed)
    secondary = TokenStream(d.secondary, d.n_chars, seed=cfg.seed) if d.secondary else None
    return MixedStream(primary, secondary, mix)


def _write_log(path, history) -> None:
    if path:
        Path(path).write_text("".join(r.to_json() + "\n" for r in history))


def _ints(text: str | None) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()] if text else []


# ---------------------------------------------------------------- commands

def cmd_train(args) -> None:
    cfg = _config(args.config)
    ckpt = init_checkpoint(cfg.model, seed=cfg.seed, precision=cfg.precision)
    ckpt, hist = train_lm(ckpt, _stream(cfg, cfg.train.mix_fraction), cfg.train)
    save_checkpoint(ckpt, args.out)
    _write_log(args.log, hist)
    if args.plot:
        plots.loss_curves({"train": hist}, args.plot)
    print(json.dumps({"steps": len(hist), "final_loss": hist[-1].loss}))


def cmd_importance(args) -> None:
    cfg = _config(args.config)
    ckpt = load_checkpoint(args.ckpt)
    c = cfg.importance
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, 0]))
    calib = CalibrationSet(_stream(cfg, cfg.train.mix_fraction).sample(rng, c.calib_n, c.calib_seq)[:, :-1])
    report = build_report(ckpt, calib, target_depth=args.target_depth,
                          min_attention=args.min_attention, batch_size=c.batch_size)
    Path(args.out).write_text(report.to_json() + "\n")
    if args.plot:
        plots.importance_summary(report, args.plot)


def cmd_prune(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    if args.drop_layers:
        ckpt = prune_layers(ckpt, _ints(args.drop_layers), min_attention=args.min_attention)
    widths = {"d_model": args.d_model, "d_ffn": args.d_ffn, "mamba_n_heads": args.mamba_heads}
    if any(v is not None for v in widths.values()):
        if not args.importance:
            raise ValueError("width pruning needs --importance")
        report = ImportanceReport.from_json(Path(args.importance).read_text())
        target = ckpt.config.with_(**{k: v for k, v in widths.items() if v is not None})
        ckpt = width_prune(ckpt, report, target)
    save_checkpoint(ckpt, args.out)
    print(json.dumps({"pattern": pattern_string(ckpt.config.pattern), "params": ckpt.n_params()}))


def cmd_nas(args) -> None:
    cfg = _config(args.config)
    s = cfg.search
    base = load_checkpoint(args.base).config if args.base else cfg.model
    depths = _ints(args.depths) or [base.n_layers]
    space = SearchSpace(depths, s.d_models, s.d_ffns, s.mamba_heads, base.n_attn)
    pattern = base.pattern if depths == [base.n_layers] else None
    budget = args.budget_bytes if args.budget_bytes is not None else s.budget()
    cands = enumerate_candidates(space, budget, base, s.seq_len, s.batch, s.bytes_per_elem, pattern)
    if not cands.candidates:
        raise ValueError(f"no feasible candidate under a budget of {budget:.0f} bytes")
    top = rank_candidates(cands, args.top_k or s.top_k)
    Path(args.out).write_text(cands.to_json(top) + "\n")
    if args.plot:
        plots.candidate_scatter(cands.candidates, budget, top, args.plot)
    print(json.dumps({"n_feasible": len(cands.candidates), "top": [c.key() for c in top]}))


def cmd_distill(args) -> None:
    cfg = _config(args.config)
    teacher, student = load_checkpoint(args.teacher), load_checkpoint(args.student)
    out, hist = distill_run(teacher, student, _stream(cfg, cfg.distill.mix_fraction), cfg.distill)
    save_checkpoint(out, args.out)
    _write_log(args.log, hist)
    if args.plot:
        plots.loss_curves({"student": hist}, args.plot, "distillation")
    print(json.dumps({"steps": len(hist), "final_kd_loss": hist[-1].loss}))


def cmd_merge(args) -> None:
    merged = merge_checkpoints(load_checkpoint(args.a), load_checkpoint(args.b), args.alpha)
    save_checkpoint(merged, args.out)


def cmd_quantize(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    quantized, passthrough = quantize_checkpoint(ckpt, args.skip_first, args.skip_last)
    save_quantized(args.out, ckpt.config, quantized, passthrough)
    rows = []
    for name, q in quantized.items():
        w = ckpt.tensors[name]
        err = q.dequantize() - w
        rows.append({"name": name, "rel_frobenius_error": float(np.linalg.norm(err) / np.linalg.norm(w)),
                     "max_abs_error": float(np.max(np.abs(err)))})
    if args.report:
        Path(args.report).write_text("".join(json.dumps(r) + "\n" for r in rows))
    if args.plot and rows:
        plots.fp8_errors(rows, args.plot)
    print(json.dumps({"quantized": len(quantized), "passthrough": len(passthrough)}))


def cmd_budget_sim(args) -> None:
    text = Path(args.tokens).read_text() if args.tokens != "-" else sys.stdin.read()
    tokens = [int(t) for t in text.split()]
    out, state = filter_stream(tokens, args.budget, TagIds(args.open_id, args.close_id, args.newline_id),
                               args.grace, close_at_eos=not args.no_eos_close)
    body = "".join(f"{t}\n" for t in out)
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    doc = json.dumps(metrics(state), sort_keys=True)
    if args.metrics:
        Path(args.metrics).write_text(doc + "\n")
    else:
        print(doc, file=sys.stderr)


def cmd_eval(args) -> None:
    cfg = _config(args.config)
    d = cfg.data
    held = TokenStream(d.primary, d.heldout_chars, seed=cfg.seed + 1)
    batch = held.sample(np.random.default_rng(cfg.seed), d.heldout_n, d.heldout_seq)
    print(json.dumps({"heldout_loss": lm_loss_value(load_checkpoint(args.ckpt), batch)}))


def cmd_pipeline(args) -> None:
    if args.dump_config:
        Path(args.dump_config).write_text(json.dumps(default_config(), indent=1) + "\n")
        return
    summary = run_pipeline(_config(args.config), args.out_dir, overwrite=args.overwrite)
    print(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nanoprune", description="Hybrid LM compression lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn, stage=name)
        return sp

    sp = add("train", cmd_train, "pretrain a model from a config")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--plot")

    sp = add("importance", cmd_importance, "score layers, neurons, channels and heads")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config")
    sp.add_argument("--target-depth", type=int)
    sp.add_argument("--min-attention", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot")

    sp = add("prune", cmd_prune, "remove layers and/or shrink widths")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--importance")
    sp.add_argument("--drop-layers", help="comma-separated layer indices")
    sp.add_argument("--min-attention", type=int, default=1)
    sp.add_argument("--d-model", type=int)
    sp.add_argument("--d-ffn", type=int)
    sp.add_argument("--mamba-heads", type=int)
    sp.add_argument("--out", required=True)

    sp = add("nas", cmd_nas, "enumerate and rank candidates under a memory budget")
    sp.add_argument("--config")
    sp.add_argument("--base", help="checkpoint whose config anchors the search")
    sp.add_argument("--depths")
    sp.add_argument("--budget-bytes", type=float)
    sp.add_argument("--top-k", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot")

    sp = add("distill", cmd_distill, "logit distillation from teacher to student")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--plot")

    sp = add("merge", cmd_merge, "interpolate two checkpoints: (1-alpha)*a + alpha*b")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--out", required=True)

    sp = add("quantize", cmd_quantize, "blockwise E4M3 weight quantization")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--skip-first", type=int, default=4)
    sp.add_argument("--skip-last", type=int, default=4)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="per-tensor error, JSON lines")
    sp.add_argument("--plot")

    sp = add("budget-sim", cmd_budget_sim, "apply the thinking-budget filter to a token file")
    sp.add_argument("tokens", help="token ids, one per line ('-' for stdin)")
    sp.add_argument("--budget", type=int, required=True)
    sp.add_argument("--grace", type=int, default=500)
    sp.add_argument("--open-id", type=int, required=True)
    sp.add_argument("--close-id", type=int, required=True)
    sp.add_argument("--newline-id", type=int, required=True)
    sp.add_argument("--no-eos-close", action="store_true",
                    help="leave thinking open if the stream ends inside it")
    sp.add_argument("--out")
    sp.add_argument("--metrics")

    sp = add("eval", cmd_eval, "held-out next-token loss of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config")

    sp = add("pipeline", cmd_pipeline, "run every stage from one config")
    sp.add_argument("--config")
    sp.add_argument("--out-dir")
    sp.add_argument("--overwrite", action="store_true")
    sp.add_argument("--dump-config", metavar="PATH", help="write the default config and exit")
    return p


def _thread_limit():
    n = os.environ.get("NANOPRUNE_THREADS")
    if not n:
        return contextlib.nullcontext()
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            args.func(args)
    except PipelineError as exc:
        print(f"error in stage {exc.stage}: {exc.message}", file=sys.stderr)
        return 2
    except Exception as exc:  # every other failure is charged to the subcommand
        print(f"error in stage {args.stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
