"""End-to-end compression run: teacher -> importance -> depth -> nas -> width -> distill -> quantize.

Every stage writes into its own numbered directory under ``output_dir``.
Files are created once per run and never rewritten, and reports carry no
wall-clock data, so two runs with the same config and seed produce
byte-identical directories in 64-bit mode.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import plots
from .budget import TagIds, filter_stream, metrics
from .checkpoint_io import save_checkpoint, save_quantized
from .config import ModelConfig, TinyDefaults, pattern_string
from .data import MixedStream, TokenStream, heldout_batch
from .fp8 import quantize_checkpoint
from .importance import CalibrationSet, build_report
from .memory import SearchSpace, derive_budget, enumerate_candidates, estimate_memory, rank_candidates
from .model import Checkpoint, count_params, init_checkpoint
from .prune import (ffn_keep_from_scores, mamba_keep_from_rankings, prune_embedding, prune_ffn,
                    prune_layers, prune_mamba_heads, top_k_indices)
from .train import TrainConfig, distill_run, lm_loss_value, merge_checkpoints, train_lm

log = logging.getLogger(__name__)

STAGES = ("train", "importance", "depth", "nas", "width", "distill", "merge", "quantize", "budget")


class PipelineError(RuntimeError):
    """A failure tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


# ---------------------------------------------------------------- config

@dataclass
class DataSection:
    primary: str = "prose"
    secondary: str | None = "qa"
    n_chars: int = 200_000
    heldout_chars: int = 40_000
    heldout_n: int = 16
    heldout_seq: int = 64


@dataclass
class ImportanceSection:
    calib_n: int = 64
    calib_seq: int = 64
    batch_size: int = 32


@dataclass
class SearchSection:
    depths: list[int] = field(default_factory=lambda: [5, 6, 7])
    min_attention: int = 1
    d_models: list[int] = field(default_factory=lambda: [48, 56, 64])
    d_ffns: list[int] = field(default_factory=lambda: [128, 192, 256])
    mamba_heads: list[int] = field(default_factory=lambda: [4, 6, 8])
    top_k: int = 3
    seq_len: int = 256
    batch: int = 1
    bytes_per_elem: int = 2
    budget_bytes: float | None = None
    gpu_bytes: float | None = 400_000
    buffer_fraction: float = 0.05
    reserved_bytes: float = 0
    short_kd: dict = field(default_factory=lambda: {"stages": [{"tokens": 24_576, "seq_len": 64}],
                                                      "batch_tokens": 1024, "lr_stable": 3e-3,
                                                      "lr_min": 3e-5, "warmup_steps": 2})

    def budget(self) -> float:
        if self.budget_bytes is not None:
            return float(self.budget_bytes)
        if self.gpu_bytes is None:
            raise ValueError("search needs budget_bytes or gpu_bytes")
        return derive_budget(self.gpu_bytes, self.buffer_fraction, self.reserved_bytes)


@dataclass
class MergeSection:
    alpha: float | None = None  # None skips the merge


@dataclass
class QuantizeSection:
    enabled: bool = True
    skip_first: int = 4
    skip_last: int = 4


@dataclass
class BudgetSection:
    enabled: bool = True
    budget: int = 32
    grace: int = 16
    n_streams: int = 200
    length: int = 160
    open_id: int = 60  # "<"
    close_id: int = 62  # ">"
    newline_id: int = 10
    newline_prob: float = 0.05
    close_prob: float = 0.0


_SECTIONS = {"data": DataSection, "importance": ImportanceSection, "search": SearchSection,
             "merge": MergeSection, "quantize": QuantizeSection, "budget": BudgetSection}


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"section {name!r}: unknown keys {sorted(unknown)}")
    return cls(**raw)


def _train_config(raw: dict | None, name: str, seed: int) -> TrainConfig:
    raw = dict(raw or {})
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"section {name!r}: unknown keys {sorted(unknown)}")
    raw.setdefault("seed", seed)
    return TrainConfig(**raw)


@dataclass
class PipelineConfig:
    seed: int
    precision: str
    output_dir: str | None
    model: ModelConfig
    data: DataSection
    train: TrainConfig
    importance: ImportanceSection
    search: SearchSection
    distill: TrainConfig
    merge: MergeSection
    quantize: QuantizeSection
    budget: BudgetSection
    raw: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        allowed = {"seed", "precision", "output_dir", "model", "train", "distill", *_SECTIONS}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        seed = int(doc.get("seed", 0))
        precision = doc.get("precision", "float64")
        if precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        model_raw = doc.get("model")
        if model_raw is None:
            model = TinyDefaults().build()
        elif set(model_raw) <= {f.name for f in fields(TinyDefaults)}:
            model = TinyDefaults(**model_raw).build()
        else:
            model = ModelConfig.from_dict(model_raw)
        # stage seeds are decorrelated children of the single top-level seed
        s_train, s_short, s_long = (int(x) for x in np.random.SeedSequence(seed).generate_state(3))
        search = _section(SearchSection, doc.get("search"), "search")
        _train_config(search.short_kd, "search.short_kd", s_short)
        return cls(
            seed=seed, precision=precision, output_dir=doc.get("output_dir"), model=model,
            data=_section(DataSection, doc.get("data"), "data"),
            train=_train_config(doc.get("train", DEFAULT_TEACHER_TRAIN), "train", s_train),
            importance=_section(ImportanceSection, doc.get("importance"), "importance"),
            search=search,
            distill=_train_config(doc.get("distill", DEFAULT_DISTILL), "distill", s_long),
            merge=_section(MergeSection, doc.get("merge"), "merge"),
            quantize=_section(QuantizeSection, doc.get("quantize"), "quantize"),
            budget=_section(BudgetSection, doc.get("budget"), "budget"),
            raw=doc,
        )

    def short_kd(self, offset: int) -> TrainConfig:
        """Short-KD config; each run gets its own data order."""
        seed = int(np.random.SeedSequence([self.seed, 1, offset]).generate_state(1)[0])
        return _train_config(self.search.short_kd, "search.short_kd", seed)


DEFAULT_TEACHER_TRAIN = {"stages": [{"tokens": 262_144, "seq_len": 64}], "batch_tokens": 1024,
                         "lr_stable": 3e-3, "lr_min": 3e-5, "warmup_steps": 10}
DEFAULT_DISTILL = {"stages": [{"tokens": 98_304, "seq_len": 64}], "batch_tokens": 1024,
                   "lr_stable": 2e-3, "lr_min": 2e-5, "warmup_steps": 5}


def default_config() -> dict:
    """A complete desk-scale config document (roughly ten minutes on one core)."""
    return {
        "seed": 0, "precision": "float64", "output_dir": "runs/desk",
        "model": asdict(TinyDefaults()),
        "data": asdict(DataSection()),
        "train": DEFAULT_TEACHER_TRAIN,
        "importance": asdict(ImportanceSection()),
        "search": asdict(SearchSection()),
        "distill": DEFAULT_DISTILL,
        "merge": asdict(MergeSection()),
        "quantize": asdict(QuantizeSection()),
        "budget": asdict(BudgetSection()),
    }


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- artifacts

class Artifacts:
    """Write-once files under one run directory."""

    def __init__(self, root, overwrite: bool = False):
        self.root = Path(root)
        if self.root.exists() and any(self.root.iterdir()) and not overwrite:
            raise FileExistsError(f"output directory {self.root} is not empty")
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def path(self, stage_dir: str, name: str) -> Path:
        p = self.root / stage_dir / name
        rel = str(p.relative_to(self.root))
        if rel in self.written:
            raise FileExistsError(f"{rel} was already written in this run")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(rel)
        return p

    def json(self, stage_dir: str, name: str, obj) -> Path:
        p = self.path(stage_dir, name)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        return p

    def text(self, stage_dir: str, name: str, text: str) -> Path:
        p = self.path(stage_dir, name)
        p.write_text(text)
        return p

    def csv(self, stage_dir: str, name: str, rows: list[dict]) -> Path:
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return self.text(stage_dir, name, buf.getvalue())


def _log_lines(history) -> str:
    return "".join(r.to_json() + "\n" for r in history)


# ---------------------------------------------------------------- stages

@dataclass
class RunContext:
    cfg: PipelineConfig
    art: Artifacts
    data_for: callable
    heldout: np.ndarray
    summary: dict = field(default_factory=dict)

    def eval_loss(self, ckpt: Checkpoint) -> float:
        return lm_loss_value(ckpt, self.heldout)


def _stage_train(ctx: RunContext) -> Checkpoint:
    cfg = ctx.cfg
    teacher = init_checkpoint(cfg.model, seed=cfg.seed, precision=cfg.precision)
    init_loss = ctx.eval_loss(teacher)
    teacher, hist = train_lm(teacher, ctx.data_for(cfg.train), cfg.train)
    d = "01_train"
    save_checkpoint(teacher, ctx.art.path(d, "teacher.nnc"))
    ctx.art.text(d, "train_log.jsonl", _log_lines(hist))
    report = {"config": cfg.model.to_dict(), "params": count_params(cfg.model),
              "train": cfg.train.to_dict(), "heldout_loss_init": init_loss,
              "heldout_loss": ctx.eval_loss(teacher), "steps": len(hist)}
    ctx.art.json(d, "report.json", report)
    plots.loss_curves({"teacher": hist}, ctx.art.path(d, "loss.png"), "teacher pretraining")
    plots.lr_schedule(hist, ctx.art.path(d, "lr.png"))
    ctx.summary["teacher_loss"] = report["heldout_loss"]
    return teacher


def _calibration(ctx: RunContext, offset: int) -> CalibrationSet:
    c = ctx.cfg.importance
    rng = np.random.default_rng(np.random.SeedSequence([ctx.cfg.seed, 2, offset]))
    tokens = ctx.data_for(ctx.cfg.train).sample(rng, c.calib_n, c.calib_seq)
    return CalibrationSet(tokens[:, :-1])


def _stage_importance(ctx: RunContext, teacher: Checkpoint):
    s = ctx.cfg.search
    target = min(s.depths)
    if not all(0 < dep <= teacher.config.n_layers for dep in s.depths):
        raise ValueError(f"depths {s.depths} must lie in [1, {teacher.config.n_layers}]")
    report = build_report(teacher, _calibration(ctx, 0), target_depth=target,
                          min_attention=s.min_attention, batch_size=ctx.cfg.importance.batch_size)
    d = "02_importance"
    ctx.art.text(d, "importance.json", report.to_json() + "\n")
    ctx.art.csv(d, "layer_removal.csv", [{"rank": r, "layer": i, "kind": teacher.config.pattern[i].value,
                                          "logit_mse": m}
                                         for r, (i, m) in enumerate(report.layer_removal_order)])
    plots.importance_summary(report, ctx.art.path(d, "importance.png"))
    return report


def _stage_depth(ctx: RunContext, teacher: Checkpoint, report):
    order = [i for i, _ in report.layer_removal_order]
    n = teacher.config.n_layers
    rows, students = [], {}
    d = "03_depth"
    for k, depth in enumerate(sorted(ctx.cfg.search.depths)):
        removed = sorted(order[:n - depth])
        pruned = prune_layers(teacher, removed, min_attention=ctx.cfg.search.min_attention)
        before = ctx.eval_loss(pruned)
        kd_cfg = ctx.cfg.short_kd(k)
        student, hist = distill_run(teacher, pruned, ctx.data_for(kd_cfg), kd_cfg)
        after = ctx.eval_loss(student)
        ctx.art.text(d, f"depth_{depth}_log.jsonl", _log_lines(hist))
        save_checkpoint(student, ctx.art.path(d, f"depth_{depth}.nnc"))
        row = {"depth": depth, "removed": " ".join(map(str, removed)),
               "pattern": pattern_string(student.config.pattern), "params": count_params(student.config),
               "loss_pruned": before, "loss_after_kd": after, "score": -after}
        ctx.art.json(d, f"depth_{depth}.json", row)
        rows.append(row)
        students[depth] = (student, hist)
    best = max(rows, key=lambda r: (r["score"], -r["depth"]))
    ctx.art.csv(d, "depth.csv", rows)
    ctx.art.json(d, "selection.json", {"selected_depth": best["depth"], "rows": rows})
    plots.depth_results(rows, ctx.art.path(d, "depth.png"))
    plots.loss_curves({f"depth {k}": h for k, (_, h) in students.items()},
                      ctx.art.path(d, "kd_loss.png"), "short distillation per depth")
    ctx.summary["selected_depth"] = best["depth"]
    depth = best["depth"]
    removed = [int(i) for i in best["removed"].split()]
    return prune_layers(teacher, removed, min_attention=ctx.cfg.search.min_attention), depth


def _stage_nas(ctx: RunContext, depth_ckpt: Checkpoint):
    s = ctx.cfg.search
    budget = s.budget()
    cfg0 = depth_ckpt.config
    space = SearchSpace([cfg0.n_layers], s.d_models, s.d_ffns, s.mamba_heads, cfg0.n_attn)
    cands = enumerate_candidates(space, budget, cfg0, s.seq_len, s.batch, s.bytes_per_elem,
                                 pattern=cfg0.pattern)
    d = "04_nas"
    if not cands.candidates:
        ctx.art.json(d, "candidates.json", json.loads(cands.to_json([])))
        raise ValueError(f"no feasible candidate under a budget of {budget:.0f} bytes "
                         f"({space.size} grid points searched)")
    top = rank_candidates(cands, s.top_k)
    ctx.art.text(d, "candidates.json", cands.to_json(top) + "\n")
    ctx.art.csv(d, "candidates.csv", [
        {**c.key(), "params": count_params(c.config), "total_bytes": c.memory.total_bytes,
         "rank": top.index(c) if c in top else ""} for c in cands.candidates])
    plots.candidate_scatter(cands.candidates, budget, top, ctx.art.path(d, "candidates.png"))
    ctx.summary["budget_bytes"] = budget
    ctx.summary["n_feasible"] = len(cands.candidates)
    return top


def width_prune(ckpt: Checkpoint, report, target: ModelConfig) -> Checkpoint:
    """Shrink Mamba heads, FFN neurons and embedding channels of ``ckpt`` to ``target``."""
    cfg = ckpt.config
    out = ckpt
    if target.mamba_n_heads != cfg.mamba_n_heads:
        if target.mamba_n_heads % cfg.mamba_groups:
            raise ValueError("head count must split evenly across groups")
        rankings = report.mamba_rankings()
        out = prune_mamba_heads(out, mamba_keep_from_rankings(rankings, target.mamba_n_heads // cfg.mamba_groups))
    if target.d_ffn != cfg.d_ffn:
        out = prune_ffn(out, ffn_keep_from_scores(report.ffn("l2"), target.d_ffn))
    if target.d_model != cfg.d_model:
        out = prune_embedding(out, top_k_indices(report.channels("l2"), target.d_model))
    return out


def _stage_width(ctx: RunContext, teacher: Checkpoint, depth_ckpt: Checkpoint, top):
    # width scores come from the depth-pruned model so layer indices line up
    report = build_report(depth_ckpt, _calibration(ctx, 1), batch_size=ctx.cfg.importance.batch_size)
    d = "05_width"
    ctx.art.text(d, "importance.json", report.to_json() + "\n")
    rows, results = [], []
    for k, cand in enumerate(top):
        pruned = width_prune(depth_ckpt, report, cand.config)
        before = ctx.eval_loss(pruned)
        kd_cfg = ctx.cfg.short_kd(100 + k)
        student, hist = distill_run(teacher, pruned, ctx.data_for(kd_cfg), kd_cfg)
        after = ctx.eval_loss(student)
        ctx.art.text(d, f"candidate_{k}_log.jsonl", _log_lines(hist))
        save_checkpoint(student, ctx.art.path(d, f"candidate_{k}.nnc"))
        rows.append({"rank": k, **cand.key(), "params": count_params(cand.config),
                     "total_bytes": cand.memory.total_bytes, "loss_pruned": before,
                     "loss_after_kd": after, "score": -after})
        results.append((student, hist))
    best = max(range(len(rows)), key=lambda i: (rows[i]["score"], -i))
    ctx.art.csv(d, "width.csv", rows)
    ctx.art.json(d, "selection.json", {"selected_rank": best, "rows": rows})
    plots.loss_curves({f"candidate {k}": h for k, (_, h) in enumerate(results)},
                      ctx.art.path(d, "kd_loss.png"), "short distillation per candidate")
    ctx.summary["selected_candidate"] = {k: rows[best][k] for k in
                                         ("n_layers", "d_model", "d_ffn", "mamba_heads", "params")}
    return results[best][0]


def _stage_distill(ctx: RunContext, teacher: Checkpoint, student: Checkpoint) -> Checkpoint:
    cfg = ctx.cfg.distill
    before = ctx.eval_loss(student)
    final, hist = distill_run(teacher, student, ctx.data_for(cfg), cfg)
    d = "06_distill"
    save_checkpoint(final, ctx.art.path(d, "student.nnc"))
    ctx.art.text(d, "distill_log.jsonl", _log_lines(hist))
    after = ctx.eval_loss(final)
    ctx.art.json(d, "report.json", {"train": cfg.to_dict(), "loss_before": before, "loss_after": after,
                                    "teacher_loss": ctx.summary["teacher_loss"], "steps": len(hist)})
    plots.loss_curves({"student": hist}, ctx.art.path(d, "loss.png"), "extended distillation")
    plots.lr_schedule(hist, ctx.art.path(d, "lr.png"))
    ctx.summary["student_loss"] = after
    return final


def _stage_merge(ctx: RunContext, a: Checkpoint, b: Checkpoint) -> Checkpoint:
    alpha = ctx.cfg.merge.alpha
    merged = merge_checkpoints(a, b, alpha)
    d = "07_merge"
    save_checkpoint(merged, ctx.art.path(d, "merged.nnc"))
    ctx.art.json(d, "report.json", {"alpha": alpha, "loss_a": ctx.eval_loss(a),
                                    "loss_b": ctx.eval_loss(b), "loss_merged": ctx.eval_loss(merged)})
    ctx.summary["merged_loss"] = ctx.eval_loss(merged)
    return merged


def _stage_quantize(ctx: RunContext, final: Checkpoint) -> None:
    q = ctx.cfg.quantize
    quantized, passthrough = quantize_checkpoint(final, q.skip_first, q.skip_last)
    d = "08_quantize"
    save_quantized(ctx.art.path(d, "student_fp8.nnc"), final.config, quantized, passthrough)
    rows = []
    for name, qt in quantized.items():
        w = final.tensors[name]
        err = qt.dequantize() - w
        rows.append({"name": name, "shape": "x".join(map(str, w.shape)), "n_blocks": qt.scales.size,
                     "max_abs_error": float(np.max(np.abs(err))),
                     "rel_frobenius_error": float(np.linalg.norm(err) / np.linalg.norm(w))})
    deq = Checkpoint(final.config, {**passthrough, **{n: t.dequantize().astype(final.dtype)
                                                      for n, t in quantized.items()}})
    report = {"n_quantized": len(quantized), "kept_high_precision": sorted(
        n for n in passthrough if final.tensors[n].ndim == 2 and not n.endswith(".conv")),
        "loss_high_precision": ctx.eval_loss(final), "loss_fp8": ctx.eval_loss(deq), "tensors": rows}
    ctx.art.json(d, "report.json", report)
    ctx.art.csv(d, "fp8.csv", rows)
    if rows:
        plots.fp8_errors(rows, ctx.art.path(d, "fp8.png"))
    ctx.summary["fp8_loss"] = report["loss_fp8"]


def _stage_budget(ctx: RunContext) -> None:
    b = ctx.cfg.budget
    tags = TagIds(b.open_id, b.close_id, b.newline_id)
    rng = np.random.default_rng(np.random.SeedSequence([ctx.cfg.seed, 3]))
    filler = np.array([t for t in range(97, 123)])  # lowercase letters
    rows = []
    for k in range(b.n_streams):
        body = rng.choice(filler, size=b.length)
        body[rng.random(b.length) < b.newline_prob] = b.newline_id
        body[rng.random(b.length) < b.close_prob] = b.close_id
        stream = [b.open_id, *body.tolist()]
        _, state = filter_stream(stream, b.budget, tags, b.grace)
        m = metrics(state)
        rows.append({"stream": k, "well_formed": m["well_formed"], "inserted_at": m["inserted_at"],
                     "inserted_reason": m["inserted_reason"], "natural_close": m["natural_close"],
                     "think_count": m["think_count"]})
    d = "09_budget"
    ctx.art.csv(d, "streams.csv", rows)
    summary = {"budget": b.budget, "grace": b.grace, "n_streams": b.n_streams,
               "well_formed_rate": float(np.mean([r["well_formed"] for r in rows])),
               "reasons": {r: sum(1 for x in rows if x["inserted_reason"] == r)
                           for r in ("newline", "forced", "eos")}}
    ctx.art.json(d, "report.json", summary)
    plots.budget_insertions(rows, b.budget, b.grace, ctx.art.path(d, "insertions.png"))
    ctx.summary["budget_well_formed_rate"] = summary["well_formed_rate"]


def run_pipeline(config, output_dir=None, overwrite: bool = False) -> dict:
    """Run every stage in order; returns the summary dict also written to ``summary.json``."""
    cfg = config if isinstance(config, PipelineConfig) else (
        PipelineConfig.from_dict(config) if isinstance(config, dict) else load_config(config))
    root = output_dir or cfg.output_dir
    if root is None:
        raise PipelineError("setup", "no output directory given")
    art = Artifacts(root, overwrite)
    art.json("", "config.json", cfg.raw)

    dc = cfg.data
    primary = TokenStream(dc.primary, dc.n_chars, seed=cfg.seed)
    secondary = TokenStream(dc.secondary, dc.n_chars, seed=cfg.seed) if dc.secondary else None
    heldout_stream = TokenStream(dc.primary, dc.heldout_chars, seed=cfg.seed + 1)
    heldout = heldout_batch(heldout_stream, dc.heldout_n, dc.heldout_seq, seed=cfg.seed)

    def data_for(tc: TrainConfig):
        return MixedStream(primary, secondary, tc.mix_fraction)

    ctx = RunContext(cfg, art, data_for, heldout)

    def stage(name, fn, *args):
        log.info("stage %s", name)
        try:
            return fn(ctx, *args)
        except PipelineError:
            raise
        except Exception as exc:  # tag and halt
            raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc

    teacher = stage("train", _stage_train)
    report = stage("importance", _stage_importance, teacher)
    depth_ckpt, _ = stage("depth", _stage_depth, teacher, report)
    top = stage("nas", _stage_nas, depth_ckpt)
    width_best = stage("width", _stage_width, teacher, depth_ckpt, top)
    final = stage("distill", _stage_distill, teacher, width_best)
    if cfg.merge.alpha is not None:
        final = stage("merge", _stage_merge, width_best, final)
    if cfg.quantize.enabled:
        stage("quantize", _stage_quantize, final)
    if cfg.budget.enabled:
        stage("budget", _stage_budget)
    art.json("", "summary.json", ctx.summary)
    return ctx.summary


def memory_row(cfg: ModelConfig, seq_len: int, batch: int = 1, bytes_per_elem: int = 2) -> dict:
    est = estimate_memory(cfg, seq_len, batch, bytes_per_elem)
    return {"params": count_params(cfg), **est.to_dict(), "total_gib": est.total_gib}
