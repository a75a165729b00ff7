"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata without a version stamp keeps reruns byte-identical
_SAVE = {"dpi": 110, "bbox_inches": "tight", "metadata": {"Software": None}}


def _finish(fig, path) -> None:
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def loss_curves(histories: dict[str, list], path, title: str = "training loss") -> None:
    """One line per run; ``histories`` maps label -> list of LogRecord-like objects."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, hist in histories.items():
        if not hist:
            continue
        ax.plot([r.tokens for r in hist], [r.loss for r in hist], label=label, lw=1.2)
    ax.set_xlabel("tokens")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    if len(histories) > 1:
        ax.legend(fontsize=8)
    _finish(fig, path)


def lr_schedule(history, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 2.6))
    ax.plot([r.step for r in history], [r.lr for r in history], color="k", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    _finish(fig, path)


def importance_summary(report, path) -> None:
    """Layer-removal MSE, sorted FFN neuron scores and channel scores side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    order = report.layer_removal_order
    if order:
        axes[0].bar(range(len(order)), [m for _, m in order], color="tab:red")
        axes[0].set_xticks(range(len(order)), [str(i) for i, _ in order])
        axes[0].set_xlabel("removed layer (in order)")
        axes[0].set_ylabel("logit MSE")
    axes[0].set_title("layer removal")
    for i, scores in report.ffn("l2").items():
        axes[1].plot(np.sort(scores)[::-1], lw=1, label=f"layer {i}")
    axes[1].set_title("FFN neurons (l2, sorted)")
    axes[1].set_yscale("log")
    if report.ffn_scores.get("l2"):
        axes[1].legend(fontsize=7)
    ch = report.channels("l2")
    axes[2].bar(range(ch.size), ch, color="tab:blue")
    axes[2].set_title("embedding channels (l2)")
    _finish(fig, path)


def depth_results(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    depths = [r["depth"] for r in rows]
    ax.plot(depths, [r["score"] for r in rows], "o-")
    ax.set_xlabel("depth (layers)")
    ax.set_ylabel("score (-held-out loss)")
    ax.set_xticks(depths)
    _finish(fig, path)


def candidate_scatter(cands, budget_bytes: float, top, path) -> None:
    """Memory vs parameter count for every feasible candidate, top-k highlighted."""
    from .model import count_params

    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    if cands:
        ax.scatter([count_params(c.config) for c in cands],
                   [c.memory.total_bytes for c in cands], s=10, color="0.6", label="feasible")
    if top:
        ax.scatter([count_params(c.config) for c in top], [c.memory.total_bytes for c in top],
                   s=30, color="tab:orange", label="top-k")
    ax.axhline(budget_bytes, color="tab:red", ls="--", lw=1, label="budget")
    ax.set_xlabel("parameters")
    ax.set_ylabel("estimated bytes")
    ax.legend(fontsize=8)
    _finish(fig, path)


def fp8_errors(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(range(len(rows)), [r["rel_frobenius_error"] for r in rows])
    ax.set_xticks(range(len(rows)), [r["name"] for r in rows], rotation=90, fontsize=6)
    ax.set_ylabel("relative Frobenius error")
    _finish(fig, path)


def budget_insertions(rows: list[dict], budget: int, grace: int, path) -> None:
    """Histogram of where the filter put the close tag, split by reason."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for reason in ("newline", "forced", "eos"):
        at = [r["inserted_at"] for r in rows if r["inserted_reason"] == reason]
        if at:
            ax.hist(at, bins=30, alpha=0.7, label=f"{reason} ({len(at)})")
    for x in (budget, budget + grace):
        ax.axvline(x, color="k", ls="--", lw=0.8)
    ax.set_xlabel("thinking tokens before the close tag")
    ax.set_ylabel("streams")
    ax.legend(fontsize=8)
    _finish(fig, path)
