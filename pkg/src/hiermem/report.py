"""Report rendering: delimited tables plus matplotlib figures on disk."""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import EvalReport  # noqa: E402


def write_eval_report(report: EvalReport, outdir: str) -> dict[str, str]:
    """EvalReport -> report.tsv, per_sample.jsonl, and an accuracy figure."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    tsv = os.path.join(outdir, "report.tsv")
    with open(tsv, "w") as f:
        f.write("metric\tvalue\n")
        f.write(f"zero_shot_accuracy\t{report.zero_shot_accuracy:.6f}\n")
        f.write(f"full_context_accuracy\t{report.full_context_accuracy:.6f}\n")
        f.write(f"compressor_retriever_accuracy\t{report.accuracy:.6f}\n")
        f.write(f"match_rate\t{report.match_rate:.6f}\n")
        f.write(f"random_match_baseline\t{report.random_match_baseline:.6f}\n")
        f.write(f"ordering_held\t{int(report.ordering_held)}\n")
        f.write(f"n_samples\t{report.n_samples}\n")
    paths["tsv"] = tsv

    jsonl = os.path.join(outdir, "per_sample.jsonl")
    with open(jsonl, "w") as f:
        for rec in report.per_sample:
            f.write(json.dumps(rec) + "\n")
    paths["per_sample"] = jsonl

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    labels = ["0-shot", "full ctx", "compr.-retr."]
    vals = [report.zero_shot_accuracy, report.full_context_accuracy, report.accuracy]
    ax1.bar(labels, vals, color=["#888", "#2a6", "#26c"])
    ax1.set_ylim(0, 1)
    ax1.set_ylabel("accuracy")
    ax1.set_title("ICL bracketing")
    ax2.bar(["match rate", "random"], [report.match_rate, report.random_match_baseline],
            color=["#26c", "#888"])
    ax2.set_ylim(0, 1)
    ax2.set_title("top-level match rate")
    fig.tight_layout()
    png = os.path.join(outdir, "eval_report.png")
    fig.savefig(png, dpi=120)
    plt.close(fig)
    paths["figure"] = png
    return paths


def write_train_report(history: dict, outdir: str) -> dict[str, str]:
    """Training history -> metrics.tsv and loss/grad-norm curves."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    tsv = os.path.join(outdir, "metrics.tsv")
    with open(tsv, "w") as f:
        f.write("step\tloss\tgrad_norm\n")
        for rec in history["steps"]:
            f.write(f"{rec['step']}\t{rec['loss']:.6f}\t{rec['grad_norm']:.6f}\n")
    paths["tsv"] = tsv

    if history["steps"]:
        steps = [r["step"] for r in history["steps"]]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
        ax1.plot(steps, [r["loss"] for r in history["steps"]], lw=0.8)
        ax1.set_xlabel("step")
        ax1.set_ylabel("loss")
        ax1.set_title("training loss")
        ax2.plot(steps, [r["grad_norm"] for r in history["steps"]], lw=0.8, color="#a42")
        ax2.set_xlabel("step")
        ax2.set_ylabel("grad norm")
        ax2.set_title("gradient norm")
        fig.tight_layout()
        png = os.path.join(outdir, "training_curves.png")
        fig.savefig(png, dpi=120)
        plt.close(fig)
        paths["figure"] = png
    return paths


def table_1_style(report: EvalReport) -> str:
    """Plain-text three-row comparison table."""
    rows = [("0-shot", report.zero_shot_accuracy),
            ("6-shot (full context)", report.full_context_accuracy),
            ("Compressor-Retriever", report.accuracy)]
    w = max(len(r[0]) for r in rows)
    lines = [f"{'Mode':<{w}}  Accuracy", "-" * (w + 10)]
    lines += [f"{name:<{w}}  {val:.3f}" for name, val in rows]
    lines.append(f"match rate: {report.match_rate:.3f} "
                 f"(random baseline {report.random_match_baseline:.3f})")
    lines.append(f"ordering zero_shot <= cr <= full_context: "
                 f"{'held' if report.ordering_held else 'VIOLATED'}")
    return "\n".join(lines)
