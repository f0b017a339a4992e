"""Report rendering: human table, machine-readable key-value file, CSV, figures."""
from __future__ import annotations

import io
import os

from .graph import write_atomic
from .metrics import EvalReport


def format_report(report: EvalReport, title: str = "evaluation") -> str:
    """Human-readable table for stdout."""
    buf = io.StringIO()
    buf.write(f"== {title} ==\n")
    buf.write(f"examples:  {report.n_examples}\n")
    buf.write(f"vote mode: {report.vote_mode}\n")
    buf.write(f"top-1:     {report.top1:.4f}\n")
    buf.write(f"top-5:     {report.top5:.4f}\n")
    buf.write(f"{'label':<24}{'accuracy':>10}{'jaccard':>10}\n")
    for label in report.per_class:
        ji = report.jaccard.get(label)
        ji_text = f"{ji:.4f}" if ji is not None else "-"
        buf.write(f"{label:<24}{report.per_class[label]:>10.4f}{ji_text:>10}\n")
    for key, value in report.extra.items():
        buf.write(f"{key}: {value}\n")
    return buf.getvalue()


def report_kv_lines(report: EvalReport) -> list[str]:
    lines = [
        f"n_examples {report.n_examples}",
        f"vote_mode {report.vote_mode}",
        f"top1 {report.top1:.6f}",
        f"top5 {report.top5:.6f}",
    ]
    for label, acc in report.per_class.items():
        lines.append(f"class_accuracy {label} {acc:.6f}")
    for label, ji in report.jaccard.items():
        lines.append(f"jaccard {label} {ji:.6f}")
    for key, value in report.extra.items():
        lines.append(f"{key} {value}")
    return lines


def write_report(report: EvalReport, out_base: str, figures: bool = False) -> list[str]:
    """Write ``<base>.txt`` (key-value) and ``<base>.csv``; optionally PNG figures.

    Returns the list of files written.
    """
    written = []
    txt_path = f"{out_base}.txt"
    write_atomic(txt_path, ("\n".join(report_kv_lines(report)) + "\n").encode("utf-8"))
    written.append(txt_path)

    csv_path = f"{out_base}.csv"
    rows = ["label,accuracy,jaccard"]
    for label in report.per_class:
        ji = report.jaccard.get(label)
        rows.append(f"{label},{report.per_class[label]:.6f},"
                    f"{'' if ji is None else f'{ji:.6f}'}")
    write_atomic(csv_path, ("\n".join(rows) + "\n").encode("utf-8"))
    written.append(csv_path)

    if figures:
        written.extend(_write_figures(report, out_base))
    return written


def _write_figures(report: EvalReport, out_base: str) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    labels = list(report.per_class)
    if labels:
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(labels)), 4))
        ax.bar(range(len(labels)), [report.per_class[l] for l in labels], color="#4878cf")
        ax.axhline(report.top1, color="#d65f5f", linestyle="--",
                   label=f"top-1 = {report.top1:.3f}")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel("per-class accuracy")
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        path = f"{out_base}_accuracy.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    ji_labels = list(report.jaccard)
    if ji_labels:
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(ji_labels)), 4))
        ax.bar(range(len(ji_labels)), [report.jaccard[l] for l in ji_labels],
               color="#6acc65")
        ax.set_xticks(range(len(ji_labels)))
        ax.set_xticklabels(ji_labels, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel("Jaccard index (module vs model)")
        ax.set_ylim(0, 1.05)
        fig.tight_layout()
        path = f"{out_base}_jaccard.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
