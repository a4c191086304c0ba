"""Figure rendering for the CLI report paths: every CSV a command writes gets
a matching PNG next to it."""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _sibling(csv_path, suffix="png"):
    base, _ = os.path.splitext(csv_path)
    return f"{base}.{suffix}"


def render_training_curves(metrics_csv, out_png=None):
    """Loss curves plus the evaluation success-rate trace."""
    steps, totals, fms, fds, aes, ev_steps, ev_srs = [], [], [], [], [], [], []
    with open(metrics_csv, newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            totals.append(float(row["total"]))
            fms.append(float(row["fm"]))
            fds.append(float(row["fd"]))
            aes.append(float(row["ae"]))
            if row["eval_sr"] != "":
                ev_steps.append(int(row["step"]))
                ev_srs.append(float(row["eval_sr"]))
    out_png = out_png or _sibling(metrics_csv)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(steps, totals, label="total", lw=1.2)
    ax1.plot(steps, fms, label="fm", lw=0.8, alpha=0.7)
    ax1.plot(steps, fds, label="fd", lw=0.8, alpha=0.7)
    ax1.plot(steps, aes, label="ae", lw=0.8, alpha=0.7)
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    if ev_steps:
        ax2.plot(ev_steps, ev_srs, marker="o")
    ax2.set_ylim(-0.05, 1.05)
    ax2.set_xlabel("step")
    ax2.set_ylabel("eval success rate")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_ablation(ablation_csv, out_png=None):
    """Bar chart of best success rate per variant."""
    names, srs = [], []
    with open(ablation_csv, newline="") as f:
        for row in csv.DictReader(f):
            names.append(row["variant"])
            srs.append(float(row["best_sr"]))
    out_png = out_png or _sibling(ablation_csv)
    fig, ax = plt.subplots(figsize=(1.8 * max(len(names), 2) + 1, 4))
    ax.bar(names, srs, color="#4878cf")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("best success rate")
    for i, sr in enumerate(srs):
        ax.text(i, sr + 0.02, f"{sr:.2f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_bench(bench_csv, out_png=None):
    """Horizontal latency bars, fastest at the top."""
    names, lats = [], []
    with open(bench_csv, newline="") as f:
        for row in csv.DictReader(f):
            names.append(f"{row['model']} ({row['params']} params)")
            lats.append(float(row["latency_ms"]))
    out_png = out_png or _sibling(bench_csv)
    fig, ax = plt.subplots(figsize=(7, 0.6 * max(len(names), 2) + 1.5))
    ypos = range(len(names))[::-1]
    ax.barh(list(ypos), lats, color="#d65f5f")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(names, fontsize=9)
    ax.set_xlabel("median batch-1 latency (ms/chunk)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_eval(eval_csv, out_png=None):
    """Episode outcomes: success markers against episode length."""
    lengths, succ = [], []
    with open(eval_csv, newline="") as f:
        for row in csv.DictReader(f):
            lengths.append(int(row["length"]))
            succ.append(row["success"] in ("1", "True", "true"))
    out_png = out_png or _sibling(eval_csv)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    xs = range(len(lengths))
    colors = ["#2ca02c" if s else "#d62728" for s in succ]
    ax.bar(xs, lengths, color=colors)
    sr = sum(succ) / max(len(succ), 1)
    ax.set_title(f"success rate {sr:.2f} (green = success)")
    ax.set_xlabel("episode")
    ax.set_ylabel("length")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
