"""PNG figures for bench reports and training histories."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _bars(ax, rows, value, label):
    names = [r.method for r in rows]
    vals = [getattr(r, value) or 0.0 for r in rows]
    ax.barh(range(len(rows)), vals, color="#4a7ab0")
    ax.set_yticks(range(len(rows)), names)
    ax.invert_yaxis()
    ax.set_xlabel(label)
    for i, v in enumerate(vals):
        ax.text(v, i, f" {v:.3f}", va="center", fontsize=8)


def plot_report(report, out_dir) -> list[str]:
    paths = []
    groups = list(dict.fromkeys(r.group for r in report.rows))
    for group in groups:
        rows = [r for r in report.rows if r.group == group and r.bpb is not None]
        if not rows:
            continue
        fig, axes = plt.subplots(1, 3, figsize=(13, 0.5 * len(rows) + 1.8))
        _bars(axes[0], rows, "bpb", "bits per base")
        _bars(axes[1], rows, "encode_s", "encode seconds")
        _bars(axes[2], rows, "decode_s", "decode seconds")
        for ax in axes[1:]:
            ax.set_yticklabels([])
        fig.suptitle(f"{group}: {report.dataset}")
        fig.tight_layout()
        path = os.path.join(out_dir, f"bench_{_slug(group)}.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    scan = [r for r in report.rows if r.group == "workers scan"]
    if scan:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r.config["workers"] for r in scan], [r.decode_s for r in scan], "o-", label="decode")
        ax.plot([r.config["workers"] for r in scan], [r.encode_s for r in scan], "s--", label="encode")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("lanes (groups batched per step)")
        ax.set_ylabel("wall seconds")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "workers_scan.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_history(history: list, path) -> str:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [h["train_loss"] for h in history], label="train loss (nats/token)")
    vals = [(h["epoch"], h["val_bpb"]) for h in history if "val_bpb" in h]
    if vals:
        ys = [v if not isinstance(v, list) else sum(v) / len(v) for _, v in vals]
        ax.plot([e for e, _ in vals], ys, "o-", label="validation bpb")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in s).strip("_").lower()
