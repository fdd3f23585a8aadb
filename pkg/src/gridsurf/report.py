"""Machine-readable reports and their companion figures.

Every numeric artifact is written twice: a delimited CSV record stream for
scripting, and a rendered matplotlib figure next to it for eyeballing.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_csv(path, rows: list[dict], fieldnames=None):
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_progress(out_dir, records: list[dict]):
    """Training log: progress.csv plus a loss/PSNR curve figure."""
    out = Path(out_dir)
    write_csv(out / "progress.csv", records, ["iter", "loss", "psnr"])
    if not records:
        return
    it = np.array([r["iter"] for r in records], dtype=float)
    loss = np.array([r["loss"] for r in records], dtype=float)
    ps = np.array([r.get("psnr", np.nan) for r in records], dtype=float)
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    ax.plot(it, loss, lw=1.0, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean ray loss", color="tab:blue")
    ax.set_yscale("log")
    has_psnr = np.isfinite(ps).any()
    if has_psnr:
        ax2 = ax.twinx()
        m = np.isfinite(ps)
        ax2.plot(it[m], ps[m], lw=1.2, color="tab:orange")
        ax2.set_ylabel("held-out PSNR [dB]", color="tab:orange")
    fig.tight_layout()
    fig.savefig(out / "loss_curve.png", dpi=130)
    plt.close(fig)


def write_level_stability(out_dir, levels, matrix: np.ndarray,
                          stem: str = "level_stability"):
    out = Path(out_dir)
    rows = []
    for i, li in enumerate(levels):
        for j, lj in enumerate(levels):
            rows.append({"level_a": li, "level_b": lj,
                         "psnr_db": float(matrix[i, j])})
    write_csv(out / f"{stem}.csv", rows, ["level_a", "level_b", "psnr_db"])
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(levels)), [f"{l:g}" for l in levels])
    ax.set_yticks(range(len(levels)), [f"{l:g}" for l in levels])
    ax.set_xlabel("level set")
    ax.set_ylabel("level set")
    for i in range(len(levels)):
        for j in range(len(levels)):
            ax.text(j, i, f"{matrix[i, j]:.0f}", ha="center", va="center",
                    color="white", fontsize=8)
    fig.colorbar(im, ax=ax, label="pairwise PSNR [dB]")
    fig.tight_layout()
    fig.savefig(out / f"{stem}.png", dpi=130)
    plt.close(fig)


def write_eval_report(out_dir, rows: list[dict]):
    """Key/value metric records + a bar figure of the PSNR entries."""
    out = Path(out_dir)
    write_csv(out / "eval.csv", rows, ["metric", "value"])
    ps = [(r["metric"], r["value"]) for r in rows if "psnr" in r["metric"]]
    if ps:
        fig, ax = plt.subplots(figsize=(5.4, 3.2))
        names = [p[0] for p in ps]
        vals = [p[1] for p in ps]
        ax.bar(range(len(ps)), vals, color="tab:blue")
        ax.set_xticks(range(len(ps)), names, rotation=20, ha="right",
                      fontsize=8)
        ax.set_ylabel("PSNR [dB]")
        fig.tight_layout()
        fig.savefig(out / "eval.png", dpi=130)
        plt.close(fig)


def write_compare_report(out_dir, methods: dict):
    """Side-by-side method table + figure.

    `methods` maps name -> dict of metrics (psnr, min_pairwise_level_psnr,
    mean_evals_surface, ...); missing entries are allowed.
    """
    out = Path(out_dir)
    keys = sorted({k for m in methods.values() for k in m})
    rows = []
    for name, m in methods.items():
        row = {"method": name}
        row.update({k: m.get(k, "") for k in keys})
        rows.append(row)
    write_csv(out / "compare.csv", rows, ["method"] + keys)

    fig, axes = plt.subplots(1, 2, figsize=(8.6, 3.4))
    names = list(methods.keys())
    ps = [methods[n].get("psnr_heldout", np.nan) for n in names]
    axes[0].bar(range(len(names)), ps, color="tab:blue")
    axes[0].set_xticks(range(len(names)), names)
    axes[0].set_ylabel("held-out PSNR [dB]")
    stab = [methods[n].get("min_pairwise_level_psnr", np.nan) for n in names]
    axes[1].bar(range(len(names)), stab, color="tab:orange")
    axes[1].set_xticks(range(len(names)), names)
    axes[1].set_ylabel("min pairwise level PSNR [dB]")
    fig.tight_layout()
    fig.savefig(out / "compare.png", dpi=130)
    plt.close(fig)


def write_verify_report(out_dir, rows: list[dict]):
    write_csv(Path(out_dir) / "verify.csv", rows,
              ["check", "value", "threshold", "status"])
