#!/usr/bin/env python3
"""Plot result tables produced by the kte CLI suites.

Usage:
  python3 scripts/plot_results.py results/fit_convergence.csv
  python3 scripts/plot_results.py results/power.csv --alpha 0.05
  python3 scripts/plot_results.py results/calibration.csv --alpha 0.05
"""

import argparse
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def plot_fit_convergence(df: pd.DataFrame, out: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for stat, g in df.groupby("statistic"):
        med = g.groupby("grid")["value"].median()
        ax.loglog(med.index, med.values, marker="o", label=stat)
    ax.set_xlabel("sample size n")
    ax.set_ylabel("median RKHS embedding error")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_rejections(df: pd.DataFrame, alpha: float, out: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    rates = (
        df.assign(reject=(df["value"] <= alpha).astype(float))
        .groupby(["statistic", "grid"])["reject"]
        .mean()
        .reset_index()
    )
    if rates["grid"].nunique() > 1:
        for stat, g in rates.groupby("statistic"):
            ax.plot(g["grid"], g["reject"], marker="o", label=stat)
        ax.set_xlabel("effect size")
    else:
        per_suite = (
            df.assign(reject=(df["value"] <= alpha).astype(float))
            .groupby(["suite", "statistic"])["reject"]
            .mean()
            .reset_index()
        )
        labels = per_suite["suite"] + ":" + per_suite["statistic"]
        ax.bar(labels, per_suite["reject"])
        ax.tick_params(axis="x", rotation=45, labelsize=7)
    ax.axhline(alpha, color="grey", linestyle="--", linewidth=1)
    ax.set_ylabel(f"rejection rate at alpha={alpha}")
    ax.set_ylim(0, 1.05)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv", help="results CSV written by the kte CLI")
    parser.add_argument("--alpha", type=float, default=0.05)
    parser.add_argument("--out", default=None, help="output PNG (default: alongside the CSV)")
    args = parser.parse_args()

    df = pd.read_csv(args.csv)
    out = args.out or os.path.splitext(args.csv)[0] + ".png"
    if (df["suite"] == "fit_convergence").all():
        plot_fit_convergence(df, out)
    else:
        plot_rejections(df, args.alpha, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
