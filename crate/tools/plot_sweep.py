#!/usr/bin/env python3
"""Plot mean +/- sd per metric from a sweep.csv written by `spo-mix sweep`."""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv")
    ap.add_argument("--x", choices=["mu_zt", "mu_xy"], default="mu_zt")
    ap.add_argument("--out", default="sweep.png")
    args = ap.parse_args()

    series = defaultdict(list)
    with open(args.csv, newline="") as f:
        for row in csv.DictReader(f):
            if row["mean"] == "" or row[args.x] == "":
                continue
            sd = float(row["sd"]) if row["sd"] else 0.0
            series[row["metric"]].append((float(row[args.x]), float(row["mean"]), sd))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for metric, pts in sorted(series.items()):
        pts.sort()
        xs, ms, sds = zip(*pts)
        ax.errorbar(xs, ms, yerr=sds, marker="o", capsize=3, label=metric)
    ax.set_xlabel(args.x)
    ax.set_ylabel("error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
