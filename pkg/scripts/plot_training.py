#!/usr/bin/env python3
"""Plot the training/evaluation return curves from a metrics CSV.

    python scripts/plot_training.py runs/metrics_<hash>.csv -o curves.png
"""

import argparse

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("metrics")
    ap.add_argument("-o", "--output", default="training_curves.png")
    args = ap.parse_args()
    rows = np.genfromtxt(args.metrics, delimiter=",", names=True)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(rows["iteration"], rows["mean_return"], label="training return")
    ax1.plot(rows["iteration"], rows["eval_return"], label="evaluation return")
    ax1.set_ylabel("cumulative return")
    ax1.legend()
    ax2.semilogy(rows["iteration"], rows["lr"], label="actor lr")
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("iteration")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
