#!/usr/bin/env python3
"""Plot Hits@10 and Recall@10 curves written by `dir-tir run`.

    scripts/plot_curves.py out/curves*.csv -o curves.png
"""

import argparse
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def label(path: Path) -> str:
    m = re.search(r"_d(\d+)_i(\d+)$", path.stem)
    return f"({m.group(1)},{m.group(2)})" if m else path.stem


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("curves", nargs="+", type=Path)
    ap.add_argument("-o", "--out", type=Path, default=Path("curves.png"))
    args = ap.parse_args()

    fig, (ax_hits, ax_recall) = plt.subplots(1, 2, figsize=(11, 4), sharex=True)
    for path in sorted(args.curves):
        df = pd.read_csv(path)
        ax_hits.plot(df["round"], df["mean_hits10"], marker="o", ms=3, label=label(path))
        ax_recall.plot(df["round"], df["mean_recall10"], marker="o", ms=3, label=label(path))
    for ax, title in ((ax_hits, "Hits@10"), (ax_recall, "Recall@10")):
        ax.set_title(title)
        ax.set_xlabel("round")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
    ax_hits.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
