"""Plot per-step constraint violation from an `smpc run` output directory.

    python scripts/plot_per_step.py out/table1 --level 0.8061 -o violation.png
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    k = [int(r["k"]) for r in rows]
    viol = [1.0 - float(r["p_hat"]) for r in rows]
    err = [float(r["p_stderr"]) for r in rows]
    return k, viol, err


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--level", type=float, help="chance constraint level p")
    parser.add_argument("-o", "--output", type=Path, default=Path("violation.png"))
    args = parser.parse_args()

    files = sorted(args.out_dir.glob("*/per_step.csv"))
    if not files:
        files = [args.out_dir / "per_step.csv"]

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in files:
        k, viol, err = load(path)
        label = path.parent.name if path.parent != args.out_dir else "controller"
        ax.errorbar(k, viol, yerr=err, label=label, capsize=2, linewidth=1)
    if args.level is not None:
        ax.axhline(1.0 - args.level, color="k", linestyle="--", linewidth=1, label="1 - p")
    ax.set_xlabel("time step k")
    ax.set_ylabel("empirical P((x, u) not in Z)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)


if __name__ == "__main__":
    main()
