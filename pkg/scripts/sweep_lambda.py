"""Additional-positive weight ablation over a finished desk experiment.

Reuses the dataset and candidate store produced by run_desk_experiment.py
and pretrains clsp-simclr at several values of the extra-loss weight for
one seed, reporting kNN accuracy and the positive-pair cosine shift per
value. lam = 0 reproduces plain simclr exactly and anchors the sweep.

Usage:
    python scripts/sweep_lambda.py --experiment runs/desk [--out runs/lambda]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from clsp import kvformat
from clsp.cli import main as clsp_main

LAMBDAS = (0.0, 0.5, 1.0, 2.0)


def run(argv: list[str]) -> None:
    code = clsp_main(argv)
    if code != 0:
        raise SystemExit(f"command failed with exit {code}: {' '.join(argv)}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--experiment", required=True, help="output directory of run_desk_experiment.py")
    parser.add_argument("--out", default=None, help="sweep output directory (default: <experiment>/lambda-sweep)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    experiment = Path(args.experiment)
    train_dir = experiment / "data" / "train"
    test_dir = experiment / "data" / "test"
    store_dir = experiment / "positives" / "store"
    for needed in (train_dir / "manifest.txt", test_dir / "manifest.txt", store_dir / "manifest.txt"):
        if not needed.exists():
            raise SystemExit(f"missing {needed}; run run_desk_experiment.py first")
    out = Path(args.out) if args.out else experiment / "lambda-sweep"
    out.mkdir(parents=True, exist_ok=True)

    summary: dict = {"seed": args.seed}
    for lam in LAMBDAS:
        tag = f"lam{lam:g}"
        run_dir = out / tag
        run([
            "pretrain", "--out", str(run_dir), "--preset", "desk", "--method", "clsp-simclr",
            "--dataset", str(train_dir), "--store", str(store_dir),
            "--lam", str(lam), "--seed", str(args.seed), "--resume",
        ])
        knn_dir = out / f"{tag}-knn"
        run([
            "evaluate", "--out", str(knn_dir), "--probe", "knn",
            "--checkpoint", str(run_dir / "checkpoints" / "encoder.pt"),
            "--dataset", str(train_dir), "--test-dataset", str(test_dir),
        ])
        sim_dir = out / f"{tag}-sim"
        run([
            "evaluate", "--out", str(sim_dir), "--probe", "similarity",
            "--checkpoint", str(run_dir / "checkpoints" / "encoder.pt"),
            "--dataset", str(train_dir), "--store", str(store_dir), "--seed", str(args.seed),
        ])
        knn = kvformat.read_kv(knn_dir / "reports" / "knn.txt")
        sim = kvformat.read_kv(sim_dir / "reports" / "similarity.txt")
        summary[f"{tag}_knn_accuracy"] = knn["best_accuracy"]
        summary[f"{tag}_original_cosine"] = sim["original_mean"]
        summary[f"{tag}_additional_cosine"] = sim["additional_mean"]
        print(
            f"lam={lam:g}: knn {knn['best_accuracy']:.4f}, "
            f"original cosine {sim['original_mean']:.4f}, additional cosine {sim['additional_mean']:.4f}"
        )

    kvformat.write_kv(out / "summary.txt", summary)
    print(f"summary: {out / 'summary.txt'}")


if __name__ == "__main__":
    main()
