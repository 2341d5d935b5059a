"""End-to-end desk-scale experiment on the procedural two-class dataset.

Trains the desk diffusion preset, pre-generates k=4 synthetic positives at
w=0.1, pretrains simclr and clsp-simclr over three seeds, then reports
mean kNN accuracy and the positive-pair similarity shift. Roughly 40
minutes on one CPU core; --fast shrinks everything to a minute-scale
smoke run.

Usage:
    python scripts/run_desk_experiment.py --out runs/desk [--fast]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from clsp import kvformat
from clsp.cli import main as clsp_main
from clsp.data import generate_toy_dataset, save_dataset

METHODS = ("simclr", "clsp-simclr")
SEEDS = (0, 1, 2)


def run(argv: list[str]) -> None:
    code = clsp_main(argv)
    if code != 0:
        raise SystemExit(f"command failed with exit {code}: {' '.join(argv)}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--fast", action="store_true", help="tiny smoke-scale version")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    n_per_class = 8 if args.fast else 250
    test_per_class = 4 if args.fast else 100
    train_dir = out / "data" / "train"
    test_dir = out / "data" / "test"
    if not (train_dir / "manifest.txt").exists():
        save_dataset(generate_toy_dataset(n_per_class, 32, seed=0, name="toy-train"), train_dir)
        save_dataset(generate_toy_dataset(test_per_class, 32, seed=1, name="toy-test"), test_dir)

    diffusion_dir = out / "diffusion"
    diffusion_args = [
        "train-diffusion", "--out", str(diffusion_dir), "--dataset", str(train_dir),
        "--preset", "desk", "--seed", "0", "--resume",
    ]
    if args.fast:
        diffusion_args += ["--epochs", "3", "--batch-size", "8", "--timesteps", "32",
                           "--base-width", "8", "--channel-mults", "1,2", "--attention", ""]
    run(diffusion_args)

    store_dir = out / "positives"
    store_args = [
        "generate-positives", "--out", str(store_dir),
        "--checkpoint", str(diffusion_dir / "checkpoints" / "diffusion.pt"),
        "--dataset", str(train_dir), "--k", "4", "--w", "0.1", "--seed", "0",
        "--chunk-size", "25", "--resume",
    ]
    if args.fast:
        store_args += ["--steps", "4", "--k", "2"]
    run(store_args)

    epochs = "3" if args.fast else "50"
    run_dirs = {}
    for method in METHODS:
        for seed in SEEDS:
            run_dir = out / f"{method}-seed{seed}"
            run_dirs[(method, seed)] = run_dir
            pretrain_args = [
                "pretrain", "--out", str(run_dir), "--method", method,
                "--dataset", str(train_dir), "--preset", "desk",
                "--epochs", epochs, "--seed", str(seed), "--resume",
            ]
            if method == "clsp-simclr":
                pretrain_args += ["--store", str(store_dir / "store")]
            if args.fast:
                pretrain_args += ["--batch-size", "8", "--warmup-epochs", "1",
                                  "--encoder-width", "8", "--projector-hidden", "32",
                                  "--projector-out", "16"]
            run(pretrain_args)

            checkpoint = run_dir / "checkpoints" / "encoder.pt"
            run(["evaluate", "--out", str(run_dir / "eval-knn"), "--probe", "knn",
                 "--checkpoint", str(checkpoint), "--dataset", str(train_dir),
                 "--test-dataset", str(test_dir)] + (["--ks", "3,5"] if args.fast else []))
            sim_args = ["evaluate", "--out", str(run_dir / "eval-sim"), "--probe", "similarity",
                        "--checkpoint", str(checkpoint), "--dataset", str(train_dir)]
            if method == "clsp-simclr":
                sim_args += ["--store", str(store_dir / "store")]
            run(sim_args)

    accuracy = {m: [] for m in METHODS}
    original_mean = {m: [] for m in METHODS}
    additional_mean = []
    for (method, seed), run_dir in run_dirs.items():
        knn = kvformat.read_kv(run_dir / "eval-knn" / "reports" / "knn.txt")
        accuracy[method].append(knn["best_accuracy"])
        sim = kvformat.read_kv(run_dir / "eval-sim" / "reports" / "similarity.txt")
        original_mean[method].append(sim["original_mean"])
        if "additional_mean" in sim:
            additional_mean.append(sim["additional_mean"])

    print()
    summary = {}
    for method in METHODS:
        acc = float(np.mean(accuracy[method]))
        orig = float(np.mean(original_mean[method]))
        summary[f"{method}_knn_mean"] = acc
        summary[f"{method}_original_cosine_mean"] = orig
        print(f"{method}: kNN accuracy per seed {accuracy[method]} -> mean {acc:.4f}; "
              f"original-pair cosine mean {orig:.4f}")
    if additional_mean:
        add = float(np.mean(additional_mean))
        summary["clsp-simclr_additional_cosine_mean"] = add
        print(f"clsp-simclr: additional-pair cosine mean {add:.4f}")
    kvformat.write_kv(out / "summary.txt", summary)
    print(f"summary: {out / 'summary.txt'}")


if __name__ == "__main__":
    main()
