"""Pipeline driver.

Five subcommands cover the full workflow: ``train-diffusion`` fits the
denoiser, ``generate-positives`` pre-builds the synthetic-positive store,
``pretrain`` trains a contrastive encoder, ``evaluate`` runs frozen-encoder
probes, and ``analyze`` collates reports across run directories.

Every run directory has the same layout: ``config.txt`` (the exact
resolved settings, re-runnable via ``--config``), ``checkpoints/``,
``logs/`` and ``reports/``. Settings resolve as flag > config file >
preset. ``--workers`` is recorded for provenance; execution is sequential
and results never depend on its value.

Exit codes: 0 success, 2 usage error, 3 unmet precondition, 4 I/O or
format error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import kvformat
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentationPolicy, load_dataset
from .diffusion import DiffusionTrainConfig, UNetSpec, diffusion_checkpoint_meta, train_diffusion
from .encoder import EncoderSpec, ProjectorSpec, specs_to_meta
from .errors import (
    DegenerateEmbeddingError,
    InvalidArgumentError,
    InvalidStateError,
    NumericError,
    StratificationError,
)
from .evaluate import (
    DEFAULT_KNN_GRID,
    ProbeSchedule,
    export_embeddings,
    extract_features,
    knn_eval,
    linear_probe,
    similarity_analysis,
)
from .positives import generate_candidates, load_store
from .train import METHODS, TrainConfig, config_summary, train_ssl

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PRECONDITION = 3
EXIT_IO = 4
EXIT_NUMERIC = 5

PRESETS = ("desk", "paper")


# ---------------------------------------------------------------------------
# Run directories and config resolution.
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Resolved settings of one command invocation."""

    command: str
    out_dir: str
    seed: int = 0
    resume: bool = False
    workers: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.workers < 1:
            raise InvalidArgumentError(f"workers must be >= 1, got {self.workers}")

    def to_kv(self) -> dict:
        flat = {
            "command": self.command,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "resume": self.resume,
            "workers": self.workers,
        }
        for key, value in self.params.items():
            if key in flat:
                raise InvalidArgumentError(f"parameter name {key!r} collides with a run field")
            flat[key] = value
        return flat

    @classmethod
    def from_kv(cls, flat: dict) -> "RunConfig":
        params = {k: v for k, v in flat.items() if k not in ("command", "out_dir", "seed", "resume", "workers")}
        return cls(
            command=str(flat["command"]),
            out_dir=str(flat["out_dir"]),
            seed=int(flat.get("seed", 0)),
            resume=bool(flat.get("resume", False)),
            workers=int(flat.get("workers", 1)),
            params=params,
        )


def make_run_dir(out_dir: str | Path) -> Path:
    root = Path(out_dir)
    for sub in ("checkpoints", "logs", "reports"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def write_run_config(root: Path, run: RunConfig) -> None:
    kvformat.write_kv(root / "config.txt", run.to_kv())


def resolve_params(preset: dict, config_path: str | None, flags: dict, command: str) -> tuple[dict, int | None]:
    """Merge with flag > config file > preset precedence.

    Returns (params, seed from the config file if it named one). Unknown
    keys in the config file are rejected so typos surface instead of
    silently falling back to preset values. Keys a run derives and records
    for provenance (dataset digests) are recomputed, not merged.
    """
    merged = dict(preset)
    file_seed = None
    if config_path:
        loaded = kvformat.read_kv(config_path)
        declared = loaded.pop("command", None)
        if declared is not None and declared != command:
            raise InvalidArgumentError(f"config file {config_path} was written by {declared!r}, not {command!r}")
        if "seed" in loaded:
            file_seed = int(loaded.pop("seed"))
        for key in ("out_dir", "resume", "workers", "dataset_digest", "test_dataset_digest"):
            loaded.pop(key, None)
        unknown = set(loaded) - set(merged)
        if unknown:
            raise InvalidArgumentError(f"unknown keys in {config_path}: {sorted(unknown)}")
        merged.update(loaded)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged, file_seed


def _pick_seed(flag_seed: int | None, file_seed: int | None) -> int:
    if flag_seed is not None:
        return flag_seed
    if file_seed is not None:
        return file_seed
    return 0


def _jsonl_logger(path: Path):
    def log(record: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    return log


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _str_tuple(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _as_int_tuple(value) -> tuple[int, ...]:
    if isinstance(value, str):
        return _int_tuple(value)
    if isinstance(value, int):
        return (value,)
    return tuple(int(v) for v in value)


# ---------------------------------------------------------------------------
# train-diffusion.
# ---------------------------------------------------------------------------


def _diffusion_preset(name: str) -> dict:
    spec = UNetSpec.desk() if name == "desk" else UNetSpec.paper()
    cfg = DiffusionTrainConfig.desk() if name == "desk" else DiffusionTrainConfig.paper()
    return {
        **spec.to_meta(),
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "timesteps": cfg.timesteps,
        "beta_start": cfg.beta_start,
        "beta_end": cfg.beta_end,
        "flip_probability": cfg.flip_probability,
        "checkpoint_every": cfg.checkpoint_every,
        "dataset": "",
    }


def cmd_train_diffusion(args: argparse.Namespace) -> int:
    flags = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "timesteps": args.timesteps,
        "beta_start": args.beta_start,
        "beta_end": args.beta_end,
        "base_width": args.base_width,
        "channel_mults": _int_tuple(args.channel_mults) if args.channel_mults else None,
        "num_res_blocks": args.res_blocks,
        "attention_resolutions": _int_tuple(args.attention) if args.attention else None,
        "dropout": args.dropout,
        "checkpoint_every": args.checkpoint_every,
        "dataset": args.dataset,
    }
    params, file_seed = resolve_params(_diffusion_preset(args.preset), args.config, flags, "train-diffusion")
    if not params["dataset"]:
        raise InvalidArgumentError("a dataset is required (--dataset or config file)")
    dataset = load_dataset(params["dataset"])
    params["image_size"] = dataset.image_shape[0]
    params["in_channels"] = dataset.image_shape[2]
    params["dataset_digest"] = dataset.digest

    spec = UNetSpec.from_meta(params)
    config = DiffusionTrainConfig(
        epochs=int(params["epochs"]),
        batch_size=int(params["batch_size"]),
        lr=float(params["lr"]),
        timesteps=int(params["timesteps"]),
        beta_start=float(params["beta_start"]),
        beta_end=float(params["beta_end"]),
        flip_probability=float(params["flip_probability"]),
        seed=_pick_seed(args.seed, file_seed),
        checkpoint_every=int(params["checkpoint_every"]),
    )
    root = make_run_dir(args.out)
    run = RunConfig(
        command="train-diffusion",
        out_dir=str(root),
        seed=config.seed,
        resume=args.resume,
        workers=args.workers,
        params=params,
    )
    write_run_config(root, run)

    final_path = root / "checkpoints" / "diffusion.pt"
    start_state = None
    if args.resume:
        if final_path.exists():
            print(f"run already complete: {final_path} exists, nothing to do")
            return EXIT_OK
        snapshots = sorted((root / "checkpoints").glob("diffusion-epoch*.pt"))
        if snapshots:
            payload = load_checkpoint(snapshots[-1], expected_kind="diffusion")
            start_state = {
                "model_state": payload["model_state"],
                "optimizer_state": payload.get("optimizer_state"),
                "epoch": int(payload["epoch"]) + 1,
            }
            print(f"resuming from {snapshots[-1]} (epoch {payload['epoch']})")

    log_path = root / "logs" / "diffusion.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()
    meta = diffusion_checkpoint_meta(spec, config, dataset)

    def checkpoint_fn(epoch, model, optimizer):
        save_checkpoint(
            root / "checkpoints" / f"diffusion-epoch{epoch:05d}.pt",
            kind="diffusion",
            model_state=model.state_dict(),
            meta=meta,
            optimizer_state=optimizer.state_dict(),
            epoch=epoch,
        )

    model, _, history = train_diffusion(
        dataset,
        spec,
        config,
        log_fn=_jsonl_logger(log_path),
        checkpoint_fn=checkpoint_fn,
        start_state=start_state,
    )
    digest = save_checkpoint(
        final_path,
        kind="diffusion",
        model_state=model.state_dict(),
        meta=meta,
        epoch=config.epochs - 1,
    )
    kvformat.write_kv(
        root / "reports" / "diffusion.txt",
        {
            "epochs": config.epochs,
            "final_loss": history[-1]["loss"] if history else float("nan"),
            "checkpoint": str(final_path),
            "model_digest": digest,
        },
    )
    print(f"diffusion checkpoint: {final_path} (digest {digest[:12]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate-positives.
# ---------------------------------------------------------------------------


def _positives_preset(name: str) -> dict:
    return {
        "k": 8,
        "w": 0.1,
        "steps": 50 if name == "desk" else 200,
        "layer_ids": "",
        "chunk_size": 16,
        "redraw_per_step": True,
        "checkpoint": "",
        "dataset": "",
    }


def cmd_generate_positives(args: argparse.Namespace) -> int:
    flags = {
        "k": args.k,
        "w": args.w,
        "steps": args.steps,
        "layer_ids": args.layer_ids,
        "chunk_size": args.chunk_size,
        "checkpoint": args.checkpoint,
        "dataset": args.dataset,
    }
    params, file_seed = resolve_params(_positives_preset(args.preset), args.config, flags, "generate-positives")
    if not params["checkpoint"]:
        raise InvalidArgumentError("a diffusion checkpoint is required (--checkpoint or config file)")
    if not params["dataset"]:
        raise InvalidArgumentError("a dataset is required (--dataset or config file)")
    checkpoint_path = Path(params["checkpoint"])
    if not checkpoint_path.exists():
        raise FileNotFoundError(f"diffusion checkpoint not found: {checkpoint_path}")
    dataset = load_dataset(params["dataset"])
    params["dataset_digest"] = dataset.digest

    root = make_run_dir(args.out)
    seed = _pick_seed(args.seed, file_seed)
    run = RunConfig(
        command="generate-positives",
        out_dir=str(root),
        seed=seed,
        resume=args.resume,
        workers=args.workers,
        params=params,
    )
    write_run_config(root, run)

    layer_ids = _str_tuple(params["layer_ids"]) if params["layer_ids"] else None
    store = generate_candidates(
        checkpoint_path,
        dataset,
        root / "store",
        k=int(params["k"]),
        w=float(params["w"]),
        ddim_steps=int(params["steps"]),
        seed=seed,
        layer_ids=layer_ids,
        chunk_size=int(params["chunk_size"]),
        resume=args.resume,
        redraw_per_step=bool(params["redraw_per_step"]),
        progress_fn=lambda done, total: print(f"anchors {done}/{total}", file=sys.stderr),
    )
    kvformat.write_kv(
        root / "reports" / "store.txt",
        {
            "store": str(store.root),
            "n_anchors": store.n_anchors,
            "k": store.k,
            "blob_sha256": store.meta["blob_sha256"],
        },
    )
    print(f"store: {store.root} ({store.n_anchors} anchors x {store.k}, digest {store.meta['blob_sha256'][:12]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pretrain.
# ---------------------------------------------------------------------------


def _pretrain_preset(name: str, method: str) -> dict:
    base = TrainConfig.desk(method) if name == "desk" else TrainConfig.paper(method)
    params = config_summary(base)
    params.pop("seed")  # the seed lives at the run level, not in params
    params["aug_size"] = 0  # 0 means follow the dataset image size
    params["store"] = ""
    params["dataset"] = ""
    return params


def cmd_pretrain(args: argparse.Namespace) -> int:
    method = args.method or "simclr"
    flags = {
        "method": args.method,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "temperature": args.temperature,
        "lam": args.lam,
        "n_additional_positives": args.n_additional,
        "stop_gradient": True if args.stop_gradient else None,
        "symmetric_additional": True if args.symmetric_additional else None,
        "extra_via_momentum": True if args.extra_via_momentum else None,
        "lr": args.lr,
        "sgd_momentum": args.sgd_momentum,
        "weight_decay": args.weight_decay,
        "warmup_epochs": args.warmup_epochs,
        "queue_size": args.queue_size,
        "encoder_momentum": args.encoder_momentum,
        "checkpoint_every": args.checkpoint_every,
        "backbone": args.backbone,
        "encoder_width": args.encoder_width,
        "projector_hidden": args.projector_hidden,
        "projector_out": args.projector_out,
        "store": args.store,
        "dataset": args.dataset,
    }
    params, file_seed = resolve_params(_pretrain_preset(args.preset, method), args.config, flags, "pretrain")
    if not params["dataset"]:
        raise InvalidArgumentError("a dataset is required (--dataset or config file)")
    dataset = load_dataset(params["dataset"])
    params["dataset_digest"] = dataset.digest
    seed = _pick_seed(args.seed, file_seed)
    aug_size = int(params["aug_size"]) or dataset.image_shape[0]
    params["aug_size"] = aug_size

    config = TrainConfig(
        method=str(params["method"]),
        epochs=int(params["epochs"]),
        batch_size=int(params["batch_size"]),
        temperature=float(params["temperature"]),
        lam=float(params["lam"]),
        n_additional_positives=int(params["n_additional_positives"]),
        stop_gradient=bool(params["stop_gradient"]),
        symmetric_additional=bool(params["symmetric_additional"]),
        extra_via_momentum=bool(params["extra_via_momentum"]),
        lr=float(params["lr"]),
        sgd_momentum=float(params["sgd_momentum"]),
        weight_decay=float(params["weight_decay"]),
        warmup_epochs=int(params["warmup_epochs"]),
        queue_size=int(params["queue_size"]),
        encoder_momentum=float(params["encoder_momentum"]),
        seed=seed,
        checkpoint_every=int(params["checkpoint_every"]),
        encoder=EncoderSpec(backbone=str(params["backbone"]), base_width=int(params["encoder_width"])),
        projector=ProjectorSpec(hidden_dim=int(params["projector_hidden"]), output_dim=int(params["projector_out"])),
        augmentation=replace(AugmentationPolicy(), output_size=aug_size),
    )

    root = make_run_dir(args.out)
    run = RunConfig(
        command="pretrain", out_dir=str(root), seed=seed, resume=args.resume, workers=args.workers, params=params
    )
    write_run_config(root, run)

    final_path = root / "checkpoints" / "encoder.pt"
    if args.resume and final_path.exists():
        print(f"run already complete: {final_path} exists, nothing to do")
        return EXIT_OK
    log_path = root / "logs" / "metrics.jsonl"
    if log_path.exists():
        log_path.unlink()

    store = load_store(params["store"]) if params["store"] else None
    meta = {
        **config_summary(config),
        **specs_to_meta(config.encoder, config.projector),
        "dataset_digest": dataset.digest,
        "dataset_name": dataset.name,
        "store": str(params["store"]),
    }

    def checkpoint_fn(epoch, model):
        save_checkpoint(
            root / "checkpoints" / f"encoder-epoch{epoch:05d}.pt",
            kind="encoder",
            model_state=model.state_dict(),
            meta=meta,
            epoch=epoch,
        )

    model, history = train_ssl(
        config,
        dataset,
        store,
        log_fn=_jsonl_logger(log_path),
        checkpoint_fn=checkpoint_fn,
    )
    digest = save_checkpoint(
        final_path, kind="encoder", model_state=model.state_dict(), meta=meta, epoch=config.epochs - 1
    )
    last = history[-1]
    kvformat.write_kv(
        root / "reports" / "pretrain.txt",
        {
            "method": config.method,
            "epochs": config.epochs,
            "loss_contrastive": last["loss_contrastive"],
            "loss_additional": last["loss_additional"],
            "loss_total": last["loss_total"],
            "positive_cosine": last["positive_cosine"],
            "checkpoint": str(final_path),
            "model_digest": digest,
        },
    )
    print(f"encoder checkpoint: {final_path} (digest {digest[:12]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate.
# ---------------------------------------------------------------------------

PROBES = ("linear", "knn", "semi", "similarity", "export")


def _evaluate_preset(name: str) -> dict:
    return {
        "probe": "linear",
        "checkpoint": "",
        "dataset": "",
        "test_dataset": "",
        "store": "",
        "fraction": 0.1,
        "ks": tuple(DEFAULT_KNN_GRID),
        "knn_temperature": 0.07,
        "probe_epochs": 100 if name == "paper" else 40,
        "probe_lr": 10.0,
        "probe_batch_size": 256,
        "bins": 40,
        "n_samples": 0,
    }


def cmd_evaluate(args: argparse.Namespace) -> int:
    flags = {
        "probe": args.probe,
        "checkpoint": args.checkpoint,
        "dataset": args.dataset,
        "test_dataset": args.test_dataset,
        "store": args.store,
        "fraction": args.fraction,
        "ks": _int_tuple(args.ks) if args.ks else None,
        "knn_temperature": args.knn_temperature,
        "probe_epochs": args.probe_epochs,
        "probe_lr": args.probe_lr,
        "probe_batch_size": args.probe_batch_size,
        "bins": args.bins,
        "n_samples": args.n_samples,
    }
    params, file_seed = resolve_params(_evaluate_preset(args.preset), args.config, flags, "evaluate")
    probe = str(params["probe"])
    if probe not in PROBES:
        raise InvalidArgumentError(f"unknown probe {probe!r}; choices: {PROBES}")
    if not params["checkpoint"]:
        raise InvalidArgumentError("an encoder checkpoint is required (--checkpoint or config file)")
    if not params["dataset"]:
        raise InvalidArgumentError("a dataset is required (--dataset or config file)")
    checkpoint_path = Path(params["checkpoint"])
    if not checkpoint_path.exists():
        raise FileNotFoundError(f"encoder checkpoint not found: {checkpoint_path}")
    train_dataset = load_dataset(params["dataset"])
    params["dataset_digest"] = train_dataset.digest
    test_dataset = None
    if params["test_dataset"]:
        test_dataset = load_dataset(params["test_dataset"])
        params["test_dataset_digest"] = test_dataset.digest
    if probe in ("linear", "knn", "semi") and test_dataset is None:
        raise InvalidArgumentError(f"probe {probe!r} needs a held-out split (--test-dataset)")

    seed = _pick_seed(args.seed, file_seed)
    root = make_run_dir(args.out)
    run = RunConfig(
        command="evaluate", out_dir=str(root), seed=seed, resume=args.resume, workers=args.workers, params=params
    )
    write_run_config(root, run)

    if probe == "knn":
        train_bank = extract_features(checkpoint_path, train_dataset, split="train")
        test_bank = extract_features(checkpoint_path, test_dataset, split="test")
        result = knn_eval(train_bank, test_bank, _as_int_tuple(params["ks"]), float(params["knn_temperature"]))
        report = {"probe": "knn", "best_k": result.best_k, "best_accuracy": result.best_accuracy}
        for k in sorted(result.per_k):
            report[f"accuracy_k{k}"] = result.per_k[k]
        kvformat.write_kv(root / "reports" / "knn.txt", report)
        print(f"knn best accuracy {result.best_accuracy:.4f} at k={result.best_k}")
        return EXIT_OK

    if probe in ("linear", "semi"):
        schedule = ProbeSchedule(
            epochs=int(params["probe_epochs"]),
            batch_size=int(params["probe_batch_size"]),
            lr=float(params["probe_lr"]),
        )
        fraction = float(params["fraction"]) if probe == "semi" else 1.0
        result = linear_probe(
            train_dataset, test_dataset, schedule, label_fraction=fraction, seed=seed, model=checkpoint_path
        )
        report = {
            "probe": probe,
            "label_fraction": fraction,
            "n_train": result.n_train,
            "accuracy": result.accuracy,
            "train_accuracy": result.train_accuracy,
        }
        kvformat.write_kv(root / "reports" / f"{probe}.txt", report)
        print(f"{probe} probe accuracy {result.accuracy:.4f} ({result.n_train} labeled examples)")
        return EXIT_OK

    if probe == "similarity":
        store = load_store(params["store"]) if params["store"] else None
        n_samples = int(params["n_samples"]) or None
        original, additional = similarity_analysis(
            checkpoint_path,
            train_dataset,
            seed=seed,
            store=store,
            n_samples=n_samples,
            bins=int(params["bins"]),
        )
        report = {"probe": "similarity", **original.as_kv("original")}
        if additional is not None:
            report.update(additional.as_kv("additional"))
        kvformat.write_kv(root / "reports" / "similarity.txt", report)
        line = f"original-pair mean cosine {original.mean:.4f}"
        if additional is not None:
            line += f", additional-pair mean cosine {additional.mean:.4f}"
        print(line)
        return EXIT_OK

    bank = extract_features(checkpoint_path, train_dataset, split="train")
    out_path = root / "reports" / "embeddings.txt"
    export_embeddings(bank, out_path)
    print(f"wrote {len(bank)} embeddings of dim {bank.dim} to {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze.
# ---------------------------------------------------------------------------


def _load_run_summary(run_dir: Path) -> dict:
    """Pull the method, final metrics, and any report numbers from one run."""
    summary: dict = {}
    config_path = run_dir / "config.txt"
    if config_path.exists():
        config = kvformat.read_kv(config_path)
        for key in ("command", "method", "seed", "lam"):
            if key in config:
                summary[key] = config[key]
    metrics_path = run_dir / "logs" / "metrics.jsonl"
    if metrics_path.exists():
        last = None
        with open(metrics_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    last = json.loads(line)
        if last:
            for key in ("loss_contrastive", "loss_additional", "loss_total", "positive_cosine"):
                if key in last:
                    summary[f"final_{key}"] = last[key]
    reports_dir = run_dir / "reports"
    if reports_dir.exists():
        for report in sorted(reports_dir.glob("*.txt")):
            for key, value in kvformat.read_kv(report).items():
                summary[f"{report.stem}_{key}"] = value
    return summary


def cmd_analyze(args: argparse.Namespace) -> int:
    run_dirs = [Path(p) for p in args.runs]
    missing = [str(p) for p in run_dirs if not p.exists()]
    if missing:
        raise FileNotFoundError(f"run directories not found: {missing}")
    root = make_run_dir(args.out)
    run = RunConfig(
        command="analyze",
        out_dir=str(root),
        workers=args.workers,
        params={"runs": ",".join(str(p) for p in run_dirs)},
    )
    write_run_config(root, run)

    combined: dict = {"runs": len(run_dirs)}
    lines = []
    for run_dir in run_dirs:
        name = run_dir.name
        summary = _load_run_summary(run_dir)
        for key, value in summary.items():
            combined[f"{name}.{key}"] = value
        headline = [f"{name}:"]
        for key in ("method", "final_loss_total", "knn_best_accuracy", "linear_accuracy", "similarity_original_mean"):
            if key in summary:
                value = summary[key]
                headline.append(f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}")
        lines.append(" ".join(headline))
    kvformat.write_kv(root / "reports" / "analysis.txt", combined)
    for line in lines:
        print(line)
    print(f"combined report: {root / 'reports' / 'analysis.txt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entry point.
# ---------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser, needs_out: bool = True) -> None:
    if needs_out:
        sub.add_argument("--out", required=True, help="run directory (created if absent)")
    sub.add_argument("--config", default=None, help="key/value config file (often a previous run's config.txt)")
    sub.add_argument("--preset", choices=PRESETS, default="desk", help="baseline settings before overrides")
    sub.add_argument("--seed", type=int, default=None, help="global seed (default from preset/config)")
    sub.add_argument("--resume", action="store_true", help="continue or no-op if the run is already complete")
    sub.add_argument("--workers", type=int, default=1, help="recorded parallelism degree; results never depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clsp",
        description="Contrastive pretraining with diffusion-synthesized hard positives.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("train-diffusion", help="fit the denoising model on a dataset")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="dataset directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--beta-start", type=float, default=None)
    p.add_argument("--beta-end", type=float, default=None)
    p.add_argument("--base-width", type=int, default=None)
    p.add_argument("--channel-mults", default=None, help="comma list, e.g. 1,2,2")
    p.add_argument("--res-blocks", type=int, default=None)
    p.add_argument("--attention", default=None, help="comma list of attention resolutions")
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(func=cmd_train_diffusion)

    p = subparsers.add_parser("generate-positives", help="pre-generate the synthetic-positive store")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="diffusion checkpoint path")
    p.add_argument("--dataset", default=None, help="dataset directory")
    p.add_argument("--k", type=int, default=None, help="candidates per anchor")
    p.add_argument("--w", type=float, default=None, help="interpolation weight toward the random trajectory")
    p.add_argument("--steps", type=int, default=None, help="DDIM steps")
    p.add_argument("--layer-ids", default=None, help="comma list of hooked layers (default: last encoder stage)")
    p.add_argument("--chunk-size", type=int, default=None, help="anchors processed per chunk")
    p.set_defaults(func=cmd_generate_positives)

    p = subparsers.add_parser("pretrain", help="contrastive pretraining")
    _add_common(p)
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--dataset", default=None, help="dataset directory")
    p.add_argument("--store", default=None, help="candidate store directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--lam", type=float, default=None, help="additional-positive loss weight")
    p.add_argument("--n-additional", type=int, default=None, help="synthetic positives drawn per anchor")
    p.add_argument("--stop-gradient", action="store_true", default=None)
    p.add_argument("--symmetric-additional", action="store_true", default=None)
    p.add_argument("--extra-via-momentum", action="store_true", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--sgd-momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--warmup-epochs", type=int, default=None)
    p.add_argument("--queue-size", type=int, default=None)
    p.add_argument("--encoder-momentum", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--backbone", choices=("resnet18", "tiny"), default=None)
    p.add_argument("--encoder-width", type=int, default=None)
    p.add_argument("--projector-hidden", type=int, default=None)
    p.add_argument("--projector-out", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = subparsers.add_parser("evaluate", help="frozen-encoder probes and reports")
    _add_common(p)
    p.add_argument("--probe", choices=PROBES, default=None)
    p.add_argument("--checkpoint", default=None, help="encoder checkpoint path")
    p.add_argument("--dataset", default=None, help="training/reference split directory")
    p.add_argument("--test-dataset", default=None, help="held-out split directory")
    p.add_argument("--store", default=None, help="candidate store (similarity probe)")
    p.add_argument("--fraction", type=float, default=None, help="labeled fraction for the semi probe")
    p.add_argument("--ks", default=None, help="comma list of kNN neighbor counts")
    p.add_argument("--knn-temperature", type=float, default=None)
    p.add_argument("--probe-epochs", type=int, default=None)
    p.add_argument("--probe-lr", type=float, default=None)
    p.add_argument("--probe-batch-size", type=int, default=None)
    p.add_argument("--bins", type=int, default=None, help="similarity histogram bins")
    p.add_argument("--n-samples", type=int, default=None, help="similarity subset size (0 = all)")
    p.set_defaults(func=cmd_evaluate)

    p = subparsers.add_parser("analyze", help="collate metrics and reports across run directories")
    _add_common(p)
    p.add_argument("runs", nargs="+", help="run directories to summarize")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidStateError, StratificationError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (NumericError, DegenerateEmbeddingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
