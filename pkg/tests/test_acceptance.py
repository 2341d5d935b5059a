"""End-to-end acceptance checks.

Each check records one PASS/FAIL verdict line; conftest prints the
collected lines in the terminal summary so they are visible regardless of
capture mode. The two desk-experiment tests share one module-scoped
pipeline run (diffusion training, candidate store, six pretraining runs)
and take the bulk of the runtime; everything else is seconds to a couple
of minutes.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import scipy.special
import scipy.stats
import torch
from torch import nn

from clsp.checkpoint import state_digest
from clsp.cli import main as clsp_main
from clsp.data import generate_toy_dataset, save_dataset
from clsp.diffusion import (
    AnchorFeatureProvider,
    FeatureHook,
    UNet,
    UNetSpec,
    ddim_sample,
    make_schedule,
    q_sample,
)
from clsp.errors import CorruptStoreError
from clsp.evaluate import FeatureBank, knn_predict
from clsp.positives import generate_candidates_from_model, load_store, sample_positive
from clsp.seeding import numpy_rng, torch_generator
from clsp.train import (
    MomentumQueue,
    TrainConfig,
    additional_positive_loss,
    info_nce_loss,
    moco_contrastive_loss,
    total_loss,
    train_ssl,
)


VERDICTS: list[str] = []


def _report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, f"{name}: {detail}"


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# 1. Contrastive losses against brute-force enumeration.
# ---------------------------------------------------------------------------


def _nce_reference(z1: np.ndarray, z2: np.ndarray, tau: float) -> float:
    z = np.concatenate([z1, z2])
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    sims = z @ z.T / tau
    n2 = len(z)
    losses = []
    for i in range(n2):
        pos = (i + len(z1)) % n2
        others = [j for j in range(n2) if j != i]
        losses.append(scipy.special.logsumexp(sims[i, others]) - sims[i, pos])
    return float(np.mean(losses))


def _moco_reference(q: np.ndarray, k: np.ndarray, queue: np.ndarray, tau: float) -> float:
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    kn = k / np.linalg.norm(k, axis=1, keepdims=True)
    losses = []
    for i in range(len(qn)):
        logits = np.concatenate([[qn[i] @ kn[i]], queue @ qn[i]]) / tau
        losses.append(scipy.special.logsumexp(logits) - logits[0])
    return float(np.mean(losses))


def test_contrastive_losses_match_brute_force():
    rng = np.random.default_rng(42)
    start = time.time()
    worst = 0.0
    for _ in range(50):
        n = int(rng.choice([2, 4, 8]))
        d = int(rng.integers(3, 17))
        z1 = rng.standard_normal((n, d))
        z2 = rng.standard_normal((n, d))
        queue = _unit_rows(rng, int(rng.integers(4, 33)), d)
        for tau in (0.07, 0.2, 1.0):
            ours = info_nce_loss(torch.from_numpy(z1), torch.from_numpy(z2), temperature=tau).item()
            worst = max(worst, abs(ours - _nce_reference(z1, z2, tau)))
            ours = moco_contrastive_loss(
                torch.from_numpy(z1), torch.from_numpy(z2), torch.from_numpy(queue), temperature=tau
            ).item()
            worst = max(worst, abs(ours - _moco_reference(z1, z2, queue, tau)))
    _report(
        "loss-oracle",
        worst < 1e-6,
        f"max abs err {worst:.2e} over 50 batches x 3 temperatures ({time.time() - start:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 2. Composite-loss gradients against central finite differences.
# ---------------------------------------------------------------------------


def test_total_loss_gradients_match_finite_differences():
    start = time.time()
    torch.manual_seed(0)
    encoder = nn.Sequential(nn.Linear(6, 8), nn.Tanh(), nn.Linear(8, 4)).double()
    x1, x2, x3 = (torch.randn(5, 6, dtype=torch.float64) for _ in range(3))

    def loss_for(lam: float) -> torch.Tensor:
        z1, z2, z3 = encoder(x1), encoder(x2), encoder(x3)
        return total_loss(info_nce_loss(z1, z2, temperature=0.2), additional_positive_loss(z2, z3), lam)

    worst = 0.0
    for lam in (0.0, 0.5, 1.0):
        params = [p for p in encoder.parameters()]
        for p in params:
            p.grad = None
        loss_for(lam).backward()
        step = 1e-6
        for p in params:
            flat = p.data.view(-1)
            grad = p.grad.view(-1)
            for idx in range(flat.numel()):
                kept = flat[idx].item()
                flat[idx] = kept + step
                upper = loss_for(lam).item()
                flat[idx] = kept - step
                lower = loss_for(lam).item()
                flat[idx] = kept
                fd = (upper - lower) / (2 * step)
                rel = abs(fd - grad[idx].item()) / max(abs(fd), abs(grad[idx].item()), 1e-8)
                worst = max(worst, rel)
    _report(
        "gradient-check",
        worst < 1e-4,
        f"max rel err {worst:.2e} across lambda in (0, 0.5, 1.0) ({time.time() - start:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 3. Noise schedule and forward process.
# ---------------------------------------------------------------------------


def test_schedule_and_forward_process():
    start = time.time()
    schedule = make_schedule(1000, 1e-4, 0.02)
    checks = {
        "beta endpoints": math.isclose(float(schedule.beta[0]), 1e-4, rel_tol=1e-12)
        and math.isclose(float(schedule.beta[-1]), 0.02, rel_tol=1e-12),
    }
    serial = []
    running = 1.0
    for beta in schedule.beta.tolist():
        running *= 1.0 - beta
        serial.append(running)
    product_err = float(np.max(np.abs(schedule.alpha_bar - np.array(serial))))
    checks["alpha_bar product"] = product_err < 1e-12
    ab = schedule.alpha_bar
    checks["alpha_bar monotone in (0,1)"] = bool(np.all(np.diff(ab) < 0) and 0 < ab[-1] and ab[0] < 1)

    x0 = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    eps = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    t = 350
    expected = math.sqrt(ab[t]) * x0 + math.sqrt(1 - ab[t]) * eps
    checks["q_sample closed form"] = torch.equal(q_sample(x0, t, eps, schedule), expected)
    checks["q_sample zero-noise degenerate"] = torch.equal(
        q_sample(x0, t, torch.zeros_like(eps), schedule), math.sqrt(ab[t]) * x0
    )
    checks["q_sample zero-signal degenerate"] = torch.equal(
        q_sample(torch.zeros_like(x0), t, eps, schedule), math.sqrt(1 - ab[t]) * eps
    )
    a, b = 0.3, -1.7
    checks["q_sample linear"] = torch.allclose(
        q_sample(a * x0 + b * x0, t, a * eps + b * eps, schedule),
        (a + b) * q_sample(x0, t, eps, schedule),
        rtol=1e-12,
        atol=1e-12,
    )
    failed = [name for name, ok in checks.items() if not ok]
    _report(
        "schedule-suite",
        not failed,
        f"product err {product_err:.1e}; failed: {failed or 'none'} ({time.time() - start:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 4. Hook algebra through the full sampler on the desk-scale network.
# ---------------------------------------------------------------------------


def test_hook_algebra_through_full_sampler():
    start = time.time()
    torch.manual_seed(0)
    spec = UNetSpec.desk()
    model = UNet(spec).eval()
    schedule = make_schedule(200, 1e-4, 0.02)
    steps = 50
    x_init = torch.randn(1, 3, 32, 32, generator=torch_generator(0, "acceptance-hooks"))

    plain = ddim_sample(model, schedule, steps, hooks=(), rng=None, x_init=x_init)

    anchor_x = torch.rand(1, 3, 32, 32) * 2.0 - 1.0
    provider = AnchorFeatureProvider(model, anchor_x, spec.hook_ids, schedule, seed=1)
    identity = ddim_sample(model, schedule, steps, provider.hooks(1.0), rng=None, x_init=x_init)
    bit_identical = torch.equal(identity, plain)

    probe = FeatureHook(layer_id="down1", mode="capture")
    ddim_sample(model, schedule, 1, [probe], rng=None, x_init=x_init)
    shape = next(iter(probe.captured.values())).shape
    anchor = torch.randn(shape)
    substitute = FeatureHook(layer_id="down1", mode="interpolate", w=0.0, anchor_features=anchor)
    capture = FeatureHook(layer_id="down1", mode="capture")
    ddim_sample(model, schedule, steps, [substitute, capture], rng=None, x_init=x_init)
    substituted = len(capture.captured) == steps and all(
        torch.equal(v, anchor) for v in capture.captured.values()
    )

    mask = FeatureHook(layer_id="down1", mode="mask")
    probe2 = FeatureHook(layer_id="down1", mode="capture")
    ddim_sample(model, schedule, steps, [mask, probe2], rng=None, x_init=x_init)
    masked = all(torch.equal(v, torch.zeros_like(v)) for v in probe2.captured.values())

    ok = bit_identical and substituted and masked
    _report(
        "hook-algebra",
        ok,
        f"w=1 bit-identical {bit_identical}, w=0 substitution {substituted}, mask zeros {masked} "
        f"({time.time() - start:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 5. Candidate store integrity and draw uniformity.
# ---------------------------------------------------------------------------


def test_store_integrity_and_draws(tiny_unet, tiny_schedule, tiny_dataset, tmp_path):
    start = time.time()
    kwargs = dict(k=8, w=0.2, layer_ids=("down1",), ddim_steps=2, seed=3)
    store = generate_candidates_from_model(
        tiny_unet, tiny_schedule, tiny_dataset, tmp_path / "store", **kwargs
    )
    reloaded = load_store(tmp_path / "store")
    round_trip = np.array_equal(np.array(reloaded.blob), np.array(store.blob))

    regen = generate_candidates_from_model(
        tiny_unet, tiny_schedule, tiny_dataset, tmp_path / "store2", **kwargs
    )
    same_digest = regen.meta["blob_sha256"] == store.meta["blob_sha256"]

    corrupt_dir = tmp_path / "corrupt"
    generate_candidates_from_model(tiny_unet, tiny_schedule, tiny_dataset, corrupt_dir, **kwargs)
    blob_path = corrupt_dir / "candidates.blob"
    blob = bytearray(blob_path.read_bytes())
    blob[100] ^= 0xFF
    blob_path.write_bytes(bytes(blob))
    try:
        load_store(corrupt_dir)
        corrupt_rejected = False
    except CorruptStoreError:
        corrupt_rejected = True
    blob_path.write_bytes(bytes(blob[: len(blob) // 2]))
    try:
        load_store(corrupt_dir)
        truncation_rejected = False
    except CorruptStoreError:
        truncation_rejected = True

    draws = 100_000
    stream = numpy_rng(0, "acceptance-draws")
    counts = np.zeros(store.k, dtype=np.int64)
    for _ in range(draws):
        counts[sample_positive(store, 5, stream).candidate_index] += 1
    p_value = scipy.stats.chisquare(counts).pvalue

    ok = round_trip and same_digest and corrupt_rejected and truncation_rejected and p_value > 0.01
    _report(
        "store-integrity",
        ok,
        f"round trip {round_trip}, regen digest match {same_digest}, corrupt/truncated rejected "
        f"{corrupt_rejected}/{truncation_rejected}, chi-square p={p_value:.3f} over {draws} draws "
        f"({time.time() - start:.1f}s)",
    )


# ---------------------------------------------------------------------------
# 6. Momentum queue against a list-slicing oracle.
# ---------------------------------------------------------------------------


def test_momentum_queue_matches_oracle():
    start = time.time()
    rng = np.random.default_rng(7)
    sequences = 1000
    for trial in range(sequences):
        d = int(rng.integers(2, 9))
        capacity = int(rng.integers(1, 33))
        queue = MomentumQueue(capacity=capacity, dim=d)
        pushed: list[np.ndarray] = []
        for _ in range(int(rng.integers(1, 9))):
            keys = _unit_rows(rng, int(rng.integers(1, 5)), d).astype(np.float32)
            queue.push(torch.from_numpy(keys))
            pushed.extend(keys)
            expected = np.stack(pushed[-capacity:]) if pushed else np.empty((0, d), np.float32)
            got = queue.tensor().numpy()
            if not (
                np.array_equal(got, expected[: len(got)])
                and len(queue) == min(len(pushed), capacity)
                and np.allclose(np.linalg.norm(got, axis=1), 1.0, atol=1e-5)
            ):
                _report("queue-model", False, f"divergence in sequence {trial}")
    _report("queue-model", True, f"{sequences} randomized sequences match exactly ({time.time() - start:.1f}s)")


# ---------------------------------------------------------------------------
# 7. Weighted kNN against a sorted-similarity oracle.
# ---------------------------------------------------------------------------


def _knn_reference(train: np.ndarray, labels: np.ndarray, query: np.ndarray, k: int, tau: float) -> int:
    t = train / np.linalg.norm(train, axis=1, keepdims=True)
    sims = t @ (query / np.linalg.norm(query))
    order = sorted(range(len(t)), key=lambda i: (-sims[i], i))[:k]
    scores: dict[int, float] = {}
    for i in order:
        scores[int(labels[i])] = scores.get(int(labels[i]), 0.0) + math.exp(sims[i] / tau)
    return max(sorted(scores), key=lambda c: (scores[c], -c))


def test_knn_matches_oracle():
    start = time.time()
    rng = np.random.default_rng(11)
    banks = 20
    compared = 0
    for _ in range(banks):
        n = int(rng.integers(300, 1001))
        d = int(rng.integers(4, 17))
        classes = int(rng.integers(2, 11))
        train = rng.standard_normal((n, d)).astype(np.float32)
        labels = rng.integers(0, classes, size=n)
        queries = rng.standard_normal((20, d)).astype(np.float32)
        bank = FeatureBank(features=train, labels=labels)
        for k in (10, 20, 50, 100, 200):
            got = knn_predict(bank, queries, k, temperature=0.07)
            want = [_knn_reference(train, labels, q, k, 0.07) for q in queries]
            compared += len(queries)
            if got.tolist() != want:
                _report("knn-oracle", False, f"disagreement at n={n}, k={k}")
    _report("knn-oracle", True, f"{compared} predictions agree over {banks} banks ({time.time() - start:.1f}s)")


# ---------------------------------------------------------------------------
# 8 and 9. Desk-scale directional experiment and similarity analysis.
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)


def _run(argv: list[str]) -> None:
    code = clsp_main(argv)
    if code != 0:
        raise AssertionError(f"command failed with exit {code}: {' '.join(argv)}")


@pytest.fixture(scope="module")
def desk_experiment(tmp_path_factory):
    """Full pipeline: diffusion, k=4 w=0.1 store, simclr and clsp-simclr x 3 seeds."""
    from clsp import kvformat

    out = tmp_path_factory.mktemp("desk")
    train_dir = out / "train"
    test_dir = out / "test"
    save_dataset(generate_toy_dataset(250, 32, seed=0, name="toy-train"), train_dir)
    save_dataset(generate_toy_dataset(100, 32, seed=1, name="toy-test"), test_dir)

    t0 = time.time()
    _run(["train-diffusion", "--out", str(out / "diffusion"), "--dataset", str(train_dir),
          "--preset", "desk", "--seed", "0"])
    diffusion_minutes = (time.time() - t0) / 60

    _run(["generate-positives", "--out", str(out / "positives"), "--dataset", str(train_dir),
          "--checkpoint", str(out / "diffusion" / "checkpoints" / "diffusion.pt"),
          "--k", "4", "--w", "0.1", "--seed", "0", "--chunk-size", "50"])

    results: dict = {"diffusion_minutes": diffusion_minutes}
    for method in ("simclr", "clsp-simclr"):
        accuracies = []
        cosines = []
        additional = []
        for seed in SEEDS:
            run_dir = out / f"{method}-seed{seed}"
            args = ["pretrain", "--out", str(run_dir), "--preset", "desk", "--method", method,
                    "--dataset", str(train_dir), "--seed", str(seed)]
            if method == "clsp-simclr":
                args += ["--store", str(out / "positives" / "store")]
            _run(args)
            _run(["evaluate", "--out", str(run_dir / "knn"), "--probe", "knn",
                  "--checkpoint", str(run_dir / "checkpoints" / "encoder.pt"),
                  "--dataset", str(train_dir), "--test-dataset", str(test_dir)])
            sim_args = ["evaluate", "--out", str(run_dir / "sim"), "--probe", "similarity",
                        "--checkpoint", str(run_dir / "checkpoints" / "encoder.pt"),
                        "--dataset", str(train_dir), "--seed", "0"]
            if method == "clsp-simclr":
                sim_args += ["--store", str(out / "positives" / "store")]
            _run(sim_args)
            knn = kvformat.read_kv(run_dir / "knn" / "reports" / "knn.txt")
            sim = kvformat.read_kv(run_dir / "sim" / "reports" / "similarity.txt")
            accuracies.append(float(knn["best_accuracy"]))
            cosines.append(float(sim["original_mean"]))
            if "additional_mean" in sim:
                additional.append(float(sim["additional_mean"]))
            hist_ok = sum(sim["original_hist"]) == sim["original_pairs"]
            if "additional_hist" in sim:
                hist_ok = hist_ok and sum(sim["additional_hist"]) == sim["additional_pairs"]
            results.setdefault("hist_mass_ok", True)
            results["hist_mass_ok"] = results["hist_mass_ok"] and hist_ok
        results[method] = {"knn": accuracies, "cosine": cosines, "additional": additional}
    return results


@pytest.mark.acceptance_experiment
def test_desk_experiment_directional_gain(desk_experiment):
    simclr = float(np.mean(desk_experiment["simclr"]["knn"]))
    clsp = float(np.mean(desk_experiment["clsp-simclr"]["knn"]))
    ok = clsp >= simclr and simclr >= 0.65 and clsp >= 0.65
    _report(
        "desk-experiment",
        ok,
        f"mean kNN clsp-simclr {clsp:.4f} vs simclr {simclr:.4f} over seeds {SEEDS} "
        f"(per-seed clsp {desk_experiment['clsp-simclr']['knn']}, simclr {desk_experiment['simclr']['knn']}; "
        f"chance 0.5, bar 0.65; diffusion {desk_experiment['diffusion_minutes']:.1f} min)",
    )


@pytest.mark.acceptance_experiment
def test_desk_experiment_similarity_shift(desk_experiment):
    simclr_cos = float(np.mean(desk_experiment["simclr"]["cosine"]))
    clsp_cos = float(np.mean(desk_experiment["clsp-simclr"]["cosine"]))
    synth_cos = float(np.mean(desk_experiment["clsp-simclr"]["additional"]))
    ok = clsp_cos >= simclr_cos and synth_cos < clsp_cos and desk_experiment["hist_mass_ok"]
    _report(
        "similarity-analysis",
        ok,
        f"original-pair cosine clsp-simclr {clsp_cos:.4f} >= simclr {simclr_cos:.4f}; "
        f"synthetic-pair cosine {synth_cos:.4f} below original; histogram mass exact "
        f"{desk_experiment['hist_mass_ok']}",
    )


# ---------------------------------------------------------------------------
# 10. Zero-weight reduction to the base method.
# ---------------------------------------------------------------------------


def test_zero_lambda_reproduces_base_trajectory():
    start = time.time()
    dataset = generate_toy_dataset(250, 32, seed=0, name="toy-train")
    digests: dict[str, list[str]] = {}
    for method in ("simclr", "clsp-simclr"):
        trajectory: list[str] = []
        config = replace(
            TrainConfig.desk(method), epochs=5, warmup_epochs=2, lam=0.0, checkpoint_every=1, seed=9
        )
        model, _ = train_ssl(config, dataset, None, checkpoint_fn=lambda e, m: trajectory.append(state_digest(m.state_dict())))
        trajectory.append(state_digest(model.state_dict()))
        digests[method] = trajectory
    ok = digests["simclr"] == digests["clsp-simclr"] and len(digests["simclr"]) == 6
    _report(
        "lambda-degeneracy",
        ok,
        f"per-epoch weight digests identical across 5 epochs: {ok} ({time.time() - start:.1f}s)",
    )
