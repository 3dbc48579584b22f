"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances."""
import hashlib
import math
import time
from collections import Counter
from itertools import product

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from mpcs import config as cfglib
from mpcs.dataset import MAGNIFICATIONS, build_folds, generate_synthetic
from mpcs.evaluate import (
    PredictionRecord,
    cross_magnification,
    image_level_accuracy,
    majority_vote,
    patient_level_accuracy,
    write_predictions,
)
from mpcs.loss import ContrastiveBatch, interleaved_pairs, nt_xent, nt_xent_grad
from mpcs.report import grad_cam_map
from mpcs.sampler import ORDERED_PAIRS, PairStrategy, choose_magnifications, sample_pair
from mpcs.train import (
    Audit,
    evaluate_checkpoint,
    finetune,
    fold_samples,
    pretrain,
    random_init_checkpoint,
)
from mpcs.transforms import TransformPolicy, apply_uniform, sample_params, transform_view

SEEDS = (0, 1, 2)


def emit(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- 1-3: loss


def oracle_loss(Z, pair_of, tau):
    n = len(Z)
    total = 0.0
    for i in range(n):
        def s(a, b):
            return float(Z[a] @ Z[b]) / (math.sqrt(float(Z[a] @ Z[a])) * math.sqrt(float(Z[b] @ Z[b])))

        den = sum(math.exp(s(i, k) / tau) for k in range(n) if k != i)
        total += -math.log(math.exp(s(i, pair_of[i]) / tau) / den)
    return total / n


def _shuffled_batch(rng, n_views, dim, tau):
    Z = rng.normal(size=(n_views, dim))
    perm = rng.permutation(n_views)
    inv = np.argsort(perm)
    base = interleaved_pairs(n_views)
    pair_of = [int(inv[base[perm[i]]]) for i in range(n_views)]
    return ContrastiveBatch(torch.tensor(Z[perm], dtype=torch.float64), pair_of, tau)


def test_c01_oracle_equivalence(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(100):
        tau = (0.01, 0.1, 1.0)[i % 3]
        batch = _shuffled_batch(rng, 2 * int(rng.integers(1, 5)), int(rng.integers(2, 8)), tau)
        worst = max(worst, abs(nt_xent(batch).item() - oracle_loss(batch.Z.numpy(), batch.pair_of, tau)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    emit(capsys, 1, ok, f"max |loss - oracle| = {worst:.2e} (tol 1e-9), {elapsed:.2f} s")
    assert ok


def _fd(batch, h=1e-6):
    Z = batch.Z.detach().clone()
    g = np.zeros(Z.shape)
    for idx in np.ndindex(*Z.shape):
        plus, minus = Z.clone(), Z.clone()
        plus[idx] += h
        minus[idx] -= h
        g[idx] = (nt_xent(ContrastiveBatch(plus, batch.pair_of, batch.temperature)).item()
                  - nt_xent(ContrastiveBatch(minus, batch.pair_of, batch.temperature)).item()) / (2 * h)
    return g


def test_c02_gradient_check(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(20):
        batch = _shuffled_batch(rng, 2 * int(rng.integers(2, 9)), int(rng.integers(2, 6)),
                                float(rng.choice([0.1, 0.5, 1.0])))
        g, fd = nt_xent_grad(batch), _fd(batch)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    emit(capsys, 2, ok, f"max relative error = {worst:.2e} (tol 1e-4), {elapsed:.2f} s")
    assert ok


def test_c03_single_pair_degeneracy(capsys):
    rng = np.random.default_rng(303)
    bad = 0
    for _ in range(200):
        tau = float(rng.choice([0.01, 0.1, 1.0]))
        batch = ContrastiveBatch(torch.tensor(rng.normal(size=(2, int(rng.integers(2, 9))))), [1, 0], tau)
        bad += nt_xent(batch).item() != 0.0 or bool(np.any(nt_xent_grad(batch) != 0.0))
    emit(capsys, 3, bad == 0, f"{200 - bad}/200 two-view batches with exactly zero loss and gradient")
    assert bad == 0


# ---------------------------------------------------------------- 4: sampler


def test_c04_sampler_distributions(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    n = 12_000
    rand = Counter(choose_magnifications(PairStrategy.random(), rng) for _ in range(n))
    p_random = chisquare([rand[p] for p in ORDERED_PAIRS]).pvalue
    ordered = PairStrategy.ordered()
    first = Counter(choose_magnifications(ordered, rng)[0] for _ in range(n))
    p_ordered = chisquare([first[m] for m in MAGNIFICATIONS]).pvalue
    fixed = {choose_magnifications(PairStrategy.fixed(), rng) for _ in range(1000)}
    distinct = 0
    for strategy in (PairStrategy.fixed(), ordered, PairStrategy.random()):
        distinct += sum(a != b for a, b in (choose_magnifications(strategy, rng) for _ in range(100_000)))
    elapsed = time.perf_counter() - t0
    ok = (p_random > 0.01 and p_ordered > 0.01 and len(fixed) == 1 and distinct == 300_000
          and set(rand) == set(ORDERED_PAIRS) and elapsed < 20)
    emit(capsys, 4, ok, f"random p={p_random:.3f}, ordered mf1 p={p_ordered:.3f}, fixed outcomes={len(fixed)}, "
                        f"mf1!=mf2 {distinct}/300000, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 5: shared transforms


def test_c05_uniform_transform_contract(capsys, small_synth):
    rng = np.random.default_rng(505)
    policies = [TransformPolicy.pretrain(24), TransformPolicy.finetune(24)]
    mismatches = identical_broken = 0
    for case in range(1000):
        policy = policies[case % 2]
        sample = small_synth[int(rng.integers(len(small_synth)))]
        pair = sample_pair(PairStrategy.random(), sample, rng)
        params = sample_params(policy, rng, pair.view1.shape[:2])
        out = apply_uniform(params, pair)
        mismatches += not (np.array_equal(out.view1, transform_view(params, pair.view1))
                           and np.array_equal(out.view2, transform_view(params, pair.view2)))
        twin = type(pair)(pair.specimen_id, pair.mf1, pair.mf2, pair.view1, pair.view1.copy())
        twin_out = apply_uniform(params, twin)
        identical_broken += not np.array_equal(twin_out.view1, twin_out.view2)
    ok = mismatches == 0 and identical_broken == 0
    emit(capsys, 5, ok, f"{1000 - mismatches}/1000 bit-exact, {1000 - identical_broken}/1000 twins stay identical")
    assert ok


# ---------------------------------------------------------------- 6: metrics


def _oracle_pla(preds):
    by = {}
    for p in preds:
        by.setdefault(p.patient_id, []).append(p.true_label == p.predicted_label)
    return sum(sum(v) / len(v) for v in by.values()) / len(by)


def _oracle_vote(patches):
    n = len(patches[0].class_scores)
    best = None
    for c in range(n):
        count = sum(p.predicted_label == c for p in patches)
        mean = sum(p.class_scores[c] for p in patches) / len(patches)
        if best is None or (count, mean) > best[0]:
            best = ((count, mean), c)
    return best[1]


def _rand_record(rng, n_classes=2):
    s = np.round(rng.dirichlet(np.ones(n_classes)) * 4) / 4
    if s.sum() == 0:
        s[0] = 1.0
    s = s / s.sum()
    pred = int(rng.choice(np.flatnonzero(s == s.max())))
    return PredictionRecord(f"s{rng.integers(6)}", "ABCD"[rng.integers(4)], 40, int(rng.integers(n_classes)), pred,
                            tuple(s))


def test_c06_metric_oracles(capsys):
    rng = np.random.default_rng(606)
    failures = Counter()
    for _ in range(100):
        preds = [_rand_record(rng) for _ in range(int(rng.integers(1, 15)))]
        failures["ila"] += abs(image_level_accuracy(preds)
                               - sum(p.true_label == p.predicted_label for p in preds) / len(preds)) > 1e-12
        failures["pla"] += abs(patient_level_accuracy(preds) - _oracle_pla(preds)) > 1e-12
        patches = [_rand_record(rng, 3) for _ in range(int(rng.integers(1, 10)))]
        failures["vote"] += majority_vote(patches)[0] != _oracle_vote(patches)
        vals = {k: float(rng.random()) for k in product(MAGNIFICATIONS, MAGNIFICATIONS)}
        for mode, pick in (("type1", lambda m, o: vals[(m, o)]), ("type2", lambda m, o: vals[(o, m)])):
            table = cross_magnification(vals, mode)
            for m in MAGNIFICATIONS:
                expect = sum(pick(m, o) for o in MAGNIFICATIONS if o != m) / 3
                failures["xmag"] += abs(table[m]["value"] - expect) > 1e-12

    def hand(pid, ok):
        return PredictionRecord("s", pid, 40, 0, 0 if ok else 1, (0.9, 0.1) if ok else (0.1, 0.9))

    case = [hand("A", True)] * 3 + [hand("A", False)] + [hand("B", True), hand("B", False)]
    hand_ok = patient_level_accuracy(case) == 0.625 and image_level_accuracy(case) == 4 / 6
    ok = sum(failures.values()) == 0 and hand_ok
    emit(capsys, 6, ok, f"oracle mismatches {dict(failures) or 0}; hand case PLA "
                        f"{patient_level_accuracy(case)} ILA {image_level_accuracy(case):.3f}")
    assert ok


# ---------------------------------------------------------------- 7-8: desk-scale reproduction


def _desk_scale_run(seed):
    cfg = cfglib.resolve("synth-full", overrides={"seed": seed})
    pcfg = cfglib.pretrain_config(cfg)
    probe_cfg = cfglib.finetune_config(cfglib.deep_merge(cfg, {"finetune": {"label_fraction": 0.2}}), "linear")
    data = generate_synthetic(64, 16, 0.5, 640, seed=seed, output_size=pcfg.input_size)
    plan = build_folds(data, 5, seed)
    random_init = random_init_checkpoint(pcfg.encoder, seed)
    out = {"mpcs": [], "random": []}
    for fold in range(plan.k):
        # unlabeled pre-training sees the train and validation folds, never the test fold
        keep = plan.train_folds(fold, with_validation=True)
        ssl = [s for s in data if plan.fold_of[s.specimen_id] in keep]
        ckpt = pretrain(pcfg, ssl)
        held_out = fold_samples(plan, fold, data)
        for name, init in (("mpcs", ckpt), ("random", random_init)):
            probe = finetune(probe_cfg, init, plan, fold, data)
            out[name].append(evaluate_checkpoint(probe, held_out, input_size=probe_cfg.input_size)[0].ila)
    return {k: float(np.mean(v)) for k, v in out.items()}


@pytest.fixture(scope="module")
def desk_scale():
    t0 = time.perf_counter()
    results = {seed: _desk_scale_run(seed) for seed in SEEDS}
    return results, time.perf_counter() - t0


def test_c07_label_efficiency_direction(capsys, desk_scale):
    results, elapsed = desk_scale
    gaps = {s: 100 * (r["mpcs"] - r["random"]) for s, r in results.items()}
    wins = sum(g >= 10 for g in gaps.values())
    ok = wins >= 2
    detail = ", ".join(f"seed {s}: MPCS {100 * r['mpcs']:.1f} vs random {100 * r['random']:.1f} "
                       f"(+{gaps[s]:.1f})" for s, r in results.items())
    emit(capsys, 7, ok, f"{wins}/3 seeds with gap >= 10 ILA points at 20% labels; {detail}; {elapsed / 60:.1f} min")
    assert ok


def test_c08_representation_separability(capsys, desk_scale):
    results, _ = desk_scale
    mpcs_ok = sum(r["mpcs"] >= 0.85 for r in results.values())
    random_ok = sum(r["random"] <= 0.70 for r in results.values())
    ok = mpcs_ok >= 2 and random_ok >= 2
    detail = ", ".join(f"seed {s}: {100 * r['mpcs']:.1f} / {100 * r['random']:.1f}" for s, r in results.items())
    emit(capsys, 8, ok, f"MPCS >= 85% in {mpcs_ok}/3, random <= 70% in {random_ok}/3 (MPCS / random: {detail})")
    assert ok


# ---------------------------------------------------------------- 9: leakage


def test_c09_no_leakage_no_label_reads(capsys, ten_patient_synth):
    cfg = cfglib.resolve("synth-fast", overrides=cfglib.parse_set(
        ["pretrain.epochs=2", "pretrain.input_size=32", "finetune.epochs=2", "finetune.input_size=32"]))
    plan = build_folds(ten_patient_synth, 5, 0)
    leaked = label_reads = 0
    for fold in range(plan.k):
        audit = Audit()
        data = audit.wrap(ten_patient_synth)
        keep = plan.train_folds(fold, with_validation=True)
        ckpt = pretrain(cfglib.pretrain_config(cfg), [s for s in data if plan.fold_of[s.specimen_id] in keep],
                        audit=audit)
        for mode in ("full", "linear"):
            finetune(cfglib.finetune_config(cfg, mode), ckpt, plan, fold, data, audit=audit)
        leaked += len(audit.seen() & set(plan.specimens_in([fold])))
        label_reads += audit.label_reads["pretrain"]
        assert audit.seen("pretrain") and audit.seen("finetune")
    ok = leaked == 0 and label_reads == 0
    emit(capsys, 9, ok, f"test-fold specimens in training batches: {leaked}; label reads during pre-training: "
                        f"{label_reads} (5 folds, full and linear)")
    assert ok


# ---------------------------------------------------------------- 10: determinism


def _pipeline(root):
    data = generate_synthetic(20, 10, 0.5, 640, seed=7, out_dir=root / "data", output_size=32)
    plan = build_folds(data, 5, 7)
    plan.save(root / "split.json")
    cfg = cfglib.resolve("synth-fast", overrides=cfglib.parse_set(
        ["seed=7", "pretrain.epochs=3", "pretrain.input_size=32", "finetune.epochs=2", "finetune.input_size=32"]))
    ckpt = pretrain(cfglib.pretrain_config(cfg), data)
    ft = finetune(cfglib.finetune_config(cfg, "full"), ckpt, plan, 0, data)
    report, preds = evaluate_checkpoint(ft, fold_samples(plan, 0, data), input_size=32, fold=0)
    report.save(root / "report.json")
    write_predictions(root / "predictions.csv", preds)
    files = sorted(p for p in (root / "data").rglob("*") if p.is_file())
    return {
        "loss": [h["loss"] for h in ckpt.history],
        "data": hashlib.sha256(b"".join(sha(p).encode() for p in files)).hexdigest(),
        "split": sha(root / "split.json"),
        "report": sha(root / "report.json"),
        "predictions": sha(root / "predictions.csv"),
    }


def test_c10_determinism(capsys, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    loss_diff = float(np.max(np.abs(np.subtract(a["loss"], b["loss"]))))
    same = [k for k in ("data", "split", "report", "predictions") if a[k] == b[k]]
    ok = loss_diff <= 1e-6 and len(same) == 4
    emit(capsys, 10, ok, f"max loss-curve difference {loss_diff:.1e} (tol 1e-6); identical hashes: {', '.join(same)}")
    assert ok


# ---------------------------------------------------------------- 11: Grad-CAM


def test_c11_grad_cam(capsys):
    A = np.array([[[1.0, 2.0], [3.0, 4.0]], [[4.0, 0.0], [1.0, 2.0]]])
    G = np.array([[[1.0, 1.0], [1.0, 1.0]], [[-1.0, -1.0], [0.0, 0.0]]])
    expected = np.array([[0.0, 2.0], [2.5, 3.0]]) / 3.0
    err = float(np.max(np.abs(grad_cam_map(A, G) - expected)))
    zero = grad_cam_map(A, np.zeros_like(G))
    ok = err <= 1e-9 and np.array_equal(zero, np.zeros((2, 2)))
    emit(capsys, 11, ok, f"hand case max error {err:.1e} (tol 1e-9); zero-gradient map all zero: "
                         f"{bool(np.array_equal(zero, np.zeros((2, 2))))}")
    assert ok
