"""Acceptance gate. Each test records a PASS/FAIL line printed at the end of the run.

The trained-model criteria (3-8) share one model trained on the synthetic
benign corpus at reduced width (8 base features, depth 2, 64x64 patches).
Set ``BTD_ACCEPTANCE_CACHE=<file>`` to reuse a trained checkpoint between runs;
criterion 3 is then judged from the loss curve stored in that checkpoint.
"""

import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import OracleModel, record

from btd.calibration import empirical_fpr, fit_threshold
from btd.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from btd.data import (Manifest, SampleRecord, check_training_labels, extract_patch, normalize_ct,
                      patient_overlap, split_by_patient)
from btd.detector import DetectorConfig, score_patches
from btd.diffusion import diffusion_loss, forward_noise, make_schedule, reverse_step
from btd.errors import ValidationError
from btd.metrics import bootstrap_eval, eer, roc_auc
from btd.model import ModelConfig, build_model
from btd.tamper import (Box, fingerprint_noise, foreign_fingerprint, host_fingerprint, make_corpus,
                        render_benign, synth_benign, with_partial_swap)
from btd.training import TrainConfig, smoothed_loss, train

ACC_MODEL = ModelConfig(init_features=8, depth=2, in_channels=1, batch_size=16, patch_size=64)
ACC_TRAIN = TrainConfig(steps=5000, batch_size=16, learning_rate=1e-3, seed=0, log_every=500)
N_EVAL = 200


# ------------------------------------------------------------ 1. diffusion core

def test_c1_diffusion_core():
    start = time.perf_counter()
    sched = make_schedule()
    rng = np.random.default_rng(11)
    x0, t, n = 1.5, 400, 10_000

    # iterative oracle: x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) e_s, betas rebuilt independently
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    x = np.full(n, x0)
    for s in range(t):
        x = math.sqrt(1 - betas[s]) * x + math.sqrt(betas[s]) * rng.standard_normal(n)
    closed = forward_noise(np.full(n, x0), t, rng.standard_normal(n), sched)

    se_mean = math.sqrt(x.var(ddof=1) / n + closed.var(ddof=1) / n)
    z_mean = abs(x.mean() - closed.mean()) / se_mean
    se_var = math.sqrt(2 * x.var(ddof=1) ** 2 / (n - 1) + 2 * closed.var(ddof=1) ** 2 / (n - 1))
    z_var = abs(x.var(ddof=1) - closed.var(ddof=1)) / se_var

    monotone = bool(np.all(np.diff(sched.alpha_bars) < 0))

    eps = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(3))
    clean = torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(4))
    x1 = forward_noise(clean, 1, eps, sched)
    inv_err = float((reverse_step(OracleModel(eps), x1, 1, sched) - clean).abs().max())

    elapsed = time.perf_counter() - start
    ok = z_mean <= 3 and z_var <= 3 and monotone and inv_err <= 1e-5 and elapsed < 60
    record(1, ok, f"mean z={z_mean:.2f} var z={z_var:.2f} (<=3), abar strictly decreasing={monotone}, "
                  f"inversion err={inv_err:.1e} (<=1e-5), {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ 2. gradient check

def test_c2_gradient_check():
    start = time.perf_counter()
    model = build_model(ModelConfig(2, 1, 1, 4, 8), seed=0).double()
    assert model.num_parameters() <= 1000
    torch.manual_seed(0)
    # the output conv starts at zero, which hides gradients of everything upstream
    torch.nn.init.normal_(model.out.weight, std=0.3)
    torch.nn.init.normal_(model.out.bias, std=0.3)
    sched = make_schedule()
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand(4, 1, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
    t = torch.tensor([1, 10, 300, 900])
    model.eval()

    def loss():
        return diffusion_loss(model, x0, t, eps, sched)

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    flat = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    picks = np.random.default_rng(5).choice(len(flat), size=20, replace=False)
    h, worst = 1e-6, 0.0
    with torch.no_grad():
        for k in picks:
            pi, j = flat[k]
            p = params[pi].view(-1)
            analytic = float(params[pi].grad.view(-1)[j])
            orig = float(p[j])
            p[j] = orig + h
            up = float(loss())
            p[j] = orig - h
            down = float(loss())
            p[j] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 60
    record(2, ok, f"max relative error {worst:.2e} over 20 coords (<=1e-3), "
                  f"{model.num_parameters()} params, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ shared trained model

@pytest.fixture(scope="module")
def trained():
    cache = os.environ.get("BTD_ACCEPTANCE_CACHE")
    if cache and Path(cache).exists():
        ckpt = load_checkpoint(cache)
        losses = [tuple(x) for x in ckpt.metadata["loss_curve"]]
        return ckpt.model, ckpt.schedule, losses, ckpt.metadata["train_seconds"]
    sched = make_schedule()
    corpus = synth_benign(host_fingerprint(), 5000, seed=0, size=64, tumor_fraction=0.5)
    model = build_model(ACC_MODEL, seed=0)
    start = time.perf_counter()
    state = train(model, corpus, sched, ACC_TRAIN)
    seconds = time.perf_counter() - start
    if cache:
        meta = {"loss_curve": state.losses, "train_seconds": seconds, "modality": "SYN"}
        save_checkpoint(cache, Checkpoint(model, sched, meta))
    model.eval()
    return model, sched, state.losses, seconds


def _scores(model, sched, patches, mode, centers=None, seed=0):
    cfg = DetectorConfig(mode=mode, use_roi=centers is not None, seed=seed, batch_size=64)
    return np.array([s.value for s in score_patches(model, patches, cfg, sched, centers=centers)])


@pytest.fixture(scope="module")
def inject_corpus():
    return make_corpus("inject", [host_fingerprint()], N_EVAL, N_EVAL, seed=101)


@pytest.fixture(scope="module")
def remove_corpus():
    return make_corpus("remove", [host_fingerprint()], N_EVAL, N_EVAL, seed=202)


# ------------------------------------------------------------ 3. trainability

def test_c3_trainability(trained):
    _, _, losses, seconds = trained
    early = smoothed_loss(losses, 100)
    late = smoothed_loss(losses, ACC_TRAIN.steps)
    ratio = late / early
    ok = ratio < 0.5 and seconds <= 30 * 60 and len(losses) == ACC_TRAIN.steps
    record(3, ok, f"loss@5000/loss@100 = {late:.4f}/{early:.4f} = {ratio:.3f} (<0.5), "
                  f"{len(losses)} steps in {seconds / 60:.1f} min")
    assert ok


# ------------------------------------------------------------ 4. detection power

def test_c4_detection_power(trained, inject_corpus, remove_corpus):
    model, sched, _, _ = trained
    inj = _scores(model, sched, inject_corpus.patches, "btd", centers=inject_corpus.centers)
    rem = _scores(model, sched, remove_corpus.patches, "btd")
    auc_inj = bootstrap_eval(inj, inject_corpus.labels, inject_corpus.scanner_ids, seed=0).auc
    auc_rem = bootstrap_eval(rem, remove_corpus.labels, remove_corpus.scanner_ids, seed=0).auc
    ok = auc_inj >= 0.80 and auc_rem >= 0.80
    record(4, ok, f"bootstrap AUC inject={auc_inj:.3f} remove={auc_rem:.3f} (>=0.80 each)")
    assert ok


# ------------------------------------------------------------ 5. ablation trend

def test_c5_ablation_trend(trained, inject_corpus):
    model, sched, _, _ = trained
    c = inject_corpus
    auc = {}
    for mode in ("backward:1", "fb:1", "backward:50"):
        s = _scores(model, sched, c.patches, mode, centers=c.centers)
        auc[mode] = bootstrap_eval(s, c.labels, c.scanner_ids, seed=0).auc
    gap_fb = auc["backward:1"] - auc["fb:1"]
    gap_b50 = auc["backward:1"] - auc["backward:50"]
    ok = gap_fb >= 0.05 and gap_b50 >= 0.05
    record(5, ok, f"AUC B(1)={auc['backward:1']:.3f} F&B(1)={auc['fb:1']:.3f} B(50)={auc['backward:50']:.3f}; "
                  f"gaps {gap_fb:.3f}, {gap_b50:.3f} (>=0.05 each)")
    assert ok


# ------------------------------------------------------------ 6. determinism

def test_c6_determinism(trained, inject_corpus):
    model, sched, _, _ = trained
    patches = inject_corpus.patches[[0, N_EVAL]]
    btd = np.array([_scores(model, sched, patches, "btd") for _ in range(10)])
    fb = np.array([_scores(model, sched, patches, "fb:20", seed=s) for s in range(10)])
    # pvariance is computed exactly, so identical floats give exactly 0 (numpy's var can leave ~1e-34)
    btd_var = max(statistics.pvariance(col.tolist()) for col in btd.T)
    fb_var = min(statistics.pvariance(col.tolist()) for col in fb.T)
    ok = btd_var == 0.0 and fb_var > 0.0
    record(6, ok, f"BTD variance over 10 repeats={btd_var:.1e} (==0), F&B(20) variance over 10 seeds={fb_var:.2e} (>0)")
    assert ok


def test_monotone_evidence(trained):
    """Swapping the fingerprint over more of the ROI never lowers the mean BTD score."""
    model, sched, _, _ = trained
    box, fractions, n = Box.centered(64, 32), (0.0, 0.25, 0.5, 0.75, 1.0), 150
    host, foreign = host_fingerprint(), foreign_fingerprint("inject")
    rows = []
    for i in range(n):
        rng = np.random.default_rng(50_000 + i)
        content, noise = render_benign(host, 64, rng, tumor=True)
        other = fingerprint_noise(foreign, (64, 64), rng)
        rows.append([with_partial_swap(content, noise, other, box, f) for f in fractions])
    patches = np.asarray(rows, dtype=np.float32).reshape(-1, 64, 64)
    s = _scores(model, sched, patches, "btd", centers=[box.center] * len(patches)).reshape(n, len(fractions))
    steps = np.diff(s, axis=1)
    se = steps.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(steps.mean(axis=0) > -2 * se)
    assert s[:, -1].mean() > s[:, 0].mean()


def test_tampered_scores_exceed_benign(trained, inject_corpus, remove_corpus):
    model, sched, _, _ = trained
    for corpus, centers in ((inject_corpus, inject_corpus.centers), (remove_corpus, None)):
        s = _scores(model, sched, corpus.patches, "btd", centers=centers)
        assert np.all(np.isfinite(s)) and np.all(s >= 0)
        assert s[corpus.is_fake].mean() > s[~corpus.is_fake].mean()


# ------------------------------------------------------------ 7. runtime

def test_c7_runtime(trained):
    model, sched, _, _ = trained
    patches = synth_benign(host_fingerprint(), 1000, seed=7, size=64)
    _scores(model, sched, patches[:64], "btd")
    _scores(model, sched, patches[:64], "fb:20")
    times = {"btd": [], "fb:20": []}
    for _ in range(3):
        for mode in times:
            t0 = time.perf_counter()
            _scores(model, sched, patches, mode)
            times[mode].append(time.perf_counter() - t0)
    btd, fb = statistics.median(times["btd"]), statistics.median(times["fb:20"])
    ratio = fb / btd
    ok = ratio >= 20
    record(7, ok, f"1000 patches, batch 64: BTD {btd:.2f}s, F&B(20) {fb:.2f}s, speed-up {ratio:.1f}x (>=20x)")
    assert ok


# ------------------------------------------------------------ 8. calibration

def test_c8_calibration(trained):
    model, sched, _, _ = trained
    host = host_fingerprint()
    calib = _scores(model, sched, synth_benign(host, 1000, seed=303, tumor_fraction=0.5), "btd")
    held = _scores(model, sched, synth_benign(host, 500, seed=404, tumor_fraction=0.5), "btd")
    thr = fit_threshold(calib, 0.10)
    fpr = empirical_fpr(held, thr)
    ok = 0.055 <= fpr <= 0.155
    record(8, ok, f"held-out benign FPR={fpr:.3f} on n=500 at target 0.10 (band [0.055, 0.155])")
    assert ok


# ------------------------------------------------------------ 9. metric oracles

def _pairwise_auc(s, y):
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def test_c9_metric_oracles():
    rng = np.random.default_rng(9)
    worst, flips_ok = 0.0, True
    for i in range(100):
        n = int(rng.integers(4, 201))
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        # coarse rounding forces ties on some instances
        s = np.round(rng.normal(size=n) + y * rng.uniform(0, 2), int(rng.integers(0, 3)))
        a = roc_auc(s, y)
        worst = max(worst, abs(a - _pairwise_auc(s, y)))
        flips_ok &= abs(roc_auc(s, ~y) - (1 - a)) <= 1e-12
    mirrored = True
    for i in range(20):
        v = rng.normal(size=int(rng.integers(1, 50)))
        s = np.concatenate([v, v])
        y = np.r_[np.zeros(v.size, bool), np.ones(v.size, bool)]
        mirrored &= eer(s, y) == 0.5
    ok = worst <= 1e-9 and mirrored and flips_ok
    record(9, ok, f"max |trapezoid - pairwise| = {worst:.1e} (<=1e-9) on 100 instances, "
                  f"mirrored EER == 0.5: {mirrored}, label-flip symmetry: {flips_ok}")
    assert ok


# ------------------------------------------------------------ 10. data pipeline

def test_c10_data_pipeline():
    ends = normalize_ct(np.array([-700.0, 2000.0]))
    ends_ok = ends[0] == 0.0 and ends[1] == 1.0
    shapes_ok = (extract_patch(np.zeros((300, 300)), (150, 150), "CT").shape == (96, 96)
                 and extract_patch(np.zeros((300, 300)), (150, 150), "MRI").shape == (128, 128))
    recs = [SampleRecord(f"p{i}.npy", "TB" if i % 3 else "TM", f"P{i // 4}", "S1", "CT", (50, 50))
            for i in range(40)]
    train_m, val_m = split_by_patient(Manifest(recs, "CT"), 0.7, seed=3)
    disjoint = (not patient_overlap(train_m, val_m) and len(train_m) + len(val_m) == 40
                and train_m.patients | val_m.patients == {f"P{i}" for i in range(10)})
    rejected = []
    for bad in ("FM", "FB"):
        try:
            check_training_labels(recs + [SampleRecord("x.npy", bad, "P99", "S1", "CT", (50, 50))])
        except ValidationError:
            rejected.append(bad)
    ok = ends_ok and shapes_ok and disjoint and rejected == ["FM", "FB"]
    record(10, ok, f"CT endpoints {ends.tolist()}, patch shapes ok={shapes_ok}, patient-disjoint={disjoint}, "
                   f"screening rejected {rejected}")
    assert ok
