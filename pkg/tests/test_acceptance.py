"""Exit criteria, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line that is printed in the pytest terminal
summary. Criteria 7 to 9 share the desk-scale runs of the ``full_runs``
fixture (about 30 minutes on one CPU core).
"""
import time

import numpy as np
import pytest

from ddl.diffusion import (Denoiser, attach_control, forward_diffuse, make_schedule, sample_noise_batch,
                           to_model_range, train_control_step)
from ddl.distill import affine_align, ssi_loss
from ddl.evalsuite import compute_metrics
from ddl.numerics import tensor as T
from ddl.numerics.optim import AdamW
from ddl.numerics.tensor import Tensor
from ddl.config import PipelineConfig
from ddl.scenegen import DEFAULT_CONDITIONS

import gradcheck
from oracles import metrics_gap

pytestmark = pytest.mark.acceptance


def _instance(rng):
    h, w = rng.integers(2, 17, size=2)
    pred = rng.uniform(0, 2, (h, w))
    label = rng.uniform(0, 2, (h, w))
    mask = rng.random((h, w)) < rng.uniform(0.3, 1.0)
    # three valid pixels, so an affine fit cannot be exact by construction
    mask.flat[rng.choice(mask.size, 3, replace=False)] = True
    return pred, label, mask


def test_c1_ssi_affine_invariance(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    with T.default_dtype(np.float64):
        for _ in range(100):
            pred, label, mask = _instance(rng)
            base = ssi_loss(pred, label, mask)[0].item()
            for a, b in zip(np.exp(rng.uniform(np.log(1e-2), np.log(1e2), 20)), rng.uniform(-5, 5, 20)):
                moved = ssi_loss(a * pred + b, label, mask)[0].item()
                worst = max(worst, abs(moved - base) / base)
    elapsed = time.perf_counter() - start
    ok = criterion(1, worst < 1e-6 and elapsed < 5, f"worst relative change {worst:.2e} (< 1e-6), {elapsed:.2f}s")
    assert ok


def test_c2_alignment_optimality(criterion):
    start = time.perf_counter()
    hand = affine_align([0.0, 1.0, 1.0], [0.0, 1.0, 2.0])
    hand_err = max(abs(hand.s - 1.5), abs(hand.b))
    rng = np.random.default_rng(2)
    decreases = 0
    for _ in range(1000):
        pred, target, mask = _instance(rng)
        p, t = pred[mask], target[mask]
        fit = affine_align(pred, target, mask)
        sse = lambda s, b: float(np.sum((s * p + b - t) ** 2))
        base = sse(fit.s, fit.b)
        for ds, db in ((1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)):
            decreases += sse(fit.s + ds, fit.b + db) < base
    elapsed = time.perf_counter() - start
    ok = criterion(2, hand_err <= 1e-12 and decreases == 0 and elapsed < 5,
                   f"hand case error {hand_err:.1e}, {decreases} improving perturbations of 4000, {elapsed:.2f}s")
    assert ok


def test_c3_zero_conv_noop_and_frozen_backbone(criterion):
    start = time.perf_counter()
    cfg = PipelineConfig().diffusion
    worst = 0.0
    with T.default_dtype(np.float64):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            d = Denoiser(3, tuple(cfg.channels), cfg.time_dim, seed=seed)
            # stand in for a trained backbone: a fresh one has a zero output layer
            w = d.decoder.conv_out.weight
            w.data[...] = rng.standard_normal(w.shape) * 0.05
            m = attach_control(d, DEFAULT_CONDITIONS, seed=seed + 1)
            x = rng.standard_normal((1, 3, 32, 32))
            t = rng.integers(1, cfg.T + 1, size=1)
            cond = rng.uniform(0, 1, (1, 4, 32, 32))
            with T.no_grad():
                worst = max(worst, float(np.max(np.abs(d(Tensor(x), t).data - m(Tensor(x), t, Tensor(cond)).data))))
    rng = np.random.default_rng(0)
    d = Denoiser(3, tuple(cfg.channels), cfg.time_dim, seed=7)
    w = d.decoder.conv_out.weight
    w.data[...] = rng.standard_normal(w.shape) * 0.05
    m = attach_control(d, DEFAULT_CONDITIONS)
    before = {k: v.tobytes() for k, v in d.state_dict().items()}
    schedule = make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    opt = AdamW(m.trainable_parameters(), lr=cfg.lr)
    images, conds = rng.uniform(0, 1, (16, 3, 32, 32)), rng.uniform(0, 1, (16, 4, 32, 32))
    for _ in range(100):
        idx = rng.choice(16, cfg.batch_size, replace=False)
        x0 = to_model_range(images[idx])
        t, eps = sample_noise_batch(rng, x0, schedule)
        train_control_step(m, opt, x0, conds[idx], t, eps, schedule)
    frozen = {k: v.tobytes() for k, v in d.state_dict().items()} == before
    moved = not m.control.is_untrained()
    elapsed = time.perf_counter() - start
    ok = criterion(3, worst <= 1e-12 and frozen and moved and elapsed < 60,
                   f"max |controlled - plain| {worst:.1e} over 50 inputs, locked params "
                   f"{'bit-identical' if frozen else 'CHANGED'} after 100 control steps, {elapsed:.1f}s")
    assert ok


def test_c4_gradient_suite(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_prim, worst_name = 0.0, ""
    worst_net = 0.0
    for _ in range(100):
        for name, case in gradcheck.PRIMITIVES.items():
            fn, arrays = case(rng)
            err = gradcheck.check(fn, arrays, rng)
            if err > worst_prim:
                worst_prim, worst_name = err, name
        worst_net = max(worst_net, gradcheck.ssi_through_depthnet(rng))
    elapsed = time.perf_counter() - start
    ok = criterion(4, max(worst_prim, worst_net) < 1e-4 and elapsed < 120,
                   f"{len(gradcheck.PRIMITIVES)} primitives x 100 configs worst {worst_prim:.1e} ({worst_name}), "
                   f"SSI through depth net x 100 worst {worst_net:.1e}, {elapsed:.1f}s")
    assert ok


def test_c5_metric_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst, monotone, jensen = 0.0, True, True
    for _ in range(100):
        n = int(rng.integers(1, 500))
        gt = rng.uniform(0.5, 20, n)
        pred = gt * np.exp(rng.normal(0, 0.2, n))
        pred[rng.random(n) < 0.02] *= -1  # a few non-positive predictions
        r = compute_metrics(pred, gt)
        worst = max(worst, metrics_gap(r, pred, gt))
        monotone &= r.delta[1.05] <= r.delta[1.15] <= r.delta[1.25]
        jensen &= r.mae <= r.rmse
    ex1 = compute_metrics([1.0, 5.0, 5.0], [2.0, 4.0, 5.0])
    ex2 = compute_metrics([1.2, 1.3, 0.9], [1.0, 1.0, 1.0], taus=(1.25,))
    examples = ex1.absrel == 0.25 and round(ex2.delta[1.25], 2) == 66.67
    elapsed = time.perf_counter() - start
    ok = criterion(5, worst <= 1e-10 and monotone and jensen and examples and elapsed < 5,
                   f"worst oracle gap {worst:.1e}, delta monotone {monotone}, MAE<=RMSE {jensen}, "
                   f"examples absrel {ex1.absrel} delta {ex2.delta[1.25]:.2f}%, {elapsed:.2f}s")
    assert ok


def test_c6_forward_moments(criterion):
    start = time.perf_counter()
    d = PipelineConfig().diffusion
    schedule = make_schedule(d.T, d.beta_1, d.beta_T)
    rng = np.random.default_rng(6)
    x0 = np.linspace(-1, 1, 16)
    eps = rng.standard_normal((10_000, 16))
    xt = forward_diffuse(np.broadcast_to(x0, eps.shape), schedule.T, eps, schedule)
    abar = schedule.alpha_bars[schedule.T]
    var_err = abs(xt.var(axis=0, ddof=1).mean() / (1 - abar) - 1)
    se = np.sqrt((1 - abar) / len(xt))
    mean_z = float(np.max(np.abs(xt.mean(axis=0) - np.sqrt(abar) * x0)) / se)
    elapsed = time.perf_counter() - start
    ok = criterion(6, var_err < 0.02 and mean_z < 3 and elapsed < 10,
                   f"variance off by {100 * var_err:.2f}% (< 2%), worst mean deviation {mean_z:.2f} SE (< 3), "
                   f"{elapsed:.2f}s")
    assert ok


def test_c7_diffusion_training_efficacy(criterion, full_runs):
    run = full_runs["diffusion"]
    m = run.json("train-diffusion/metrics.json")
    minutes = run.seconds["train-diffusion"] / 60
    ok = criterion(7, m["heldout_ratio"] < 0.5 and m["hard_ratio"] < 0.7 and minutes < 15,
                   f"held-out MSE ratio {m['heldout_ratio']:.3f} (< 0.5), conditional/unconditional on hard "
                   f"{m['hard_ratio']:.3f} (< 0.7), {minutes:.1f} min")
    assert ok


def test_c8_end_to_end_efficacy(criterion, full_runs):
    ref = full_runs["reference"][0]
    gain = ref.delta("student", "hard") - ref.delta("teacher", "hard")
    drop = ref.delta("teacher", "easy") - ref.delta("student", "easy")
    diff = full_runs["diffusion"]
    diff_gain = diff.delta("student", "hard") - diff.delta("teacher", "hard")
    diff_drop = diff.delta("teacher", "easy") - diff.delta("student", "easy")
    minutes = max(diff.total_seconds, ref.total_seconds) / 60
    ok = criterion(8, gain >= 10 and drop < 2 and minutes < 30,
                   f"reference (oracle-source) run: hard delta1.25 gain {gain:+.2f} pts (>= 10), easy drop "
                   f"{drop:.2f} (< 2); diffusion-source run: gain {diff_gain:+.2f}, easy drop {diff_drop:.2f}; "
                   f"slowest `ddl all` {minutes:.1f} min (< 30)")
    assert ok


def test_c9_reproducible_report(criterion, full_runs):
    a, b = full_runs["reference"]
    same = (a.out / "report.csv").read_bytes() == (b.out / "report.csv").read_bytes()
    ok = criterion(9, same, f"report.csv of two fresh `ddl all` runs {'byte-identical' if same else 'DIFFER'}")
    assert ok
