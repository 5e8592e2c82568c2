"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 10 is an optional integration run on user-supplied weights and data.
Set ``ADAPTSEG_DATASET`` (episode directories) and optionally
``ADAPTSEG_WEIGHTS`` (ResNet-50 state dict) to enable it.
"""
import math
import os
import time

import numpy as np
import pytest
import torch

from adaptseg.adapt import loss_nce, loss_proto, loss_stat, masked_prototypes
from adaptseg.compare import concat_shots, correlation_map, flatten_features
from adaptseg.harness import RunConfig, SynthSpec, run_episode, synthetic_suite
from adaptseg.harness.analyze import analyze_episode
from adaptseg.harness.episode import fixed_ratio_episode
from adaptseg.harness.evaluate import evaluate, load_dataset
from adaptseg.metrics import (IoUAccumulator, RatioPair, accumulate, expected_random_iou, fbiou, miou,
                              random_iou_gradients)
from adaptseg.segment import crf_refine, otsu_threshold, pseudo_episode_ious, refine_decision, threshold

D = torch.float64


def _acc_from(results) -> IoUAccumulator:
    acc = IoUAccumulator(1)
    for r in results:
        acc.add_counts(r.class_id, *r.counts)
    return acc


# ---------------------------------------------------------------------------
# 1. naive predictor


def test_c01_naive_predictor(acceptance):
    t0 = time.perf_counter()
    eps = [fixed_ratio_episode(87, 200, seed=s) for s in range(20)]
    s = evaluate(eps, RunConfig.toy(), "naive", naive_row=False).summary()
    m, fb = 100 * s["miou"], 100 * s["fbiou"]
    secs = time.perf_counter() - t0
    # real-data reference values 43.0 / 21.5 sit within 1.5 points of the analytic ones
    ok = m == 43.5 and fb == 21.75 and abs(43.0 - m) <= 1.5 and abs(21.5 - fb) <= 1.5 and secs < 10
    acceptance(1, ok, f"naive mIoU {m:.4f} FB-IoU {fb:.4f} (exact 43.5 / 21.75) in {secs:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. metric oracle


def _loop_counts(pred, gt):
    c = [0, 0, 0, 0]
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        c[0 if p and g else 1 if p else 2 if g else 3] += 1
    return c


def test_c02_metric_oracle(acceptance):
    rng = np.random.default_rng(2)
    classes = 4
    acc = IoUAccumulator(classes)
    inter, union = np.zeros((2, classes), np.int64), np.zeros((2, classes), np.int64)
    for _ in range(100):
        pred, gt = rng.random((16, 16)) < rng.random(), rng.random((16, 16)) < rng.random()
        c = int(rng.integers(classes))
        accumulate(pred, gt, c, acc)
        tp, fp, fn, tn = _loop_counts(pred, gt)
        inter[:, c] += (tn, tp)
        union[:, c] += (tn + fp + fn, tp + fp + fn)
    counts_ok = np.array_equal(acc.intersection, inter) and np.array_equal(acc.union, union)
    seen = union[1] > 0
    m_ref = float(np.mean(inter[1][seen] / union[1][seen]))
    fb_ref = 0.5 * (inter[0].sum() / union[0].sum() + inter[1].sum() / union[1].sum())
    err = max(abs(miou(acc) - m_ref), abs(fbiou(acc) - fb_ref))
    ok = counts_ok and err < 1e-12
    acceptance(2, ok, f"counts exact={counts_ok}, max ratio error {err:.1e} over 100 pairs")
    assert ok


# ---------------------------------------------------------------------------
# 3. random predictor


def test_c03_random_closed_forms(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for r, p in ((0.3, 0.6), (0.5, 0.5), (0.435, 0.2)):
        acc = IoUAccumulator(1)
        for _ in range(1000):
            accumulate(rng.random((64, 64)) < p, rng.random((64, 64)) < r, 0, acc)
        m, fb = expected_random_iou(RatioPair(r, p))
        worst = max(worst, abs(miou(acc) - m), abs(fbiou(acc) - fb))
    grid = [0.25, 0.5, 0.75]
    slopes = [random_iou_gradients(RatioPair(r, p))[0] for r in grid for p in grid]
    d_fb = random_iou_gradients(RatioPair(0.5, 0.5))[1]
    secs = time.perf_counter() - t0
    ok = worst <= 0.01 and min(slopes) >= 0 and abs(d_fb) < 1e-12 and secs < 30
    acceptance(3, ok, f"MC max dev {worst:.4f}, min dmIoU {min(slopes):.3f}, dFB(.5,.5) {d_fb:.1e}, "
                      f"{secs:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. loss gradients


def _rel_fd_error(fn, x, h=1e-4):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    numeric = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += h
        xm[i] -= h
        numeric.view(-1)[i] = (fn(xp.view_as(x)) - fn(xm.view_as(x))) / (2 * h)
    return float((x.grad - numeric).norm() / numeric.norm())


def test_c04_loss_gradients(acceptance):
    worst = 0.0
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        a, b = torch.randn(4, 3, 3, generator=g, dtype=D), torch.randn(4, 3, 3, generator=g, dtype=D)
        valid = torch.rand(3, 3, generator=g) < 0.8
        valid[0, 0] = valid[1, 1] = True
        mask = (torch.rand(3, 3, generator=g, dtype=D) > 0.5).to(D)
        mask[0, 1], mask[2, 2] = 1.0, 0.0
        target = masked_prototypes(b, mask)
        v = valid.numpy()
        worst = max(worst,
                    _rel_fd_error(lambda x: loss_nce(x, b, v, 0.5), a),
                    _rel_fd_error(lambda x: loss_stat(x, b, v), a),
                    _rel_fd_error(lambda x: loss_proto(masked_prototypes(x, mask), target), a))
    ok = worst < 1e-4
    acceptance(4, ok, f"max relative gradient error {worst:.1e} over 20 seeds x 3 losses")
    assert ok


# ---------------------------------------------------------------------------
# 5. correlation map


def _triple_loop(q, k, v):
    d = q.shape[1]
    out = []
    for qi in q.tolist():
        logits = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d) for kj in k.tolist()]
        top = max(logits)
        w = [math.exp(x - top) for x in logits]
        out.append(sum(wj * vj for wj, vj in zip(w, v.tolist())) / sum(w))
    return torch.tensor(out, dtype=D)


def test_c05_correlation_properties(acceptance):
    g = torch.Generator().manual_seed(5)
    ms = torch.rand(6, 6, generator=g, dtype=D)
    k0, v0 = concat_shots([torch.zeros(8, 6, 6, dtype=D)], [ms])
    uniform = float((correlation_map(torch.randn(25, 8, generator=g, dtype=D), k0, v0) - ms.mean()).abs().max())
    fq, fs = torch.randn(8, 6, 6, generator=g, dtype=D), torch.randn(8, 6, 6, generator=g, dtype=D)
    m = (torch.rand(6, 6, generator=g) > 0.5).to(D)
    one = correlation_map(fq, *concat_shots([fs], [m]))
    dup = float((one - correlation_map(fq, *concat_shots([fs, fs], [m, m]))).abs().max())
    k, v = concat_shots([fs], [m])
    loop = float((correlation_map(flatten_features(fq), k, v) - _triple_loop(flatten_features(fq), k, v))
                 .abs().max())
    ok = uniform < 1e-6 and dup < 1e-5 and loop < 1e-6
    acceptance(5, ok, f"uniform dev {uniform:.1e}, duplicate-shot dev {dup:.1e}, loop dev {loop:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 6. adaptation efficacy


def test_c06_adaptation_efficacy(acceptance):
    t0 = time.perf_counter()
    eps = synthetic_suite(50, 0)
    cfg = RunConfig.toy()
    results, loss_down, delta_up = [], 0, 0
    for ep in eps:
        res, state = run_episode(ep, cfg, return_state=True)
        results += res
        trace = state.stack.loss_trace
        loss_down += trace[-1] < trace[0]
        rep = analyze_episode(ep, cfg, state=state)
        delta_up += rep.mean_delta_qs("after") > rep.mean_delta_qs("before")
    adapted = 100 * miou(_acc_from(results))
    base = 100 * evaluate(eps, cfg.replace(epochs=0), naive_row=False).summary()["miou"]
    secs = time.perf_counter() - t0
    ok = loss_down >= 45 and delta_up >= 45 and adapted - base >= 5 and secs < 300
    acceptance(6, ok, f"loss down {loss_down}/50, delta up {delta_up}/50, mIoU {adapted:.1f} vs "
                      f"epochs=0 {base:.1f}, {secs:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7. quick-infer


def test_c07_quick_infer_stability(acceptance):
    eps = synthetic_suite(3, 700, SynthSpec(queries=20))
    cfg = RunConfig.toy()
    per_query = 100 * miou(_acc_from([r for ep in eps for r in run_episode(ep, cfg)]))
    reuse = 100 * miou(_acc_from([r for ep in eps for r in run_episode(ep, cfg.replace(quick_infer=True))]))
    ok = per_query - reuse <= 2.0
    acceptance(7, ok, f"per-query fit mIoU {per_query:.2f}, fit-once {reuse:.2f}, drop {per_query - reuse:.2f} "
                      f"(tolerance 2.0) over 60 queries")
    assert ok


# ---------------------------------------------------------------------------
# 8. threshold


def _otsu_sweep(v, bins=256):
    lo, hi = v.min(), v.max()
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    best, ks = -1.0, []
    for k in range(1, bins):
        n0, n1 = hist[:k].sum(), hist[k:].sum()
        if n0 == 0 or n1 == 0:
            continue
        m0 = (hist[:k] * centers[:k]).sum() / n0
        m1 = (hist[k:] * centers[k:]).sum() / n1
        s = n0 * n1 * (m0 - m1) ** 2
        if s > best * (1 + 1e-9):
            best, ks = s, [k]
        elif s >= best * (1 - 1e-9):
            ks.append(k)
    return lo + np.mean(ks) * (hi - lo) / bins, (hi - lo) / bins


def test_c08_threshold(acceptance):
    rng = np.random.default_rng(8)
    worst, above = 0.0, True
    for _ in range(50):
        parts = rng.integers(1, 4)
        v = np.concatenate([rng.normal(rng.uniform(0, 1), rng.uniform(0.01, 0.2), rng.integers(20, 400))
                            for _ in range(parts)]).clip(0, 1)
        ref, width = _otsu_sweep(v)
        worst = max(worst, abs(otsu_threshold(v) - ref) / width)
        above &= threshold(v) >= v.mean()
    const = threshold(np.full((7, 7), 0.42))
    ok = worst <= 1.0 and above and const == pytest.approx(0.42) and otsu_threshold(np.full(9, 0.42)) is None
    acceptance(8, ok, f"max Otsu deviation {worst:.1e} bins over 50 histograms, threshold>=mean {above}, "
                      f"constant map -> {const:.2f}")
    assert ok


# ---------------------------------------------------------------------------
# 9. refinement decision


def _pseudo_case(flip_rate, seed, size=24):
    rng = np.random.default_rng(seed)
    gt = np.zeros((size, size), bool)
    gt[:, rng.integers(6, size - 6):] = True
    img = np.where(gt[..., None], np.array([200, 40, 40], np.uint8), np.array([30, 60, 190], np.uint8))
    e = torch.eye(2, dtype=D) * 6

    def embed(labels):
        return torch.where(torch.as_tensor(labels)[None], e[0][:, None, None], e[1][:, None, None])

    noisy = embed(gt ^ (rng.random(gt.shape) < flip_rate))
    return img, gt, [[noisy]], [[embed(gt)]], [[np.ones(gt.shape, bool)]], [[torch.as_tensor(gt, dtype=D)]]


def test_c09_refinement_decision(acceptance):
    agree, taken, skipped = True, 0, 0
    for seed in range(5):
        for rate in (0.08, 0.0):
            case = _pseudo_case(rate, seed)
            img, gt = case[0], case[1]
            plain, refined = pseudo_episode_ious([img], [gt], *case[2:])
            fused = torch.as_tensor(gt, dtype=D) * 0.8 + 0.1
            pred = refine_decision(img, fused, [fused], [img], [gt], *case[2:])
            expect_mask = crf_refine(img, fused, pred.threshold) if refined > plain else fused > pred.threshold
            agree &= pred.refined == (refined > plain) and np.array_equal(pred.mask, np.asarray(expect_mask))
            taken += pred.refined and rate > 0
            skipped += not pred.refined and rate == 0
    ties = [refine_decision(np.zeros((8, 8, 3), np.uint8), torch.rand(8, 8, dtype=D), [torch.rand(8, 8, dtype=D)],
                            None, None, None, None, None, None, ious=(0.7, 0.7)).refined]
    ok = agree and taken == 5 and skipped == 5 and not any(ties)
    acceptance(9, ok, f"branch matches strict rule={agree}, noisy refined {taken}/5, clean kept {skipped}/5, "
                      f"tie refines={any(ties)}")
    assert ok


# ---------------------------------------------------------------------------
# 10. integration mode (non-gating)


def test_c10_integration_mode(acceptance, tmp_path):
    data = os.environ.get("ADAPTSEG_DATASET")
    if not data:
        acceptance(10, "SKIP", "non-gating; set ADAPTSEG_DATASET (and ADAPTSEG_WEIGHTS) to run on real data")
        return
    cfg = RunConfig(backbone_weights=os.environ.get("ADAPTSEG_WEIGHTS"))
    rep = evaluate(load_dataset(data, shots=int(os.environ.get("ADAPTSEG_SHOTS", "1"))), cfg)
    rep.write(tmp_path)
    s = rep.summary()
    acceptance(10, "INFO", f"non-gating; mIoU {100 * s['miou']:.2f} FB-IoU {100 * s['fbiou']:.2f} "
                           f"over {s['queries']} queries")
