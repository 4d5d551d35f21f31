"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import json
import math

import numpy as np
import pytest

from captionpsg.cli import main
from captionpsg.config import Config
from captionpsg.grounder import fine_contrastive_loss, grad_fine_loss
from captionpsg.grouper import ImageFeatures, group_forward, init_grouper_weights, segment_masks
from captionpsg.labeler import complement_mask
from captionpsg.merger import (
    LrrConfig,
    connected_components,
    lrr_recover,
    merge_segments,
    merge_stuff,
    similarity_loss,
    similarity_loss_grad,
    similarity_matrix,
    spectral_cluster,
)
from captionpsg.numkit import SplitMix64, l21_shrink, svt
from captionpsg.psgjson import read_psg_dir
from captionpsg.sgeval import EvalConfig, match_recall
from captionpsg.textgraph import TextGraph, parse_caption
from captionpsg.workflow import random_batch

from fixtures import planted_blocks, recall_scene, same_partition, write_infer_fixture
from oracles import fine_loss_loop, min_bipartition_ncut, ncut_loop, random_affinity
from test_sgeval import oracle_recall
from test_textgraph import fuzz_corpus, golden_pairs


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())
        assert ok, f"criterion {number} failed: {detail}"
    return emit


def test_criterion_01_contrastive_loss_oracle(report):
    worst = 0.0
    for seed in range(50):
        rng = SplitMix64(1000 + seed)
        b, d = 1 + rng.randbelow(4), 1 + rng.randbelow(8)
        batch = [(rng.normal((1 + rng.randbelow(6), d)), rng.normal((1 + rng.randbelow(5), d))) for _ in range(b)]
        tau = 0.05 + rng.uniform(0.0, 1.0, 1)[0]
        got = fine_contrastive_loss(batch, tau, -0.5)
        ref, p, q = fine_loss_loop(batch, tau, -0.5)
        worst = max(worst, abs(got.total - ref), np.max(np.abs(got.p - p)), np.max(np.abs(got.q - q)))
    report(1, "fine contrastive loss vs scalar enumeration (50 batches)", worst <= 1e-12, f"max abs err {worst:.2e}")


def central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, n):
    return np.max(np.abs(a - n)) / max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)


def test_criterion_02_gradient_checks(report):
    tau, theta = 0.07, -0.5
    worst, redraws = 0.0, 0
    for seed in range(20):
        rng = SplitMix64(seed)
        # degenerate draws are redrawn by the generator and counted, never skipped
        batch, tries = random_batch(rng, theta, b=3, h=4, e=3, d=4)
        redraws += tries
        grads = grad_fine_loss(batch, tau, theta)
        for (x, y), (gx, gy) in zip(batch, grads):
            for arr, g in ((x, gx), (y, gy)):
                num = central_diff(lambda: fine_contrastive_loss(batch, tau, theta).total, arr)
                worst = max(worst, rel_err(g, num))
        x = batch[0][0]
        labels = np.array([rng.randbelow(2) for _ in range(x.shape[0])])
        target = (labels[:, None] == labels[None, :]).astype(float)
        _, gx = similarity_loss_grad(x, target)
        num = central_diff(lambda: similarity_loss(similarity_matrix(x), target), x)
        worst = max(worst, rel_err(gx, num))
    report(2, "analytic vs central-difference gradients (20 points)", worst <= 1e-5,
           f"max rel err {worst:.2e}, redraws {redraws}")


def test_criterion_03_lrr_recovery(report):
    good = 0
    worst_iter = 0
    for seed in range(20):
        sim, truth = planted_blocks(seed)
        r = lrr_recover(sim, LrrConfig())
        worst_iter = max(worst_iter, r.iterations)
        if r.converged and r.residual <= 1e-6 and same_partition(spectral_cluster(r.Z, "auto"), truth):
            good += 1
    report(3, "LRR + auto spectral clustering recovers 3/3/2 blocks", good == 20,
           f"{good}/20, max iterations {worst_iter}")


def test_criterion_04_proximal_operators(report):
    worst, expansive = 0.0, 0
    for seed in range(100):
        rng = SplitMix64(seed)
        m, n = 1 + rng.randbelow(6), 1 + rng.randbelow(6)
        a = rng.normal((m, n))
        tau = rng.uniform(0.0, 2.0, 1)[0]
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        svt_ref = (u * np.maximum(s - tau, 0.0)) @ vt
        l21_ref = np.zeros_like(a)
        for j in range(n):
            norm = math.sqrt(sum(v * v for v in a[:, j]))
            if norm > tau:
                l21_ref[:, j] = a[:, j] * (norm - tau) / norm
        worst = max(worst, np.max(np.abs(svt(a, tau) - svt_ref)), np.max(np.abs(l21_shrink(a, tau) - l21_ref)))
        b = a + rng.normal((m, n))
        if np.linalg.norm(svt(a, tau) - svt(b, tau)) > np.linalg.norm(a - b) + 1e-12:
            expansive += 1
    report(4, "svt / l21_shrink vs hand oracles; svt non-expansive", worst <= 1e-12 and expansive == 0,
           f"max abs err {worst:.2e}, expansive pairs {expansive}")


def test_criterion_05_normalized_cut(report):
    misses = []
    for seed in range(50):
        w = random_affinity(SplitMix64(seed), 6)
        labels = spectral_cluster(w, 2, seed=0)
        if ncut_loop(w.tolist(), list(labels)) > min_bipartition_ncut(w.tolist()) + 1e-9:
            misses.append(seed)
    report(5, "two-way Ncut reaches exhaustive minimum (50 affinities)", not misses, f"misses {misses}")


def test_criterion_06_recall_harness(report):
    mismatches = 0
    combos = list(itertools.product(("PhrDet", "SGDet"), ("mask", "bbox"), (3, 5), (50, 100)))
    for seed in range(30):
        pred, gt = recall_scene(seed)
        assert len(pred.relations) <= 6 and len(gt.relations) <= 4
        for task, mode, x, k in combos:
            if match_recall(pred, gt, EvalConfig(task, mode, x, k)) != oracle_recall(pred, gt, task, mode, x, k):
                mismatches += 1
    # IoU of exactly one half must not count
    from test_sgeval import two_box_scene
    pred, gt = two_box_scene([0])
    strict = match_recall(pred, gt, EvalConfig("SGDet", "mask")) == 0.0
    report(6, "recall equals exhaustive assignment oracle (30 scenes x 16 settings)",
           mismatches == 0 and strict, f"mismatches {mismatches}, IoU=0.5 rejected {strict}")


def test_criterion_07_parser(report):
    pairs = golden_pairs()
    equal = sum(parse_caption(c["id"], c["caption"]).to_dict() == g for c, g in pairs)
    failures = 0
    for i, text in enumerate(fuzz_corpus()):
        try:
            g = parse_caption(f"f{i}", text)
            TextGraph.from_dict(g.to_dict())
        except Exception:
            failures += 1
    report(7, "golden corpus equality and fuzz totality", equal == len(pairs) == 25 and failures == 0,
           f"golden {equal}/{len(pairs)}, fuzz failures {failures}/1000")


def test_criterion_08_geometry_invariants(report):
    bad = 0
    for seed in range(1000):
        rng = SplitMix64(seed)
        hp, wp, ps = 1 + rng.randbelow(4), 1 + rng.randbelow(4), 1 + rng.randbelow(3)
        img = ImageFeatures.from_grid("g", rng.normal((hp, wp, 3)), ps)
        w = init_grouper_weights(3, centers=(5, 2), seed=seed)
        hier = group_forward(img, w, hard=bool(rng.randbelow(2)))
        for k in (1, 2):
            if not np.array_equal(segment_masks(hier, k, img).sum(axis=0), np.ones(img.pixel_size, int)):
                bad += 1
        labels = np.array([rng.randbelow(3) for _ in range(5)])
        masks = merge_segments(hier, 1, labels, img)
        names = ["sky", "dog", "grass"][: len(masks)]
        inst = merge_stuff(connected_components(masks, names), {"sky", "grass"})
        stack = np.stack([inst.mask(i) for i in inst.instances]) if inst.instances else np.zeros((0,) + img.pixel_size)
        if np.any(stack.sum(axis=0) > 1) or not np.array_equal(stack.any(axis=0), inst.ids > 0):
            bad += 1
        a = rng.uniform(0, 1, img.pixel_size) < 0.3
        b = rng.uniform(0, 1, img.pixel_size) < 0.3
        comp = complement_mask(a, b)
        if (comp & (a | b)).any():
            bad += 1
        if (a | b).any():
            rows = np.flatnonzero((a | b).any(axis=1))
            cols = np.flatnonzero((a | b).any(axis=0))
            box = np.zeros_like(a)
            box[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = True
            if (comp & ~box).any():
                bad += 1
        elif comp.any():
            bad += 1
    report(8, "partition, complement and non-overlap invariants (1000 fuzz cases)", bad == 0, f"violations {bad}")


def test_criterion_09_end_to_end_determinism(report, tmp_path):
    root = write_infer_fixture(tmp_path, n_images=2, centers=(16, 4), seed=5)
    outputs = []
    for run, workers in enumerate(("1", "1", "2")):
        out = tmp_path / f"run{run}"
        code = main(["infer", "--feats", str(root / "feats"), "--weights", str(root / "w.json"),
                     "--labels", str(root / "objects.json"), str(root / "relations.json"),
                     "--out", str(out), "--workers", workers, "--seed", "3"])
        assert code == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    identical = outputs[0] == outputs[1] == outputs[2] and len(outputs[0]) == 2
    overlap_ok = True
    for psg in read_psg_dir(tmp_path / "run0").values():
        ids = [i for i in psg.labels]
        total = sum((psg.labelmap == i).astype(int) for i in ids)
        overlap_ok &= bool(np.all(total <= 1))
    report(9, "infer output byte-identical across runs and worker counts; sum of masks <= 1",
           identical and overlap_ok, f"identical {identical}, non-overlap {overlap_ok}")


def test_criterion_10_default_constants(report):
    cfg = Config()
    w = init_grouper_weights(8)
    checks = {
        "stages K=2": cfg.num_stages == 2 and len(w.layers) == 2,
        "H1=64, H2=8": cfg.centers == (64, 8) and [l.num_centers for l in w.layers] == [64, 8],
        "patch 16": cfg.patch_size == 16 and ImageFeatures("x", (1, 1), np.ones((1, 1))).patch_size == 16,
        "theta -0.5": cfg.theta == -0.5,
        "lambda 0.4": cfg.lam == 0.4 and LrrConfig().lam == 0.4,
        "stage 1": cfg.stage == 1,
    }
    failed = [k for k, v in checks.items() if not v]
    report(10, "default constants", not failed, f"failed {failed}" if failed else json.dumps(list(checks)))
