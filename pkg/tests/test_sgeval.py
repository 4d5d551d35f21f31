import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from captionpsg.config import PSG_MERGE_MAP
from captionpsg.numkit import ShapeError, SplitMix64
from captionpsg.sgeval import (
    EvalConfig,
    PanopticSceneGraph,
    Relation,
    canonical_label,
    compute_miou,
    enumerate_triplets,
    evaluate,
    iou,
    mask_to_bbox,
    match_recall,
    merge_stuff_instances,
    semantic_map,
)

from fixtures import recall_scene
from oracles import bbox_loop, iou_loop, miou_loop, recall_exhaustive, top_triplets_loop


def test_bbox_examples():
    m = np.zeros((5, 5), dtype=bool)
    m[3, 2] = True
    assert mask_to_bbox(m) == (2, 3, 2, 3)
    assert mask_to_bbox(np.ones((3, 4))) == (0, 0, 3, 2)
    with pytest.raises(ValueError):
        mask_to_bbox(np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 9), st.integers(1, 9))
def test_bbox_matches_scan(seed, h, w):
    m = SplitMix64(seed).uniform(0, 1, (h, w)) < 0.3
    if m.any():
        assert mask_to_bbox(m) == bbox_loop(m.tolist())


def test_iou_examples():
    a = np.array([[1, 1, 0]], dtype=bool)
    b = np.array([[0, 1, 1]], dtype=bool)
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    assert abs(iou(a, b) - 1 / 3) < 1e-15
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    assert iou(np.zeros((2, 2)), np.zeros((2, 2)), "bbox") == 0.0
    with pytest.raises(ValueError):
        iou(a, b, "poly")
    with pytest.raises(ShapeError):
        iou(a, a.T)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["mask", "bbox"]))
def test_iou_matches_loop(seed, mode):
    rng = SplitMix64(seed)
    a, b = rng.uniform(0, 1, (6, 7)) < 0.3, rng.uniform(0, 1, (6, 7)) < 0.3
    assert abs(iou(a, b, mode) - iou_loop(a.tolist(), b.tolist(), mode)) <= 1e-15


def graph_with(relations, n=4):
    lm = np.arange(1, n + 1).reshape(1, n)
    return PanopticSceneGraph("g", lm, {i: "thing" for i in range(1, n + 1)}, relations)


def test_enumerate_caps():
    rels = [Relation(1, 2, f"p{i}", 0.1 * i) for i in range(7)]
    out = enumerate_triplets(graph_with(rels), 5, 100)
    assert [t.predicate for t in out] == ["p6", "p5", "p4", "p3", "p2"]
    assert len(enumerate_triplets(graph_with(rels[:2]), 5, 100)) == 2


def test_enumerate_matches_sort_and_cap_oracle():
    rng = SplitMix64(17)
    rels = []
    for _ in range(20):
        s, o = 1 + rng.randbelow(4), 1 + rng.randbelow(4)
        rels.append(Relation(s, o, "on near by at".split()[rng.randbelow(4)], round(rng.uniform(0, 1, 1)[0], 1)))
    for x, k in itertools.product((1, 3, 5), (3, 10, 50)):
        got = [(t.sub, t.obj, t.predicate, t.score) for t in enumerate_triplets(graph_with(rels), x, k)]
        want = top_triplets_loop([(r.sub, r.obj, r.predicate, r.score) for r in rels], x, k)
        assert got == want


def test_psg_validation():
    with pytest.raises(ValueError):
        PanopticSceneGraph("x", np.array([[1, 2]]), {1: "a"})
    with pytest.raises(ValueError):
        PanopticSceneGraph("x", np.array([[0]]), {0: "a"})
    with pytest.raises(ValueError):
        PanopticSceneGraph("x", np.array([[1]]), {1: "a"}, [Relation(1, 3, "on")])
    with pytest.raises(ValueError):
        PanopticSceneGraph("x", np.array([[1, 2]]), {1: "a", 2: "b"}, [Relation(1, 2, "on", float("nan"))])
    with pytest.raises(ValueError):
        EvalConfig(task="PredCls")


def two_box_scene(pred_sub_cols):
    gt_map = np.zeros((2, 4), dtype=np.int64)
    gt_map[:, :2] = 1
    gt_map[:, 2:] = 2
    pred_map = np.zeros((2, 4), dtype=np.int64)
    pred_map[:, 2:] = 2
    pred_map[:, pred_sub_cols] = 1
    labels = {1: "man", 2: "horse"}
    gt = PanopticSceneGraph("a", gt_map, labels, [Relation(1, 2, "ride")])
    pred = PanopticSceneGraph("a", pred_map, labels, [Relation(1, 2, "riding", 0.9)])
    return pred, gt


def test_exact_prediction_recalls_one():
    pred, gt = two_box_scene([0, 1])
    for task in ("PhrDet", "SGDet"):
        assert match_recall(pred, gt, EvalConfig(task, "mask")) == 1.0


def test_iou_exactly_half_is_rejected():
    pred, gt = two_box_scene([0])
    assert iou(pred.mask(1), gt.mask(1)) == 0.5
    assert match_recall(pred, gt, EvalConfig("SGDet", "mask")) == 0.0
    assert match_recall(pred, gt, EvalConfig("SGDet", "bbox")) == 0.0
    # the union of the pair still overlaps well, so phrase detection matches
    assert match_recall(pred, gt, EvalConfig("PhrDet", "mask")) == 1.0


def test_no_gt_triplets_gives_none():
    pred, gt = two_box_scene([0, 1])
    gt.relations = []
    assert match_recall(pred, gt, EvalConfig()) is None


def oracle_recall(pred, gt, task, mode, x, k, merge_map=None):
    merge_map = merge_map or {}
    trips = top_triplets_loop([(r.sub, r.obj, r.predicate, r.score) for r in pred.relations], x, k)
    gts = list(dict.fromkeys((r.sub, r.obj, r.predicate) for r in gt.relations))

    def lab(g, i):
        return canonical_label(g.labels[i], merge_map)

    def pred_lab(p):
        return canonical_label(p, merge_map, "predicate")

    def matches(p, g):
        if (lab(pred, p[0]), lab(pred, p[1]), pred_lab(p[2])) != (lab(gt, g[0]), lab(gt, g[1]), pred_lab(g[2])):
            return False
        pm = lambda i: (pred.labelmap == i).tolist()
        gm = lambda i: (gt.labelmap == i).tolist()
        if task == "PhrDet":
            pu = [[a or b for a, b in zip(r1, r2)] for r1, r2 in zip(pm(p[0]), pm(p[1]))]
            gu = [[a or b for a, b in zip(r1, r2)] for r1, r2 in zip(gm(g[0]), gm(g[1]))]
            return iou_loop(pu, gu, mode) > 0.5
        return iou_loop(pm(p[0]), gm(g[0]), mode) > 0.5 and iou_loop(pm(p[1]), gm(g[1]), mode) > 0.5

    return recall_exhaustive(trips, gts, matches)


@pytest.mark.parametrize("seed", range(8))
def test_recall_matches_exhaustive_oracle(seed):
    pred, gt = recall_scene(seed)
    for task, mode, x, k in itertools.product(("PhrDet", "SGDet"), ("mask", "bbox"), (3, 5), (50, 100)):
        assert match_recall(pred, gt, EvalConfig(task, mode, x, k)) == oracle_recall(pred, gt, task, mode, x, k)


def test_top_prediction_rerouted_to_keep_both_matches():
    # the top prediction overlaps both GT phrases; the second overlaps only the first, so taking
    # the first GT for the top prediction would leave one GT triplet unmatched
    gt_map = np.repeat([1, 2, 3], 4).reshape(1, 12)
    pred_map = np.array([[3, 3, 3, 1, 1, 1, 1, 1, 2, 0, 0, 0]])
    labels = {1: "person", 2: "person", 3: "person"}
    gt = PanopticSceneGraph("t", gt_map, labels, [Relation(1, 2, "near"), Relation(2, 3, "near")])
    pred = PanopticSceneGraph("t", pred_map, labels, [Relation(1, 2, "near", 0.9), Relation(3, 1, "near", 0.8)])
    assert match_recall(pred, gt, EvalConfig("PhrDet")) == 1.0
    assert oracle_recall(pred, gt, "PhrDet", "mask", 5, 100) == 1.0


def test_merge_map_and_lemmas_in_matching():
    lm = np.array([[1, 2]])
    gt = PanopticSceneGraph("m", lm, {1: "person", 2: "window"}, [Relation(1, 2, "looking at")])
    pred = PanopticSceneGraph("m", lm, {1: "persons", 2: "window-blind"}, [Relation(1, 2, "looks at", 0.5)])
    assert match_recall(pred, gt, EvalConfig(merge_map=PSG_MERGE_MAP)) == 1.0
    assert match_recall(pred, gt, EvalConfig()) == 0.0


def test_merge_stuff_instances_repoints_relations():
    lm = np.array([[1, 2, 3]])
    psg = PanopticSceneGraph("s", lm, {1: "grass", 2: "dog", 3: "grass"},
                             [Relation(2, 1, "on", 0.4), Relation(2, 3, "on", 0.7), Relation(1, 3, "near", 0.2)])
    out = merge_stuff_instances(psg, {"grass"})
    assert sorted(out.labels.items()) == [(1, "grass"), (2, "dog")]
    assert out.labelmap.tolist() == [[1, 2, 1]]
    assert [(r.sub, r.obj, r.predicate, r.score) for r in out.relations] == [(2, 1, "on", 0.7)]
    assert merge_stuff_instances(psg, set()) is psg


def test_evaluate_report_and_missing_images():
    pred, gt = two_box_scene([0, 1])
    _, gt2 = two_box_scene([0, 1])
    gt2.image_id = "b"
    rep = evaluate({"a": pred}, {"a": gt, "b": gt2}, xs=(5,), ks=(100,))
    assert rep.recalls["SGDet", 5, 100] == 0.5
    assert rep.per_image["SGDet", 5, 100] == {"a": 1.0, "b": 0.0}
    d = rep.to_dict()
    assert d["recall"]["PhrDet"]["N5R100"] == 0.5
    assert "N5R100" in rep.table().splitlines()[0]
    with pytest.raises(KeyError):
        evaluate({"zzz": pred}, {"a": gt})


def test_miou_examples():
    a = np.array([[0, 1], [1, 0]])
    assert compute_miou(a, a) == 1.0
    assert compute_miou(np.zeros((2, 2), int), np.ones((2, 2), int)) == 0.0
    p = np.array([[0, 0, 1, 1]] * 4)
    g = np.array([[0, 1, 1, 1]] * 4)
    # class 0: 4 / 8, class 1: 8 / 12
    assert abs(compute_miou(p, g) - (0.5 + 2 / 3) / 2) < 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_miou_matches_loop(seed):
    rng = SplitMix64(seed)
    preds = [np.array([rng.randbelow(4) - 1 for _ in range(20)]).reshape(4, 5) for _ in range(3)]
    gts = [np.array([rng.randbelow(4) - 1 for _ in range(20)]).reshape(4, 5) for _ in range(3)]
    assert abs(compute_miou(preds, gts) - miou_loop([p.tolist() for p in preds], [g.tolist() for g in gts])) <= 1e-12


def test_semantic_map():
    psg = PanopticSceneGraph("s", np.array([[0, 1, 2]]), {1: "wall-brick", 2: "zebra"})
    assert semantic_map(psg, ["wall", "dog"], PSG_MERGE_MAP).tolist() == [[-1, 0, -1]]
