"""Triplet recall (PhrDet / SGDet, NXR@K) and mIoU for panoptic scene graphs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .labeler import lemma_label
from .numkit import ShapeError

__all__ = [
    "EvalConfig",
    "EvalReport",
    "PanopticSceneGraph",
    "Relation",
    "Triplet",
    "canonical_label",
    "compute_miou",
    "enumerate_triplets",
    "evaluate",
    "iou",
    "mask_to_bbox",
    "match_recall",
    "merge_stuff_instances",
    "semantic_map",
]

TASKS = ("PhrDet", "SGDet")
MODES = ("mask", "bbox")


@dataclass(frozen=True)
class Relation:
    sub: int
    obj: int
    predicate: str
    score: float = 1.0


@dataclass
class PanopticSceneGraph:
    """Instance label map (0 = unlabeled) plus labels and scored relations."""

    image_id: str
    labelmap: np.ndarray
    labels: dict[int, str]
    relations: list[Relation] = field(default_factory=list)
    scores: dict[int, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labelmap = np.asarray(self.labelmap, dtype=np.int64)
        if self.labelmap.ndim != 2:
            raise ShapeError(f"labelmap must be 2-D, got {self.labelmap.shape}")
        present = set(np.unique(self.labelmap).tolist()) - {0}
        missing = present - set(self.labels)
        if missing:
            raise ValueError(f"labelmap ids without labels: {sorted(missing)}")
        if 0 in self.labels:
            raise ValueError("instance id 0 is reserved for unlabeled pixels")
        for r in self.relations:
            if r.sub not in self.labels or r.obj not in self.labels:
                raise ValueError(f"relation endpoint missing: {r}")
            if not np.isfinite(r.score):
                raise ValueError(f"non-finite relation score: {r}")

    @property
    def height(self) -> int:
        return self.labelmap.shape[0]

    @property
    def width(self) -> int:
        return self.labelmap.shape[1]

    def mask(self, iid: int) -> np.ndarray:
        return self.labelmap == iid


@dataclass(frozen=True)
class EvalConfig:
    task: str = "SGDet"
    mode: str = "mask"
    x: int = 5
    k: int = 100
    merge_map: Mapping[str, str] = field(default_factory=dict)
    stuff: frozenset = frozenset()

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.x < 1 or self.k < 1:
            raise ValueError("X and K must be at least 1")


def mask_to_bbox(mask) -> tuple[int, int, int, int]:
    """Tight inclusive box ``(x0, y0, x1, y1)``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask has no bounding box")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def _box_area(b) -> int:
    return max(0, b[2] - b[0] + 1) * max(0, b[3] - b[1] + 1)


def _box_iou(a, b) -> float:
    inter = (max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3]))
    i = _box_area(inter) if inter[0] <= inter[2] and inter[1] <= inter[3] else 0
    u = _box_area(a) + _box_area(b) - i
    return i / u if u else 0.0


def iou(a, b, mode: str = "mask") -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if mode == "mask":
        u = np.count_nonzero(a | b)
        return np.count_nonzero(a & b) / u if u else 0.0
    if mode != "bbox":
        raise ValueError(f"unknown IoU mode {mode!r}")
    if not a.any() or not b.any():
        return 0.0
    return _box_iou(mask_to_bbox(a), mask_to_bbox(b))


@dataclass(frozen=True)
class Triplet:
    sub: int
    obj: int
    predicate: str
    score: float


def enumerate_triplets(psg: PanopticSceneGraph, x: int, k: int) -> list[Triplet]:
    """Top-``k`` triplets with at most ``x`` predicates per ordered pair."""
    pairs: dict[tuple[int, int], list[Relation]] = {}
    for r in psg.relations:
        pairs.setdefault((r.sub, r.obj), []).append(r)
    kept = []
    for rels in pairs.values():
        rels = sorted(rels, key=lambda r: (-r.score, r.predicate))[:x]
        kept.extend(Triplet(r.sub, r.obj, r.predicate, float(r.score)) for r in rels)
    kept.sort(key=lambda t: (-t.score, t.sub, t.obj, t.predicate))
    return kept[:k]


def canonical_label(label: str, merge_map: Mapping[str, str], kind: str = "object") -> str:
    return lemma_label(merge_map.get(label, label), kind)


def merge_stuff_instances(psg: PanopticSceneGraph, stuff, merge_map=None) -> PanopticSceneGraph:
    """Fold instances whose canonical label is a stuff class into one per class.

    Relations are re-pointed at the surviving (lowest) id; self-loops that
    result are dropped and duplicate triplets keep their best score.
    """
    merge_map = merge_map or {}
    stuff = {canonical_label(s, merge_map) for s in stuff}
    first: dict[str, int] = {}
    rep = {}
    for iid in sorted(psg.labels):
        lab = canonical_label(psg.labels[iid], merge_map)
        if lab in stuff:
            rep[iid] = first.setdefault(lab, iid)
        else:
            rep[iid] = iid
    if all(rep[i] == i for i in rep):
        return psg
    lut = {0: 0, **rep}
    labelmap = np.vectorize(lambda v: lut[int(v)], otypes=[np.int64])(psg.labelmap)
    best: dict[tuple[int, int, str], float] = {}
    for r in psg.relations:
        key = (rep[r.sub], rep[r.obj], r.predicate)
        if key[0] != key[1]:
            best[key] = max(best.get(key, -np.inf), r.score)
    rels = [Relation(s, o, p, sc) for (s, o, p), sc in best.items()]
    keep = sorted(set(rep.values()))
    scores = {i: max(psg.scores.get(j, 1.0) for j in rep if rep[j] == i) for i in keep}
    return PanopticSceneGraph(psg.image_id, labelmap, {i: psg.labels[i] for i in keep}, rels, scores,
                              dict(psg.meta))


def _gt_triplets(gt: PanopticSceneGraph) -> list[Triplet]:
    seen = set()
    out = []
    for r in gt.relations:
        key = (r.sub, r.obj, r.predicate)
        if key not in seen:
            seen.add(key)
            out.append(Triplet(r.sub, r.obj, r.predicate, 1.0))
    return out


def _location_match(pred, gt, p: Triplet, g: Triplet, cfg: EvalConfig, cache: dict) -> bool:
    key = (p.sub, p.obj, g.sub, g.obj)
    if key in cache:
        return cache[key]
    if cfg.task == "PhrDet":
        # in bbox mode the box of the union encloses both boxes
        ok = iou(pred.mask(p.sub) | pred.mask(p.obj), gt.mask(g.sub) | gt.mask(g.obj), cfg.mode) > 0.5
    else:
        ok = (iou(pred.mask(p.sub), gt.mask(g.sub), cfg.mode) > 0.5
              and iou(pred.mask(p.obj), gt.mask(g.obj), cfg.mode) > 0.5)
    cache[key] = ok
    return ok


def candidate_matches(pred: PanopticSceneGraph, gt: PanopticSceneGraph, cfg: EvalConfig):
    """Ranked predictions, GT triplets, and for each prediction the GT indices it may match."""
    if pred.labelmap.shape != gt.labelmap.shape:
        raise ValueError(f"image size mismatch for {gt.image_id}: "
                         f"{pred.labelmap.shape} vs {gt.labelmap.shape}")
    mm = cfg.merge_map
    preds = enumerate_triplets(pred, cfg.x, cfg.k)
    gts = _gt_triplets(gt)
    p_lab = {i: canonical_label(l, mm) for i, l in pred.labels.items()}
    g_lab = {i: canonical_label(l, mm) for i, l in gt.labels.items()}
    cache: dict = {}
    cands = []
    for p in preds:
        p_key = (p_lab[p.sub], p_lab[p.obj], canonical_label(p.predicate, mm, "predicate"))
        row = []
        for j, g in enumerate(gts):
            if (g_lab[g.sub], g_lab[g.obj], canonical_label(g.predicate, mm, "predicate")) != p_key:
                continue
            if _location_match(pred, gt, p, g, cfg, cache):
                row.append(j)
        cands.append(row)
    return preds, gts, cands


def _assign(cands: Sequence[Sequence[int]]) -> dict[int, int]:
    """One-to-one matching built in score order with augmenting paths.

    Each prediction, in rank order, takes a free GT triplet, re-routing
    earlier predictions when that frees one up; the result is a maximum
    matching, so no ranked prediction loses a match through an unlucky
    earlier choice.
    """
    owner: dict[int, int] = {}

    def augment(i: int, seen: set) -> bool:
        for j in cands[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in owner or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    for i in range(len(cands)):
        augment(i, set())
    return owner


def match_recall(pred: PanopticSceneGraph, gt: PanopticSceneGraph, cfg: EvalConfig) -> float | None:
    """Fraction of GT triplets matched; ``None`` when the image has no GT triplet."""
    preds, gts, cands = candidate_matches(pred, gt, cfg)
    if not gts:
        return None
    return len(_assign(cands)) / len(gts)


@dataclass
class EvalReport:
    recalls: dict[tuple[str, int, int], float]
    per_image: dict[tuple[str, int, int], dict[str, float]]
    mode: str = "mask"
    miou: float | None = None

    def column(self, x: int, k: int) -> str:
        return f"N{x}R{k}"

    def to_dict(self) -> dict:
        out: dict = {"mode": self.mode, "recall": {}, "per_image": {}}
        for (task, x, k), v in sorted(self.recalls.items()):
            out["recall"].setdefault(task, {})[self.column(x, k)] = v
            out["per_image"].setdefault(task, {})[self.column(x, k)] = dict(sorted(self.per_image[task, x, k].items()))
        if self.miou is not None:
            out["miou"] = self.miou
        return out

    def table(self) -> str:
        cols = sorted({(x, k) for _, x, k in self.recalls})
        tasks = [t for t in TASKS if any(key[0] == t for key in self.recalls)]
        head = ["task"] + [self.column(x, k) for x, k in cols]
        lines = [" ".join(f"{h:>8}" for h in head)]
        for t in tasks:
            vals = [f"{100 * self.recalls[t, x, k]:8.2f}" for x, k in cols]
            lines.append(" ".join([f"{t:>8}"] + vals))
        if self.miou is not None:
            lines.append(f"mIoU {100 * self.miou:.2f}")
        return "\n".join(lines)


def evaluate(preds: Mapping[str, PanopticSceneGraph], gts: Mapping[str, PanopticSceneGraph],
             mode: str = "mask", xs: Iterable[int] = (3, 5), ks: Iterable[int] = (50, 100),
             merge_map: Mapping[str, str] | None = None, tasks: Iterable[str] = TASKS,
             stuff: Iterable[str] = ()) -> EvalReport:
    """Mean per-image recall over images with at least one GT triplet.

    Images without a prediction count as recall 0.
    """
    for image_id in preds:
        if image_id not in gts:
            raise KeyError(f"no ground truth for prediction {image_id!r}")
    merge_map = dict(merge_map or {})
    stuff = tuple(stuff)
    if stuff:
        preds = {i: merge_stuff_instances(p, stuff, merge_map) for i, p in preds.items()}
        gts = {i: merge_stuff_instances(g, stuff, merge_map) for i, g in gts.items()}
    recalls, per_image = {}, {}
    for task in tasks:
        for x in xs:
            for k in ks:
                cfg = EvalConfig(task, mode, x, k, merge_map)
                vals = {}
                for image_id in sorted(gts):
                    gt = gts[image_id]
                    pred = preds.get(image_id)
                    if pred is None:
                        if _gt_triplets(gt):
                            vals[image_id] = 0.0
                        continue
                    r = match_recall(pred, gt, cfg)
                    if r is not None:
                        vals[image_id] = r
                per_image[task, x, k] = vals
                recalls[task, x, k] = float(np.mean(list(vals.values()))) if vals else 0.0
    return EvalReport(recalls, per_image, mode)


def semantic_map(psg: PanopticSceneGraph, classes: Sequence[str], merge_map=None) -> np.ndarray:
    """Class-index map (-1 for unlabeled or out-of-vocabulary pixels)."""
    merge_map = merge_map or {}
    index = {c: i for i, c in enumerate(classes)}
    lut = {0: -1}
    for iid, lab in psg.labels.items():
        lut[iid] = index.get(canonical_label(lab, merge_map), -1)
    ids = np.unique(psg.labelmap)
    out = np.full(psg.labelmap.shape, -1, dtype=np.int64)
    for iid in ids:
        out[psg.labelmap == iid] = lut[int(iid)]
    return out


def compute_miou(preds, gts, num_classes: int | None = None) -> float:
    """Dataset-level per-class IoU averaged over classes present in GT.

    ``preds`` and ``gts`` are class-index maps (or sequences of them);
    negative entries are ignored in GT and count as background in
    predictions.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    present: set[int] = set()
    for p, g in zip(preds, gts, strict=True):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"label map shapes differ: {p.shape} vs {g.shape}")
        valid = g >= 0
        classes = set(np.unique(g[valid]).tolist()) | set(np.unique(p[valid]).tolist())
        present |= set(np.unique(g[valid]).tolist())
        for c in classes:
            if c < 0:
                continue
            pc = (p == c) & valid
            gc = g == c
            inter[c] = inter.get(c, 0) + int(np.count_nonzero(pc & gc))
            union[c] = union.get(c, 0) + int(np.count_nonzero(pc | gc))
    if num_classes is not None:
        present = {c for c in present if c < num_classes}
    if not present:
        return 0.0
    return float(np.mean([inter[c] / union[c] for c in sorted(present)]))
