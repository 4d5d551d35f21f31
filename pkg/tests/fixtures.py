"""Seeded synthetic inputs shared by several test files."""

import numpy as np

from captionpsg.numkit import SplitMix64

BLOCKS = (3, 3, 2)


def planted_blocks(seed, sizes=BLOCKS, noise=0.05):
    """Block-diagonal similarity with unit blocks and symmetric uniform noise elsewhere.

    Returns ``(sim, truth)`` where ``truth`` is the planted block index per row.
    """
    rng = SplitMix64(seed)
    truth = np.repeat(np.arange(len(sizes)), sizes)
    n = truth.size
    sim = (truth[:, None] == truth[None, :]).astype(np.float64)
    upper = np.triu(rng.uniform(0.0, noise, (n, n)), 1)
    sim += np.where(sim == 0, upper + upper.T, 0.0)
    return sim, truth


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return bool(np.array_equal(a[:, None] == a[None, :], b[:, None] == b[None, :]))


OBJECT_NAMES = ("person", "horse", "grass", "person")
PREDICATES = ("on", "near", "ride")


def recall_scene(seed, n_pred=6, n_gt=4):
    """Small GT/prediction pair with repeated labels and boundary-IoU instances.

    GT instances are rectangles in the four 4x4 quadrants of an 8x8 image,
    each with an even height. A predicted instance is either the GT
    rectangle, its top half (IoU exactly 0.5 in both modes), or a one-pixel
    shift of it.
    """
    from captionpsg.sgeval import PanopticSceneGraph, Relation

    rng = SplitMix64(seed)
    gt_map = np.zeros((8, 8), dtype=np.int64)
    pred_map = np.zeros((8, 8), dtype=np.int64)
    n_inst = 2 + rng.randbelow(3)
    labels = {}
    for iid in range(1, n_inst + 1):
        r0, c0 = 4 * ((iid - 1) // 2), 4 * ((iid - 1) % 2)
        h, w = 2 * (1 + rng.randbelow(2)), 1 + rng.randbelow(3)
        gt_map[r0:r0 + h, c0:c0 + w] = iid
        kind = rng.randbelow(3)
        if kind == 0:
            pred_map[r0:r0 + h, c0:c0 + w] = iid
        elif kind == 1:
            pred_map[r0:r0 + h // 2, c0:c0 + w] = iid
        else:
            pred_map[r0:r0 + h, c0 + 1:c0 + w + 1] = iid
        labels[iid] = OBJECT_NAMES[rng.randbelow(len(OBJECT_NAMES))]
    ids = list(labels)

    def rel(score):
        s = ids[rng.randbelow(len(ids))]
        o = ids[rng.randbelow(len(ids))]
        if s == o:
            o = ids[(ids.index(s) + 1) % len(ids)]
        return Relation(s, o, PREDICATES[rng.randbelow(len(PREDICATES))], score)

    gt_rels = [rel(1.0) for _ in range(1 + rng.randbelow(n_gt))]
    pred_rels = []
    for _ in range(1 + rng.randbelow(n_pred)):
        r = rel(round(rng.uniform(0.0, 1.0, 1)[0], 3))
        if rng.randbelow(2):
            # copy a GT triplet, sometimes with the subject and object swapped
            g = gt_rels[rng.randbelow(len(gt_rels))]
            s, o = (g.obj, g.sub) if rng.randbelow(4) == 0 else (g.sub, g.obj)
            r = Relation(s, o, g.predicate, r.score)
        pred_rels.append(r)
    gt = PanopticSceneGraph(f"s{seed}", gt_map, labels, gt_rels)
    pred = PanopticSceneGraph(f"s{seed}", pred_map, dict(labels), pred_rels)
    return pred, gt


def two_block_model(d=8):
    """Hand-built weights that split an image whose halves point along +e0 and -e0."""
    from captionpsg.grouper import GrouperWeights, LayerWeights, Mixer
    from captionpsg.labeler import PositionalTags
    from captionpsg.weights import ModelWeights

    def layer(c):
        return LayerWeights(c, np.eye(d), np.eye(d), np.eye(d), Mixer.zeros(d), 0.1)

    c1 = np.zeros((4, d))
    c1[:2, 0], c1[2:, 0] = 5.0, -5.0
    c1[[1, 3], 2] = 1.0
    c2 = np.zeros((2, d))
    c2[0, 0], c2[1, 0] = 5.0, -5.0
    ent = np.array([[3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]])
    rel = np.eye(3)
    return ModelWeights(GrouperWeights((layer(c1), layer(c2))), None, np.eye(d)[:3], ent, rel,
                        PositionalTags.zeros(d))


def two_block_grid(seed=0, d=8, hp=8, wp=8):
    grid = np.zeros((hp, wp, d))
    grid[:, : wp // 2, 0] = 1.0
    grid[:, wp // 2 :, 0] = -1.0
    return grid + 0.05 * SplitMix64(seed).normal((hp, wp, d))


def write_infer_fixture(root, n_images=3, d=8, centers=(16, 4), seed=0):
    """Seeded 8x8-patch feature files, label sets and random weights for the infer command."""
    import json
    from pathlib import Path

    from captionpsg.tensorio import write_tensor
    from captionpsg.weights import init_model_weights, save_weights

    root = Path(root)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    rng = SplitMix64(seed)
    for i in range(n_images):
        write_tensor(rng.normal((8, 8, d)), root / "feats" / f"im{i}.ftns")
    objects = ["person", "horse", "grass", "sky"]
    relations = ["on", "near", "ride"]
    (root / "objects.json").write_text(json.dumps(objects))
    (root / "relations.json").write_text(json.dumps(relations))
    w = init_model_weights(d, 6, 8, centers, len(objects), len(relations), 4, seed)
    save_weights(w, root / "w.json")
    return root


def write_ground_fixture(root, d=8, text_dim=6, seed=0):
    """Three images with captions, caption token files and small random weights."""
    import json
    from pathlib import Path

    from captionpsg.tensorio import write_tensor
    from captionpsg.textgraph import tokenize
    from captionpsg.weights import init_model_weights, save_weights

    root = Path(root)
    for sub in ("feats", "tokens"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    caps = [("a#0", "a man riding a horse"), ("a#1", "a horse on the grass"),
            ("b#0", "a dog sitting on a couch"), ("c#0", "two people near a tree")]
    rng = SplitMix64(seed)
    for img in ("a", "b", "c"):
        write_tensor(rng.normal((2, 3, d)), root / "feats" / f"{img}.ftns")
    for cid, text in caps:
        write_tensor(rng.normal((len(tokenize(text)), text_dim)), root / "tokens" / f"{cid}.ftns")
    (root / "caps.jsonl").write_text("".join(json.dumps({"id": c, "caption": t}) + "\n" for c, t in caps))
    save_weights(init_model_weights(d, text_dim, 8, (4, 2), seed=seed), root / "w.json")
    return root
