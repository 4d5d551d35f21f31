"""End-to-end workflows behind the command line: parsing, grounding, gradient checks, inference."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import Config
from .grounder import (
    DegeneratePointError,
    embed,
    encode_entities,
    fine_contrastive_loss,
    grad_fine_loss,
    ground,
    check_nondegenerate,
)
from .grouper import ImageFeatures, group_forward
from .labeler import (
    MockScorer,
    PositionalTags,
    build_entity_prompt,
    build_relation_prompt,
    complement_mask,
    lemma_label,
    rank_labels,
    tag_positions,
)
from .merger import (
    LrrConfig,
    connected_components,
    lrr_recover,
    merge_segments,
    merge_stuff,
    pseudo_target,
    similarity_loss,
    similarity_loss_grad,
    similarity_matrix,
    spectral_cluster,
)
from .numkit import SplitMix64
from .sgeval import PanopticSceneGraph, Relation
from .tensorio import TensorFormatError, read_tensor
from .textgraph import TextGraph, image_id_of, merge_text_graphs, parse_caption
from .weights import ModelWeights

__all__ = [
    "DataError",
    "NonConvergenceError",
    "gradcheck",
    "ground_batch",
    "infer_image",
    "infer_many",
    "load_features",
    "parse_caption_lines",
]


class DataError(ValueError):
    """Missing or malformed input data."""


class NonConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parsing

def parse_caption_lines(lines, merge: bool = True) -> list[TextGraph]:
    """Parse ``{"id": ..., "caption": ...}`` JSON lines into text graphs.

    With ``merge`` set, captions sharing an image id (the part before ``#``)
    are merged into one graph per image, in order of first appearance.
    """
    graphs = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            cid = str(rec.get("id", rec.get("caption_id")))
            text = rec["caption"]
            if rec.get("id", rec.get("caption_id")) is None or not isinstance(text, str):
                raise KeyError("id/caption")
        except (json.JSONDecodeError, KeyError, AttributeError) as exc:
            raise DataError(f"line {n}: malformed caption record ({exc})") from None
        graphs.append(parse_caption(cid, text))
    if not merge:
        return graphs
    groups: dict[str, list[TextGraph]] = {}
    for g in graphs:
        groups.setdefault(image_id_of(g.caption_id), []).append(g)
    return [merge_text_graphs(gs) if len(gs) > 1 or gs[0].caption_id != img else gs[0]
            for img, gs in groups.items()]


def read_graphs(path) -> list[TextGraph]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(TextGraph.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: line {n}: bad text graph ({exc})") from None
    return out


# ---------------------------------------------------------------------------
# data loading

def _read(path: Path, what: str) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing {what} file {path}")
    try:
        return np.asarray(read_tensor(path), dtype=np.float64)
    except TensorFormatError as exc:
        raise DataError(str(exc)) from None


def load_features(feats_dir, image_id: str, patch_size: int = 16) -> ImageFeatures:
    """``<feats_dir>/<image_id>.ftns`` holding an (h_p, w_p, d) grid."""
    a = _read(Path(feats_dir) / f"{image_id}.ftns", f"feature (image {image_id})")
    if a.ndim != 3:
        raise DataError(f"features for image {image_id} must be (h_p, w_p, d), got {a.shape}")
    return ImageFeatures.from_grid(image_id, a, patch_size)


def load_entity_features(tokens_dir, graph: TextGraph, weights: ModelWeights) -> np.ndarray:
    """Entity features pooled from each entity's caption token file."""
    cache: dict[str, np.ndarray] = {}
    rows = []
    for e in graph.entities:
        src = e.source or graph.caption_id
        if src not in cache:
            cache[src] = _read(Path(tokens_dir) / f"{src}.ftns", f"token (caption {src})")
        toks = cache[src]
        if toks.ndim != 2:
            raise DataError(f"tokens for caption {src} must be (n, d), got {toks.shape}")
        try:
            rows.append(encode_entities(toks, [e.span], weights.grounder)[0])
        except ValueError as exc:
            raise DataError(f"caption {src}: {exc}") from None
    d = weights.grounder.proj_text.w1.shape[0]
    return np.array(rows).reshape(len(rows), d)


# ---------------------------------------------------------------------------
# grounding

def ground_batch(graphs, feats_dir, tokens_dir, weights: ModelWeights, cfg: Config) -> list[dict]:
    """Per-image losses and groundings for one training batch.

    Images whose graph has no entity are reported but left out of the
    contrastive batch.
    """
    if weights.grounder is None:
        raise DataError("weights have no grounder entries")
    graphs = sorted(graphs, key=lambda g: g.caption_id)
    items = []
    for g in graphs:
        img = load_features(feats_dir, image_id_of(g.caption_id), cfg.patch_size)
        ents = load_entity_features(tokens_dir, g, weights)
        items.append((g, img, ents, group_forward(img, weights.grouper)))
    records = {g.caption_id: {"image_id": g.caption_id, "stages": []} for g, *_ in items}
    active = [it for it in items if it[0].entities]
    for g, *_ in items:
        if not g.entities:
            records[g.caption_id]["skipped"] = "no entities"
    tau = weights.grounder.tau if cfg.tau is None else cfg.tau
    for k in range(1, weights.grouper.num_stages + 1):
        embs = [embed(h.stage(k).segments, ents, weights.grounder, k) for _, _, ents, h in active]
        fine = fine_contrastive_loss(embs, tau, cfg.theta) if embs else None
        for (g, *_), e in zip(active, embs):
            gr = ground(e, cfg.theta)
            sim = similarity_matrix(e.x)
            target = pseudo_target(gr)
            records[g.caption_id]["stages"].append({
                "stage": k,
                "fine_loss": fine.total,
                "grounding": gr.to_records(),
                "sim_loss": similarity_loss(sim, target),
                "sim": np.round(sim, 12).tolist(),
                "target": target.astype(int).tolist(),
            })
    return [records[g.caption_id] for g, *_ in items]


# ---------------------------------------------------------------------------
# gradient check

def _fd_grad(f, x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, n) -> float:
    a = np.asarray(a)
    n = np.asarray(n)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def random_batch(rng: SplitMix64, theta: float, b: int = 3, h: int = 5, e: int = 4, d: int = 8,
                 max_tries: int = 100):
    """Seeded non-degenerate batch; degenerate draws are redrawn, and counted."""
    for attempt in range(max_tries):
        batch = [(rng.normal((h, d)), rng.normal((e, d))) for _ in range(b)]
        try:
            check_nondegenerate(batch, theta)
            return batch, attempt
        except DegeneratePointError:
            continue
    raise DegeneratePointError(f"no non-degenerate batch in {max_tries} draws")


def gradcheck(seed: int = 0, eps: float = 1e-6, tau: float = 0.07, theta: float = -0.5, d: int = 8,
              corrupt: bool = False) -> dict:
    """Max relative error of analytic vs central-difference gradients of both losses."""
    rng = SplitMix64(seed)
    batch, redraws = random_batch(rng, theta, d=d)
    grads = grad_fine_loss(batch, tau, theta)
    fine_err = 0.0
    for (x, y), (gx, gy) in zip(batch, grads):
        for arr, g in ((x, gx), (y, gy)):
            num = _fd_grad(lambda: fine_contrastive_loss(batch, tau, theta).total, arr, eps)
            fine_err = max(fine_err, rel_error(g * (1.01 if corrupt else 1.0), num))
    sim_err = 0.0
    for x, _ in batch:
        n = x.shape[0]
        labels = np.array([rng.randbelow(2) for _ in range(n)])
        target = (labels[:, None] == labels[None, :]).astype(float)
        _, gx = similarity_loss_grad(x, target)
        num = _fd_grad(lambda: similarity_loss(similarity_matrix(x), target), x, eps)
        sim_err = max(sim_err, rel_error(gx * (1.01 if corrupt else 1.0), num))
    return {"seed": seed, "eps": eps, "redraws": redraws, "fine_rel_error": fine_err,
            "sim_rel_error": sim_err}


# ---------------------------------------------------------------------------
# inference

def _scorer(weights: ModelWeights, objects, relations, img: ImageFeatures) -> MockScorer:
    if weights.bilinear is None or weights.entity_emb is None:
        raise DataError("weights have no label scorer entries")
    if weights.entity_emb.shape[0] != len(objects):
        raise DataError(f"{weights.entity_emb.shape[0]} object embeddings for {len(objects)} object labels")
    rel_emb = weights.relation_emb
    if relations and (rel_emb is None or rel_emb.shape[0] != len(relations)):
        raise DataError(f"relation embeddings do not match {len(relations)} relation labels")
    return MockScorer(objects, weights.entity_emb, weights.bilinear,
                      relations if relations else None, rel_emb if relations else None,
                      img.grid, img.patch_size)


def infer_image(img: ImageFeatures, weights: ModelWeights, cfg: Config, objects, relations) -> PanopticSceneGraph:
    k = cfg.stage
    hier = group_forward(img, weights.grouper)
    st = hier.stage(k)
    x = weights.grounder.proj_for_stage(k)(st.segments) if weights.grounder is not None else st.segments
    sim = similarity_matrix(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lrr = lrr_recover(sim, LrrConfig(lam=cfg.lam))
    meta = {"stage": k, "lrr_iterations": lrr.iterations, "lrr_converged": lrr.converged, "warnings": []}
    if not lrr.converged:
        msg = f"LRR did not converge (residual {lrr.residual:.3g})"
        if cfg.strict:
            raise NonConvergenceError(f"image {img.image_id}: {msg}")
        meta["warnings"].append(msg)
    seg_labels = spectral_cluster(lrr.Z, cfg.clusters, cfg.seed)
    masks = merge_segments(hier, k, seg_labels, img)
    masks = masks[masks.reshape(len(masks), -1).any(axis=1)]
    meta["clusters"] = int(len(masks))

    scorer = _scorer(weights, objects, relations, img)
    tokens = hier.updated_patches
    ent_prompt = build_entity_prompt()
    labels, scores = [], []
    for m in masks:
        best, lp = rank_labels(scorer, ent_prompt, tokens, m, objects)[0]
        labels.append(best)
        scores.append(float(np.exp(lp)))
    inst = merge_stuff(connected_components(masks, labels, cfg.min_pixels, scores), cfg.stuff)

    tags = weights.tags or PositionalTags.zeros(img.dim)
    ids = sorted(inst.instances)
    rels = []
    if relations:
        for s in ids:
            for o in ids:
                if s == o:
                    continue
                m_s, m_o = inst.mask(s), inst.mask(o)
                m_r = complement_mask(m_s, m_o)
                tagged = tag_positions(tokens, m_s, m_o, m_r, tags, img.grid, img.patch_size)
                prompt = build_relation_prompt(lemma_label(inst.instances[s].label),
                                               lemma_label(inst.instances[o].label))
                ranked = rank_labels(scorer, prompt, tagged, m_s | m_o | m_r, relations)
                p_so = inst.instances[s].score * inst.instances[o].score
                for pred, lp in ranked[: cfg.top_predicates]:
                    rels.append(Relation(s, o, pred, p_so * float(np.exp(lp))))
    return PanopticSceneGraph(img.image_id, inst.ids, {i: inst.instances[i].label for i in ids}, rels,
                              {i: inst.instances[i].score for i in ids}, meta)


def infer_many(image_ids, feats_dir, weights: ModelWeights, cfg: Config, objects, relations):
    """Run inference per image on a thread pool; results come back in input order."""
    def one(image_id):
        return infer_image(load_features(feats_dir, image_id, cfg.patch_size), weights, cfg, objects, relations)

    if cfg.workers == 1:
        return [one(i) for i in image_ids]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(one, image_ids))
