"""Segment merging.

Training side: the segment-segment similarity matrix, its pseudo target
from grounding, and the similarity loss with its gradient.

Inference side: low-rank representation (LRR) recovery of the similarity
matrix by an inexact augmented Lagrangian method, normalized-cut spectral
clustering of the recovered coefficients, mask merging, connected-component
instance splitting and stuff-class merging.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grounder import GroundingResult, _cos_backward, cosine_matrix
from .grouper import ImageFeatures, SegmentHierarchy, segment_masks
from .numkit import ShapeError, kmeans, l21_shrink, solve_spd, svt, sym_eig

__all__ = [
    "Instance",
    "InstanceMap",
    "LrrConfig",
    "LrrResult",
    "connected_components",
    "lrr_recover",
    "merge_segments",
    "merge_stuff",
    "ncut_value",
    "pseudo_target",
    "similarity_loss",
    "similarity_loss_grad",
    "similarity_matrix",
    "spectral_cluster",
]

log = logging.getLogger(__name__)

MAX_AUTO_CLUSTERS = 16
PAIR_MOVE_LIMIT = 24


def similarity_matrix(x) -> np.ndarray:
    """``(cos + 1) / 2`` between all segment embedding pairs, unit diagonal."""
    sim = 0.5 * (cosine_matrix(x, x) + 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, 0.0, 1.0)


def pseudo_target(g: GroundingResult, sims=None, theta: float | None = None) -> np.ndarray:
    """Binary matrix marking segment pairs grounded to one entity, both above threshold.

    When ``sims`` (the segment/entity cosine matrix) and ``theta`` are given
    the keep flags are recomputed from them; otherwise ``g.kept`` is used.
    """
    ent = np.asarray(g.entity)
    if sims is not None and theta is not None:
        sims = np.asarray(sims)
        kept = sims[np.arange(len(ent)), ent] > theta
    else:
        kept = np.asarray(g.kept, dtype=bool)
    same = ent[:, None] == ent[None, :]
    return (same & kept[:, None] & kept[None, :]).astype(np.float64)


def similarity_loss(sim, target) -> float:
    sim = np.asarray(sim, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if sim.shape != target.shape or sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"shape mismatch {sim.shape} vs {target.shape}")
    h = sim.shape[0]
    return float(np.sum((sim - target) ** 2) / (h * h))


def similarity_loss_grad(x, target) -> tuple[float, np.ndarray]:
    """Similarity loss of embeddings ``x`` against a fixed target, and d(loss)/dx."""
    x = np.asarray(x, dtype=np.float64)
    sim = similarity_matrix(x)
    loss = similarity_loss(sim, target)
    h = x.shape[0]
    gsim = 2.0 * (sim - np.asarray(target)) / (h * h)
    np.fill_diagonal(gsim, 0.0)
    gcos = 0.5 * gsim
    gx1, gx2 = _cos_backward(gcos, x, x)
    return loss, gx1 + gx2


# ---------------------------------------------------------------------------
# low-rank recovery

@dataclass(frozen=True)
class LrrConfig:
    lam: float = 0.4
    mu0: float = 1e-2
    mu_max: float = 1e6
    rho: float = 1.6
    tol: float = 1e-6
    max_iter: int = 500

    def __post_init__(self):
        if min(self.lam, self.mu0, self.mu_max, self.tol) <= 0 or self.max_iter < 1:
            raise ValueError("LRR constants must be positive")
        if not self.rho > 1:
            raise ValueError("rho must exceed 1")


@dataclass
class LrrResult:
    Z: np.ndarray
    E: np.ndarray
    iterations: int
    residual: float
    converged: bool


def lrr_recover(sim, cfg: LrrConfig = LrrConfig()) -> LrrResult:
    """Solve ``min ||Z||_* + lam ||E||_{2,1}  s.t.  S = S Z + E``.

    Inexact ALM with auxiliary ``J = Z``; stops when both constraint
    residuals drop to ``cfg.tol`` (max-abs). Emits a ``RuntimeWarning`` if
    ``max_iter`` is reached first.
    """
    S = np.asarray(sim, dtype=np.float64)
    n = S.shape[0]
    if S.shape != (n, n):
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    Z = np.zeros((n, n))
    J = np.zeros((n, n))
    E = np.zeros((n, n))
    Y1 = np.zeros((n, n))
    Y2 = np.zeros((n, n))
    mu = cfg.mu0
    StS = S.T @ S
    A = np.eye(n) + StS
    residual = np.inf
    for it in range(1, cfg.max_iter + 1):
        J = svt(Z + Y2 / mu, 1.0 / mu)
        Z = solve_spd(A, StS - S.T @ E + J + (S.T @ Y1 - Y2) / mu)
        E = l21_shrink(S - S @ Z + Y1 / mu, cfg.lam / mu)
        r1 = S - S @ Z - E
        r2 = Z - J
        Y1 = Y1 + mu * r1
        Y2 = Y2 + mu * r2
        mu = min(cfg.rho * mu, cfg.mu_max)
        residual = max(np.max(np.abs(r1), initial=0.0), np.max(np.abs(r2), initial=0.0))
        if residual <= cfg.tol:
            return LrrResult(Z, E, it, float(residual), True)
    warnings.warn(f"LRR did not converge in {cfg.max_iter} iterations (residual {residual:.3g})",
                  RuntimeWarning, stacklevel=2)
    return LrrResult(Z, E, cfg.max_iter, float(residual), False)


# ---------------------------------------------------------------------------
# normalized cut

def ncut_value(w, labels) -> float:
    """Normalized-cut objective ``sum_c cut(c, rest) / assoc(c, all)``."""
    w = np.asarray(w, dtype=np.float64)
    labels = np.asarray(labels)
    deg = w.sum(axis=1)
    total = 0.0
    for c in np.unique(labels):
        inside = labels == c
        assoc = deg[inside].sum()
        cut = w[np.ix_(inside, ~inside)].sum()
        if assoc > 0:
            total += cut / assoc
    return float(total)


def _eigengap_count(values: np.ndarray, cap: int) -> int:
    n = values.size
    upper = min(cap, n - 1)
    if upper < 1:
        return 1
    gaps = np.diff(values[: upper + 1])
    return int(np.argmax(gaps)) + 1


def _refine_bipartition(w: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Local search on the two-way Ncut: flip one vertex or two, until nothing helps."""
    labels = labels.copy()
    n = len(labels)
    best = ncut_value(w, labels)
    moves = [(v,) for v in range(n)]
    if n <= PAIR_MOVE_LIMIT:
        moves += list(itertools.combinations(range(n), 2))
    improved = True
    while improved:
        improved = False
        for move in moves:
            trial = labels.copy()
            trial[list(move)] = 1 - trial[list(move)]
            if trial.min() == trial.max():
                continue
            val = ncut_value(w, trial)
            if val < best - 1e-15:
                labels, best, improved = trial, val, True
    return labels


def _spectral_bipartition(w: np.ndarray, embedding: np.ndarray, vectors: np.ndarray,
                          seed: int) -> np.ndarray:
    n = w.shape[0]
    # sweep cuts along the second generalized eigenvector
    fiedler = vectors[:, 1] / np.sqrt(w.sum(axis=1))
    order = np.argsort(fiedler, kind="stable")
    sweeps = []
    for cut in range(1, n):
        lab = np.zeros(n, dtype=np.intp)
        lab[order[cut:]] = 1
        sweeps.append(lab)
    if n > PAIR_MOVE_LIMIT:
        sweeps = [min(sweeps, key=lambda lab: ncut_value(w, lab))]
    candidates = [kmeans(embedding, 2, seed)] + sweeps
    refined = [_refine_bipartition(w, c) for c in candidates]
    values = [ncut_value(w, c) for c in refined]
    return refined[int(np.argmin(values))]


def _relabel_first_seen(labels: np.ndarray) -> np.ndarray:
    mapping: dict[int, int] = {}
    out = np.empty(len(labels), dtype=np.intp)
    for i, l in enumerate(labels):
        out[i] = mapping.setdefault(int(l), len(mapping))
    return out


def spectral_cluster(Z, clusters: int | str = "auto", seed: int = 0) -> np.ndarray:
    """Normalized-cut clustering of the affinity ``(|Z| + |Z^T|) / 2``.

    ``clusters`` is a count or ``"auto"`` (largest eigengap of the
    normalized Laplacian, at most 16 clusters). Zero-degree segments become
    singleton clusters. Two-way cuts are polished with sweep cuts along the
    Fiedler vector and single-vertex moves. Labels are numbered in order of
    first appearance.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if Z.shape != (n, n):
        raise ShapeError(f"Z must be square, got {Z.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    W = 0.5 * (np.abs(Z) + np.abs(Z.T))
    deg = W.sum(axis=1)
    isolated = deg <= 1e-12
    labels = np.full(n, -1, dtype=np.intp)
    rest = np.flatnonzero(~isolated)
    next_label = 0
    if rest.size:
        Wr = W[np.ix_(rest, rest)]
        dr = deg[rest]
        dinv = 1.0 / np.sqrt(dr)
        L = np.eye(rest.size) - dinv[:, None] * Wr * dinv[None, :]
        L = 0.5 * (L + L.T)
        eig = sym_eig(L)
        if clusters == "auto":
            c = _eigengap_count(eig.values, MAX_AUTO_CLUSTERS)
        else:
            c = int(clusters) - int(isolated.sum())
            c = max(1, min(c, rest.size))
        if c == 1:
            sub = np.zeros(rest.size, dtype=np.intp)
        else:
            emb = eig.vectors[:, :c]
            norms = np.linalg.norm(emb, axis=1)
            emb = emb / np.where(norms > 0, norms, 1.0)[:, None]
            if c == 2:
                sub = _spectral_bipartition(Wr, emb, eig.vectors, seed)
            else:
                sub = kmeans(emb, c, seed)
        labels[rest] = sub
        next_label = int(sub.max()) + 1
    for i in np.flatnonzero(isolated):
        labels[i] = next_label
        next_label += 1
    return _relabel_first_seen(labels)


def merge_segments(hier: SegmentHierarchy, stage: int, labels, img: ImageFeatures) -> np.ndarray:
    """Union of member-segment masks for each cluster, shape ``(D, H, W)``."""
    labels = np.asarray(labels)
    seg = segment_masks(hier, stage, img)
    if labels.shape != (seg.shape[0],):
        raise ShapeError(f"need {seg.shape[0]} labels, got {labels.shape}")
    n_clusters = int(labels.max()) + 1 if labels.size else 0
    out = np.zeros((n_clusters,) + seg.shape[1:], dtype=bool)
    for s, c in enumerate(labels):
        out[c] |= seg[s]
    return out


# ---------------------------------------------------------------------------
# instances

@dataclass
class Instance:
    label: str | None
    pixels: int
    bbox: tuple[int, int, int, int]
    cluster: int = -1
    score: float = 1.0


@dataclass
class InstanceMap:
    ids: np.ndarray
    instances: dict[int, Instance] = field(default_factory=dict)

    def mask(self, iid: int) -> np.ndarray:
        return self.ids == iid


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def connected_components(masks, labels=None, min_pixels: int = 1, scores=None) -> InstanceMap:
    """Split each cluster mask into 4-connected instances.

    Instance ids start at 1, ordered by cluster then by raster position of
    each component's first pixel; components smaller than ``min_pixels``
    stay at id 0.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3:
        raise ShapeError(f"masks must be (D, H, W), got {masks.shape}")
    if masks.shape[0] and np.any(masks.sum(axis=0) > 1):
        raise ValueError("cluster masks overlap")
    ids = np.zeros(masks.shape[1:], dtype=np.int64)
    inst: dict[int, Instance] = {}
    nxt = 1
    for c, m in enumerate(masks):
        comp, n = ndimage.label(m, structure=_FOUR_CONNECTED)
        for j in range(1, n + 1):
            cm = comp == j
            size = int(cm.sum())
            if size < min_pixels:
                continue
            ids[cm] = nxt
            label = None if labels is None else labels[c]
            score = 1.0 if scores is None else float(scores[c])
            inst[nxt] = Instance(label, size, _bbox(cm), c, score)
            nxt += 1
    return InstanceMap(ids, inst)


def merge_stuff(m: InstanceMap, stuff) -> InstanceMap:
    """Collapse all instances sharing a stuff label into one; renumber densely."""
    stuff = set(stuff)
    groups: dict[str, list[int]] = {}
    for iid in sorted(m.instances):
        lab = m.instances[iid].label
        if lab in stuff:
            groups.setdefault(lab, []).append(iid)
    rep = {iid: iid for iid in m.instances}
    for members in groups.values():
        for iid in members:
            rep[iid] = members[0]
    survivors = sorted(set(rep.values()))
    new_id = {old: i + 1 for i, old in enumerate(survivors)}
    lut = np.zeros(max(m.instances, default=0) + 1, dtype=np.int64)
    for iid, r in rep.items():
        lut[iid] = new_id[r]
    ids = lut[m.ids]
    out: dict[int, Instance] = {}
    for old in survivors:
        nid = new_id[old]
        mask = ids == nid
        src = m.instances[old]
        members = [i for i, r in rep.items() if r == old]
        score = max(m.instances[i].score for i in members)
        out[nid] = Instance(src.label, int(mask.sum()), _bbox(mask), src.cluster, score)
    return InstanceMap(ids, out)
