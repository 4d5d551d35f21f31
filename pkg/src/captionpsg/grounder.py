"""Segment-entity grounding with a thresholded fine-grained contrastive loss.

Segment features and entity features are projected into one shared space.
For an image/caption pair the cosine matrix between segment embeddings
(rows) and entity embeddings (columns) is reduced two ways:

* image -> text: mean over segments of each row maximum, keeping only
  maxima above the threshold ``theta``;
* text -> image: the same over column maxima.

These scalars, computed for every image/caption pairing in a batch, feed a
symmetric batch softmax cross-entropy with temperature ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import NumericalError, ShapeError, SplitMix64

__all__ = [
    "DegeneratePointError",
    "EntityRNN",
    "FineLoss",
    "GrounderWeights",
    "GroundingResult",
    "Projection",
    "SharedEmbeddings",
    "check_nondegenerate",
    "cosine_matrix",
    "embed",
    "encode_entities",
    "fine_contrastive_loss",
    "grad_fine_loss",
    "ground",
    "image_to_text_sim",
    "init_grounder_weights",
    "text_to_image_sim",
    "tokenwise_sims",
]

ZERO_ROW_TOL = 1e-12
KINK_MARGIN = 1e-6


class DegeneratePointError(ValueError):
    """The loss is not differentiable at the requested point."""


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class Projection:
    """Two-layer map ``act(z W1 + b1) W2 + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.w1.shape[0]:
            raise ShapeError(f"projection expects width {self.w1.shape[0]}, got {z.shape}")
        h = z @ self.w1 + self.b1
        if self.activation == "relu":
            h = np.maximum(h, 0.0)
        elif self.activation != "linear":
            raise ValueError(f"unknown activation {self.activation!r}")
        return h @ self.w2 + self.b2

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def identity(cls, d: int) -> "Projection":
        return cls(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d), "linear")


@dataclass(frozen=True)
class EntityRNN:
    """Tanh recurrent cell whose hidden state gates each token's weight."""

    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray
    u: np.ndarray

    def token_weights(self, tokens: np.ndarray) -> np.ndarray:
        h = np.zeros(self.wh.shape[0])
        out = np.empty(tokens.shape[0])
        for i, t in enumerate(tokens):
            h = np.tanh(t @ self.wx + h @ self.wh + self.b)
            out[i] = _sigmoid(self.u @ h)
        return out

    @classmethod
    def zeros(cls, d_t: int, d_h: int) -> "EntityRNN":
        return cls(np.zeros((d_t, d_h)), np.zeros((d_h, d_h)), np.zeros(d_h), np.zeros(d_h))


@dataclass(frozen=True)
class GrounderWeights:
    proj_image: tuple[Projection, ...]
    proj_text: Projection
    rnn: EntityRNN
    tau: float = 0.07
    theta: float = -0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not np.isfinite(self.theta):
            raise ValueError("theta must be finite")

    def proj_for_stage(self, k: int) -> Projection:
        if not 1 <= k <= len(self.proj_image):
            raise ValueError(f"no image projection for stage {k}")
        return self.proj_image[k - 1]


def init_grounder_weights(d_image: int, d_text: int, d_shared: int = 256, d_hidden: int | None = None,
                          stages: int = 2, seed: int = 1, tau: float = 0.07,
                          theta: float = -0.5) -> GrounderWeights:
    """Seeded Gaussian initialization, each matrix scaled by ``1/sqrt(fan_in)``."""
    rng = SplitMix64(seed)
    d_hidden = d_hidden or d_text

    def g(fan_in, fan_out):
        return rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)

    projs = tuple(
        Projection(g(d_image, d_shared), np.zeros(d_shared), g(d_shared, d_shared), np.zeros(d_shared))
        for _ in range(stages)
    )
    proj_t = Projection(g(d_text, d_shared), np.zeros(d_shared), g(d_shared, d_shared), np.zeros(d_shared))
    rnn = EntityRNN(g(d_text, d_hidden), g(d_hidden, d_hidden), np.zeros(d_hidden),
                    rng.normal(d_hidden) / np.sqrt(d_hidden))
    return GrounderWeights(projs, proj_t, rnn, tau, theta)


@dataclass(frozen=True)
class SharedEmbeddings:
    stage: int
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
            raise ShapeError(f"incompatible embedding shapes {x.shape} and {y.shape}")
        for name, m in (("segment", x), ("entity", y)):
            if m.shape[0] and np.min(np.linalg.norm(m, axis=1)) < ZERO_ROW_TOL:
                raise NumericalError(f"{name} embeddings contain a zero row")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class GroundingResult:
    stage: int
    entity: np.ndarray
    cosine: np.ndarray
    kept: np.ndarray

    def to_records(self) -> list[dict]:
        return [{"segment": i, "entity": int(e), "cos": float(c), "kept": bool(k)}
                for i, (e, c, k) in enumerate(zip(self.entity, self.cosine, self.kept))]


def encode_entities(tokens, spans, w: GrounderWeights | EntityRNN) -> np.ndarray:
    """Merge each entity's token features into one by RNN-gated weighted mean."""
    rnn = w.rnn if isinstance(w, GrounderWeights) else w
    tokens = np.asarray(tokens, dtype=np.float64)
    out = []
    for start, end in spans:
        if end < start:
            raise ValueError(f"empty entity span ({start}, {end})")
        if start < 0 or end >= tokens.shape[0]:
            raise ValueError(f"span ({start}, {end}) outside [0, {tokens.shape[0]})")
        t = tokens[start : end + 1]
        wts = rnn.token_weights(t)
        out.append(wts @ t / wts.sum())
    return np.array(out).reshape(len(out), tokens.shape[1])


def embed(segments, entity_feats, w: GrounderWeights, stage: int = 1) -> SharedEmbeddings:
    x = w.proj_for_stage(stage)(segments)
    y = w.proj_text(entity_feats)
    return SharedEmbeddings(stage, x, y)


def _unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if m.shape[0] and np.min(norms) < ZERO_ROW_TOL:
        raise NumericalError("cannot take cosine of a zero row")
    return m / norms[:, None], norms


def cosine_matrix(x, y) -> np.ndarray:
    xu, _ = _unit_rows(np.asarray(x, dtype=np.float64))
    yu, _ = _unit_rows(np.asarray(y, dtype=np.float64))
    return np.clip(xu @ yu.T, -1.0, 1.0)


def tokenwise_sims(e: SharedEmbeddings) -> np.ndarray:
    """Cosine of every (segment, entity) pair, shape (H_k, E)."""
    return cosine_matrix(e.x, e.y)


def _filtered_mean(maxima: np.ndarray, theta: float) -> tuple[float, np.ndarray]:
    keep = maxima > theta
    if not np.any(keep):
        # nothing above threshold: fall back to the plain mean
        keep = np.ones_like(keep)
    return float(maxima[keep].mean()), keep


def image_to_text_sim(cos, theta: float) -> tuple[float, np.ndarray]:
    """Returns ``(p, row_maxima)``."""
    cos = np.asarray(cos, dtype=np.float64)
    rows = cos.max(axis=1)
    p, _ = _filtered_mean(rows, theta)
    return p, rows


def text_to_image_sim(cos, theta: float) -> tuple[float, np.ndarray]:
    """Returns ``(q, column_maxima)``."""
    cos = np.asarray(cos, dtype=np.float64)
    cols = cos.max(axis=0)
    q, _ = _filtered_mean(cols, theta)
    return q, cols


def _as_pairs(batch):
    pairs = []
    for item in batch:
        if isinstance(item, SharedEmbeddings):
            pairs.append((item.x, item.y))
        else:
            x, y = item
            pairs.append((np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)))
    return pairs


@dataclass(frozen=True)
class FineLoss:
    total: float
    image_to_text: float
    text_to_image: float
    p: np.ndarray
    q: np.ndarray


def _logsumexp(z: np.ndarray) -> float:
    m = np.max(z)
    return float(m + np.log(np.sum(np.exp(z - m))))


def _softmax_ce(sims: np.ndarray, tau: float) -> float:
    b = sims.shape[0]
    return float(np.mean([_logsumexp(sims[i] / tau) - sims[i, i] / tau for i in range(b)]))


def fine_contrastive_loss(batch, tau: float, theta: float) -> FineLoss:
    """Symmetric fine-grained contrastive loss over a batch of image/caption pairs.

    ``batch`` holds :class:`SharedEmbeddings` or ``(x, y)`` pairs where row
    ``i`` of the batch is the i-th image and its own caption. ``p[i, j]`` is
    the image-i to caption-j similarity, ``q[i, j]`` the caption-i to
    image-j similarity.
    """
    pairs = _as_pairs(batch)
    b = len(pairs)
    if b == 0:
        raise ValueError("batch must be non-empty")
    if not tau > 0:
        raise ValueError("tau must be positive")
    units = [(_unit_rows(x)[0], _unit_rows(y)[0]) for x, y in pairs]
    p = np.empty((b, b))
    q = np.empty((b, b))
    for i in range(b):
        for j in range(b):
            cos = np.clip(units[i][0] @ units[j][1].T, -1.0, 1.0)
            p[i, j] = image_to_text_sim(cos, theta)[0]
            q[j, i] = text_to_image_sim(cos, theta)[0]
    l_i2t = _softmax_ce(p, tau)
    l_t2i = _softmax_ce(q, tau)
    return FineLoss(0.5 * (l_i2t + l_t2i), l_i2t, l_t2i, p, q)


def check_nondegenerate(batch, theta: float, margin: float = KINK_MARGIN) -> None:
    """Raise :class:`DegeneratePointError` if the loss has a kink at ``batch``."""
    pairs = _as_pairs(batch)
    for i, (x, _) in enumerate(pairs):
        for j, (_, y) in enumerate(pairs):
            cos = cosine_matrix(x, y)
            close = np.abs(cos - theta) < margin
            if np.any(close):
                r, c = map(int, np.argwhere(close)[0])
                raise DegeneratePointError(
                    f"threshold kink: cos[{r},{c}] of image {i} / caption {j} is within {margin} of theta")
            for axis, name in ((1, "row"), (0, "column")):
                if cos.shape[axis] < 2:
                    continue
                top2 = -np.sort(-cos, axis=axis).take([0, 1], axis=axis)
                gap = np.abs(np.diff(top2, axis=axis)).ravel()
                if np.any(gap < margin):
                    idx = int(np.argmin(gap))
                    raise DegeneratePointError(
                        f"max kink: {name} {idx} of image {i} / caption {j} has a top-2 tie")


def _filtered_mean_grad(cos: np.ndarray, theta: float, axis: int) -> np.ndarray:
    """d(filtered mean of maxima along ``axis``)/d(cos), active branch held fixed."""
    maxima = cos.max(axis=axis)
    arg = cos.argmax(axis=axis)
    _, keep = _filtered_mean(maxima, theta)
    g = np.zeros_like(cos)
    n_keep = keep.sum()
    for l in np.flatnonzero(keep):
        if axis == 1:
            g[l, arg[l]] += 1.0 / n_keep
        else:
            g[arg[l], l] += 1.0 / n_keep
    return g


def _cos_backward(gc: np.ndarray, x: np.ndarray, y: np.ndarray):
    xu, xn = _unit_rows(x)
    yu, yn = _unit_rows(y)
    gxu = gc @ yu
    gyu = gc.T @ xu
    gx = (gxu - np.sum(gxu * xu, axis=1, keepdims=True) * xu) / xn[:, None]
    gy = (gyu - np.sum(gyu * yu, axis=1, keepdims=True) * yu) / yn[:, None]
    return gx, gy


def grad_fine_loss(batch, tau: float, theta: float, check: bool = True):
    """Analytic gradient of the total fine-grained loss.

    Returns one ``(grad_x, grad_y)`` pair per batch item, matching the
    shapes of that item's segment and entity embeddings. With ``check`` set,
    points on a kink of the max or threshold raise
    :class:`DegeneratePointError`.
    """
    pairs = _as_pairs(batch)
    if check:
        check_nondegenerate(pairs, theta)
    loss = fine_contrastive_loss(pairs, tau, theta)
    b = len(pairs)
    eye = np.eye(b)
    sp = np.exp(loss.p / tau - loss.p.max(axis=1, keepdims=True) / tau)
    sp /= sp.sum(axis=1, keepdims=True)
    sq = np.exp(loss.q / tau - loss.q.max(axis=1, keepdims=True) / tau)
    sq /= sq.sum(axis=1, keepdims=True)
    dp = 0.5 * (sp - eye) / (tau * b)
    dq = 0.5 * (sq - eye) / (tau * b)
    grads = [(np.zeros_like(x), np.zeros_like(y)) for x, y in pairs]
    for i, (x, _) in enumerate(pairs):
        for j, (_, y) in enumerate(pairs):
            cos = cosine_matrix(x, y)
            gc = dp[i, j] * _filtered_mean_grad(cos, theta, 1) + dq[j, i] * _filtered_mean_grad(cos, theta, 0)
            gx, gy = _cos_backward(gc, x, y)
            grads[i][0][...] += gx
            grads[j][1][...] += gy
    return grads


def ground(e: SharedEmbeddings, theta: float) -> GroundingResult:
    """Best entity per segment (lowest index on ties) and its keep flag."""
    cos = tokenwise_sims(e)
    if cos.shape[1] == 0:
        raise ValueError("need at least one entity to ground against")
    best = np.argmax(cos, axis=1)
    val = cos[np.arange(cos.shape[0]), best]
    return GroundingResult(e.stage, best, val, val > theta)
