"""Hierarchical region grouping over a patch-feature grid.

Each grouping layer lets a set of learnable centers attend to the incoming
segments (single-head cross-attention plus a residual two-layer mixer),
then softly assigns every segment to a center and averages the
value-projected segments per center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import ShapeError, SplitMix64

__all__ = [
    "GrouperWeights",
    "ImageFeatures",
    "LayerWeights",
    "Mixer",
    "SegmentHierarchy",
    "Stage",
    "group_forward",
    "group_layer_forward",
    "init_grouper_weights",
    "segment_masks",
    "softmax",
]

MERGE_EPS = 1e-12


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


@dataclass(frozen=True)
class ImageFeatures:
    image_id: str
    grid: tuple[int, int]
    feats: np.ndarray
    patch_size: int = 16

    def __post_init__(self):
        hp, wp = self.grid
        f = np.asarray(self.feats, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != hp * wp:
            raise ShapeError(f"feats must be ({hp * wp}, d), got {f.shape}")
        object.__setattr__(self, "feats", f)

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def pixel_size(self) -> tuple[int, int]:
        return self.grid[0] * self.patch_size, self.grid[1] * self.patch_size

    @classmethod
    def from_grid(cls, image_id: str, grid_feats, patch_size: int = 16) -> "ImageFeatures":
        """Build from an (h_p, w_p, d) array."""
        g = np.asarray(grid_feats, dtype=np.float64)
        if g.ndim != 3:
            raise ShapeError(f"expected (h_p, w_p, d) features, got {g.shape}")
        hp, wp, d = g.shape
        return cls(image_id, (hp, wp), g.reshape(hp * wp, d), patch_size)


@dataclass(frozen=True)
class Mixer:
    """Residual two-layer feature map ``z + gelu(z W1 + b1) W2 + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return z + _gelu(z @ self.w1 + self.b1) @ self.w2 + self.b2

    @classmethod
    def zeros(cls, d: int) -> "Mixer":
        return cls(np.zeros((d, d)), np.zeros(d), np.zeros((d, d)), np.zeros(d))


@dataclass(frozen=True)
class LayerWeights:
    centers: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    mixer: Mixer
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("assignment temperature must be positive")
        if np.ndim(self.centers) != 2:
            raise ShapeError(f"centers must be 2-D, got {np.shape(self.centers)}")
        d = self.centers.shape[1]
        for name in ("wq", "wk", "wv"):
            if np.shape(getattr(self, name)) != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {np.shape(getattr(self, name))}")
        m = self.mixer
        if (np.shape(m.w1)[0:1] != (d,) or np.shape(m.w2)[1:] != (d,) or np.shape(m.b2) != (d,)
                or np.shape(m.b1) != np.shape(m.w1)[1:] or np.shape(m.w2)[:1] != np.shape(m.w1)[1:]):
            raise ShapeError(f"mixer shapes do not fit width {d}")

    @property
    def num_centers(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class GrouperWeights:
    layers: tuple[LayerWeights, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one grouping layer")
        sizes = [l.num_centers for l in self.layers]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"center counts must strictly decrease, got {sizes}")

    @property
    def dim(self) -> int:
        return self.layers[0].centers.shape[1]

    @property
    def num_stages(self) -> int:
        return len(self.layers)


def init_grouper_weights(dim: int, centers=(64, 8), seed: int = 0,
                         temperature: float = 1.0) -> GrouperWeights:
    """Seeded Gaussian initialization with scale ``1/sqrt(dim)``."""
    rng = SplitMix64(seed)
    scale = 1.0 / np.sqrt(dim)

    def g(*shape):
        return rng.normal(shape) * scale

    layers = []
    for h in centers:
        mixer = Mixer(g(dim, dim), np.zeros(dim), g(dim, dim), np.zeros(dim))
        layers.append(LayerWeights(g(h, dim), g(dim, dim), g(dim, dim), g(dim, dim), mixer, temperature))
    return GrouperWeights(tuple(layers))


@dataclass
class Stage:
    segments: np.ndarray
    assignment: np.ndarray
    patch_map: np.ndarray


@dataclass
class SegmentHierarchy:
    updated_patches: np.ndarray
    stages: list[Stage] = field(default_factory=list)
    hard: bool = False

    def stage(self, k: int) -> Stage:
        if not 1 <= k <= len(self.stages):
            raise ValueError(f"stage must be in 1..{len(self.stages)}, got {k}")
        return self.stages[k - 1]


def _one_hot_rows(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[np.arange(a.shape[0]), np.argmax(a, axis=1)] = 1.0
    return out


def group_layer_forward(segments, layer: LayerWeights, hard: bool = False):
    """One grouping layer.

    Returns ``(new_segments, assignment)`` where ``assignment`` has one row
    per input segment and one column per center.
    """
    s = np.asarray(segments, dtype=np.float64)
    d = layer.centers.shape[1]
    if s.ndim != 2 or s.shape[1] != d:
        raise ShapeError(f"segments must be (n, {d}), got {s.shape}")
    for name in ("wq", "wk", "wv"):
        if getattr(layer, name).shape != (d, d):
            raise ShapeError(f"{name} must be ({d}, {d})")
    scale = np.sqrt(d)

    # communication: centers read from the segments
    c = layer.centers
    attn = softmax((c @ layer.wq) @ (s @ layer.wk).T / scale, axis=1)
    c = c + attn @ (s @ layer.wv)
    c = layer.mixer(c)

    logits = (s @ layer.wq) @ (c @ layer.wk).T / (scale * layer.temperature)
    assign = softmax(logits, axis=1)
    if hard:
        assign = _one_hot_rows(assign)
    values = s @ layer.wv
    mass = assign.sum(axis=0)
    merged = (assign.T @ values) / np.maximum(mass, MERGE_EPS)[:, None]
    return merged, assign


def group_forward(img: ImageFeatures, weights: GrouperWeights, hard: bool = False) -> SegmentHierarchy:
    """Run the patch mixer then every grouping layer in turn."""
    if img.dim != weights.dim:
        raise ShapeError(f"feature width {img.dim} does not match weights width {weights.dim}")
    patches = weights.layers[0].mixer(img.feats)
    hier = SegmentHierarchy(updated_patches=patches, hard=hard)
    segs = patches
    patch_map = np.arange(img.num_patches)
    for layer in weights.layers:
        segs, assign = group_layer_forward(segs, layer, hard)
        patch_map = np.argmax(assign, axis=1)[patch_map]
        hier.stages.append(Stage(segs, assign, patch_map.copy()))
    return hier


def segment_masks(hier: SegmentHierarchy, stage: int, img: ImageFeatures) -> np.ndarray:
    """Per-segment boolean pixel masks, shape ``(H_k, H, W)``.

    Every pixel of a patch belongs to the patch's segment, so the masks
    partition the image.
    """
    st = hier.stage(stage)
    hp, wp = img.grid
    ps = img.patch_size
    grid = st.patch_map.reshape(hp, wp)
    pixels = np.repeat(np.repeat(grid, ps, axis=0), ps, axis=1)
    n_seg = st.segments.shape[0]
    return pixels[None, :, :] == np.arange(n_seg)[:, None, None]
