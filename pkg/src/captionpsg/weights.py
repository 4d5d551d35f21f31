"""Weights bundle: a JSON name table of inline arrays, tensor-file paths and scalars.

Names follow ``<module>.<part>.<tensor>``, e.g. ``grouper.layer1.centers``,
``grounder.proj_i1.w1``, ``grounder.proj_t.w1``, ``grounder.rnn.wx``,
``labeler.mock.bilinear``, ``labeler.tags.f_sub``. String values are paths
to tensor files relative to the JSON file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grounder import EntityRNN, GrounderWeights, Projection, init_grounder_weights
from .grouper import GrouperWeights, LayerWeights, Mixer, init_grouper_weights
from .labeler import PositionalTags
from .numkit import ShapeError, SplitMix64
from .tensorio import read_tensor, write_tensor

__all__ = ["ModelWeights", "WeightsError", "init_model_weights", "load_weights", "save_weights"]


class WeightsError(ValueError):
    """Missing, malformed or mis-shaped weights entry."""


@dataclass
class ModelWeights:
    grouper: GrouperWeights
    grounder: GrounderWeights | None = None
    bilinear: np.ndarray | None = None
    entity_emb: np.ndarray | None = None
    relation_emb: np.ndarray | None = None
    tags: PositionalTags | None = None

    def to_table(self) -> dict[str, object]:
        t: dict[str, object] = {}
        for k, layer in enumerate(self.grouper.layers, 1):
            p = f"grouper.layer{k}."
            for name in ("centers", "wq", "wk", "wv"):
                t[p + name] = getattr(layer, name)
            for name in ("w1", "b1", "w2", "b2"):
                t[p + "mixer." + name] = getattr(layer.mixer, name)
            t[p + "temperature"] = float(layer.temperature)
        if self.grounder is not None:
            g = self.grounder
            projs = [(f"proj_i{k}", pr) for k, pr in enumerate(g.proj_image, 1)] + [("proj_t", g.proj_text)]
            for part, pr in projs:
                for name in ("w1", "b1", "w2", "b2"):
                    t[f"grounder.{part}.{name}"] = getattr(pr, name)
            for name in ("wx", "wh", "b", "u"):
                t[f"grounder.rnn.{name}"] = getattr(g.rnn, name)
            t["grounder.tau"] = float(g.tau)
            t["grounder.theta"] = float(g.theta)
        for name in ("bilinear", "entity_emb", "relation_emb"):
            if getattr(self, name) is not None:
                t[f"labeler.mock.{name}"] = getattr(self, name)
        if self.tags is not None:
            for name in ("f_sub", "f_obj", "f_region"):
                t[f"labeler.tags.{name}"] = getattr(self.tags, name)
        return t


def _load_table(path: Path) -> dict[str, object]:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise WeightsError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise WeightsError(f"{path}: expected a JSON object of named entries")
    out: dict[str, object] = {}
    for name, v in raw.items():
        if isinstance(v, str):
            out[name] = np.asarray(read_tensor(path.parent / v), dtype=np.float64)
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[name] = float(v)
        else:
            a = np.asarray(v, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise WeightsError(f"{name}: non-finite values")
            out[name] = a
    return out


def _need(t, name, ndim=None):
    if name not in t:
        raise WeightsError(f"missing weights entry {name!r}")
    v = t[name]
    if ndim is not None and np.ndim(v) != ndim:
        raise WeightsError(f"{name}: expected {ndim}-D, got shape {np.shape(v)}")
    return v


def _proj(t, prefix) -> Projection:
    return Projection(*(_need(t, f"{prefix}.{n}", nd) for n, nd in (("w1", 2), ("b1", 1), ("w2", 2), ("b2", 1))))


def _parse(t: dict[str, object]) -> ModelWeights:
    layers = []
    k = 1
    while f"grouper.layer{k}.centers" in t:
        p = f"grouper.layer{k}."
        mixer = Mixer(*(_need(t, p + "mixer." + n) for n in ("w1", "b1", "w2", "b2")))
        layers.append(LayerWeights(_need(t, p + "centers", 2), _need(t, p + "wq", 2), _need(t, p + "wk", 2),
                                   _need(t, p + "wv", 2), mixer, float(t.get(p + "temperature", 1.0))))
        k += 1
    if not layers:
        raise WeightsError("missing weights entry 'grouper.layer1.centers'")
    grouper = GrouperWeights(tuple(layers))
    d = grouper.dim
    for k, l in enumerate(layers, 1):
        if l.centers.shape[1] != d or l.mixer.w1.shape != (d, d):
            raise WeightsError(f"grouper.layer{k}: width does not match {d}")

    grounder = None
    if "grounder.proj_t.w1" in t:
        projs = []
        k = 1
        while f"grounder.proj_i{k}.w1" in t:
            projs.append(_proj(t, f"grounder.proj_i{k}"))
            k += 1
        rnn = EntityRNN(*(_need(t, f"grounder.rnn.{n}") for n in ("wx", "wh", "b", "u")))
        grounder = GrounderWeights(tuple(projs), _proj(t, "grounder.proj_t"), rnn,
                                   float(t.get("grounder.tau", 0.07)), float(t.get("grounder.theta", -0.5)))
        if len(projs) < len(layers):
            raise WeightsError(f"need an image projection per grouping stage ({len(layers)})")
        for k, pr in enumerate(projs, 1):
            if pr.w1.shape[0] != d or pr.out_dim != grounder.proj_text.out_dim:
                raise WeightsError(f"grounder.proj_i{k}: shape does not fit image width {d}")

    tags = None
    if "labeler.tags.f_sub" in t:
        tags = PositionalTags(*(_need(t, f"labeler.tags.{n}", 1) for n in ("f_sub", "f_obj", "f_region")))
        if any(v.shape != (d,) for v in (tags.f_sub, tags.f_obj, tags.f_region)):
            raise WeightsError(f"positional tags must have width {d}")
    bil = t.get("labeler.mock.bilinear")
    if bil is not None and (np.ndim(bil) != 2 or bil.shape[1] != d):
        raise WeightsError(f"labeler.mock.bilinear must be (d_label, {d})")
    return ModelWeights(grouper, grounder, bil, t.get("labeler.mock.entity_emb"),
                        t.get("labeler.mock.relation_emb"), tags)


def load_weights(path) -> ModelWeights:
    path = Path(path)
    try:
        return _parse(_load_table(path))
    except (ShapeError, ValueError) as exc:
        if isinstance(exc, WeightsError):
            raise
        raise WeightsError(f"{path}: {exc}") from None


def save_weights(w: ModelWeights, path, inline: bool = False) -> None:
    """Write the JSON table; arrays go to ``<stem>.tensors/`` unless ``inline``."""
    path = Path(path)
    table = {}
    tdir = path.with_name(path.stem + ".tensors")
    for name, v in w.to_table().items():
        if isinstance(v, float) or inline:
            table[name] = v if isinstance(v, float) else np.asarray(v).tolist()
            continue
        tdir.mkdir(parents=True, exist_ok=True)
        write_tensor(v, tdir / f"{name}.ftns")
        table[name] = os.path.join(tdir.name, f"{name}.ftns")
    path.write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")


def init_model_weights(dim: int, text_dim: int, shared_dim: int = 64, centers=(64, 8),
                       n_objects: int = 0, n_relations: int = 0, label_dim: int = 16,
                       seed: int = 0) -> ModelWeights:
    """Seeded random weights for every part of the model."""
    grouper = init_grouper_weights(dim, centers, seed=seed)
    grounder = init_grounder_weights(dim, text_dim, shared_dim, stages=len(centers), seed=seed + 1)
    rng = SplitMix64(seed + 2)
    bil = rng.normal((label_dim, dim)) / np.sqrt(dim)
    ent = rng.normal((n_objects, label_dim)) if n_objects else None
    rel = rng.normal((n_relations, label_dim)) if n_relations else None
    tags = PositionalTags(*(rng.normal(dim) / np.sqrt(dim) for _ in range(3)))
    return ModelWeights(grouper, grounder, bil if n_objects else None, ent, rel, tags)
