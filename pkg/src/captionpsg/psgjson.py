"""JSON form of a panoptic scene graph with a run-length-encoded label map."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .sgeval import PanopticSceneGraph, Relation

__all__ = ["PsgFormatError", "psg_from_dict", "psg_to_dict", "read_psg", "read_psg_dir",
           "rle_decode", "rle_encode", "to_dot", "write_psg"]


class PsgFormatError(ValueError):
    pass


def rle_encode(labelmap) -> list[list[int]]:
    """Row-major ``[id, run_length]`` pairs."""
    flat = np.asarray(labelmap, dtype=np.int64).ravel()
    if flat.size == 0:
        return []
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    lengths = np.diff(np.r_[starts, flat.size])
    return [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]


def rle_decode(runs, height: int, width: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64).reshape(-1, 2)
    if np.any(runs[:, 1] < 0):
        raise PsgFormatError("negative run length")
    if int(runs[:, 1].sum()) != height * width:
        raise PsgFormatError(f"runs cover {int(runs[:, 1].sum())} pixels, image has {height * width}")
    return np.repeat(runs[:, 0], runs[:, 1]).reshape(height, width)


def psg_to_dict(psg: PanopticSceneGraph) -> dict:
    d = {
        "image_id": psg.image_id,
        "height": psg.height,
        "width": psg.width,
        "labelmap_rle": rle_encode(psg.labelmap),
        "instances": [{"id": i, "label": psg.labels[i], "score": float(psg.scores.get(i, 1.0))}
                      for i in sorted(psg.labels)],
        "relations": [{"sub": r.sub, "obj": r.obj, "predicate": r.predicate, "score": float(r.score)}
                      for r in psg.relations],
    }
    if psg.meta:
        d["meta"] = psg.meta
    return d


def psg_from_dict(d: dict) -> PanopticSceneGraph:
    try:
        h, w = int(d["height"]), int(d["width"])
        labelmap = rle_decode(d["labelmap_rle"], h, w)
        labels = {int(i["id"]): str(i["label"]) for i in d["instances"]}
        scores = {int(i["id"]): float(i.get("score", 1.0)) for i in d["instances"]}
        rels = [Relation(int(r["sub"]), int(r["obj"]), str(r["predicate"]), float(r.get("score", 1.0)))
                for r in d.get("relations", [])]
        return PanopticSceneGraph(str(d["image_id"]), labelmap, labels, rels, scores, dict(d.get("meta", {})))
    except (KeyError, TypeError) as exc:
        raise PsgFormatError(f"malformed scene graph: {exc!r}") from None
    except ValueError as exc:
        if isinstance(exc, PsgFormatError):
            raise
        raise PsgFormatError(str(exc)) from None


def write_psg(psg: PanopticSceneGraph, path) -> None:
    Path(path).write_text(json.dumps(psg_to_dict(psg), sort_keys=True) + "\n")


def read_psg(path) -> PanopticSceneGraph:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PsgFormatError(f"{path}: invalid JSON ({exc})") from None
    try:
        return psg_from_dict(d)
    except PsgFormatError as exc:
        raise PsgFormatError(f"{path}: {exc}") from None


def read_psg_dir(path) -> dict[str, PanopticSceneGraph]:
    """All ``*.json`` scene graphs in a directory, keyed by image id."""
    out = {}
    for f in sorted(Path(path).glob("*.json")):
        psg = read_psg(f)
        if psg.image_id in out:
            raise PsgFormatError(f"{f}: duplicate image id {psg.image_id!r}")
        out[psg.image_id] = psg
    return out


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(psg: PanopticSceneGraph) -> str:
    lines = [f"digraph {_quote(psg.image_id)} {{"]
    for i in sorted(psg.labels):
        lines.append(f"  n{i} [label={_quote(f'{psg.labels[i]} #{i}')}];")
    for r in psg.relations:
        lines.append(f"  n{r.sub} -> n{r.obj} [label={_quote(f'{r.predicate} {r.score:.3f}')}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
