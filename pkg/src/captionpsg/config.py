"""Run configuration; command-line flags override a config file, which overrides the defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

__all__ = ["Config", "PSG_MERGE_MAP", "resolve_config"]

# ambiguous PSG classes folded together before evaluation
PSG_MERGE_MAP = {
    "window-blind": "window",
    "window-other": "window",
    "floor-wood": "floor",
    "floor-other-merged": "floor",
    "wall-brick": "wall",
    "wall-stone": "wall",
    "wall-tile": "wall",
    "wall-wood": "wall",
    "wall-other-merged": "wall",
}


@dataclass(frozen=True)
class Config:
    centers: tuple[int, ...] = (64, 8)
    patch_size: int = 16
    theta: float = -0.5
    tau: float | None = None  # None: take the weights file's value
    lam: float = 0.4
    stage: int = 1
    clusters: int | str = "auto"
    min_pixels: int = 1
    top_predicates: int = 5
    seed: int = 0
    workers: int = 1
    strict: bool = False
    stuff: tuple[str, ...] = ()
    merge_map: dict = field(default_factory=lambda: dict(PSG_MERGE_MAP))

    @property
    def num_stages(self) -> int:
        return len(self.centers)

    def __post_init__(self):
        if len(self.centers) < 1 or any(b >= a for a, b in zip(self.centers, self.centers[1:])):
            raise ValueError(f"centers must strictly decrease, got {self.centers}")
        if not 1 <= self.stage <= len(self.centers):
            raise ValueError(f"stage must be in 1..{len(self.centers)}")
        if self.clusters != "auto" and (not isinstance(self.clusters, int) or self.clusters < 1):
            raise ValueError("clusters must be 'auto' or a positive integer")
        if self.lam <= 0 or (self.tau is not None and self.tau <= 0) or self.patch_size < 1:
            raise ValueError("lambda, tau and patch size must be positive")
        if self.workers < 1 or self.min_pixels < 1 or self.top_predicates < 1:
            raise ValueError("workers, min_pixels and top_predicates must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["centers"] = list(self.centers)
        d["stuff"] = list(self.stuff)
        return d


def _coerce(name: str, value):
    if name == "centers":
        if isinstance(value, str):
            value = [int(v) for v in value.split(",") if v.strip()]
        return tuple(int(v) for v in value)
    if name == "stuff":
        return tuple(sorted(value))
    if name == "clusters":
        return value if value == "auto" else int(value)
    return value


def resolve_config(cli: dict | None = None, path=None) -> Config:
    """Merge flags (``None`` = unset) over the optional JSON file over defaults."""
    known = {f.name for f in fields(Config)}
    merged: dict = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(data)
    for k, v in (cli or {}).items():
        if k in known and v is not None:
            merged[k] = v
    return replace(Config(), **{k: _coerce(k, v) for k, v in merged.items()})
