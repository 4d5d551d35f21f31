"""Prompt-based label scoring and ranking.

Object and relation labels are chosen by scoring each candidate string in a
fixed prompt through a :class:`LabelScorer`. Relation prompts additionally
mark the subject, object and in-between region on the patch tokens with
three positional tag vectors. The neural decoder is abstracted away; the
package ships :class:`MockScorer`, a bilinear softmax over a fixed
vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .grounder import GroundingResult
from .numkit import ShapeError
from .textgraph import TextGraph, lemmatize

__all__ = [
    "ENT",
    "REL",
    "LabelScorer",
    "MockScorer",
    "PositionalTags",
    "Prompt",
    "build_entity_prompt",
    "build_relation_prompt",
    "complement_mask",
    "entity_relation_losses",
    "grounded_entity_masks",
    "lemma_label",
    "patch_majority",
    "rank_labels",
    "tag_positions",
]

ENT = "[ENT]"
REL = "[REL]"
_SLOTS = (ENT, REL)


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[str, ...]

    def __post_init__(self):
        slots = [t for t in self.tokens if t in _SLOTS]
        if len(slots) != 1:
            raise ValueError(f"prompt needs exactly one open slot, got {slots}")

    @property
    def slot(self) -> str:
        return next(t for t in self.tokens if t in _SLOTS)

    def fill(self, candidate: str) -> str:
        return " ".join(candidate if t in _SLOTS else t for t in self.tokens)

    def __str__(self) -> str:
        return " ".join(self.tokens)

    @classmethod
    def parse(cls, text: str) -> "Prompt":
        return cls(tuple(text.split()))


def build_entity_prompt() -> Prompt:
    return Prompt(("a", "photo", "of", ENT))


def build_relation_prompt(sub: str, obj: str) -> Prompt:
    if not sub or not sub.strip() or not obj or not obj.strip():
        raise ValueError("relation prompt needs non-empty subject and object")
    return Prompt(("a", "photo", "of", *sub.split(), "and", *obj.split(),
                   "what", "is", "their", "relation", REL))


def lemma_label(label: str, kind: str = "object") -> str:
    """Lemma form of a label: nouns for objects; first word as verb for predicates."""
    words = label.lower().replace("-", " ").replace("_", " ").split()
    if not words:
        return ""
    if kind == "object":
        return " ".join(words[:-1] + [lemmatize(words[-1], "NOUN")])
    from .textgraph import _lexicon, _verb_base
    first = words[0]
    if first not in _lexicon().closed and _verb_base(first) is not None:
        first = lemmatize(first, "VERB")
    return " ".join([first] + words[1:])


@dataclass(frozen=True)
class PositionalTags:
    f_sub: np.ndarray
    f_obj: np.ndarray
    f_region: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "PositionalTags":
        return cls(np.zeros(d), np.zeros(d), np.zeros(d))


def complement_mask(m_i, m_j) -> np.ndarray:
    """Tight enclosing rectangle of ``m_i | m_j`` minus the union itself."""
    m_i = np.asarray(m_i, dtype=bool)
    m_j = np.asarray(m_j, dtype=bool)
    if m_i.shape != m_j.shape:
        raise ShapeError(f"mask shapes differ: {m_i.shape} vs {m_j.shape}")
    union = m_i | m_j
    out = np.zeros_like(union)
    if not union.any():
        return out
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    out[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = True
    return out & ~union


def patch_majority(mask, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """Per-patch flag: more than half of the patch's pixels lie in ``mask``."""
    hp, wp = grid
    m = np.asarray(mask, dtype=bool)
    if m.shape != (hp * patch_size, wp * patch_size):
        raise ShapeError(f"mask shape {m.shape} does not match grid {grid} x {patch_size}")
    counts = m.reshape(hp, patch_size, wp, patch_size).sum(axis=(1, 3))
    return (2 * counts > patch_size * patch_size).ravel()


def tag_positions(tokens, m_s, m_o, m_r, tags: PositionalTags, grid: tuple[int, int],
                  patch_size: int) -> np.ndarray:
    """Add subject/object/region tags to the patch tokens they cover.

    Overlapping masks are resolved by priority subject > object > region
    before the majority-pixel test.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[0] != grid[0] * grid[1]:
        raise ShapeError(f"{tokens.shape[0]} tokens for a {grid} grid")
    m_s = np.asarray(m_s, dtype=bool)
    m_o = np.asarray(m_o, dtype=bool) & ~m_s
    m_r = np.asarray(m_r, dtype=bool) & ~m_s & ~m_o
    in_s = patch_majority(m_s, grid, patch_size)
    in_o = patch_majority(m_o, grid, patch_size) & ~in_s
    in_r = patch_majority(m_r, grid, patch_size) & ~in_s & ~in_o
    out = tokens.copy()
    out[in_s] += tags.f_sub
    out[in_o] += tags.f_obj
    out[in_r] += tags.f_region
    return out


class LabelScorer(Protocol):
    def score(self, prompt: Prompt, tokens: np.ndarray, mask: np.ndarray, candidate: str) -> float:
        """Log-probability of ``candidate`` filling the prompt's slot."""

    def vocabulary(self, prompt: Prompt) -> Sequence[str]:
        """Candidates the score is normalized over."""


class MockScorer:
    """Bilinear softmax scorer over fixed entity and relation vocabularies.

    The image feature is the mean of the patch tokens whose patch is mostly
    inside ``mask`` (all tokens if none are). Candidate ``c`` gets logit
    ``emb[c] @ bilinear @ feature``; log-probabilities are normalized over
    the vocabulary matching the prompt's slot.
    """

    def __init__(self, entity_vocab, entity_emb, bilinear, relation_vocab=None, relation_emb=None,
                 grid: tuple[int, int] | None = None, patch_size: int = 16):
        self.entity_vocab = list(entity_vocab)
        self.entity_emb = np.asarray(entity_emb, dtype=np.float64)
        self.relation_vocab = list(relation_vocab) if relation_vocab is not None else self.entity_vocab
        self.relation_emb = (np.asarray(relation_emb, dtype=np.float64) if relation_emb is not None
                             else self.entity_emb)
        self.bilinear = np.asarray(bilinear, dtype=np.float64)
        self.grid = grid
        self.patch_size = patch_size
        for vocab, emb in ((self.entity_vocab, self.entity_emb), (self.relation_vocab, self.relation_emb)):
            if emb.shape != (len(vocab), self.bilinear.shape[0]):
                raise ShapeError(f"embedding table {emb.shape} does not match vocabulary/bilinear")
            if len(set(vocab)) != len(vocab):
                raise ValueError("duplicate vocabulary entries")
        self._index = {
            ENT: {c: i for i, c in enumerate(self.entity_vocab)},
            REL: {c: i for i, c in enumerate(self.relation_vocab)},
        }

    def _table(self, prompt: Prompt):
        if prompt.slot == ENT:
            return self.entity_vocab, self.entity_emb
        return self.relation_vocab, self.relation_emb

    def vocabulary(self, prompt: Prompt) -> list[str]:
        return list(self._table(prompt)[0])

    def _feature(self, tokens: np.ndarray, mask) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float64)
        if mask is None or self.grid is None:
            return tokens.mean(axis=0)
        sel = patch_majority(mask, self.grid, self.patch_size)
        if not sel.any():
            return tokens.mean(axis=0)
        return tokens[sel].mean(axis=0)

    def log_probs(self, prompt: Prompt, tokens, mask) -> np.ndarray:
        _, emb = self._table(prompt)
        logits = emb @ (self.bilinear @ self._feature(tokens, mask))
        m = logits.max()
        return logits - (m + np.log(np.sum(np.exp(logits - m))))

    def score(self, prompt: Prompt, tokens, mask, candidate: str) -> float:
        idx = self._index[prompt.slot].get(candidate)
        if idx is None:
            raise KeyError(f"{candidate!r} is not in the scorer vocabulary")
        return float(self.log_probs(prompt, tokens, mask)[idx])

    def score_many(self, prompt: Prompt, tokens, mask, candidates) -> list[float]:
        """Scores for several candidates from one forward pass."""
        lp = self.log_probs(prompt, tokens, mask)
        index = self._index[prompt.slot]
        missing = [c for c in candidates if c not in index]
        if missing:
            raise KeyError(f"{missing[0]!r} is not in the scorer vocabulary")
        return [float(lp[index[c]]) for c in candidates]


def rank_labels(scorer: LabelScorer, prompt: Prompt, tokens, mask, candidates) -> list[tuple[str, float]]:
    """Candidates sorted by descending log-probability (ties: lexicographic)."""
    candidates = list(dict.fromkeys(candidates))
    if not candidates:
        raise ValueError("no candidate labels to rank")
    many = getattr(scorer, "score_many", None)
    if many is not None:
        scored = list(zip(candidates, many(prompt, tokens, mask, candidates)))
    else:
        scored = [(c, scorer.score(prompt, tokens, mask, c)) for c in candidates]
    return sorted(scored, key=lambda cs: (-cs[1], cs[0]))


def grounded_entity_masks(g: GroundingResult, seg_masks) -> dict[int, np.ndarray]:
    """Union of kept segment masks per grounded entity id."""
    seg_masks = np.asarray(seg_masks, dtype=bool)
    out: dict[int, np.ndarray] = {}
    for i, (ent, kept) in enumerate(zip(g.entity, g.kept)):
        if not kept:
            continue
        e = int(ent)
        out[e] = out[e] | seg_masks[i] if e in out else seg_masks[i].copy()
    return out


def entity_relation_losses(scorer: LabelScorer, g: GroundingResult, graph: TextGraph, seg_masks,
                           tokens, tags: PositionalTags, grid: tuple[int, int], patch_size: int):
    """Cross-entropy of the pseudo labels under the scorer.

    ``g.entity`` indexes ``graph.entities`` positionally. Returns
    ``(l_ent, l_rel)``; a loss is ``None`` when it has no training pairs.
    """
    masks = grounded_entity_masks(g, seg_masks)
    if not masks:
        return None, None
    ent_prompt = build_entity_prompt()
    ents = list(graph.entities)
    ent_terms = [-scorer.score(ent_prompt, tokens, masks[e], ents[e].lemma) for e in sorted(masks)]
    pos = {e.id: i for i, e in enumerate(ents)}
    rel_terms = []
    for edge in graph.edges:
        s, o = pos[edge.sub], pos[edge.obj]
        if s not in masks or o not in masks:
            continue
        m_s, m_o = masks[s], masks[o]
        m_r = complement_mask(m_s, m_o)
        tagged = tag_positions(tokens, m_s, m_o, m_r, tags, grid, patch_size)
        prompt = build_relation_prompt(ents[s].lemma, ents[o].lemma)
        rel_terms.append(-scorer.score(prompt, tagged, m_s | m_o | m_r, edge.lemma))
    l_ent = float(np.mean(ent_terms))
    l_rel = float(np.mean(rel_terms)) if rel_terms else None
    return l_ent, l_rel
