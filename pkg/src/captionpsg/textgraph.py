"""Rule-based caption parsing into text graphs.

A caption is tokenized and tagged with a small closed-class lexicon, an
open-class word list and suffix heuristics (all bundled under ``data/``).
Entities are maximal ``(ADJ|NOUN)* NOUN`` chunks. Edges come from the tag
pattern between consecutive entities:

* ``VERB (ADP)?``  e.g. "man *riding* horse", "cat *sitting on* couch"
* ``ADP``          e.g. "dog *on* couch"

Determiners, numbers, pronouns and auxiliaries between the two entities are
ignored. When two entities are joined by "and" and a pattern follows the
second one, the edge is copied to every entity of the conjunction.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

__all__ = [
    "Entity",
    "Edge",
    "TextGraph",
    "Token",
    "image_id_of",
    "lemmatize",
    "merge_text_graphs",
    "parse_caption",
    "tokenize",
]

TAGS = ("DET", "ADJ", "NOUN", "VERB", "ADP", "CONJ", "NUM", "PRON", "OTHER")
CLOSED_TAGS = frozenset({"DET", "ADP", "CONJ", "NUM", "PRON", "OTHER"})
_CLOSED_PRIORITY = ("DET", "NUM", "ADP", "CONJ", "PRON", "OTHER")
_IGNORED_BETWEEN = frozenset({"DET", "NUM", "PRON", "OTHER"})

# multi-word prepositions, matched greedily before edge extraction
_COMPOUND_PREPS = (
    ("in", "the", "middle", "of"),
    ("on", "the", "side", "of"),
    ("in", "front", "of"),
    ("on", "top", "of"),
    ("in", "between"),
    ("next", "to"),
    ("close", "to"),
    ("across", "from"),
    ("out", "of"),
    ("inside", "of"),
    ("ahead", "of"),
    ("far", "from"),
    ("adjacent", "to"),
)

_ADJ_SUFFIXES = ("ful", "ous", "ive", "able", "ible", "al", "ic", "ish", "less")
_POSSESSIVE_VERBS = frozenset({"has", "have", "had"})
_WORD_RE = re.compile(r"[a-z0-9]+")
IMAGE_SEP = "#"


@dataclass(frozen=True)
class Token:
    text: str
    index: int
    tag: str


@dataclass(frozen=True)
class Entity:
    id: int
    span: tuple[int, int]
    head_text: str
    lemma: str
    source: str = ""

    def to_dict(self) -> dict:
        return {"id": self.id, "span": list(self.span), "head": self.head_text,
                "lemma": self.lemma, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "Entity":
        return cls(int(d["id"]), (int(d["span"][0]), int(d["span"][1])), d["head"],
                   d["lemma"], d.get("source", ""))


@dataclass(frozen=True)
class Edge:
    sub: int
    predicate: str
    lemma: str
    obj: int

    def to_dict(self) -> dict:
        return {"sub": self.sub, "predicate": self.predicate, "lemma": self.lemma, "obj": self.obj}

    @classmethod
    def from_dict(cls, d: dict) -> "Edge":
        return cls(int(d["sub"]), d["predicate"], d["lemma"], int(d["obj"]))


@dataclass(frozen=True)
class TextGraph:
    caption_id: str
    entities: tuple[Entity, ...] = ()
    edges: tuple[Edge, ...] = ()

    def __post_init__(self):
        ids = {e.id for e in self.entities}
        if len(ids) != len(self.entities):
            raise ValueError("duplicate entity ids")
        seen = set()
        for e in self.edges:
            if e.sub not in ids or e.obj not in ids:
                raise ValueError(f"edge {e} references a missing entity")
            if e.sub == e.obj:
                raise ValueError(f"self-loop edge {e}")
            key = (e.sub, e.lemma, e.obj)
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)

    def entity(self, eid: int) -> Entity:
        for e in self.entities:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def triples(self) -> list[tuple[str, str, str]]:
        """Edges as (subject lemma, predicate lemma, object lemma)."""
        lem = {e.id: e.lemma for e in self.entities}
        return [(lem[e.sub], e.lemma, lem[e.obj]) for e in self.edges]

    def to_dict(self) -> dict:
        return {"caption_id": self.caption_id,
                "entities": [e.to_dict() for e in self.entities],
                "edges": [e.to_dict() for e in self.edges]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TextGraph":
        return cls(d["caption_id"],
                   tuple(Entity.from_dict(e) for e in d.get("entities", ())),
                   tuple(Edge.from_dict(e) for e in d.get("edges", ())))


# ---------------------------------------------------------------------------
# lexicon

@dataclass
class _Lexicon:
    closed: dict[str, str]
    nouns: frozenset
    verbs: frozenset
    adjectives: frozenset
    irregular_verbs: dict[str, str]
    irregular_nouns: dict[str, str]
    version: int = field(default=1)


@lru_cache(maxsize=1)
def _lexicon() -> _Lexicon:
    data = resources.files("captionpsg") / "data"
    lex = json.loads((data / "lexicon.json").read_text())
    irr = json.loads((data / "irregular.json").read_text())
    closed = {}
    for tag in reversed(_CLOSED_PRIORITY):
        for w in lex["closed"].get(tag, ()):
            closed[w] = tag
    return _Lexicon(closed, frozenset(lex["nouns"]), frozenset(lex["verbs"]),
                    frozenset(lex["adjectives"]), irr["verbs"], irr["nouns"], lex["version"])


def _is_consonant(ch: str) -> bool:
    return ch.isalpha() and ch not in "aeiou"


def _verb_base(word: str) -> str | None:
    """Base form of ``word`` if it is a known verb or an inflection of one."""
    lex = _lexicon()
    if word in lex.irregular_verbs:
        return lex.irregular_verbs[word]
    if word in lex.verbs:
        return word
    for suffix in ("ing", "ed"):
        if word.endswith(suffix) and len(word) > len(suffix) + 1:
            stem = word[: -len(suffix)]
            if stem in lex.verbs:
                return stem
            if len(stem) > 2 and stem[-1] == stem[-2] and _is_consonant(stem[-1]) and stem[:-1] in lex.verbs:
                return stem[:-1]
            if stem + "e" in lex.verbs:
                return stem + "e"
            if suffix == "ed" and stem.endswith("i") and stem[:-1] + "y" in lex.verbs:
                return stem[:-1] + "y"
    if word.endswith("ies") and word[:-3] + "y" in lex.verbs:
        return word[:-3] + "y"
    if word.endswith("es") and word[:-2] in lex.verbs:
        return word[:-2]
    if word.endswith("s") and not word.endswith("ss") and word[:-1] in lex.verbs:
        return word[:-1]
    return None


def _noun_base(word: str) -> str | None:
    """Singular form of ``word`` if it is a known noun or a plural of one."""
    lex = _lexicon()
    if word in lex.irregular_nouns:
        return lex.irregular_nouns[word]
    if word in lex.nouns:
        return word
    if word.endswith("ies") and word[:-3] + "y" in lex.nouns:
        return word[:-3] + "y"
    if word.endswith("es") and word[:-2] in lex.nouns:
        return word[:-2]
    if word.endswith("s") and word[:-1] in lex.nouns:
        return word[:-1]
    return None


def lemmatize(word: str, tag: str) -> str:
    """Rule-based lemma of a lowercase word.

    Closed-class words and adjectives are returned unchanged. Nouns and verbs
    go through the irregular tables, then lexicon-guided suffix stripping,
    then plain suffix rules for unknown words.
    """
    if tag not in ("NOUN", "VERB"):
        return word
    if tag == "NOUN":
        base = _noun_base(word)
        if base is not None:
            return base
        if word.endswith(("ss", "us", "is")) or len(word) <= 3:
            return word
        if word.endswith("ies") and len(word) > 4:
            return word[:-3] + "y"
        if word.endswith(("ches", "shes", "xes", "zes", "sses")):
            return word[:-2]
        if word.endswith("s"):
            return word[:-1]
        return word

    base = _verb_base(word)
    if base is not None:
        return base
    for suffix in ("ing", "ed"):
        if word.endswith(suffix) and len(word) > len(suffix) + 2:
            stem = word[: -len(suffix)]
            if len(stem) > 2 and stem[-1] == stem[-2] and _is_consonant(stem[-1]) and stem[-1] not in "lsz":
                return stem[:-1]
            if suffix == "ed" and stem.endswith("i"):
                return stem[:-1] + "y"
            return stem
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith(("ches", "shes", "xes", "sses")):
        return word[:-2]
    if word.endswith("s") and not word.endswith("ss") and len(word) > 3:
        return word[:-1]
    return word


# ---------------------------------------------------------------------------
# tokenization / tagging

def _tag_word(word: str, prev_tag: str | None, next_word: str | None) -> str:
    lex = _lexicon()
    if word.isdigit():
        return "NUM"
    if word in _POSSESSIVE_VERBS and next_word is not None \
            and lex.closed.get(next_word) not in ("OTHER", "ADP", "CONJ") and not (next_word.endswith(("ed", "en")) and _verb_base(next_word) is not None):
        # "has a stove" is a main verb; "has been", "has eaten" stay auxiliary
        return "VERB"
    if word in lex.closed:
        return lex.closed[word]
    noun = _noun_base(word) is not None
    verb = _verb_base(word) is not None
    adj = word in lex.adjectives
    if verb and word.endswith("ing"):
        if word in lex.nouns and prev_tag in ("DET", "ADJ", "NUM"):
            return "NOUN"
        return "VERB"
    if verb and word.endswith("ed") and not noun:
        return "VERB"
    if adj and noun:
        if next_word is not None and (next_word in lex.adjectives or _noun_base(next_word) is not None):
            return "ADJ"
        return "NOUN"
    if adj:
        return "ADJ"
    if noun and verb:
        if prev_tag in ("NOUN", "PRON"):
            if next_word is None or next_word in lex.closed:
                return "VERB"
        return "NOUN"
    if noun:
        return "NOUN"
    if verb:
        return "VERB"
    if word.endswith("ing") and len(word) > 4:
        return "VERB"
    if word.endswith("ed") and len(word) > 3:
        return "VERB"
    if word.endswith("ly") and len(word) > 3:
        return "OTHER"
    if word.endswith(_ADJ_SUFFIXES) and len(word) > 5:
        return "ADJ"
    return "NOUN"


def tokenize(caption: str) -> list[Token]:
    """Lowercase, split on whitespace and punctuation, and tag each word."""
    text = caption.lower().replace("'s", " ")
    words = _WORD_RE.findall(text)
    tags: list[str] = []
    for i, w in enumerate(words):
        nxt = words[i + 1] if i + 1 < len(words) else None
        tags.append(_tag_word(w, tags[-1] if tags else None, nxt))
    i = 0
    while i < len(words):
        for phrase in _COMPOUND_PREPS:
            n = len(phrase)
            if tuple(words[i : i + n]) == phrase:
                tags[i : i + n] = ["ADP"] * n
                i += n - 1
                break
        i += 1
    return [Token(w, i, t) for i, (w, t) in enumerate(zip(words, tags))]


# ---------------------------------------------------------------------------
# parsing

def _chunks(tokens: list[Token]) -> list[tuple[int, int]]:
    spans = []
    i = 0
    n = len(tokens)
    while i < n:
        if tokens[i].tag not in ("ADJ", "NOUN"):
            i += 1
            continue
        j = i
        while j + 1 < n and tokens[j + 1].tag in ("ADJ", "NOUN"):
            j += 1
        end = j
        while end >= i and tokens[end].tag != "NOUN":
            end -= 1
        if end >= i:
            spans.append((i, end))
        i = j + 1
    return spans


def _entity_lemma(tokens: list[Token], span: tuple[int, int]) -> str:
    nouns = [t for t in tokens[span[0] : span[1] + 1] if t.tag == "NOUN"]
    words = [t.text for t in nouns[:-1]] + [lemmatize(nouns[-1].text, "NOUN")]
    return " ".join(words)


def _between_pattern(between: list[Token]):
    """Classify the tokens between two entities.

    Returns ``("edge", phrase, lemma)``, ``("conj",)`` or ``None``.
    """
    kept = [t for t in between if t.tag not in _IGNORED_BETWEEN]
    if not kept:
        return None
    tags = [t.tag for t in kept]
    if tags == ["CONJ"] and kept[0].text == "and":
        return ("conj",)
    if tags[0] == "VERB":
        if any(t != "ADP" for t in tags[1:]):
            return None
        verb = kept[0].text
        adp = [t.text for t in kept[1:]]
        phrase = " ".join([verb] + adp)
        lemma = " ".join([lemmatize(verb, "VERB")] + adp)
        return ("edge", phrase, lemma)
    if all(t == "ADP" for t in tags):
        phrase = " ".join(t.text for t in kept)
        return ("edge", phrase, phrase)
    return None


def parse_caption(caption_id: str, caption: str) -> TextGraph:
    """Parse one caption into a :class:`TextGraph`. Never raises on text input."""
    tokens = tokenize(caption)
    spans = _chunks(tokens)
    entities = tuple(
        Entity(i, span, tokens[span[1]].text, _entity_lemma(tokens, span), caption_id)
        for i, span in enumerate(spans)
    )
    edges: list[Edge] = []
    seen = set()
    conj_run: list[int] = []
    for a in range(len(entities) - 1):
        b = a + 1
        between = tokens[entities[a].span[1] + 1 : entities[b].span[0]]
        pat = _between_pattern(between)
        if pat is None:
            conj_run = []
            continue
        if pat[0] == "conj":
            if not conj_run:
                conj_run = [a]
            conj_run.append(b)
            continue
        _, phrase, lemma = pat
        subjects = conj_run if (conj_run and conj_run[-1] == a) else [a]
        for s in subjects:
            key = (s, lemma, b)
            if key not in seen:
                seen.add(key)
                edges.append(Edge(s, phrase, lemma, b))
        conj_run = []
    return TextGraph(caption_id, entities, tuple(edges))


def image_id_of(caption_id: str) -> str:
    """Image id a caption belongs to: the part before ``#`` (or the whole id)."""
    return caption_id.split(IMAGE_SEP, 1)[0]


def merge_text_graphs(graphs) -> TextGraph:
    """Union of several text graphs of one image.

    Entities are deduplicated by lemma (first occurrence wins), edges by
    their (subject lemma, predicate lemma, object lemma) triple, and entity
    ids are renumbered densely in order of first appearance.
    """
    graphs = list(graphs)
    if not graphs:
        return TextGraph("")
    caption_id = image_id_of(graphs[0].caption_id)
    by_lemma: dict[str, Entity] = {}
    order: list[str] = []
    for g in graphs:
        for e in g.entities:
            if e.lemma not in by_lemma:
                by_lemma[e.lemma] = e
                order.append(e.lemma)
    new_id = {lem: i for i, lem in enumerate(order)}
    entities = tuple(
        Entity(new_id[lem], by_lemma[lem].span, by_lemma[lem].head_text, lem, by_lemma[lem].source)
        for lem in order
    )
    edges: list[Edge] = []
    seen = set()
    for g in graphs:
        lem = {e.id: e.lemma for e in g.entities}
        for e in g.edges:
            s, o = lem[e.sub], lem[e.obj]
            if s == o:
                continue
            key = (s, e.lemma, o)
            if key in seen:
                continue
            seen.add(key)
            edges.append(Edge(new_id[s], e.predicate, e.lemma, new_id[o]))
    return TextGraph(caption_id, entities, tuple(edges))
