"""Conversion between AU intensity vectors and expression sentences.

Three sentence protocols are supported:

* ``P1`` -- subject pronoun followed by the AU clauses in ascending AU order,
  joined with commas and a final ``and``.
* ``P2`` -- the same clauses in a seeded shuffled order joined with
  ``while`` / ``and``.
* ``P3`` -- nominal form, ``The woman shows a highly creased nose ...``.

Every sentence produced by :func:`describe` parses back to the exact
``(AUVector, Gender)`` pair through :func:`parse`.
"""
from __future__ import annotations

import enum
import random
import re
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

SUPPORTED_AUS = ("AU1", "AU2", "AU4", "AU5", "AU9", "AU12", "AU25", "AU26")
ADVERBS = ("insignificantly", "slightly", "moderately", "significantly", "highly")
MAX_INTENSITY = 5
# Clauses without an adverb (intensity-free variant) parse to the ladder midpoint.
UNSPECIFIED_INTENSITY = 3
N_MAX = 24

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"

_TOKEN_RE = re.compile(r"[a-z]+|[.,]")


class CodecError(ValueError):
    pass


class UnsupportedAU(CodecError):
    pass


class IntensityOutOfRange(CodecError):
    pass


class EmptyCorpus(CodecError):
    pass


class ParseError(CodecError):
    def __init__(self, message: str, span: tuple[int, int] = (0, 0), tokens: Sequence[str] = ()):
        self.span = span
        self.bad_text = " ".join(tokens[span[0]:span[1]])
        super().__init__(f"{message}: '{self.bad_text}' (tokens {span[0]}..{span[1]})")


class Gender(str, enum.Enum):
    MALE = "male"
    FEMALE = "female"
    UNSPECIFIED = "unspecified"


class Protocol(str, enum.Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"


_SUBJECT = {Gender.MALE: "He", Gender.FEMALE: "She", Gender.UNSPECIFIED: "This person"}
_POSSESSIVE = {Gender.MALE: "his", Gender.FEMALE: "her", Gender.UNSPECIFIED: "their"}
_NOUN = {Gender.MALE: "man", Gender.FEMALE: "woman", Gender.UNSPECIFIED: "person"}


@dataclass(frozen=True)
class AUPhrase:
    au: str
    participle: str
    obj: str
    article: str | None

    def clause(self, adverb: str | None, poss: str) -> str:
        words = [adverb, self.participle, self.obj.replace("{poss}", poss)]
        return " ".join(w for w in words if w)

    def nominal(self, adverb: str | None) -> str:
        obj = self.obj.replace("{poss}", "").strip()
        words = [self.article, adverb, self.participle, obj]
        return " ".join(w for w in words if w)


def load_grammar(text: str | None = None) -> dict[str, AUPhrase]:
    """Read the AU phrase table (the packaged asset by default)."""
    if text is None:
        text = resources.files("lang2face.assets").joinpath("au_grammar.txt").read_text()
    table = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        au, participle, obj, article = line.split("\t")
        table[au] = AUPhrase(au, participle, obj, None if article == "-" else article)
    missing = set(SUPPORTED_AUS) - set(table)
    if missing:
        raise CodecError(f"grammar table lacks {sorted(missing)}")
    return table


GRAMMAR = load_grammar()


def au_sort_key(au: str) -> int:
    return int(au[2:])


def canonical_au(au: Mapping[str, int]) -> dict[str, int]:
    """Validate ``au`` and return it without zero entries, in ascending AU order."""
    out = {}
    for key, value in au.items():
        if key not in GRAMMAR:
            raise UnsupportedAU(f"unsupported action unit {key!r}")
        if isinstance(value, bool) or int(value) != value or not 0 <= value <= MAX_INTENSITY:
            raise IntensityOutOfRange(f"{key} intensity {value!r} outside 0..{MAX_INTENSITY}")
        if value:
            out[key] = int(value)
    return {k: out[k] for k in sorted(out, key=au_sort_key)}


def split_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:3] != (PAD, UNK, EOS):
            raise CodecError("vocabulary must start with <pad>, <unk>, <eos>")
        if len(set(self.tokens)) != len(self.tokens):
            raise CodecError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def decode(self, ids: Iterable[int]) -> str:
        words = [self.tokens[i] for i in ids if i not in (self.pad_id, self.eos_id)]
        return " ".join(words)

    def dumps(self) -> str:
        return "\n".join(self.tokens) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        return cls(tuple(line for line in text.splitlines() if line))


def build_vocab(corpus: Iterable["Description | str"]) -> Vocab:
    """Vocabulary in order of first appearance, after the three special tokens."""
    seen: dict[str, None] = {}
    n = 0
    for item in corpus:
        n += 1
        text = item.text if isinstance(item, Description) else item
        for tok in split_tokens(text):
            seen.setdefault(tok, None)
    if n == 0:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return Vocab((PAD, UNK, EOS) + tuple(t for t in seen if t not in (PAD, UNK, EOS)))


def tokenize(text: "Description | str", vocab: Vocab, n_max: int = N_MAX) -> list[int]:
    """Ids padded (or truncated) to ``n_max``; empty text encodes as a lone EOS."""
    if isinstance(text, Description):
        text = text.text
    ids = [vocab.id(t) for t in split_tokens(text)] or [vocab.eos_id]
    ids = ids[:n_max]
    return ids + [vocab.pad_id] * (n_max - len(ids))


@dataclass(frozen=True)
class Description:
    text: str
    tokens: tuple[int, ...]
    length: int


def _p2_order(au: Mapping[str, int], gender: Gender) -> list[str]:
    key = ",".join(f"{k}:{v}" for k, v in au.items()) + "|" + gender.value
    keys = list(au)
    random.Random(zlib.crc32(key.encode())).shuffle(keys)
    return keys


def describe_text(au: Mapping[str, int], gender: Gender | str, protocol: Protocol | str,
                  with_intensity: bool = True) -> str:
    gender, protocol = Gender(gender), Protocol(protocol)
    au = canonical_au(au)

    def adverb(k):
        return ADVERBS[k - 1] if with_intensity else None

    if protocol is Protocol.P3:
        head = f"The {_NOUN[gender]} shows"
        if not au:
            return f"{head} a neutral face ."
        parts = [GRAMMAR[k].nominal(adverb(v)) for k, v in au.items()]
        return f"{head} {_join_list(parts)} ."

    subject = _SUBJECT[gender]
    if not au:
        return f"{subject} keeps a neutral face ."
    poss = _POSSESSIVE[gender]
    if protocol is Protocol.P1:
        clauses = [GRAMMAR[k].clause(adverb(v), poss) for k, v in au.items()]
        return f"{subject} {_join_list(clauses)} ."
    order = _p2_order(au, gender)
    clauses = [GRAMMAR[k].clause(adverb(au[k]), poss) for k in order]
    body = clauses[0]
    for i, c in enumerate(clauses[1:]):
        body += (" while " if i == 0 else " and ") + c
    return f"{subject} {body} ."


def _join_list(parts: list[str]) -> str:
    if len(parts) == 1:
        return parts[0]
    return " , ".join(parts[:-1]) + " and " + parts[-1]


def describe(au: Mapping[str, int], gender: Gender | str = Gender.UNSPECIFIED,
             protocol: Protocol | str = Protocol.P1, with_intensity: bool = True,
             vocab: Vocab | None = None, n_max: int = N_MAX) -> Description:
    text = describe_text(au, gender, protocol, with_intensity)
    vocab = vocab or grammar_vocab()
    tokens = tokenize(text, vocab, n_max)
    length = min(len(split_tokens(text)) or 1, n_max)
    return Description(text, tuple(tokens), length)


# -- parsing ---------------------------------------------------------------

_PRONOUNS = {"he": Gender.MALE, "she": Gender.FEMALE}
_POSS_WORDS = {v: k for k, v in _POSSESSIVE.items()}
_NOUN_WORDS = {v: k for k, v in _NOUN.items()}
_ADVERB_RANK = {a: i + 1 for i, a in enumerate(ADVERBS)}
_CONNECTORS = {",", "and", "while"}


def _clause_table():
    table = {}
    for au, ph in GRAMMAR.items():
        obj = ph.obj.split()
        table[(ph.participle, tuple(w for w in obj if w != "{poss}"))] = (au, "{poss}" in obj, ph)
    return table


_CLAUSES = _clause_table()


def parse(text: "Description | str") -> tuple[dict[str, int], Gender]:
    """Recover ``(au, gender)`` from a sentence produced by :func:`describe`."""
    if isinstance(text, Description):
        text = text.text
    toks = split_tokens(text)
    if not toks or toks[-1] != ".":
        raise ParseError("sentence must end with '.'", (max(len(toks) - 1, 0), len(toks)), toks)

    if toks[0] == "the" and len(toks) > 2 and toks[1] in _NOUN_WORDS and toks[2] == "shows":
        gender, nominal, pos = _NOUN_WORDS[toks[1]], True, 3
    elif toks[0] in _PRONOUNS:
        gender, nominal, pos = _PRONOUNS[toks[0]], False, 1
    elif toks[:2] == ["this", "person"]:
        gender, nominal, pos = Gender.UNSPECIFIED, False, 2
    else:
        raise ParseError("unrecognised subject", (0, min(3, len(toks))), toks)

    body = toks[pos:-1]
    neutral = ["a", "neutral", "face"] if nominal else ["keeps", "a", "neutral", "face"]
    if body == neutral:
        return {}, gender
    if not body:
        raise ParseError("missing expression clauses", (pos, pos + 1), toks)

    au: dict[str, int] = {}
    start = pos
    clauses = []
    for i in range(pos, len(toks) - 1):
        if toks[i] in _CONNECTORS:
            clauses.append((start, i))
            start = i + 1
    clauses.append((start, len(toks) - 1))
    for a, b in clauses:
        key, value = _parse_clause(toks, a, b, gender, nominal)
        if key in au:
            raise ParseError(f"{key} mentioned twice", (a, b), toks)
        au[key] = value
    return canonical_au(au), gender


def _parse_clause(toks, a, b, gender, nominal):
    words = toks[a:b]
    if not words:
        raise ParseError("empty clause", (a, min(a + 1, len(toks))), toks)
    i = 0
    article = None
    if nominal and words[0] == "a":
        article, i = "a", 1
    intensity = UNSPECIFIED_INTENSITY
    if i < len(words) and words[i] in _ADVERB_RANK:
        intensity = _ADVERB_RANK[words[i]]
        i += 1
    if i >= len(words):
        raise ParseError("clause has no verb phrase", (a, b), toks)
    participle, rest = words[i], words[i + 1:]
    poss = None
    if not nominal and rest and rest[0] in _POSS_WORDS:
        poss, rest = rest[0], rest[1:]
    entry = _CLAUSES.get((participle, tuple(rest)))
    if entry is None:
        raise ParseError("unknown expression phrase", (a, b), toks)
    au, needs_poss, phrase = entry
    if nominal:
        if article != phrase.article:
            raise ParseError("wrong article", (a, b), toks)
    elif needs_poss != (poss is not None) or (poss and _POSS_WORDS[poss] is not gender):
        raise ParseError("possessive does not agree with subject", (a, b), toks)
    return au, intensity


def grammar_corpus(protocols: Sequence[Protocol | str] = tuple(Protocol)) -> list[str]:
    """Sentences exercising every terminal of the given protocols' grammars."""
    out = []
    for p in protocols:
        for g in Gender:
            out.append(describe_text({}, g, p))
            for k in range(1, MAX_INTENSITY + 1):
                for au in SUPPORTED_AUS:
                    out.append(describe_text({au: k}, g, p))
            out.append(describe_text({"AU1": 1, "AU2": 2, "AU4": 3}, g, p))
            out.append(describe_text({"AU1": 1, "AU2": 2}, g, p, with_intensity=False))
    return out


_GRAMMAR_VOCAB: Vocab | None = None


def grammar_vocab() -> Vocab:
    """Vocabulary covering every protocol; the default for the whole package."""
    global _GRAMMAR_VOCAB
    if _GRAMMAR_VOCAB is None:
        _GRAMMAR_VOCAB = build_vocab(grammar_corpus())
    return _GRAMMAR_VOCAB


def au_to_json(au: Mapping[str, int]) -> dict[str, int]:
    return dict(canonical_au(au))
