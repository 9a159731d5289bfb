"""Vocabularies, phrase-table ingestion, deduplication and minibatch sampling.

Input text is assumed to be pre-tokenized: tokens are separated by
whitespace and nothing else is normalized.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import FormatError, ParseError, VocabularyError
from .model import EOS_ID

log = logging.getLogger(__name__)

UNK_ID = 1
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
RESERVED = (EOS_TOKEN, UNK_TOKEN)
FIELD_SEP = " ||| "
DEFAULT_SHORTLIST = 15000


class Vocabulary:
    """Token/id bijection over a frequency-ranked shortlist plus EOS and UNK."""

    def __init__(self, tokens, shortlist_size=None):
        tokens = list(tokens)
        if tuple(tokens[:2]) != RESERVED:
            raise VocabularyError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise VocabularyError("duplicate token in vocabulary")
        self.shortlist_size = len(tokens) - 2 if shortlist_size is None else shortlist_size

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token):
        return self.index.get(token, UNK_ID)

    def token_of(self, token_id):
        if not 0 <= token_id < len(self.tokens):
            raise VocabularyError(f"id {token_id} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[token_id]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        try:
            return cls(tokens)
        except VocabularyError as e:
            raise FormatError(f"{path}: {e}") from None


def build_vocab(corpus, size=DEFAULT_SHORTLIST):
    """Keep the ``size`` most frequent tokens of an iterable of token lists.

    Ties go to the token seen first, then lexicographic order.
    """
    if size < 1:
        raise ValueError(f"shortlist size must be >= 1, got {size}")
    counts = Counter()
    first_seen = {}
    for tokens in corpus:
        for tok in tokens:
            if tok in RESERVED:
                continue
            counts[tok] += 1
            first_seen.setdefault(tok, len(first_seen))
    if not counts:
        log.warning("empty corpus: vocabulary holds only the reserved tokens")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t], t))
    return Vocabulary(list(RESERVED) + ranked[:size], shortlist_size=size)


def tokenize(text):
    return text.split()


def encode_phrase(text, vocab):
    return [vocab.id_of(tok) for tok in tokenize(text)] + [EOS_ID]


def decode_ids(ids, vocab):
    """Inverse of ``encode_phrase`` up to UNK collapse; a trailing EOS is dropped."""
    ids = list(ids)
    if ids and ids[-1] == EOS_ID:
        ids = ids[:-1]
    return " ".join(vocab.token_of(i) for i in ids)


@dataclass
class PhrasePair:
    src_text: str
    tgt_text: str
    src_ids: Tuple[int, ...] = ()
    tgt_ids: Tuple[int, ...] = ()
    features: List[float] = field(default_factory=list)

    @classmethod
    def from_text(cls, src_text, tgt_text, v_src, v_tgt, features=()):
        return cls(
            src_text=src_text,
            tgt_text=tgt_text,
            src_ids=tuple(encode_phrase(src_text, v_src)),
            tgt_ids=tuple(encode_phrase(tgt_text, v_tgt)),
            features=list(features),
        )


@dataclass
class PhraseTableEntry:
    """One parsed phrase-table line, keeping the raw text for lossless output."""

    line_no: int
    raw: str
    newline: str
    src_text: str
    tgt_text: str
    features: List[float]
    fields: List[str]

    def serialize(self):
        return self.raw + self.newline

    def to_pair(self, v_src, v_tgt):
        return PhrasePair.from_text(self.src_text, self.tgt_text, v_src, v_tgt, self.features)

    def with_feature(self, value):
        """Raw line with ``value`` appended to the feature field (6 decimals)."""
        text = f"{value:.6f}"
        parts = list(self.fields)
        if len(parts) == 2:
            parts.append(text)
        elif parts[2]:
            parts[2] = parts[2] + " " + text
        else:
            parts[2] = text
        return FIELD_SEP.join(parts)


def _split_line(line):
    for ending in ("\r\n", "\n", "\r"):
        if line.endswith(ending):
            return line[: -len(ending)], ending
    return line, ""


def is_comment(raw):
    return raw.startswith("#")


def parse_phrase_line(raw, line_no, newline="\n", path=None):
    fields = raw.split(FIELD_SEP)
    if len(fields) < 2:
        raise ParseError(f"expected 'source{FIELD_SEP}target[{FIELD_SEP}features]'", line_no, path)
    features = []
    if len(fields) > 2:
        for tok in fields[2].split():
            try:
                features.append(float(tok))
            except ValueError:
                raise ParseError(f"non-numeric feature {tok!r}", line_no, path) from None
    return PhraseTableEntry(
        line_no=line_no,
        raw=raw,
        newline=newline,
        src_text=fields[0],
        tgt_text=fields[1],
        features=features,
        fields=fields,
    )


def iter_table_lines(path):
    """Yield ``(line_no, raw, newline)`` for every physical line, endings preserved."""
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, line in enumerate(fh, start=1):
            raw, newline = _split_line(line)
            yield line_no, raw, newline


def parse_phrase_table(path):
    """Stream PhraseTableEntry objects; lines starting with '#' are skipped."""
    for line_no, raw, newline in iter_table_lines(path):
        if is_comment(raw):
            continue
        yield parse_phrase_line(raw, line_no, newline, path)


def read_bitext(path):
    """Read a 'source<TAB>target' corpus as a list of (src_text, tgt_text)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected exactly one TAB separating source and target", line_no, path)
            out.append((parts[0], parts[1]))
    return out


def read_phrases(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").rstrip("\r") for line in fh]


def dedup_pairs(entries):
    """Unique (src_text, tgt_text) pairs in first-occurrence order.

    Phrase-table frequencies are deliberately ignored: each distinct pair is
    kept once regardless of how often it occurs.
    """
    seen = set()
    out = []
    for e in entries:
        key = (e.src_text, e.tgt_text)
        if key in seen:
            continue
        seen.add(key)
        out.append(e)
    return out


def sample_batch(pairs, batch_size, rng):
    if not pairs:
        raise ValueError("cannot sample from an empty pool")
    return [pairs[i] for i in rng.integers(len(pairs), size=batch_size)]


def build_pairs(texts, v_src: Optional[Vocabulary], v_tgt: Optional[Vocabulary]):
    return [PhrasePair.from_text(s, t, v_src, v_tgt) for s, t in texts]
