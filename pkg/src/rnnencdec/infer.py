"""Scoring, ancestral sampling, phrase-table rescoring and vector export."""

import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .data import (
    UNK_ID,
    decode_ids,
    encode_phrase,
    is_comment,
    iter_table_lines,
    parse_phrase_line,
)
from .errors import ShapeError
from .model import EOS_ID, decode_step, decoder_init, encode, forward_batch, log_prob

DEFAULT_MAX_LEN = 50


@dataclass
class ScoredSample:
    tgt_ids: Tuple[int, ...]
    score: float
    tgt_text: Optional[str] = None
    truncated: bool = False
    count: int = 1


def score_pair(p, pair):
    return log_prob(pair.src_ids, pair.tgt_ids, p)


def score_pairs(p, pairs, batch_size=64):
    """Log-probabilities for many pairs, evaluated in padded minibatches."""
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        f = forward_batch([q.src_ids for q in chunk], [q.tgt_ids for q in chunk], p)
        out[start : start + len(chunk)] = -f.nll
    return out


def sample_many(p, src_ids, n, rng, max_len=DEFAULT_MAX_LEN, vocab=None):
    """Draw ``n`` independent ancestral samples for one source sequence.

    Each step draws one uniform number per sample and inverts the cumulative
    distribution.  A sample still running after ``max_len`` symbols gets an
    EOS appended, is flagged ``truncated``, and keeps the log-probability of
    the symbols actually emitted.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    c = np.tile(encode(src_ids, p).c, (n, 1))
    h = decoder_init(c, p)
    K = p.tgt_vocab_size
    alive = np.ones(n, dtype=bool)
    scores = np.zeros(n)
    tokens = np.full((n, max_len), EOS_ID, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    y_prev = None
    rows = np.arange(n)
    for t in range(max_len):
        cache, logp = decode_step(h, y_prev, c, p)
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.uniform(n) * cdf[:, -1]
        tok = np.minimum((cdf <= u[:, None]).sum(axis=1), K - 1)
        scores += np.where(alive, logp[rows, tok], 0.0)
        tokens[alive, t] = tok[alive]
        lengths += alive
        alive &= tok != EOS_ID
        if not alive.any():
            break
        h = cache.h
        y_prev = tok
    out = []
    for i in range(n):
        ids = tuple(int(x) for x in tokens[i, : lengths[i]])
        truncated = bool(alive[i])
        if truncated:
            ids = ids + (EOS_ID,)
        text = decode_ids(ids, vocab) if vocab is not None else None
        out.append(ScoredSample(tgt_ids=ids, score=float(scores[i]), tgt_text=text, truncated=truncated))
    return out


def sample(p, src_ids, max_len, rng, vocab=None):
    return sample_many(p, src_ids, 1, rng, max_len=max_len, vocab=vocab)[0]


def top_samples(p, src_ids, n=50, k=5, rng=None, max_len=DEFAULT_MAX_LEN, vocab=None):
    """Draw ``n`` samples, merge duplicates, and keep the ``k`` best by score.

    ``count`` on each returned sample records how many of the draws produced
    that target.
    """
    if not n >= k >= 1:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    merged = {}
    for s in sample_many(p, src_ids, n, rng, max_len=max_len, vocab=vocab):
        if s.tgt_ids in merged:
            merged[s.tgt_ids].count += 1
        else:
            merged[s.tgt_ids] = s
    ranked = sorted(merged.values(), key=lambda s: -s.score)
    return ranked[:k]


@dataclass
class RescoreSummary:
    lines: int
    comments: int = 0


SCORE_HEADER = "# last feature: natural-log probability of target given source under the encoder-decoder"


def rescore_table(p, in_path, out_path, v_src, v_tgt, header=False, batch_size=64):
    """Append the model's log-probability to every phrase-table line.

    The whole input is parsed before anything is written, so a malformed
    line aborts the run with its line number and leaves no output file.
    Comment lines ('#') pass through unchanged.
    """
    items = []
    for line_no, raw, newline in iter_table_lines(in_path):
        if is_comment(raw):
            items.append((None, raw, newline))
        else:
            items.append((parse_phrase_line(raw, line_no, newline, in_path), raw, newline))
    entries = [e for e, _, _ in items if e is not None]
    scores = score_pairs(p, [e.to_pair(v_src, v_tgt) for e in entries], batch_size)

    tmp = f"{out_path}.partial"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            if header:
                fh.write(SCORE_HEADER + "\n")
            it = iter(scores)
            for entry, raw, newline in items:
                if entry is None:
                    fh.write(raw + newline)
                else:
                    fh.write(entry.with_feature(next(it)) + newline)
        os.replace(tmp, out_path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return RescoreSummary(lines=len(entries), comments=len(items) - len(entries))


def unk_penalty(pair, v_src, v_tgt, sides="both"):
    """Number of tokens that fall outside the shortlists (map to UNK)."""
    count = 0
    if sides in ("both", "src"):
        count += sum(1 for i in encode_phrase(pair.src_text, v_src) if i == UNK_ID)
    if sides in ("both", "tgt"):
        count += sum(1 for i in encode_phrase(pair.tgt_text, v_tgt) if i == UNK_ID)
    return count


def _vector_line(label, values):
    return label + "\t" + " ".join(f"{v:.9g}" for v in values) + "\n"


def export_word_embeddings(p, vocab, side, out_path):
    table = {"src": p.E_src, "tgt": p.E_tgt}[side]
    if table.shape[0] != len(vocab):
        raise ShapeError(f"{side} embedding has {table.shape[0]} rows but the vocabulary has {len(vocab)} entries")
    with open(out_path, "w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.tokens):
            fh.write(_vector_line(tok, table[i]))
    return len(vocab)


def export_phrase_vectors(p, phrases, v_src, out_path):
    """Write the context vector ``c`` of each source phrase."""
    with open(out_path, "w", encoding="utf-8") as fh:
        for phrase in phrases:
            fh.write(_vector_line(phrase, encode(encode_phrase(phrase, v_src), p).c))
    return len(phrases)


def read_vectors(path):
    """Parse a vector TSV back into ``[(label, ndarray)]``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            label, _, rest = line.rstrip("\n").partition("\t")
            out.append((label, np.array([float(x) for x in rest.split()])))
    return out
