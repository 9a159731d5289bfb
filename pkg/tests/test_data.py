import logging
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from rnnencdec.data import (
    EOS_TOKEN,
    UNK_ID,
    UNK_TOKEN,
    PhrasePair,
    Vocabulary,
    build_pairs,
    build_vocab,
    decode_ids,
    dedup_pairs,
    encode_phrase,
    iter_table_lines,
    parse_phrase_line,
    parse_phrase_table,
    read_bitext,
    sample_batch,
)
from rnnencdec.errors import FormatError, ParseError, VocabularyError
from rnnencdec.linalg import RngState
from rnnencdec.model import EOS_ID


def corpus(*lines):
    return [line.split() for line in lines]


# ---------------------------------------------------------------- vocabulary


def test_build_vocab_keeps_most_frequent():
    v = build_vocab(corpus("a a b"), 1)
    assert v.tokens == [EOS_TOKEN, UNK_TOKEN, "a"]
    assert v.id_of("a") == 2 and v.id_of("b") == UNK_ID


def test_build_vocab_count_and_sort_oracle():
    rng = RngState(0)
    words = [f"t{i}" for i in range(30)]
    lines = [[words[i] for i in rng.integers(30, size=int(rng.integers(8)) + 1)] for _ in range(200)]
    counts = Counter(tok for line in lines for tok in line)
    first = {}
    for line in lines:
        for tok in line:
            first.setdefault(tok, len(first))
    expected = sorted(counts, key=lambda t: (-counts[t], first[t], t))[:10]
    assert build_vocab(lines, 10).tokens[2:] == expected


def test_build_vocab_ties_follow_first_occurrence():
    assert build_vocab(corpus("z y x"), 5).tokens[2:] == ["z", "y", "x"]


def test_build_vocab_large_shortlist_keeps_everything():
    v = build_vocab(corpus("a b c", "c d"), 100)
    assert len(v) == 6 and all(tok in v for tok in "abcd")


def test_build_vocab_empty_corpus_warns(caplog):
    with caplog.at_level(logging.WARNING):
        v = build_vocab([], 10)
    assert len(v) == 2 and "empty corpus" in caplog.text


def test_build_vocab_skips_reserved_tokens():
    v = build_vocab(corpus("<unk> <eos> a"), 5)
    assert v.tokens == [EOS_TOKEN, UNK_TOKEN, "a"]


def test_build_vocab_rejects_bad_size():
    with pytest.raises(ValueError):
        build_vocab(corpus("a"), 0)


def test_vocabulary_save_load(tmp_path):
    v = build_vocab(corpus("b a b c"), 2)
    path = tmp_path / "v.txt"
    v.save(path)
    assert Vocabulary.load(path) == v
    path.write_text("a\nb\n")
    with pytest.raises(FormatError):
        Vocabulary.load(path)


def test_vocabulary_token_of_range():
    v = build_vocab(corpus("a"), 1)
    assert v.token_of(0) == EOS_TOKEN
    with pytest.raises(VocabularyError):
        v.token_of(3)


# ---------------------------------------------------------------- encoding


def test_encode_phrase_examples():
    v = build_vocab(corpus("a b"), 10)
    assert encode_phrase("", v) == [EOS_ID]
    assert encode_phrase("a b", v) == [v.id_of("a"), v.id_of("b"), EOS_ID]
    assert encode_phrase("a zzz", v) == [v.id_of("a"), UNK_ID, EOS_ID]


def test_decode_inverts_encode_on_shortlist_text():
    v = build_vocab(corpus("the cat sat on the mat"), 10)
    for text in ("the cat", "mat on sat", "the"):
        assert decode_ids(encode_phrase(text, v), v) == text
    assert decode_ids(encode_phrase("the dog", v), v) == "the " + UNK_TOKEN


# ---------------------------------------------------------------- phrase tables


def test_parse_phrase_line_examples():
    e = parse_phrase_line("a b ||| c d ||| 0.5 0.2", 1)
    assert (e.src_text, e.tgt_text, e.features) == ("a b", "c d", [0.5, 0.2])
    assert parse_phrase_line("a ||| b", 1).features == []


def test_parse_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("a b c\n")
    with pytest.raises(ParseError) as info:
        list(parse_phrase_table(path))
    assert info.value.line_no == 1 and "line 1" in str(info.value)
    path.write_text("a ||| b\nx ||| y ||| 0.1 nope\n")
    with pytest.raises(ParseError) as info:
        list(parse_phrase_table(path))
    assert info.value.line_no == 2


def test_parse_and_reemit_is_lossless(tmp_path):
    content = "a b ||| c d ||| 0.5 0.2\r\n# comment\nx ||| y\nété ||| summer |||  1e-3 \nlast ||| line"
    path = tmp_path / "t.txt"
    path.write_bytes(content.encode("utf-8"))
    out = "".join(raw + nl for _, raw, nl in iter_table_lines(path))
    assert out.encode("utf-8") == content.encode("utf-8")
    entries = list(parse_phrase_table(path))
    assert len(entries) == 4
    assert entries[2].features == [1e-3]
    assert "".join(e.serialize() for e in entries) == content.replace("# comment\n", "")


def test_with_feature_appends_to_feature_field():
    assert parse_phrase_line("a ||| b ||| 0.5", 1).with_feature(-2.7725887) == "a ||| b ||| 0.5 -2.772589"
    assert parse_phrase_line("a ||| b", 1).with_feature(-1.0) == "a ||| b ||| -1.000000"
    assert parse_phrase_line("a ||| b ||| 0.5 ||| 0-0", 1).with_feature(0.25) == "a ||| b ||| 0.5 0.250000 ||| 0-0"


def test_read_bitext(tmp_path):
    path = tmp_path / "b.tsv"
    path.write_text("a b\tc\n\nd\te f\n")
    assert read_bitext(path) == [("a b", "c"), ("d", "e f")]
    path.write_text("no tab here\n")
    with pytest.raises(ParseError):
        read_bitext(path)


# ---------------------------------------------------------------- dedup


def test_dedup_examples():
    e = [parse_phrase_line(s, i) for i, s in enumerate(["a ||| b", "a ||| b", "a ||| b"], 1)]
    assert len(dedup_pairs(e)) == 1
    e = [parse_phrase_line(s, i) for i, s in enumerate(["a b ||| c", "b a ||| c"], 1)]
    assert len(dedup_pairs(e)) == 2


def test_dedup_counting_oracle():
    rng = RngState(1)
    base = [(f"s{i} x", f"t{i}") for i in range(900)]
    dupes = [base[i] for i in rng.integers(900, size=100)]
    mixed = base + dupes
    order = rng.permutation(len(mixed))
    entries = [PhrasePair(*mixed[i]) for i in order]
    out = dedup_pairs(entries)
    assert len(out) == len(set(mixed)) == 900
    keys = [(q.src_text, q.tgt_text) for q in out]
    assert len(set(keys)) == len(keys)
    # subsequence of the input in first-occurrence order
    it = iter(entries)
    assert all(any(q is e for e in it) for q in out)


def test_dedup_keys_on_raw_text_not_ids():
    v = build_vocab(corpus("a"), 1)
    pairs = build_pairs([("a oov1", "a"), ("a oov2", "a")], v, v)
    assert pairs[0].src_ids == pairs[1].src_ids
    assert len(dedup_pairs(pairs)) == 2


# ---------------------------------------------------------------- sampling


def test_sample_batch_single_pool():
    q = PhrasePair("a", "b")
    assert sample_batch([q], 5, RngState(0)) == [q] * 5


def test_sample_batch_deterministic_and_rejects_empty():
    pool = list(range(10))
    assert sample_batch(pool, 20, RngState(3)) == sample_batch(pool, 20, RngState(3))
    with pytest.raises(ValueError):
        sample_batch([], 3, RngState(0))


def test_sample_batch_uniform_chi_square():
    pool = list(range(10))
    draws = sample_batch(pool, 100_000, RngState(4))
    observed = np.bincount(draws, minlength=10)
    assert stats.chisquare(observed).pvalue > 0.001
