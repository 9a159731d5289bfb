import math

import numpy as np
import pytest

from rnnencdec.data import PhrasePair, build_vocab, parse_phrase_line, parse_phrase_table
from rnnencdec.errors import ParseError
from rnnencdec.infer import (
    SCORE_HEADER,
    export_phrase_vectors,
    export_word_embeddings,
    read_vectors,
    rescore_table,
    sample,
    sample_many,
    score_pair,
    score_pairs,
    top_samples,
    unk_penalty,
)
from rnnencdec.linalg import RngState
from rnnencdec.model import (
    EOS_ID,
    ModelConfig,
    ModelParams,
    decode_step,
    decoder_init,
    encode,
    log_prob,
    output_distribution,
)


def vocabs(src="a b c", tgt="b d"):
    return build_vocab([src.split()], 100), build_vocab([tgt.split()], 100)


def zero_model(k_s, k_t):
    return ModelParams.zeros(ModelConfig(k_s, k_t, hidden=3, embed=2, maxout=2, output_rank=2))


def random_model(k_s=5, k_t=3, seed=0, std=0.8):
    cfg = ModelConfig(k_s, k_t, hidden=4, embed=3, maxout=2, output_rank=2, init_std=std)
    return ModelParams.init(cfg, RngState(seed))


def tree_probs(p, src, max_len):
    """Probability of every complete sample (EOS-terminated, or truncated at max_len)."""
    c = encode(src, p).c
    h0 = decoder_init(c, p)
    out = {}
    frontier = [((), h0[None, :], None, 0.0)]
    for step in range(max_len):
        nxt = []
        for prefix, h, y_prev, lp in frontier:
            cache, logp = decode_step(h, None if y_prev is None else np.array([y_prev]), c[None, :], p)
            for y in range(p.tgt_vocab_size):
                seq = prefix + (y,)
                if y == EOS_ID:
                    out[seq] = lp + logp[0, y]
                elif step == max_len - 1:
                    out[seq + (EOS_ID,)] = lp + logp[0, y]
                else:
                    nxt.append((seq, cache.h, y, lp + logp[0, y]))
        frontier = nxt
    return out


# ---------------------------------------------------------------- scoring


def test_score_pair_zero_model_and_repeatability():
    p = zero_model(5, 4)
    q = PhrasePair("x", "y z", (2, EOS_ID), (2, 3, EOS_ID))
    assert abs(score_pair(p, q) - 3 * math.log(1 / 4)) < 1e-12
    r = random_model()
    q = PhrasePair("", "", (1, 2, EOS_ID), (1, EOS_ID))
    assert score_pair(r, q) == score_pair(r, q) == log_prob(q.src_ids, q.tgt_ids, r)


def test_score_is_sum_of_per_step_logs():
    p = random_model(seed=1)
    src, tgt = [1, 4, EOS_ID], [2, 1, 2, EOS_ID]
    c = encode(src, p).c
    h = decoder_init(c[None, :], p)
    total, y_prev = 0.0, None
    for y in tgt:
        cache, _ = decode_step(h, None if y_prev is None else np.array([y_prev]), c[None, :], p)
        probs = output_distribution(cache.h[0], y_prev, c, p)
        total += math.log(probs[y])
        h, y_prev = cache.h, y
    assert abs(total - score_pair(p, PhrasePair("", "", tuple(src), tuple(tgt)))) < 1e-10


def test_score_pairs_matches_single_scores():
    p = random_model(seed=2)
    pairs = [PhrasePair("", "", (1, EOS_ID), (2, EOS_ID)), PhrasePair("", "", (3, 3, 4, EOS_ID), (1, 1, 1, EOS_ID)),
             PhrasePair("", "", (2, 1, EOS_ID), (EOS_ID,))]
    got = score_pairs(p, pairs, batch_size=2)
    for q, s in zip(pairs, got):
        assert abs(s - score_pair(p, q)) < 1e-12


def test_enumeration_oracle_matches_scores():
    p = random_model(seed=3)
    src = [1, 2, EOS_ID]
    table = tree_probs(p, src, 4)
    natural = {seq: lp for seq, lp in table.items() if len(seq) <= 4}
    assert len(natural) == 1 + 2 + 4 + 8
    for seq, lp in natural.items():
        assert abs(lp - log_prob(src, list(seq), p)) < 1e-10


# ---------------------------------------------------------------- sampling


def test_zero_model_first_token_frequencies():
    p = zero_model(5, 4)
    draws = sample_many(p, [1, EOS_ID], 100_000, RngState(0), max_len=1)
    first = np.bincount([s.tgt_ids[0] for s in draws], minlength=4) / len(draws)
    sigma = math.sqrt(0.25 * 0.75 / len(draws))
    assert (np.abs(first - 0.25) < 3 * sigma).all()


def test_max_len_one_and_truncation_flag():
    p = zero_model(5, 4)
    for s in sample_many(p, [1, EOS_ID], 50, RngState(1), max_len=1):
        assert len(s.tgt_ids) in (1, 2) and s.tgt_ids[-1] == EOS_ID
        assert s.truncated == (len(s.tgt_ids) == 2)
        assert abs(s.score - math.log(0.25)) < 1e-12


def test_sample_deterministic_and_scored():
    p = random_model(seed=4)
    a = sample(p, [1, EOS_ID], 10, RngState(5))
    b = sample(p, [1, EOS_ID], 10, RngState(5))
    assert a == b
    if not a.truncated:
        assert abs(a.score - log_prob([1, EOS_ID], list(a.tgt_ids), p)) < 1e-12
    assert a.score <= 0


def test_sampling_follows_chain_rule():
    p = random_model(seed=6, std=1.0)
    src = [2, EOS_ID]
    table = {k: math.exp(v) for k, v in tree_probs(p, src, 4).items()}
    assert abs(sum(table.values()) - 1) < 1e-10
    n = 200_000
    counts = {}
    for s in sample_many(p, src, n, RngState(7), max_len=4):
        counts[s.tgt_ids] = counts.get(s.tgt_ids, 0) + 1
    assert set(counts) <= set(table)
    for seq, prob in table.items():
        sigma = math.sqrt(prob * (1 - prob) / n)
        assert abs(counts.get(seq, 0) / n - prob) <= 3 * sigma + 1e-12, seq


def test_top_samples_sorted_unique_and_counted():
    p = random_model(seed=8)
    top = top_samples(p, [1, 3, EOS_ID], n=50, k=5, rng=RngState(9))
    scores = [s.score for s in top]
    assert scores == sorted(scores, reverse=True)
    assert len({s.tgt_ids for s in top}) == len(top)
    assert 1 <= len(top) <= 5 and sum(s.count for s in top) <= 50
    single = top_samples(p, [1, EOS_ID], n=1, k=1, rng=RngState(10))
    assert single[0] == sample(p, [1, EOS_ID], 50, RngState(10))
    with pytest.raises(ValueError):
        top_samples(p, [1, EOS_ID], n=2, k=3, rng=RngState(0))


def test_top_samples_finds_dominant_target():
    # saturated output weights make "2 EOS" the overwhelmingly likely target:
    # a positive context pushes token 2 first, then O_y flips the maxout sign
    cfg = ModelConfig(3, 3, hidden=2, embed=2, maxout=1, output_rank=1)
    p = ModelParams.zeros(cfg)
    p.enc.b[...] = 1.0
    p.V[...] = np.eye(2)
    p.O_c[...] = 1.0
    p.O_y[:, 2] = -10.0
    p.G_r[0, 0] = 1.0
    p.G_l[:, 0] = [-20.0, 0.0, 20.0]
    assert log_prob([1, EOS_ID], [2, EOS_ID], p) > -1e-3
    wins = sum(
        top_samples(p, [1, EOS_ID], n=50, k=1, rng=RngState(trial), max_len=5)[0].tgt_ids == (2, EOS_ID)
        for trial in range(100)
    )
    assert wins >= 99


# ---------------------------------------------------------------- rescoring


def test_rescore_example(tmp_path):
    v_src, v_tgt = vocabs("a", "b c")
    p = zero_model(len(v_src), 4)
    assert len(v_tgt) == 4
    src = tmp_path / "in.txt"
    out = tmp_path / "out.txt"
    src.write_text("a ||| b ||| 0.5\n")
    summary = rescore_table(p, src, out, v_src, v_tgt)
    assert out.read_text() == "a ||| b ||| 0.5 -2.772589\n"
    assert summary.lines == 1


def test_rescore_empty_file(tmp_path):
    v_src, v_tgt = vocabs()
    p = zero_model(len(v_src), len(v_tgt))
    (tmp_path / "in.txt").write_text("")
    summary = rescore_table(p, tmp_path / "in.txt", tmp_path / "out.txt", v_src, v_tgt)
    assert (tmp_path / "out.txt").read_bytes() == b"" and summary.lines == 0


def test_rescore_header_is_a_comment(tmp_path):
    v_src, v_tgt = vocabs()
    p = zero_model(len(v_src), len(v_tgt))
    (tmp_path / "in.txt").write_text("a ||| b\n")
    rescore_table(p, tmp_path / "in.txt", tmp_path / "out.txt", v_src, v_tgt, header=True)
    lines = (tmp_path / "out.txt").read_text().splitlines()
    assert lines[0] == SCORE_HEADER and lines[0].startswith("#")
    assert len(list(parse_phrase_table(tmp_path / "out.txt"))) == 1


def test_rescore_hundred_lines_longer_and_scored(tmp_path):
    v_src, v_tgt = vocabs("a b c", "b d")
    p = random_model(k_s=len(v_src), k_t=len(v_tgt), seed=11)
    rng = RngState(12)
    words = ["a", "b", "c", "zz"]
    lines = []
    for i in range(100):
        s = " ".join(words[j] for j in rng.integers(4, size=int(rng.integers(3)) + 1))
        t = " ".join(words[j] for j in rng.integers(4, size=int(rng.integers(3)) + 1))
        lines.append(f"{s} ||| {t}" + ("" if i % 3 else f" ||| {i / 10}"))
    (tmp_path / "in.txt").write_text("\n".join(lines) + "\n")
    rescore_table(p, tmp_path / "in.txt", tmp_path / "out.txt", v_src, v_tgt, batch_size=7)
    out = (tmp_path / "out.txt").read_text().splitlines()
    assert len(out) == 100
    for before, after, entry in zip(lines, out, parse_phrase_table(tmp_path / "out.txt")):
        assert len(after) > len(before)
        src_entry = parse_phrase_line(before, 1)
        assert entry.features[:-1] == src_entry.features
        expected = score_pair(p, src_entry.to_pair(v_src, v_tgt))
        assert abs(entry.features[-1] - expected) <= 5e-7


def test_rescore_parse_error_leaves_no_output(tmp_path):
    v_src, v_tgt = vocabs()
    p = zero_model(len(v_src), len(v_tgt))
    (tmp_path / "in.txt").write_text("a ||| b\nbroken line\n")
    with pytest.raises(ParseError) as info:
        rescore_table(p, tmp_path / "in.txt", tmp_path / "out.txt", v_src, v_tgt)
    assert info.value.line_no == 2
    assert not (tmp_path / "out.txt").exists()
    assert not (tmp_path / "out.txt.partial").exists()


def test_rescore_preserves_comments_and_line_endings(tmp_path):
    v_src, v_tgt = vocabs()
    p = zero_model(len(v_src), len(v_tgt))
    (tmp_path / "in.txt").write_bytes(b"# keep\r\na ||| b\r\nc ||| d ||| 1")
    summary = rescore_table(p, tmp_path / "in.txt", tmp_path / "out.txt", v_src, v_tgt)
    out = (tmp_path / "out.txt").read_bytes().split(b"\r\n")
    assert out[0] == b"# keep" and out[1].startswith(b"a ||| b ||| -") and out[2].startswith(b"c ||| d ||| 1 -")
    assert summary.lines == 2 and summary.comments == 1


# ---------------------------------------------------------------- unk penalty


def test_unk_penalty():
    v_src, v_tgt = vocabs("a b", "c d")
    assert unk_penalty(PhrasePair("a b", "c"), v_src, v_tgt) == 0
    q = PhrasePair("a x", "y d")
    assert unk_penalty(q, v_src, v_tgt) == 2
    assert unk_penalty(q, v_src, v_tgt, sides="src") == 1
    assert unk_penalty(q, v_src, v_tgt, sides="tgt") == 1


def test_unk_penalty_recount():
    v_src, v_tgt = vocabs("w0 w1 w2", "w3 w4")
    rng = RngState(13)
    words = [f"w{i}" for i in range(8)]
    for _ in range(50):
        s = [words[i] for i in rng.integers(8, size=4)]
        t = [words[i] for i in rng.integers(8, size=3)]
        manual = sum(w not in v_src for w in s) + sum(w not in v_tgt for w in t)
        assert unk_penalty(PhrasePair(" ".join(s), " ".join(t)), v_src, v_tgt) == manual


# ---------------------------------------------------------------- exports


def test_export_word_embeddings(tmp_path):
    v_src, v_tgt = vocabs("a b c", "d")
    p = random_model(k_s=len(v_src), k_t=len(v_tgt), seed=14)
    path = tmp_path / "emb.tsv"
    assert export_word_embeddings(p, v_src, "src", path) == len(v_src)
    rows = read_vectors(path)
    assert [label for label, _ in rows] == v_src.tokens
    for i, (_, vec) in enumerate(rows):
        np.testing.assert_allclose(vec, p.E_src[i], rtol=1e-8, atol=0)

    z = zero_model(len(v_src), len(v_tgt))
    export_word_embeddings(z, v_tgt, "tgt", path)
    assert all(not vec.any() for _, vec in read_vectors(path))


def test_export_phrase_vectors(tmp_path):
    v_src, _ = vocabs("a b c", "d")
    p = random_model(k_s=len(v_src), seed=15)
    path = tmp_path / "phr.tsv"
    assert export_phrase_vectors(p, ["a b", "", "a b"], v_src, path) == 3
    rows = read_vectors(path)
    assert all(vec.size == 4 for _, vec in rows)
    np.testing.assert_array_equal(rows[0][1], rows[2][1])
    np.testing.assert_allclose(rows[1][1], encode([EOS_ID], p).c, rtol=1e-8)
