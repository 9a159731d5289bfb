"""Command-line entry point.

Settings come from an optional ``key=value`` file (``--config``); any key
can also be given as a flag (``--max-updates 10`` for ``max_updates``),
and flags win over the file.  Relative paths are resolved against
``$RNNENCDEC_DATA_DIR`` when that variable is set.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace

from . import checkpoint
from .data import (
    DEFAULT_SHORTLIST,
    PhrasePair,
    Vocabulary,
    build_pairs,
    build_vocab,
    dedup_pairs,
    parse_phrase_table,
    read_bitext,
    read_phrases,
    tokenize,
)
from .errors import NumericError, ParameterError, RnnEncDecError
from .infer import (
    export_phrase_vectors,
    export_word_embeddings,
    rescore_table,
    score_pair,
    top_samples,
)
from .linalg import RngState
from .model import ModelConfig, ModelParams
from .optim import AdadeltaState, TrainConfig, grad_check, save_training_checkpoint, train

log = logging.getLogger("rnnencdec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_DIR_ENV = "RNNENCDEC_DATA_DIR"

TASKS = ("copy", "reverse", "delayed-recall")

# key -> (type, default)
KEYS = {
    # model
    "src_shortlist": (int, DEFAULT_SHORTLIST),
    "tgt_shortlist": (int, DEFAULT_SHORTLIST),
    "hidden": (int, 1000),
    "embed": (int, 100),
    "maxout": (int, 500),
    "output_rank": (int, 500),
    "cell": (str, "gated"),
    "bias": (bool, True),
    "init_std": (float, 0.01),
    "update_bias": (float, 0.0),
    # training
    "batch_size": (int, 64),
    "max_updates": (int, 1000),
    "seed": (int, 1234),
    "optimizer": (str, "adadelta"),
    "learning_rate": (float, 0.01),
    "rho": (float, 0.95),
    "eps": (float, 1e-6),
    "clip_norm": (float, 0.0),
    "sampling": (str, "replacement"),
    "log_every": (int, 100),
    "checkpoint_every": (int, 0),
    "resume": (bool, False),
    # paths
    "checkpoint": (str, "model.ckpt"),
    "train_data": (str, ""),
    "data_format": (str, "auto"),
    "src_vocab": (str, ""),
    "tgt_vocab": (str, ""),
    "input": (str, ""),
    "output": (str, ""),
    "loss_log": (str, ""),
    # inference
    "n_samples": (int, 50),
    "top_k": (int, 5),
    "max_len": (int, 50),
    "side": (str, "src"),
    "header": (bool, False),
    # grad-check
    "step": (float, 1e-5),
    "tolerance": (float, 1e-4),
    "check_pairs": (int, 3),
    # toy tasks
    "task": (str, "copy"),
    "pairs": (int, 1000),
    "toy_vocab": (int, 20),
    "min_len": (int, 1),
    "toy_max_len": (int, 8),
    "noise_len": (int, 50),
}

COMMANDS = ("train", "score", "sample", "rescore", "export-words", "export-phrases", "grad-check", "gen-toytask")

# the bundled configuration used by grad-check
TINY_MODEL = dict(hidden=8, embed=5, maxout=4, output_rank=4)
TINY_VOCAB = 7
TINY_INIT_STD = 0.3
TINY_MAX_LEN = 5


class UsageError(RnnEncDecError):
    pass


def _convert(key, value):
    kind = KEYS[key][0]
    if kind is bool:
        if isinstance(value, bool):
            return value
        low = str(value).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def read_config_file(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise UsageError(f"{path}:{line_no}: expected key=value")
            if key not in KEYS:
                raise UsageError(f"{path}:{line_no}: unknown key {key!r}")
            if key in out:
                raise UsageError(f"{path}:{line_no}: duplicate key {key!r}")
            out[key] = _convert(key, value.strip())
    return out


def resolve_config(file_values, overrides):
    cfg = {key: default for key, (_, default) in KEYS.items()}
    cfg.update(file_values)
    cfg.update({k: _convert(k, v) for k, v in overrides.items() if v is not None})
    return cfg


def echo_config(cfg, stream):
    for key in sorted(cfg):
        print(f"config\t{key}={cfg[key]}", file=stream)


def resolve_path(path):
    base = os.environ.get(DATA_DIR_ENV)
    if path and base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _require(cfg, key):
    if not cfg[key]:
        raise UsageError(f"missing required setting {key!r}")
    return resolve_path(cfg[key])


def model_config(cfg, src_size, tgt_size):
    return ModelConfig(
        src_vocab_size=src_size,
        tgt_vocab_size=tgt_size,
        hidden=cfg["hidden"],
        embed=cfg["embed"],
        maxout=cfg["maxout"],
        output_rank=cfg["output_rank"],
        cell=cfg["cell"],
        bias=cfg["bias"],
        init_std=cfg["init_std"],
        update_bias=cfg["update_bias"],
    )


def train_config(cfg):
    return TrainConfig(
        batch_size=cfg["batch_size"],
        max_updates=cfg["max_updates"],
        seed=cfg["seed"],
        optimizer=cfg["optimizer"],
        learning_rate=cfg["learning_rate"],
        rho=cfg["rho"],
        eps=cfg["eps"],
        clip_norm=cfg["clip_norm"],
        sampling=cfg["sampling"],
        log_every=cfg["log_every"],
        checkpoint_every=cfg["checkpoint_every"],
    )


def vocab_paths(cfg):
    ckpt = _require(cfg, "checkpoint")
    src = resolve_path(cfg["src_vocab"]) or ckpt + ".src.vocab"
    tgt = resolve_path(cfg["tgt_vocab"]) or ckpt + ".tgt.vocab"
    return src, tgt


def load_model(cfg):
    path = _require(cfg, "checkpoint")
    p, mcfg = checkpoint.load(path)
    src_path, tgt_path = vocab_paths(cfg)
    v_src, v_tgt = Vocabulary.load(src_path), Vocabulary.load(tgt_path)
    if len(v_src) != mcfg.src_vocab_size or len(v_tgt) != mcfg.tgt_vocab_size:
        raise ParameterError(
            f"vocabulary sizes ({len(v_src)}, {len(v_tgt)}) do not match checkpoint "
            f"({mcfg.src_vocab_size}, {mcfg.tgt_vocab_size})"
        )
    return p, mcfg, v_src, v_tgt


@contextmanager
def checkpoint_lock(path):
    lock = path + ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{path} is locked by another writer ({lock} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.remove(lock)


def _read_training_texts(cfg):
    path = _require(cfg, "train_data")
    fmt = cfg["data_format"]
    if fmt == "auto":
        with open(path, encoding="utf-8") as fh:
            head = fh.readline()
        fmt = "table" if " ||| " in head else "bitext"
    if fmt == "table":
        return [(e.src_text, e.tgt_text) for e in parse_phrase_table(path)]
    if fmt == "bitext":
        return read_bitext(path)
    raise UsageError(f"data_format must be auto, table or bitext, got {fmt!r}")


class _Text:
    __slots__ = ("src_text", "tgt_text")

    def __init__(self, src_text, tgt_text):
        self.src_text = src_text
        self.tgt_text = tgt_text


def cmd_train(cfg, out):
    ckpt = _require(cfg, "checkpoint")
    src_vocab_path, tgt_vocab_path = vocab_paths(cfg)
    texts = [(t.src_text, t.tgt_text) for t in dedup_pairs(_Text(s, t) for s, t in _read_training_texts(cfg))]
    if not texts:
        raise UsageError("training data is empty")
    tcfg = train_config(cfg)
    state = None
    start = 0
    if cfg["resume"] and os.path.exists(ckpt):
        p, mcfg, extra, meta = checkpoint.load(ckpt, with_extra=True)
        v_src, v_tgt = Vocabulary.load(src_vocab_path), Vocabulary.load(tgt_vocab_path)
        start = int(meta.get("updates", 0))
        if tcfg.optimizer == "adadelta" and extra:
            state = AdadeltaState.from_records(p, extra, tcfg.rho, tcfg.eps)
        # max_updates counts from the start of training, not from the resume point
        tcfg = replace(tcfg, max_updates=max(0, tcfg.max_updates - start))
    else:
        v_src = build_vocab((tokenize(s) for s, _ in texts), cfg["src_shortlist"])
        v_tgt = build_vocab((tokenize(t) for _, t in texts), cfg["tgt_shortlist"])
        mcfg = model_config(cfg, len(v_src), len(v_tgt))
        p = ModelParams.init(mcfg, RngState(tcfg.seed, stream=0))
    pairs = build_pairs(texts, v_src, v_tgt)
    print(f"train\tpairs={len(pairs)}\tsrc_vocab={len(v_src)}\ttgt_vocab={len(v_tgt)}", file=sys.stderr)

    log_fh = open(resolve_path(cfg["loss_log"]), "w", encoding="utf-8") if cfg["loss_log"] else None

    def on_log(line):
        print(line, file=log_fh or sys.stderr, flush=True)

    try:
        with checkpoint_lock(ckpt):
            result = train(
                pairs, tcfg, p, state=state, model_cfg=mcfg, checkpoint_path=ckpt, on_log=on_log, start_update=start
            )
            save_training_checkpoint(ckpt, p, mcfg, result.state, result.updates)
            v_src.save(src_vocab_path)
            v_tgt.save(tgt_vocab_path)
    finally:
        if log_fh:
            log_fh.close()
    print(f"saved\t{ckpt}\tupdates={result.updates}", file=out)


def cmd_score(cfg, out):
    p, _, v_src, v_tgt = load_model(cfg)
    for src, tgt in read_bitext(_require(cfg, "input")):
        print(f"{score_pair(p, PhrasePair.from_text(src, tgt, v_src, v_tgt)):.10f}", file=out)


def cmd_sample(cfg, out):
    p, _, v_src, v_tgt = load_model(cfg)
    rng = RngState(cfg["seed"], stream=2)
    for src in read_phrases(_require(cfg, "input")):
        pair = PhrasePair.from_text(src, "", v_src, v_tgt)
        best = top_samples(p, pair.src_ids, cfg["n_samples"], cfg["top_k"], rng, cfg["max_len"], vocab=v_tgt)
        for rank, s in enumerate(best, start=1):
            flag = "\ttruncated" if s.truncated else ""
            print(f"{src}\t{rank}\t{s.score:.6f}\t{s.count}\t{s.tgt_text}{flag}", file=out)


def cmd_rescore(cfg, out):
    p, _, v_src, v_tgt = load_model(cfg)
    summary = rescore_table(
        p, _require(cfg, "input"), _require(cfg, "output"), v_src, v_tgt, header=cfg["header"]
    )
    print(f"rescored\tlines={summary.lines}\tcomments={summary.comments}", file=out)


def cmd_export_words(cfg, out):
    p, _, v_src, v_tgt = load_model(cfg)
    side = cfg["side"]
    if side not in ("src", "tgt"):
        raise UsageError(f"side must be src or tgt, got {side!r}")
    n = export_word_embeddings(p, v_src if side == "src" else v_tgt, side, _require(cfg, "output"))
    print(f"exported\twords={n}", file=out)


def cmd_export_phrases(cfg, out):
    p, _, v_src, _ = load_model(cfg)
    n = export_phrase_vectors(p, read_phrases(_require(cfg, "input")), v_src, _require(cfg, "output"))
    print(f"exported\tphrases={n}", file=out)


def tiny_check_setup(seed, cell="gated", n_pairs=3, bias=True):
    """Small random model and pairs used by ``grad-check``."""
    mcfg = ModelConfig(TINY_VOCAB, TINY_VOCAB, cell=cell, bias=bias, init_std=TINY_INIT_STD, **TINY_MODEL)
    p = ModelParams.init(mcfg, RngState(seed, stream=0))
    rng = RngState(seed, stream=3)
    pairs = []
    for _ in range(n_pairs):
        # lengths 1..TINY_MAX_LEN including the EOS
        src = list(rng.integers(TINY_VOCAB - 1, size=int(rng.integers(TINY_MAX_LEN))) + 1) + [0]
        tgt = list(rng.integers(TINY_VOCAB - 1, size=int(rng.integers(TINY_MAX_LEN))) + 1) + [0]
        pairs.append(PhrasePair("", "", tuple(int(i) for i in src), tuple(int(i) for i in tgt)))
    return p, pairs


def cmd_gradcheck(cfg, out):
    p, pairs = tiny_check_setup(cfg["seed"], cfg["cell"], cfg["check_pairs"], cfg["bias"])
    worst = max(grad_check(p, pair, cfg["step"]) for pair in pairs)
    ok = worst < cfg["tolerance"]
    print(f"grad-check\tparams={p.num_parameters()}\tpairs={len(pairs)}\tmax_rel_err={worst:.3e}\t{'PASS' if ok else 'FAIL'}", file=out)
    if not ok:
        raise NumericError(f"max relative gradient error {worst:.3e} >= {cfg['tolerance']}")


def toy_pair(task, rng, words, min_len, max_len, noise_len):
    if task == "delayed-recall":
        toks = [words[i] for i in rng.integers(len(words), size=noise_len + 1)]
        return " ".join(toks), toks[0]
    length = int(rng.integers(max_len - min_len + 1)) + min_len
    toks = [words[i] for i in rng.integers(len(words), size=length)]
    if task == "copy":
        return " ".join(toks), " ".join(toks)
    if task == "reverse":
        return " ".join(toks), " ".join(reversed(toks))
    raise UsageError(f"task must be one of {TASKS}, got {task!r}")


def generate_toytask(task, n_pairs, vocab_size, min_len, max_len, noise_len, seed):
    """Synthetic bilingual corpus as a list of (source, target) strings."""
    if task not in TASKS:
        raise UsageError(f"task must be one of {TASKS}, got {task!r}")
    if not 1 <= min_len <= max_len:
        raise UsageError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    rng = RngState(seed, stream=4)
    words = [f"w{i}" for i in range(vocab_size)]
    return [toy_pair(task, rng, words, min_len, max_len, noise_len) for _ in range(n_pairs)]


def cmd_gen_toytask(cfg, out):
    pairs = generate_toytask(
        cfg["task"], cfg["pairs"], cfg["toy_vocab"], cfg["min_len"], cfg["toy_max_len"], cfg["noise_len"], cfg["seed"]
    )
    path = _require(cfg, "output")
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(f"{src}\t{tgt}\n")
    print(f"generated\t{cfg['task']}\tpairs={len(pairs)}\t{path}", file=out)


HANDLERS = {
    "train": cmd_train,
    "score": cmd_score,
    "sample": cmd_sample,
    "rescore": cmd_rescore,
    "export-words": cmd_export_words,
    "export-phrases": cmd_export_phrases,
    "grad-check": cmd_gradcheck,
    "gen-toytask": cmd_gen_toytask,
}


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _ArgumentParser(prog="rnnencdec", description="RNN encoder-decoder phrase scoring toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key=value settings file")
    for key in KEYS:
        parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=KEYS[key][0].__name__.upper())
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        file_values = read_config_file(resolve_path(args.config)) if args.config else {}
        overrides = {key: getattr(args, key) for key in KEYS}
        cfg = resolve_config(file_values, overrides)
        echo_config(cfg, sys.stderr)
        HANDLERS[args.command](cfg, out)
    except (UsageError, ParameterError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RnnEncDecError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
