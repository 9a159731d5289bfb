"""RNN encoder-decoder: embeddings, gated encoder/decoder, maxout output.

Shapes follow the column-vector convention of the equations (a weight
``W`` is hidden x input) while activations are carried as row vectors, so
``W x`` is computed as ``x @ W.T``.  The core routines operate on padded
minibatches; the single-pair functions are thin wrappers around them.

Target id 0 is the end-of-sequence symbol.  The decoder's first input is
the all-zero vector and the matching ``O_y`` term is absent at step one.
"""

from dataclasses import dataclass, fields
from typing import List, Optional

import numpy as np

from .errors import InputContractError, ParameterError, ShapeError, VocabularyError
from .gru import (
    RESET_AFTER,
    RESET_BEFORE,
    GruParams,
    gru_forward,
    gru_sequence_backward,
    gru_sequence_forward,
)
from .linalg import RngState, as_float, gaussian_init, log_softmax_rows, orthogonal_init, softmax_rows

EOS_ID = 0
CELLS = ("gated", "tanh")


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    hidden: int = 1000
    embed: int = 100
    maxout: int = 500
    output_rank: int = 500
    cell: str = "gated"
    bias: bool = True
    init_std: float = 0.01
    # initial update-gate bias of both gated cells; positive values start the cells close to copying their state
    update_bias: float = 0.0

    def __post_init__(self):
        for name in ("src_vocab_size", "tgt_vocab_size", "hidden", "embed", "maxout", "output_rank"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")
        if self.cell not in CELLS:
            raise ParameterError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if not self.init_std > 0:
            raise ParameterError(f"init_std must be positive, got {self.init_std}")
        if self.update_bias != 0 and not (self.bias and self.cell == "gated"):
            raise ParameterError("update_bias needs cell=gated and bias=true")

    @property
    def maxout_inputs(self):
        return 2 * self.maxout

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        kw = {}
        for key, value in d.items():
            if isinstance(value, str):
                if key == "cell":
                    pass
                elif key == "bias":
                    value = value.strip().lower() in ("1", "true", "yes", "on")
                elif key in ("init_std", "update_bias"):
                    value = float(value)
                else:
                    value = int(value)
            kw[key] = value
        return cls(**kw)


@dataclass
class TanhParams:
    """Plain ``h = tanh(W x + U h_prev + C c + b)`` cell, kept as an ablation."""

    W: np.ndarray
    U: np.ndarray
    C: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    @property
    def hidden_size(self):
        return self.W.shape[0]

    @property
    def has_context(self):
        return self.C is not None

    def named(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def zeros_like(self):
        return TanhParams(**{name: np.zeros_like(a) for name, a in self.named().items()})

    @classmethod
    def init(cls, hidden, inputs, rng, context=None, std=0.01, bias=True):
        W = gaussian_init(hidden, inputs, std, rng)
        U = orthogonal_init(hidden, hidden, rng)
        C = gaussian_init(hidden, context, std, rng) if context is not None else None
        b = np.zeros(hidden) if bias else None
        return cls(W=W, U=U, C=C, b=b)


@dataclass
class TanhCache:
    x: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray
    ctx: Optional[np.ndarray] = None


def tanh_forward(x, h_prev, ctx, p):
    a = x @ p.W.T + h_prev @ p.U.T
    if ctx is not None:
        a = a + ctx @ p.C.T
    if p.b is not None:
        a = a + p.b
    return TanhCache(x=x, h_prev=h_prev, h=np.tanh(a), ctx=ctx)


@dataclass
class TanhSequenceCache:
    X: np.ndarray
    H_prev: np.ndarray
    H_new: np.ndarray  # cell output before masking
    H: np.ndarray
    ctx: Optional[np.ndarray]
    mask: Optional[np.ndarray]

    def step(self, t):
        return TanhCache(x=self.X[:, t], h_prev=self.H_prev[:, t], h=self.H[:, t], ctx=self.ctx)


def tanh_sequence_forward(X, h0, ctx, p, mask=None):
    B, T, _ = X.shape
    XP = X @ p.W.T
    if p.b is not None:
        XP = XP + p.b
    if ctx is not None:
        XP = XP + (ctx @ p.C.T)[:, None, :]
    dtype = np.result_type(XP, h0)
    H_prev = np.empty((B, T, p.hidden_size), dtype=dtype)
    H_new = np.empty_like(H_prev)
    H = np.empty_like(H_prev)
    h = h0
    for t in range(T):
        H_prev[:, t] = h
        h_new = np.tanh(XP[:, t] + h @ p.U.T)
        H_new[:, t] = h_new
        if mask is not None and not mask[:, t].all():
            m = mask[:, t, None]
            h_new = m * h_new + (1.0 - m) * h
        H[:, t] = h_new
        h = h_new
    return TanhSequenceCache(X, H_prev, H_new, H, ctx, mask)


def tanh_sequence_backward(cache, dH, p, grads):
    B, T, n = cache.H.shape
    DA = np.empty_like(cache.H)
    dh = np.zeros((B, n), dtype=cache.H.dtype)
    for t in reversed(range(T)):
        dh = dh + dH[:, t]
        carry = None
        if cache.mask is not None and not cache.mask[:, t].all():
            m = cache.mask[:, t, None]
            carry = (1.0 - m) * dh
            dh = m * dh
        hn = cache.H_new[:, t]
        da = dh * (1.0 - hn * hn)
        DA[:, t] = da
        dh = da @ p.U
        if carry is not None:
            dh = dh + carry
    DA2 = DA.reshape(B * T, n)
    grads.W += DA2.T @ cache.X.reshape(B * T, -1)
    grads.U += DA2.T @ cache.H_prev.reshape(B * T, n)
    if p.b is not None:
        grads.b += DA2.sum(axis=0)
    dctx = None
    if cache.ctx is not None:
        S = DA.sum(axis=1)
        grads.C += S.T @ cache.ctx
        dctx = S @ p.C
    return DA @ p.W, dh, dctx


def _cell_forward(x, h_prev, ctx, p):
    if isinstance(p, GruParams):
        return gru_forward(x, h_prev, ctx, p)
    return tanh_forward(x, h_prev, ctx, p)


def _sequence_forward(X, h0, ctx, p, mask=None):
    if isinstance(p, GruParams):
        return gru_sequence_forward(X, h0, ctx, p, mask)
    return tanh_sequence_forward(X, h0, ctx, p, mask)


def _sequence_backward(cache, dH, p, grads):
    if isinstance(p, GruParams):
        return gru_sequence_backward(cache, dH, p, grads)
    return tanh_sequence_backward(cache, dH, p, grads)


_TOP_LEVEL = ("E_src", "E_tgt", "V", "V_dec", "O_h", "O_y", "O_c", "G_l", "G_r")


@dataclass
class ModelParams:
    E_src: np.ndarray
    E_tgt: np.ndarray
    enc: object  # GruParams or TanhParams
    dec: object
    V: np.ndarray
    V_dec: np.ndarray
    O_h: np.ndarray
    O_y: np.ndarray
    O_c: np.ndarray
    G_l: np.ndarray
    G_r: np.ndarray

    @property
    def cell(self):
        return "gated" if isinstance(self.enc, GruParams) else "tanh"

    @property
    def hidden(self):
        return self.V.shape[0]

    @property
    def src_vocab_size(self):
        return self.E_src.shape[0]

    @property
    def tgt_vocab_size(self):
        return self.E_tgt.shape[0]

    def named(self):
        """Flat ``name -> array`` view sharing memory with the parameters."""
        out = {"E_src": self.E_src, "E_tgt": self.E_tgt}
        for prefix, cell in (("enc", self.enc), ("dec", self.dec)):
            for name, a in cell.named().items():
                out[f"{prefix}.{name}"] = a
        for name in _TOP_LEVEL[2:]:
            out[name] = getattr(self, name)
        return out

    def zeros_like(self):
        kw = {name: np.zeros_like(getattr(self, name)) for name in _TOP_LEVEL}
        return ModelParams(enc=self.enc.zeros_like(), dec=self.dec.zeros_like(), **kw)

    def copy(self):
        return self.astype(self.V.dtype)

    def astype(self, dtype):
        """Copy with every array converted to ``dtype``."""

        def cell(c):
            kw = {k: a.astype(dtype) for k, a in c.named().items()}
            return GruParams(reset=c.reset, **kw) if isinstance(c, GruParams) else TanhParams(**kw)

        kw = {name: getattr(self, name).astype(dtype) for name in _TOP_LEVEL}
        return ModelParams(enc=cell(self.enc), dec=cell(self.dec), **kw)

    def num_parameters(self):
        return sum(a.size for a in self.named().values())

    @classmethod
    def init(cls, cfg, rng):
        """Gaussian(0, init_std) weights, orthogonal recurrent matrices, zero biases except b_z = update_bias."""
        std = cfg.init_std
        n, d, k_s, k_t = cfg.hidden, cfg.embed, cfg.src_vocab_size, cfg.tgt_vocab_size
        E_src = gaussian_init(k_s, d, std, rng)
        E_tgt = gaussian_init(k_t, d, std, rng)
        if cfg.cell == "gated":
            enc = GruParams.init(n, d, rng, std=std, bias=cfg.bias, reset=RESET_BEFORE, update_bias=cfg.update_bias)
            dec = GruParams.init(n, d, rng, context=n, std=std, bias=cfg.bias, reset=RESET_AFTER,
                                 update_bias=cfg.update_bias)
        else:
            enc = TanhParams.init(n, d, rng, std=std, bias=cfg.bias)
            dec = TanhParams.init(n, d, rng, context=n, std=std, bias=cfg.bias)
        two_m = cfg.maxout_inputs
        return cls(
            E_src=E_src,
            E_tgt=E_tgt,
            enc=enc,
            dec=dec,
            V=gaussian_init(n, n, std, rng),
            V_dec=gaussian_init(n, n, std, rng),
            O_h=gaussian_init(two_m, n, std, rng),
            O_y=gaussian_init(two_m, k_t, std, rng),
            O_c=gaussian_init(two_m, n, std, rng),
            G_l=gaussian_init(k_t, cfg.output_rank, std, rng),
            G_r=gaussian_init(cfg.output_rank, cfg.maxout, std, rng),
        )

    @classmethod
    def zeros(cls, cfg):
        p = cls.init(cfg, RngState(0))
        for a in p.named().values():
            a[...] = 0.0
        return p


# ---------------------------------------------------------------- single ops


def embed(token_id, table):
    if not 0 <= token_id < table.shape[0]:
        raise VocabularyError(f"token id {token_id} outside table of {table.shape[0]} rows")
    return table[token_id]


def decoder_init(c, p):
    c = as_float(c)
    if c.shape[-1] != p.V_dec.shape[1]:
        raise ShapeError(f"context has width {c.shape[-1]}, expected {p.V_dec.shape[1]}")
    return np.tanh(c @ p.V_dec.T)


def _maxout_preact(h, y_prev, c, p):
    s_pre = h @ p.O_h.T + c @ p.O_c.T
    if y_prev is not None:
        s_pre = s_pre + p.O_y.T[y_prev]
    return s_pre


def _logits_from(s_pre, p):
    s = np.maximum(s_pre[..., 0::2], s_pre[..., 1::2])
    sg = s @ p.G_r.T
    return s, sg, sg @ p.G_l.T


def decode_step(h_prev, y_prev, c, p):
    """Advance the decoder one step on a batch.

    ``y_prev`` is an int array of previous target ids, or None for the first
    step.  Returns ``(cache, log_probs)`` where ``cache.h`` is the new state.
    """
    if y_prev is None:
        x = np.zeros((h_prev.shape[0], p.E_tgt.shape[1]), dtype=p.E_tgt.dtype)
    else:
        x = p.E_tgt[y_prev]
    cache = _cell_forward(x, h_prev, c, p.dec)
    _, _, logits = _logits_from(_maxout_preact(cache.h, y_prev, c, p), p)
    return cache, log_softmax_rows(logits)


def output_distribution(h, y_prev_id, c, p):
    """Softmax over target words given decoder state, previous word and context.

    ``y_prev_id=None`` marks the first step (all-zero previous embedding).
    """
    single = np.ndim(h) == 1
    h = np.atleast_2d(as_float(h))
    c = np.atleast_2d(as_float(c))
    if h.shape[1] != p.O_h.shape[1] or c.shape[1] != p.O_c.shape[1]:
        raise ShapeError(f"state {h.shape} / context {c.shape} do not match hidden size {p.O_h.shape[1]}")
    y_prev = None
    if y_prev_id is not None:
        y_prev = np.atleast_1d(np.asarray(y_prev_id))
        if ((y_prev < 0) | (y_prev >= p.tgt_vocab_size)).any():
            raise VocabularyError(f"previous target id {y_prev_id} outside vocabulary of size {p.tgt_vocab_size}")
    _, _, logits = _logits_from(_maxout_preact(h, y_prev, c, p), p)
    probs = softmax_rows(logits)
    return probs[0] if single else probs


# ---------------------------------------------------------------- batched core


def _check_sequence(ids, vocab_size, what):
    ids = np.asarray(ids)
    if ids.ndim != 1 or ids.size == 0:
        raise InputContractError(f"{what} sequence must be a nonempty 1-D id sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise VocabularyError(f"{what} ids must be integers")
    if ids[-1] != EOS_ID:
        raise InputContractError(f"{what} sequence must end with the EOS id {EOS_ID}")
    if ids.min() < 0 or ids.max() >= vocab_size:
        bad = ids[(ids < 0) | (ids >= vocab_size)][0]
        raise VocabularyError(f"{what} id {int(bad)} outside vocabulary of size {vocab_size}")
    return ids


def pad_batch(seqs):
    """Right-pad id sequences with EOS; returns ``(ids, mask)`` of shape (B, T)."""
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), EOS_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def encode_batch(src, src_mask, p):
    """Run the encoder over padded sources; returns ``(c, enc_cache)``."""
    h0 = np.zeros((src.shape[0], p.hidden), dtype=p.V.dtype)
    mask = None if src_mask.all() else src_mask
    cache = _sequence_forward(p.E_src[src], h0, None, p.enc, mask)
    return np.tanh(cache.H[:, -1] @ p.V.T), cache


class _Forward:
    __slots__ = ("src", "src_mask", "tgt", "tgt_mask", "enc", "c", "h0", "dec", "s_pre", "s", "sg", "logp", "nll")


def _decoder_inputs(tgt, p):
    B, T = tgt.shape
    Y = np.zeros((B, T, p.E_tgt.shape[1]), dtype=p.E_tgt.dtype)
    Y[:, 1:] = p.E_tgt[tgt[:, :-1]]
    return Y


def forward_batch(src_seqs, tgt_seqs, p):
    """Per-pair negative log-likelihoods plus everything backward needs."""
    if len(src_seqs) != len(tgt_seqs) or not len(src_seqs):
        raise InputContractError("need equally many (and at least one) source and target sequences")
    src_seqs = [_check_sequence(s, p.src_vocab_size, "source") for s in src_seqs]
    tgt_seqs = [_check_sequence(s, p.tgt_vocab_size, "target") for s in tgt_seqs]
    f = _Forward()
    f.src, f.src_mask = pad_batch(src_seqs)
    f.tgt, f.tgt_mask = pad_batch(tgt_seqs)
    f.c, f.enc = encode_batch(f.src, f.src_mask, p)
    f.h0 = decoder_init(f.c, p)
    # padded target steps run unmasked; their losses are zeroed below
    f.dec = _sequence_forward(_decoder_inputs(f.tgt, p), f.h0, f.c, p.dec)

    H = f.dec.H
    s_pre = H @ p.O_h.T + (f.c @ p.O_c.T)[:, None, :]
    s_pre[:, 1:] += p.O_y.T[f.tgt[:, :-1]]
    f.s_pre = s_pre
    f.s, f.sg, logits = _logits_from(s_pre, p)
    f.logp = log_softmax_rows(logits)
    picked = np.take_along_axis(f.logp, f.tgt[:, :, None], axis=2)[:, :, 0]
    f.nll = -(picked * f.tgt_mask).sum(axis=1)
    return f


def backward_batch(f, p, weights):
    """Gradient of ``sum_i weights[i] * nll_i`` with respect to every parameter."""
    g = p.zeros_like()
    B, T = f.tgt.shape
    weights = np.asarray(weights, dtype=np.float64)

    dlogits = np.exp(f.logp)
    np.put_along_axis(
        dlogits, f.tgt[:, :, None], np.take_along_axis(dlogits, f.tgt[:, :, None], axis=2) - 1.0, axis=2
    )
    dlogits *= (weights[:, None] * f.tgt_mask)[:, :, None]

    K, r = p.G_l.shape
    g.G_l += dlogits.reshape(B * T, K).T @ f.sg.reshape(B * T, r)
    dsg = dlogits @ p.G_l
    g.G_r += dsg.reshape(B * T, r).T @ f.s.reshape(B * T, -1)
    ds = dsg @ p.G_r
    ds_pre = np.zeros_like(f.s_pre)
    take_first = f.s_pre[..., 0::2] >= f.s_pre[..., 1::2]
    ds_pre[..., 0::2] = np.where(take_first, ds, 0.0)
    ds_pre[..., 1::2] = np.where(take_first, 0.0, ds)

    n = p.hidden
    two_m = ds_pre.shape[2]
    g.O_h += ds_pre.reshape(B * T, two_m).T @ f.dec.H.reshape(B * T, n)
    ds_sum = ds_pre.sum(axis=1)
    g.O_c += ds_sum.T @ f.c
    dc = ds_sum @ p.O_c
    if T > 1:
        np.add.at(g.O_y.T, f.tgt[:, :-1], ds_pre[:, 1:])
    dH = ds_pre @ p.O_h

    dY, dh0, dctx = _sequence_backward(f.dec, dH, p.dec, g.dec)
    dc += dctx
    if T > 1:
        np.add.at(g.E_tgt, f.tgt[:, :-1], dY[:, 1:])

    da0 = dh0 * (1.0 - f.h0 * f.h0)
    g.V_dec += da0.T @ f.c
    dc += da0 @ p.V_dec

    dac = dc * (1.0 - f.c * f.c)
    h_N = f.enc.H[:, -1]
    g.V += dac.T @ h_N
    dH_enc = np.zeros_like(f.enc.H)
    dH_enc[:, -1] = dac @ p.V
    dX, _, _ = _sequence_backward(f.enc, dH_enc, p.enc, g.enc)
    np.add.at(g.E_src, f.src, dX)
    return g


# ---------------------------------------------------------------- pair API


@dataclass
class EncoderOutput:
    c: np.ndarray
    caches: List[object]
    h_N: np.ndarray


def encode(src_ids, p):
    src = _check_sequence(src_ids, p.src_vocab_size, "source")
    c, cache = encode_batch(src[None, :], np.ones((1, src.size)), p)
    steps = [cache.step(t) for t in range(src.size)]
    return EncoderOutput(c=c[0], caches=steps, h_N=cache.H[0, -1])


def log_prob(src_ids, tgt_ids, p):
    """Log-probability of the target (EOS step included) given the source."""
    return -forward_batch([src_ids], [tgt_ids], p).nll[0].item()


def model_backward(src_ids, tgt_ids, p):
    """Gradient of ``-log p(tgt | src)`` as a ModelParams of the same shapes."""
    return backward_batch(forward_batch([src_ids], [tgt_ids], p), p, [1.0])
