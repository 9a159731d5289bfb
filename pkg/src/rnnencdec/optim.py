"""Training objective, Adadelta/SGD updates, the training loop and gradient checking."""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import checkpoint
from .errors import NumericError, ParameterError
from .linalg import RngState
from .model import ModelParams, backward_batch, forward_batch, model_backward

log = logging.getLogger(__name__)

OPTIMIZERS = ("adadelta", "sgd")
SAMPLING = ("replacement", "epoch")


@dataclass
class AdadeltaState:
    acc_grad_sq: dict
    acc_update_sq: dict
    rho: float = 0.95
    eps: float = 1e-6

    @classmethod
    def zeros(cls, p, rho=0.95, eps=1e-6):
        named = p.named()
        return cls(
            acc_grad_sq={k: np.zeros_like(a) for k, a in named.items()},
            acc_update_sq={k: np.zeros_like(a) for k, a in named.items()},
            rho=rho,
            eps=eps,
        )

    def to_records(self):
        out = {}
        for k, a in self.acc_grad_sq.items():
            out[f"adadelta/grad_sq/{k}"] = a
        for k, a in self.acc_update_sq.items():
            out[f"adadelta/update_sq/{k}"] = a
        return out

    @classmethod
    def from_records(cls, p, records, rho=0.95, eps=1e-6):
        state = cls.zeros(p, rho, eps)
        for k, a in state.acc_grad_sq.items():
            a[...] = records[f"adadelta/grad_sq/{k}"].reshape(a.shape)
        for k, a in state.acc_update_sq.items():
            a[...] = records[f"adadelta/update_sq/{k}"].reshape(a.shape)
        return state


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_updates: int = 1000
    seed: int = 1234
    optimizer: str = "adadelta"
    learning_rate: float = 0.01
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 0.0
    sampling: str = "replacement"
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_updates < 0:
            raise ParameterError(f"max_updates must be >= 0, got {self.max_updates}")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.sampling not in SAMPLING:
            raise ParameterError(f"sampling must be one of {SAMPLING}, got {self.sampling!r}")
        if self.optimizer == "sgd" and not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")


def batch_nll(pairs, p):
    """Mean negative log-likelihood over a batch of PhrasePairs and its gradient."""
    if not pairs:
        raise ValueError("empty batch")
    f = forward_batch([q.src_ids for q in pairs], [q.tgt_ids for q in pairs], p)
    weights = np.full(len(pairs), 1.0 / len(pairs))
    return float(f.nll.mean()), backward_batch(f, p, weights)


def _check_shapes(p, grads):
    pn, gn = p.named(), grads.named()
    if pn.keys() != gn.keys() or any(pn[k].shape != gn[k].shape for k in pn):
        raise ParameterError("gradient shapes do not match parameters")


def adadelta_step(p, grads, state):
    """One in-place Adadelta update of ``p``; returns ``(p, state)``."""
    _check_shapes(p, grads)
    rho, eps = state.rho, state.eps
    gn = grads.named()
    for name, w in p.named().items():
        g = gn[name]
        eg = state.acc_grad_sq[name]
        ed = state.acc_update_sq[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        w += delta
    return p, state


def sgd_step(p, grads, learning_rate):
    if not learning_rate > 0:
        raise ParameterError(f"learning_rate must be positive, got {learning_rate}")
    _check_shapes(p, grads)
    gn = grads.named()
    for name, w in p.named().items():
        w -= learning_rate * gn[name]
    return p


def clip_gradients(grads, max_norm):
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.named().values()))
    if norm > max_norm > 0:
        for g in grads.named().values():
            g *= max_norm / norm
    return norm


@dataclass
class TrainResult:
    params: ModelParams
    state: Optional[AdadeltaState]
    log: List[tuple] = field(default_factory=list)
    updates: int = 0


class _BatchSampler:
    def __init__(self, pairs, cfg, rng):
        self.pairs = pairs
        self.cfg = cfg
        self.rng = rng
        self.order = []

    def next(self):
        if self.cfg.sampling == "replacement":
            return [self.pairs[i] for i in self.rng.integers(len(self.pairs), size=self.cfg.batch_size)]
        batch = []
        while len(batch) < self.cfg.batch_size:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.pairs)))
            batch.append(self.pairs[self.order.pop(0)])
        return batch


def format_log_line(update, loss, seconds):
    return f"{update}\t{loss:.10f}\t{seconds:.3f}"


def train(
    pairs,
    cfg,
    params,
    state=None,
    model_cfg=None,
    checkpoint_path=None,
    on_log: Optional[Callable[[str], None]] = None,
    start_update=0,
):
    """Run ``cfg.max_updates`` minibatch updates on ``params`` in place.

    Batches are drawn with a dedicated random stream derived from
    ``cfg.seed`` so the run is reproducible.  A log entry
    ``(update, mean_nll, seconds)`` is recorded every ``cfg.log_every``
    updates, where ``mean_nll`` averages the batch losses since the
    previous entry.  Resuming with ``start_update=k`` and the saved
    optimizer state continues exactly where an uninterrupted run would be.
    """
    if not pairs:
        raise ValueError("training set is empty")
    rng = RngState(cfg.seed, stream=1)
    sampler = _BatchSampler(pairs, cfg, rng)
    # replay the draws of earlier updates so a resumed run sees the same batches
    for _ in range(start_update):
        sampler.next()
    if cfg.optimizer == "adadelta" and state is None:
        state = AdadeltaState.zeros(params, cfg.rho, cfg.eps)
    result = TrainResult(params=params, state=state, updates=start_update)
    started = time.monotonic()
    window = []
    for _ in range(cfg.max_updates):
        loss, grads = batch_nll(sampler.next(), params)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at update {result.updates + 1}")
        if cfg.clip_norm > 0:
            clip_gradients(grads, cfg.clip_norm)
        if cfg.optimizer == "adadelta":
            adadelta_step(params, grads, state)
        else:
            sgd_step(params, grads, cfg.learning_rate)
        result.updates += 1
        window.append(loss)
        if cfg.log_every and result.updates % cfg.log_every == 0:
            entry = (result.updates, float(np.mean(window)), time.monotonic() - started)
            window = []
            result.log.append(entry)
            if on_log is not None:
                on_log(format_log_line(*entry))
        if checkpoint_path and cfg.checkpoint_every and result.updates % cfg.checkpoint_every == 0:
            save_training_checkpoint(checkpoint_path, params, model_cfg, state, result.updates)
    return result


def save_training_checkpoint(path, params, model_cfg, state, updates):
    extra = state.to_records() if state is not None else None
    meta = {"updates": updates}
    if state is not None:
        meta.update(rho=state.rho, eps=state.eps)
    checkpoint.save(params, model_cfg, path, extra=extra, meta=meta)


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


MAX_GRADCHECK_PARAMS = 100_000


def grad_check(p, pair, step=1e-5, loss_fn=None, grad_fn=None, precision=np.longdouble):
    """Max relative error between analytic and central-difference gradients.

    By default checks ``-log p(tgt | src)`` for one PhrasePair against
    ``model_backward`` on every parameter entry.  ``loss_fn(p)`` and
    ``grad_fn(p)`` may be supplied to check any other scalar function of a
    ModelParams-like object exposing ``named()``.

    The finite differences are taken on a copy of the parameters held in
    ``precision`` (extended precision by default, where the platform has
    it), so cancellation in ``f(x+h) - f(x-h)`` does not swamp gradient
    entries near 1e-8.  The analytic gradient is computed in float64.
    """
    if loss_fn is None:
        loss_fn = lambda q: forward_batch([pair.src_ids], [pair.tgt_ids], q).nll[0]  # noqa: E731
        grad_fn = lambda q: model_backward(pair.src_ids, pair.tgt_ids, q)  # noqa: E731
    analytic = grad_fn(p).named()
    if precision is not None and hasattr(p, "astype"):
        p = p.astype(precision)
    named = p.named()
    total = sum(a.size for a in named.values())
    if total > MAX_GRADCHECK_PARAMS:
        raise ParameterError(f"{total} parameters; gradient checking is limited to {MAX_GRADCHECK_PARAMS}")
    worst = 0.0
    for name, a in named.items():
        flat = a.reshape(-1)
        g = analytic[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            f_plus = loss_fn(p)
            flat[i] = old - step
            f_minus = loss_fn(p)
            flat[i] = old
            numeric = float((f_plus - f_minus) / (2 * flat.dtype.type(step)))
            worst = max(worst, relative_error(numeric, float(g[i])))
    return worst
