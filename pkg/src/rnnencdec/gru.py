"""Gated recurrent cell with reset and update gates.

Two reset placements are supported.  The encoder form resets the previous
state before the recurrent product::

    h_tilde = tanh(W x + U (r * h_prev) + b)

The context-conditioned decoder form scales the whole recurrent-plus-context
bracket::

    h_tilde = tanh(W x + r * (U h_prev + C c) + b)

with ``C_z c`` and ``C_r c`` added to the gate pre-activations.  Either way
``h = z * h_prev + (1 - z) * h_tilde``.

All functions accept a single vector or a batch of row vectors.
"""

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import ShapeError
from .linalg import as_float, gaussian_init, orthogonal_init, sigmoid

RESET_BEFORE = "before"  # U (r * h)
RESET_AFTER = "after"  # r * (U h + C c)


@dataclass
class GruParams:
    W: np.ndarray
    W_z: np.ndarray
    W_r: np.ndarray
    U: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    C: Optional[np.ndarray] = None
    C_z: Optional[np.ndarray] = None
    C_r: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    b_z: Optional[np.ndarray] = None
    b_r: Optional[np.ndarray] = None
    reset: str = field(default=RESET_BEFORE, compare=False)

    def __post_init__(self):
        if self.reset not in (RESET_BEFORE, RESET_AFTER):
            raise ValueError(f"unknown reset placement {self.reset!r}")
        hidden, inp = self.W.shape
        for name in ("W_z", "W_r"):
            if getattr(self, name).shape != (hidden, inp):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(hidden, inp)}")
        for name in ("U", "U_z", "U_r"):
            if getattr(self, name).shape != (hidden, hidden):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(hidden, hidden)}")
        present = [self.C is not None, self.C_z is not None, self.C_r is not None]
        if any(present) and not all(present):
            raise ShapeError("C, C_z and C_r must be given together")
        if self.C is not None:
            for name in ("C_z", "C_r"):
                if getattr(self, name).shape != self.C.shape:
                    raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {self.C.shape}")
            if self.C.shape[0] != hidden:
                raise ShapeError(f"C has {self.C.shape[0]} rows, expected {hidden}")
        present = [self.b is not None, self.b_z is not None, self.b_r is not None]
        if any(present) and not all(present):
            raise ShapeError("b, b_z and b_r must be given together")
        if self.b is not None:
            for name in ("b", "b_z", "b_r"):
                if getattr(self, name).shape != (hidden,):
                    raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(hidden,)}")

    @property
    def hidden_size(self):
        return self.W.shape[0]

    @property
    def input_size(self):
        return self.W.shape[1]

    @property
    def has_context(self):
        return self.C is not None

    def named(self):
        """Present parameter arrays by field name, in declaration order."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                out[f.name] = value
        return out

    def zeros_like(self):
        kw = {name: np.zeros_like(a) for name, a in self.named().items()}
        return GruParams(reset=self.reset, **kw)

    @classmethod
    def init(cls, hidden, inputs, rng, context=None, std=0.01, bias=True, reset=RESET_BEFORE, update_bias=0.0):
        """Gaussian input/context weights, orthogonal recurrent weights, zero biases except ``b_z = update_bias``."""
        kw = {}
        for name in ("W", "W_z", "W_r"):
            kw[name] = gaussian_init(hidden, inputs, std, rng)
        for name in ("U", "U_z", "U_r"):
            kw[name] = orthogonal_init(hidden, hidden, rng)
        if context is not None:
            for name in ("C", "C_z", "C_r"):
                kw[name] = gaussian_init(hidden, context, std, rng)
        if bias:
            for name in ("b", "b_z", "b_r"):
                kw[name] = np.zeros(hidden)
            kw["b_z"] += update_bias
        return cls(reset=reset, **kw)


@dataclass
class GruCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_tilde: np.ndarray
    h: np.ndarray
    ctx: Optional[np.ndarray] = None
    # decoder form only: U h_prev + C ctx, the bracket scaled by r
    bracket: Optional[np.ndarray] = None


def gru_compose(z, h_prev, h_tilde):
    z, h_prev, h_tilde = (as_float(a) for a in (z, h_prev, h_tilde))
    if not (z.shape == h_prev.shape == h_tilde.shape):
        raise ShapeError(f"length mismatch: z {z.shape}, h_prev {h_prev.shape}, h_tilde {h_tilde.shape}")
    return z * h_prev + (1.0 - z) * h_tilde


def _check_inputs(x, h_prev, ctx, p):
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"input has width {x.shape[-1]}, cell expects {p.input_size}")
    if h_prev.shape[-1] != p.hidden_size:
        raise ShapeError(f"h_prev has width {h_prev.shape[-1]}, cell expects {p.hidden_size}")
    if x.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"batch mismatch between x {x.shape} and h_prev {h_prev.shape}")
    if ctx is not None and not p.has_context:
        raise ShapeError("context supplied to a cell without C matrices")
    if ctx is None and p.has_context:
        raise ShapeError("cell has C matrices but no context was supplied")
    if ctx is not None and ctx.shape[-1] != p.C.shape[1]:
        raise ShapeError(f"context has width {ctx.shape[-1]}, cell expects {p.C.shape[1]}")


def gru_forward(x, h_prev, ctx, p):
    x = as_float(x)
    h_prev = as_float(h_prev)
    if ctx is not None:
        ctx = as_float(ctx)
    _check_inputs(x, h_prev, ctx, p)

    a_r = x @ p.W_r.T + h_prev @ p.U_r.T
    a_z = x @ p.W_z.T + h_prev @ p.U_z.T
    a_h = x @ p.W.T
    if ctx is not None:
        a_r = a_r + ctx @ p.C_r.T
        a_z = a_z + ctx @ p.C_z.T
    if p.b is not None:
        a_r = a_r + p.b_r
        a_z = a_z + p.b_z
        a_h = a_h + p.b
    r = sigmoid(a_r)
    z = sigmoid(a_z)

    bracket = None
    if p.reset == RESET_BEFORE:
        if ctx is not None:
            # context enters additively, outside the reset
            a_h = a_h + (r * h_prev) @ p.U.T + ctx @ p.C.T
        else:
            a_h = a_h + (r * h_prev) @ p.U.T
    else:
        bracket = h_prev @ p.U.T
        if ctx is not None:
            bracket = bracket + ctx @ p.C.T
        a_h = a_h + r * bracket
    h_tilde = np.tanh(a_h)
    h = z * h_prev + (1.0 - z) * h_tilde
    return GruCache(x=x, h_prev=h_prev, z=z, r=r, h_tilde=h_tilde, h=h, ctx=ctx, bracket=bracket)


def _outer(d, v):
    # sums over the batch axis when inputs are batched
    if d.ndim == 1:
        return np.outer(d, v)
    return d.T @ v


def _colsum(d):
    return d if d.ndim == 1 else d.sum(axis=0)


def gru_backward(cache, dh, p, grads=None):
    """Backpropagate ``dh = dL/dh`` through one cell step.

    Returns ``(dx, dh_prev, dctx, grads)``; ``dctx`` is None for cells
    without context.  When ``grads`` (a GruParams of accumulators) is given,
    parameter gradients are added into it in place.
    """
    dh = as_float(dh)
    if dh.shape != cache.h.shape:
        raise ShapeError(f"dh has shape {dh.shape}, cache holds {cache.h.shape}")
    if grads is None:
        grads = p.zeros_like()
    x, h_prev, z, r, h_tilde, ctx = cache.x, cache.h_prev, cache.z, cache.r, cache.h_tilde, cache.ctx

    dz = dh * (h_prev - h_tilde)
    dh_prev = dh * z
    da_h = dh * (1.0 - z) * (1.0 - h_tilde * h_tilde)
    da_z = dz * z * (1.0 - z)

    grads.W += _outer(da_h, x)
    dx = da_h @ p.W
    dctx = None

    if p.reset == RESET_BEFORE:
        rh = r * h_prev
        grads.U += _outer(da_h, rh)
        drh = da_h @ p.U
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        if ctx is not None:
            grads.C += _outer(da_h, ctx)
            dctx = da_h @ p.C
    else:
        dr = da_h * cache.bracket
        dbracket = da_h * r
        grads.U += _outer(dbracket, h_prev)
        dh_prev = dh_prev + dbracket @ p.U
        if ctx is not None:
            grads.C += _outer(dbracket, ctx)
            dctx = dbracket @ p.C
    da_r = dr * r * (1.0 - r)

    grads.W_z += _outer(da_z, x)
    grads.W_r += _outer(da_r, x)
    grads.U_z += _outer(da_z, h_prev)
    grads.U_r += _outer(da_r, h_prev)
    dx = dx + da_z @ p.W_z + da_r @ p.W_r
    dh_prev = dh_prev + da_z @ p.U_z + da_r @ p.U_r
    if ctx is not None:
        grads.C_z += _outer(da_z, ctx)
        grads.C_r += _outer(da_r, ctx)
        dctx = dctx + da_z @ p.C_z + da_r @ p.C_r
    if p.b is not None:
        grads.b += _colsum(da_h)
        grads.b_z += _colsum(da_z)
        grads.b_r += _colsum(da_r)
    return dx, dh_prev, dctx, grads


# ---------------------------------------------------------------- sequences
#
# The functions below run a whole (padded) batch of sequences through the
# cell.  They compute exactly the step recurrence above, but hoist every
# product that does not depend on the previous state out of the time loop:
# input projections for all steps at once, context projections once, and
# parameter gradients as single products over all steps.


@dataclass
class GruSequenceCache:
    X: np.ndarray  # (B, T, input)
    H_prev: np.ndarray  # (B, T, hidden) state entering each step
    Z: np.ndarray
    R: np.ndarray
    H_tilde: np.ndarray
    H: np.ndarray  # state leaving each step (after masking)
    ctx: Optional[np.ndarray]
    mask: Optional[np.ndarray]  # (B, T) or None
    bracket: Optional[np.ndarray]  # decoder form only

    def step(self, t):
        """GruCache for step ``t`` as the single-step functions would build it."""
        return GruCache(
            x=self.X[:, t],
            h_prev=self.H_prev[:, t],
            z=self.Z[:, t],
            r=self.R[:, t],
            h_tilde=self.H_tilde[:, t],
            h=self.H[:, t],
            ctx=self.ctx,
            bracket=None if self.bracket is None else self.bracket[:, t],
        )


def _stacked_inputs(p):
    return np.concatenate([p.W_r, p.W_z, p.W])


def gru_sequence_forward(X, h0, ctx, p, mask=None):
    """Run the cell over ``X`` of shape (B, T, input) from state ``h0``.

    Where ``mask[b, t] == 0`` the state is carried through unchanged, which
    lets right-padded sequences share a batch.
    """
    X = as_float(X)
    h0 = as_float(h0)
    B, T, _ = X.shape
    n = p.hidden_size
    if T:
        _check_inputs(X[:, 0], h0, ctx, p)
    dtype = np.result_type(X, h0, p.W)

    XP = X @ _stacked_inputs(p).T
    if p.b is not None:
        XP = XP + np.concatenate([p.b_r, p.b_z, p.b])
    gate_ctx = cand_ctx = None
    if ctx is not None:
        ctx = as_float(ctx)
        gate_ctx = ctx @ np.concatenate([p.C_r, p.C_z]).T
        cand_ctx = ctx @ p.C.T
    U_rz = np.concatenate([p.U_r, p.U_z])

    H_prev = np.empty((B, T, n), dtype=dtype)
    Z = np.empty_like(H_prev)
    R = np.empty_like(H_prev)
    H_tilde = np.empty_like(H_prev)
    H = np.empty_like(H_prev)
    bracket = np.empty_like(H_prev) if p.reset == RESET_AFTER else None
    h = h0
    for t in range(T):
        H_prev[:, t] = h
        a_rz = XP[:, t, : 2 * n] + h @ U_rz.T
        if gate_ctx is not None:
            a_rz = a_rz + gate_ctx
        rz = sigmoid(a_rz)
        r, z = rz[:, :n], rz[:, n:]
        if bracket is None:
            a_h = XP[:, t, 2 * n :] + (r * h) @ p.U.T
            if cand_ctx is not None:
                a_h = a_h + cand_ctx
        else:
            br = h @ p.U.T
            if cand_ctx is not None:
                br = br + cand_ctx
            bracket[:, t] = br
            a_h = XP[:, t, 2 * n :] + r * br
        h_tilde = np.tanh(a_h)
        h_new = z * h + (1.0 - z) * h_tilde
        if mask is not None and not mask[:, t].all():
            m = mask[:, t, None]
            h_new = m * h_new + (1.0 - m) * h
        R[:, t], Z[:, t], H_tilde[:, t], H[:, t] = r, z, h_tilde, h_new
        h = h_new
    return GruSequenceCache(X, H_prev, Z, R, H_tilde, H, ctx, mask, bracket)


def gru_sequence_backward(cache, dH, p, grads):
    """Backpropagate per-step state gradients ``dH`` (B, T, hidden).

    ``dH[:, t]`` is the gradient arriving at the state leaving step ``t``
    from outside the recurrence (e.g. an output layer, or the final-state
    consumer at ``t = T - 1``).  Parameter gradients are added into
    ``grads``; returns ``(dX, dh0, dctx)``.
    """
    B, T, n = cache.H.shape
    U_rz = np.concatenate([p.U_r, p.U_z])
    DA = np.empty((B, T, 3 * n), dtype=cache.H.dtype)  # d pre-activations r, z, h
    DBR = np.empty_like(cache.H) if cache.bracket is not None else None
    dh = np.zeros((B, n), dtype=cache.H.dtype)
    for t in reversed(range(T)):
        dh = dh + dH[:, t]
        carry = None
        if cache.mask is not None and not cache.mask[:, t].all():
            m = cache.mask[:, t, None]
            carry = (1.0 - m) * dh
            dh = m * dh
        z, r, ht, hp = cache.Z[:, t], cache.R[:, t], cache.H_tilde[:, t], cache.H_prev[:, t]
        dhp = dh * z
        da_h = dh * (1.0 - z) * (1.0 - ht * ht)
        da_z = dh * (hp - ht) * z * (1.0 - z)
        if DBR is None:
            drh = da_h @ p.U
            dr = drh * hp
            dhp = dhp + drh * r
        else:
            dr = da_h * cache.bracket[:, t]
            dbr = da_h * r
            DBR[:, t] = dbr
            dhp = dhp + dbr @ p.U
        da_r = dr * r * (1.0 - r)
        DA[:, t, :n] = da_r
        DA[:, t, n : 2 * n] = da_z
        DA[:, t, 2 * n :] = da_h
        dhp = dhp + DA[:, t, : 2 * n] @ U_rz
        dh = dhp if carry is None else dhp + carry

    X2 = cache.X.reshape(B * T, -1)
    DA2 = DA.reshape(B * T, 3 * n)
    HP2 = cache.H_prev.reshape(B * T, n)
    dW = DA2.T @ X2
    grads.W_r += dW[:n]
    grads.W_z += dW[n : 2 * n]
    grads.W += dW[2 * n :]
    dU_rz = DA2[:, : 2 * n].T @ HP2
    grads.U_r += dU_rz[:n]
    grads.U_z += dU_rz[n:]
    if DBR is None:
        grads.U += DA2[:, 2 * n :].T @ (cache.R.reshape(B * T, n) * HP2)
    else:
        grads.U += DBR.reshape(B * T, n).T @ HP2
    if p.b is not None:
        db = DA2.sum(axis=0)
        grads.b_r += db[:n]
        grads.b_z += db[n : 2 * n]
        grads.b += db[2 * n :]
    dX = DA @ _stacked_inputs(p)

    dctx = None
    if cache.ctx is not None:
        S = DA.sum(axis=1)  # (B, 3n)
        cand = S[:, 2 * n :] if DBR is None else DBR.sum(axis=1)
        grads.C_r += S[:, :n].T @ cache.ctx
        grads.C_z += S[:, n : 2 * n].T @ cache.ctx
        grads.C += cand.T @ cache.ctx
        dctx = S[:, :n] @ p.C_r + S[:, n : 2 * n] @ p.C_z + cand @ p.C
    return dX, dh, dctx
