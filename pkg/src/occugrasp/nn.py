"""Minimal f64 reverse-mode engine and the learnable blocks built on it.

Everything is numpy float64. The graph hanging off a loss tensor is the
gradient tape; ``backward`` walks it once and errors on reuse. Max-style
reductions route gradients to the lowest contributing row index on ties.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "parents", "bwd", "requires_grad", "_consumed")

    def __init__(self, data, parents=(), bwd=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    def backward(self):
        backward(self)

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _make(data, parents, bwd) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, parents=tuple(parents), bwd=bwd)
    return Tensor(data)


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss; the graph is consumed once."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._consumed:
        raise RuntimeError("gradient tape already consumed by a previous backward")
    loss._consumed = True
    # iterative topo order
    order, stack, visited = [], [(loss, False)], set()
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.bwd is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.bwd(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
        if node is not loss:
            node.grad = None
            node.bwd = None
            node.parents = ()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    nd = grad.ndim - len(shape)
    if nd > 0:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make(out, (a,), lambda g: (g * inside,))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _make(out, (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(out, (a,), bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bwd)


def weighted_row_sum(parts) -> Tensor:
    """sum_i w_i * rows_i for (rows: Tensor[N,C], w: ndarray[N]) pairs (bilinear blend)."""
    total = None
    for rows, w in parts:
        term = mul(rows, tensor(w[:, None]))
        total = term if total is None else add(total, term)
    return total


def segment_max(a: Tensor, seg_ids, n_seg: int):
    """Per-segment channelwise max of ``a[N, C]``.

    Empty segments yield exact 0. Returns (Tensor[n_seg, C], argmax row
    indices with -1 for empty cells); ties go to the lowest row index and the
    backward pass routes gradient only to the recorded argmax rows.
    """
    data = a.data
    n, c = data.shape
    seg = np.asarray(seg_ids, dtype=np.intp)
    out = np.zeros((n_seg, c), dtype=np.float64)
    argmax = np.full((n_seg, c), -1, dtype=np.intp)
    if n:
        order = np.argsort(seg, kind="stable")
        sseg = seg[order]
        sdata = data[order]
        starts = np.flatnonzero(np.r_[True, sseg[1:] != sseg[:-1]])
        present = sseg[starts]
        maxes = np.maximum.reduceat(sdata, starts, axis=0)
        out[present] = maxes
        # first (lowest original index) row attaining the max, per channel
        pos = np.cumsum(np.r_[True, sseg[1:] != sseg[:-1]]) - 1
        eq = sdata == maxes[pos]
        rr, cc = np.nonzero(eq)
        big = np.full((n_seg, c), n, dtype=np.intp)
        np.minimum.at(big, (sseg[rr], cc), order[rr])
        hit = big < n
        argmax[hit] = big[hit]

    def bwd(g):
        full = np.zeros_like(data)
        valid = argmax >= 0
        rows = argmax[valid]
        cols = np.nonzero(valid)[1]
        np.add.at(full, (rows, cols), g[valid])
        return (full,)

    return _make(out, (a,), bwd), argmax


def masked_max_pool(features: Tensor, groups, n_groups: int):
    """Spec-surface alias of :func:`segment_max` (empty groups pool to 0)."""
    return segment_max(features, groups, n_groups)


_OFFSETS3 = [(di, dj) for di in range(3) for dj in range(3)]


def conv3x3(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 zero-padded 3x3 convolution in channels-last layout.

    x: (B,H,W,C_in), w: (9*C_in, C_out) with patch-offset-major rows
    (row t*C_in + c is kernel offset t = 3*di + dj, channel c).
    The patch matrix is cached for the backward pass.
    """
    b, h, wd, c = x.data.shape
    c_out = w.data.shape[1]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, wd, 9, c), dtype=np.float64)
    for t, (di, dj) in enumerate(_OFFSETS3):
        cols[:, :, :, t, :] = xp[:, di : di + h, dj : dj + wd, :]
    colsf = cols.reshape(b * h * wd, 9 * c)
    y = (colsf @ w.data + bias.data).reshape(b, h, wd, c_out)

    def bwd(g):
        gf = g.reshape(b * h * wd, c_out)
        dw = colsf.T @ gf
        db = gf.sum(axis=0)
        dcols = (gf @ w.data.T).reshape(b, h, wd, 9, c)
        dxp = np.zeros((b, h + 2, wd + 2, c), dtype=np.float64)
        for t, (di, dj) in enumerate(_OFFSETS3):
            dxp[:, di : di + h, dj : dj + wd, :] += dcols[:, :, :, t, :]
        return dxp[:, 1:-1, 1:-1, :], dw, db

    return _make(y, (x, w, bias), bwd)


def conv1x1(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel channel projection: (B,H,W,C_in) x (C_in,C_out) -> (B,H,W,C_out)."""
    b, h, wd, c = x.data.shape
    c_out = w.data.shape[1]
    xf = x.data.reshape(-1, c)
    y = (xf @ w.data + bias.data).reshape(b, h, wd, c_out)

    def bwd(g):
        gf = g.reshape(-1, c_out)
        return (gf @ w.data.T).reshape(b, h, wd, c), xf.T @ gf, gf.sum(axis=0)

    return _make(y, (x, w, bias), bwd)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Elementwise smooth-L1 with the kink at |r| = 1."""
    t = np.asarray(target, dtype=np.float64)
    r = pred.data - t
    a = np.abs(r)
    out = np.where(a < 1.0, 0.5 * r * r, a - 0.5)
    dr = np.where(a < 1.0, r, np.sign(r))
    return _make(out, (pred,), lambda g: (g * dr,))


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean BCE; probabilities clamped to [1e-7, 1-1e-7]."""
    t = np.asarray(targets, dtype=np.float64)
    p = clamp(probs, 1e-7, 1.0 - 1e-7)
    one_minus = sub(1.0, p)
    ll = add(mul(tensor(t), log(p)), mul(tensor(1.0 - t), log(one_minus)))
    return mul(tmean(ll), -1.0)


# ---------------------------------------------------------------------------
# learnable modules


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = parameter(_xavier(rng, d_in, d_out, (d_in, d_out)))
        self.b = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]


class MLP:
    """Affine stack with ReLU between layers; the last layer is linear."""

    def __init__(self, widths, rng: np.random.Generator):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.widths = list(widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.widths[0]:
            raise ValueError(
                f"MLP expects input width {self.widths[0]}, got {x.data.shape[-1]}"
            )
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def params(self):
        return [p for l in self.layers for p in l.params()]


class PlaneEncoder:
    """Channel projection then 3 residual blocks of two 3x3 convolutions.

    Operates channels-last: (B, H, W, C_in) -> (B, H, W, C_out).
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, n_blocks: int = 3):
        self.c_in, self.c_out = c_in, c_out
        self.proj_w = parameter(_xavier(rng, c_in, c_out, (c_in, c_out)))
        self.proj_b = parameter(np.zeros(c_out))
        self.blocks = []
        for _ in range(n_blocks):
            fan = c_out * 9
            self.blocks.append(
                (
                    parameter(_xavier(rng, fan, fan, (9 * c_out, c_out))),
                    parameter(np.zeros(c_out)),
                    parameter(_xavier(rng, fan, fan, (9 * c_out, c_out))),
                    parameter(np.zeros(c_out)),
                )
            )

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[3] != self.c_in:
            raise ValueError(
                f"plane encoder expects (B,H,W,{self.c_in}), got {x.data.shape}"
            )
        if x.data.shape[1] < 4 or x.data.shape[2] < 4:
            raise ValueError("plane encoder needs spatial dims >= 4")
        h = relu(conv1x1(x, self.proj_w, self.proj_b))
        for w1, b1, w2, b2 in self.blocks:
            y = relu(conv3x3(h, w1, b1))
            y = conv3x3(y, w2, b2)
            h = relu(add(h, y))
        return h

    def center_weight(self, w: Tensor) -> np.ndarray:
        """The kernel-center (C_in, C_out) slice of a conv weight matrix."""
        c = self.c_out
        return w.data[4 * c : 5 * c]

    def params(self):
        out = [self.proj_w, self.proj_b]
        for blk in self.blocks:
            out.extend(blk)
        return out


def plane_encoder_forward(enc: PlaneEncoder, planes_chw: Tensor) -> Tensor:
    """Spec-layout adapter: (C_in, H, W) -> (C_out, H, W) single plane."""
    c, h, w = planes_chw.data.shape
    x = transpose(reshape(planes_chw, (1, c, h, w)), (0, 2, 3, 1))
    out = enc(x)
    return reshape(transpose(out, (0, 3, 1, 2)), (enc.c_out, h, w))


# ---------------------------------------------------------------------------
# optimizer / parameter vector / checkpoint


def flatten_params(params) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in params]) if params else np.zeros(0)


def flatten_grads(params) -> np.ndarray:
    return np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params]
    )


def set_flat_params(params, vec: np.ndarray):
    i = 0
    for p in params:
        n = p.data.size
        p.data = vec[i : i + n].reshape(p.data.shape).copy()
        i += n
    if i != vec.size:
        raise ValueError(f"parameter vector length mismatch: {vec.size} vs {i}")


def zero_grads(params):
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int

    @staticmethod
    def fresh(n: int) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0)


def sgd_adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple:
    """One bias-corrected Adam update on the flat parameter vector."""
    if params.shape != grads.shape:
        raise ValueError("params/grads length mismatch")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("diverged: non-finite gradients")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


CKPT_MAGIC = b"CKPT1"


def save_checkpoint(path, descriptor: dict, params: np.ndarray, adam: AdamState | None = None):
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<Q", params.size))
        f.write(params.astype("<f8").tobytes())
        if adam is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", adam.t))
            f.write(adam.m.astype("<f8").tobytes())
            f.write(adam.v.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (descriptor dict, flat params, AdamState or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:5] != CKPT_MAGIC:
        raise ValueError("not a CKPT1 file")
    off = 5
    (dlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    descriptor = json.loads(raw[off : off + dlen].decode("utf-8"))
    off += dlen
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    params = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
    off += 8 * n
    (has_adam,) = struct.unpack_from("<B", raw, off)
    off += 1
    adam = None
    if has_adam:
        (t,) = struct.unpack_from("<Q", raw, off)
        off += 8
        m = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        v = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
        adam = AdamState(m, v, int(t))
    return descriptor, params, adam


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_check(loss_fn, params, n_checks: int, seed: int, h: float = 1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a pure function of the current parameter values.
    ``n_checks`` coordinates are drawn uniformly over the flat vector.
    """
    loss = loss_fn()
    zero_grads(params)
    backward(loss)
    analytic = flatten_grads(params)
    zero_grads(params)

    base = flatten_params(params)
    rng = np.random.default_rng(seed)
    idxs = rng.choice(base.size, size=min(n_checks, base.size), replace=False)
    worst = 0.0
    for i in idxs:
        for sign, store in ((+1, "hi"), (-1, "lo")):
            vec = base.copy()
            vec[i] += sign * h
            set_flat_params(params, vec)
            with no_grad():
                val = float(loss_fn().data)
            if sign > 0:
                hi = val
            else:
                lo = val
        fd = (hi - lo) / (2 * h)
        a = analytic[i]
        denom = max(abs(a), abs(fd))
        err = 0.0 if denom < 1e-6 else abs(a - fd) / denom
        worst = max(worst, err)
    set_flat_params(params, base)
    return worst
