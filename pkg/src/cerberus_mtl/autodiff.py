"""Reverse-mode automatic differentiation over dense numpy tensors.

Deliberately minimal: exactly the layer set the segmentation/classification
network needs (conv, batch norm, relu, channel softmax, nearest upsample,
channel concat, global average pool, linear, dropout) plus an Adam optimizer
and a finite-difference gradient checker. Values are float32 in training;
ops preserve dtype so the checker can run a float64 shadow graph.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array with an optional gradient buffer and a backward closure.

    `parents` and `backward_fn` form the tape: backward_fn(grad_out) returns
    one gradient array (or None) per parent, in order.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.grad is not None})"


def _result(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(parents),
                  backward_fn=backward_fn if req else None, op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- tracing hooks used by gradcheck ---------------------------------------

_TRACE = threading.local()


def _trace_relu_sign(mask: np.ndarray):
    sink = getattr(_TRACE, "relu_signs", None)
    if sink is not None:
        sink.append(zlib.crc32(np.packbits(mask).tobytes()))


def _trace_random(op_name: str):
    sink = getattr(_TRACE, "random_ops", None)
    if sink is not None:
        sink.append(op_name)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols, ho, wo


def _col2im(cols, xshape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    xg = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xg[:, :, pad : hp - pad, pad : wp - pad] if pad else xg


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with bias; output (H + 2*pad - kH) / stride + 1 must divide exactly."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input Cin={cin}, weight Cin={cin_w}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError(f"non-integral output extent for H={h} W={w} k={kh} stride={stride} pad={pad}")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    cols_mat = cols.reshape(n, cin * kh * kw, ho * wo)
    w_mat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w_mat, cols_mat).reshape(n, cout, ho, wo)
    out += bias.data[:, None, None]

    def backward_fn(g):
        g_mat = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g_mat).reshape(n, cin, kh, kw, ho, wo)
            gx = _col2im(gcols, x.shape, kh, kw, stride, pad, ho, wo)
        if weight.requires_grad:
            gw = np.einsum("nop,ncp->oc", g_mat, cols_mat).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward_fn, "conv2d")


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, mode: str = "train",
                 eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch norm over (N,H,W); train mode mutates the running stats in place."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d affine shape {gamma.shape}/{beta.shape} != ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    m = n * h * w
    if mode == "train":
        if m < 2:
            raise ShapeError("batch_norm2d train mode needs at least 2 elements per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward_fn(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * gamma.data[:, None, None]
            if mode == "train":
                # batch statistics participate in the graph
                sum_gxhat = gxhat.sum(axis=(0, 2, 3))
                sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (inv_std[:, None, None] / m) * (
                    m * gxhat - sum_gxhat[:, None, None] - xhat * sum_gxhat_xhat[:, None, None]
                )
            else:
                gx = gxhat * inv_std[:, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward_fn, "batch_norm2d")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _trace_relu_sign(mask)
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward_fn(g):
        return (g * mask,) if x.requires_grad else (None,)

    return _result(out, (x,), backward_fn, "relu")


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax across axis 1 (channels); per-position outputs sum to 1."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"channel_softmax needs a channel axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (x,), backward_fn, "channel_softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "channel_softmax":
        return channel_softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward_fn, "upsample_nearest2x")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        ga = g[:, :ca] if a.requires_grad else None
        gb = g[:, ca:] if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward_fn, "concat_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        scale = np.asarray(1.0 / (h * w), dtype=g.dtype)
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)

    return _result(out, (x,), backward_fn, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W.T + b for x of shape (N, Din), W of shape (Dout, Din)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear Din mismatch: input {x.shape[1]}, weight {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward_fn, "linear")


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; eval mode and rate 0 are the identity."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        def backward_fn(g):
            return (g,) if x.requires_grad else (None,)
        return _result(x.data, (x,), backward_fn, "dropout")
    if rng is None:
        raise ValueError("train-mode dropout requires an rng")
    _trace_random("dropout")
    keep = rng.random(x.shape) >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    out = np.where(keep, x.data * scale, x.data.dtype.type(0))

    def backward_fn(g):
        return (np.where(keep, g * scale, g.dtype.type(0)),) if x.requires_grad else (None,)

    return _result(out, (x,), backward_fn, "dropout")


def take_rows(x: Tensor, indices) -> Tensor:
    """Select batch rows; backward scatters the gradient back into the full batch."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[idx]

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(out, (x,), backward_fn, "take_rows")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _result(out, (a, b), backward_fn, "add")


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    f = x.data.dtype.type(factor)
    out = x.data * f

    def backward_fn(g):
        return (g * f,) if x.requires_grad else (None,)

    return _result(out, (x,), backward_fn, "scale")


def add_n(tensors) -> Tensor:
    """Sum a non-empty list of same-shape tensors."""
    tensors = [as_tensor(t) for t in tensors]
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable requires-grad leaf.

    Grads add onto existing `.grad` buffers; call `zero_grads` between steps.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.backward_fn is None and not p.parents:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Parameters and Adam
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    """Named tensor with a trainability flag; identifiers are hierarchical paths."""

    tensor: Tensor
    identifier: str
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def set_trainable(self, flag: bool):
        self.trainable = bool(flag)
        self.tensor.requires_grad = self.trainable


def zero_grads(params) -> None:
    for p in params:
        p.tensor.grad = None


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter identifier.

    `step` counts optimizer invocations; each parameter also tracks how many
    updates it has received so bias correction stays exact for decoders that
    only appear in some batches.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)   # name -> (m, v, n_updates)

    def buffers_for(self, param: Parameter):
        if param.identifier not in self.moments:
            self.moments[param.identifier] = (
                np.zeros_like(param.data), np.zeros_like(param.data), 0)
        return self.moments[param.identifier]


def adam_step(params, state: AdamState, lr: float) -> list:
    """One Adam update over `params`; frozen or grad-less parameters are skipped.

    Returns the identifiers actually updated.
    """
    state.step += 1
    updated = []
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"{p.identifier}: grad shape {g.shape} != param {p.data.shape}")
        m, v, n = state.buffers_for(p)
        if m.shape != p.data.shape:
            raise ShapeError(f"{p.identifier}: moment shape {m.shape} != param {p.data.shape}")
        n += 1
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.moments[p.identifier] = (m, v, n)
        m_hat = m / (1.0 - state.beta1 ** n)
        v_hat = v / (1.0 - state.beta2 ** n)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)
        updated.append(p.identifier)
    return updated


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


class NondeterministicFragmentError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    per_parameter: dict           # identifier -> max relative error over checked coords
    checked_coords: dict          # identifier -> number of coordinates compared
    skipped_kink_coords: int      # coords discarded because a relu sign flipped under +-h

    @property
    def max_relative_error(self) -> float:
        return max(self.per_parameter.values()) if self.per_parameter else 0.0

    def worst(self):
        if not self.per_parameter:
            return None, 0.0
        name = max(self.per_parameter, key=self.per_parameter.get)
        return name, self.per_parameter[name]


def _traced_eval(loss_fn):
    _TRACE.relu_signs = []
    _TRACE.random_ops = []
    try:
        value = loss_fn()
        signs = tuple(_TRACE.relu_signs)
        randoms = list(_TRACE.random_ops)
    finally:
        _TRACE.relu_signs = None
        _TRACE.random_ops = None
    return float(value.data), signs, randoms


def gradcheck(loss_fn, params, h: float = 1e-3, max_coords_per_param: int = 6,
              rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    `loss_fn()` must rebuild the scalar loss from the parameters' current
    data. Parameters should be float64 for the differencing to sit well below
    the 1e-3 acceptance tolerance; coordinates whose relu activation pattern
    flips between the two perturbed evaluations are skipped (the analytic
    gradient is one-sided there) and counted in the report.
    """
    rng = rng or np.random.default_rng(0)
    value0, signs0, randoms = _traced_eval(loss_fn)
    if randoms:
        raise NondeterministicFragmentError(
            f"fragment draws randomness in: {sorted(set(randoms))}")
    value1, _, _ = _traced_eval(loss_fn)
    if value0 != value1:
        raise NondeterministicFragmentError("fragment is not evaluation-stable")

    loss = loss_fn()
    zero_grads(params)
    backward(loss)
    analytic = {p.identifier: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}

    per_parameter = {}
    checked = {}
    skipped = 0
    for p in params:
        flat = p.data.reshape(-1)
        size = flat.size
        if size <= max_coords_per_param:
            coords = list(range(size))
        else:
            coords = list(rng.choice(size, size=max_coords_per_param, replace=False))
        worst = 0.0
        n_checked = 0
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            lp, sp, _ = _traced_eval(loss_fn)
            flat[ci] = orig - h
            lm, sm, _ = _traced_eval(loss_fn)
            flat[ci] = orig
            if sp != sm:
                skipped += 1
                continue
            numeric = (lp - lm) / (2.0 * h)
            a = float(analytic[p.identifier].reshape(-1)[ci])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
            n_checked += 1
        per_parameter[p.identifier] = worst
        checked[p.identifier] = n_checked
    return GradCheckReport(per_parameter, checked, skipped)
