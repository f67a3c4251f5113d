"""Minimal dense-tensor reverse-mode differentiation engine.

Float32 semantics throughout. Every operation computes its forward value
eagerly and records a closure that routes gradients to its inputs; the
recorded graph is the tape, and ``backward`` replays it once in reverse
topological order. Single-threaded per graph.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Row-major float32 buffer with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable tensor; gradients accumulate across backward calls."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """Wrap an array as a non-differentiable graph input."""
    return Tensor(value, requires_grad=False)


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    """Attach the tape record if any input wants gradients."""
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = inputs
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), backward_fn)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(1.0 / a.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(-g * out.data * out.data)

    return _record(out, (a,), backward_fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)))

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * out.data * (1.0 - out.data))

    return _record(out, (a,), backward_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out.data * out.data))

    return _record(out, (a,), backward_fn)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g / (1.0 + np.exp(-a.data)))

    return _record(out, (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / np.maximum(out.data, 1e-12))

    return _record(out, (a,), backward_fn)


def atan2(y, x) -> Tensor:
    """Four-quadrant angle of (x + iy), elementwise."""
    y, x = as_tensor(y), as_tensor(x)
    _check_same_shape(y, x, "atan2")
    out = Tensor(np.arctan2(y.data, x.data))
    denom = np.maximum(y.data.astype(np.float64) ** 2 + x.data.astype(np.float64) ** 2,
                       1e-12).astype(np.float32)

    def backward_fn(g):
        if y.requires_grad:
            y.accumulate_grad(g * x.data / denom)
        if x.requires_grad:
            x.accumulate_grad(-g * y.data / denom)

    return _record(out, (y, x), backward_fn)


def prelu(x, slope) -> Tensor:
    """Parametric ReLU; ``slope`` broadcasts over the map (one per channel)."""
    x, slope = as_tensor(x), as_tensor(slope)
    pos = x.data >= 0
    out = Tensor(np.where(pos, x.data, slope.data * x.data))

    def backward_fn(g):
        if x.requires_grad:
            grad_in = np.where(pos, g, slope.data * g)
            x.accumulate_grad(_unbroadcast(grad_in, x.data.shape))
        if slope.requires_grad:
            grad_slope = np.where(pos, 0.0, x.data) * g
            slope.accumulate_grad(_unbroadcast(grad_slope, slope.data.shape))

    return _record(out, (x, slope), backward_fn)


def tsum(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum())

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).astype(np.float32))

    return _record(out, (a,), backward_fn)


def tmean(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean())
    inv_n = 1.0 / a.data.size

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(np.full(a.data.shape, g * inv_n, dtype=np.float32))

    return _record(out, (a,), backward_fn)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff))
    scale = 2.0 / diff.size

    def backward_fn(g):
        if pred.requires_grad:
            pred.accumulate_grad((g * scale) * diff)
        if target.requires_grad:
            target.accumulate_grad((-g * scale) * diff)

    return _record(out, (pred, target), backward_fn)


# ---------------------------------------------------------------------------
# Linear algebra and structural primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _record(out, (a, b), backward_fn)


def matvec(weight, x) -> Tensor:
    """``weight @ x`` for weight (O, D) and a 1-D vector x (D,)."""
    weight, x = as_tensor(weight), as_tensor(x)
    if weight.data.ndim != 2 or x.data.ndim != 1:
        raise ValueError(
            f"matvec expects (O, D) and (D,), got {weight.data.shape} and {x.data.shape}"
        )
    out = Tensor(weight.data @ x.data)

    def backward_fn(g):
        if weight.requires_grad:
            weight.accumulate_grad(np.outer(g, x.data))
        if x.requires_grad:
            x.accumulate_grad(weight.data.T @ g)

    return _record(out, (weight, x), backward_fn)


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x (N, D), weight (O, D)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    out = Tensor(x.data @ weight.data.T + bias.data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias.requires_grad:
            bias.accumulate_grad(_unbroadcast(g, bias.data.shape))

    return _record(out, (x, weight, bias), backward_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _record(out, (a,), backward_fn)


def row(a, i: int) -> Tensor:
    """Select row ``i`` of a 2-D tensor (differentiable slice)."""
    a = as_tensor(a)
    out = Tensor(a.data[i])

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i] = g
            a.accumulate_grad(full)

    return _record(out, (a,), backward_fn)


def rows(a, start: int, stop: int) -> Tensor:
    """Select rows [start, stop) of a 2-D tensor (differentiable slice)."""
    a = as_tensor(a)
    out = Tensor(a.data[start:stop])

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a.accumulate_grad(full)

    return _record(out, (a,), backward_fn)


def stack_rows(row_list) -> Tensor:
    """Stack 1-D tensors into a 2-D tensor along axis 0."""
    row_list = [as_tensor(r) for r in row_list]
    out = Tensor(np.stack([r.data for r in row_list], axis=0))

    def backward_fn(g):
        for i, r in enumerate(row_list):
            if r.requires_grad:
                r.accumulate_grad(g[i])

    return _record(out, tuple(row_list), backward_fn)


def downsample_stride2(a) -> Tensor:
    """Keep every second column of a (C, L) map."""
    a = as_tensor(a)
    out = Tensor(a.data[:, ::2])

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, ::2] = g
            a.accumulate_grad(full)

    return _record(out, (a,), backward_fn)


def upsample_nearest2x(a) -> Tensor:
    """Repeat every column of a (C, L) map twice."""
    a = as_tensor(a)
    out = Tensor(np.repeat(a.data, 2, axis=1))

    def backward_fn(g):
        if a.requires_grad:
            c, l2 = g.shape
            a.accumulate_grad(g.reshape(c, l2 // 2, 2).sum(axis=2))

    return _record(out, (a,), backward_fn)


def conv1d_dilated(x, weight, dilation: int = 1, padding=None) -> Tensor:
    """Dilated 1-D convolution over the last axis.

    x is (C_in, L), weight is (C_out, C_in, K). ``padding`` is a
    (left, right) pair; by default (K-1)*dilation/2 zeros per side, which
    keeps the output length equal to L for odd K.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ValueError(
            f"conv1d_dilated expects (C_in, L) and (C_out, C_in, K), "
            f"got {x.data.shape} and {weight.data.shape}"
        )
    c_out, c_in, k = weight.data.shape
    if x.data.shape[0] != c_in:
        raise ValueError(
            f"conv1d_dilated: input channels {x.data.shape[0]} != kernel {c_in}"
        )
    if padding is None:
        pad = (k - 1) * dilation // 2
        padding = (pad, pad)
    pl, pr = padding
    xp = np.pad(x.data, ((0, 0), (pl, pr)))
    l_out = xp.shape[1] - (k - 1) * dilation
    if l_out < 1:
        raise ValueError(
            f"conv1d_dilated: length {x.data.shape[1]} too short for "
            f"K={k}, dilation={dilation}, padding={padding}"
        )
    # im2col: cols[i, j, t] = xp[i, t + j*dilation]
    cols = np.empty((c_in, k, l_out), dtype=np.float32)
    for j in range(k):
        cols[:, j, :] = xp[:, j * dilation:j * dilation + l_out]
    out = Tensor(np.einsum("oik,ikt->ot", weight.data, cols, optimize=True))

    def backward_fn(g):
        if weight.requires_grad:
            weight.accumulate_grad(np.einsum("ot,ikt->oik", g, cols, optimize=True))
        if x.requires_grad:
            dcols = np.einsum("oik,ot->ikt", weight.data, g, optimize=True)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j * dilation:j * dilation + l_out] += dcols[:, j]
            a_len = x.data.shape[1]
            x.accumulate_grad(dxp[:, pl:pl + a_len])

    return _record(out, (x, weight), backward_fn)


def lstm_cell(x, h, c, w_ih, w_hh, b) -> tuple:
    """One LSTM step; gate order (input, forget, cell, output).

    x is (D,), h and c are (H,), w_ih is (4H, D), w_hh is (4H, H),
    b is (4H,). Returns the new (h, c) pair.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    w_ih, w_hh, b = as_tensor(w_ih), as_tensor(w_hh), as_tensor(b)
    hidden = h.data.shape[0]
    z = w_ih.data @ x.data + w_hh.data @ h.data + b.data
    zi, zf, zg, zo = (z[i * hidden:(i + 1) * hidden] for i in range(4))
    gi = 1.0 / (1.0 + np.exp(-zi))
    gf = 1.0 / (1.0 + np.exp(-zf))
    gg = np.tanh(zg)
    go = 1.0 / (1.0 + np.exp(-zo))
    c_new = gf * c.data + gi * gg
    tc = np.tanh(c_new)
    h_new = go * tc
    out = Tensor(np.stack([h_new, c_new], axis=0))

    def backward_fn(g):
        dh, dc_ext = g[0], g[1]
        dc = dc_ext + dh * go.astype(np.float32) * (1.0 - tc * tc)
        dgo = dh * tc
        dgi = dc * gg
        dgf = dc * c.data
        dgg = dc * gi
        dz = np.concatenate([
            dgi * gi * (1.0 - gi),
            dgf * gf * (1.0 - gf),
            dgg * (1.0 - gg * gg),
            dgo * go * (1.0 - go),
        ]).astype(np.float32)
        if x.requires_grad:
            x.accumulate_grad(w_ih.data.T @ dz)
        if h.requires_grad:
            h.accumulate_grad(w_hh.data.T @ dz)
        if c.requires_grad:
            c.accumulate_grad(dc * gf)
        if w_ih.requires_grad:
            w_ih.accumulate_grad(np.outer(dz, x.data))
        if w_hh.requires_grad:
            w_hh.accumulate_grad(np.outer(dz, h.data))
        if b.requires_grad:
            b.accumulate_grad(dz)

    hc = _record(out, (x, h, c, w_ih, w_hh, b), backward_fn)
    return row(hc, 0), row(hc, 1)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable gradient buffer.

    Repeated calls (with ``retain_graph=True``) keep accumulating into
    leaf gradients until they are zeroed.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite; aborting backward")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for prev in node._prev:
            if id(prev) not in visited:
                stack.append((prev, False))
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Interior gradients are per-pass scratch; only leaves persist. The
    # closures hold reference cycles, so drop them unless retained.
    for node in topo:
        if node._backward is not None:
            node.grad = None
            if not retain_graph:
                node._backward = None
                node._prev = ()


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    def __init__(self, max_rel_error: float, tol: float, skipped: int = 0):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.skipped = skipped

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e}, "
                f"tol={self.tol}, skipped={self.skipped})")


def grad_check(fn, inputs, eps: float = 1e-3, tol: float = 1e-3,
               rng: np.random.Generator | None = None,
               exclude=None) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps the given Tensors to one Tensor; the check contracts its
    output with a fixed random vector to obtain a scalar. ``exclude``
    optionally flags coordinates to skip (e.g. activation kinks) given
    the flat input buffer of each argument.
    """
    rng = rng or np.random.default_rng(0)
    inputs = [as_tensor(t) for t in inputs]
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    v = rng.standard_normal(out.data.shape).astype(np.float32)

    def scalar_eval():
        return float((fn(*inputs).data * v).sum(dtype=np.float64))

    loss = tsum(mul(out, constant(v)))
    backward(loss)

    max_err = 0.0
    skipped = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            if exclude is not None and exclude(t, i):
                skipped += 1
                continue
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = scalar_eval()
            flat[i] = orig - eps
            f_minus = scalar_eval()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(float(aflat[i])), abs(numeric), 1.0)
            max_err = max(max_err, abs(float(aflat[i]) - numeric) / denom)
    return GradCheckReport(max_err, tol, skipped)
