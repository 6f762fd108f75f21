"""Dense tensors with reverse-mode autodiff over a closed op set.

The op vocabulary is exactly what the denoiser and its losses need:
matmul, conv2d (stride 1, same padding, 3x3), add, mul, scale, silu,
group_norm, softmax (last axis), reshape, concat, avgpool2,
nearest_upsample2, mse_loss.  There is no generic kernel machinery.

Ops record onto the active :class:`Graph` (a tape) whenever any input
requires gradients; ``Graph.backward`` replays the tape in strict reverse
execution order.  float32 is the production dtype; float64 exists for
gradient checking.
"""

from __future__ import annotations

import threading

import numpy as np

GN_EPS = 1e-5

_supported_dtypes = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class Tensor:
    """N-dimensional float array, optionally carrying gradient state.

    Treat tensors as immutable once created; the only sanctioned mutations
    are gradient accumulation during backward and in-place parameter
    updates by an optimizer that owns the training step.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _supported_dtypes:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_active = threading.local()


def _current_graph():
    return getattr(_active, "graph", None)


class Graph:
    """Tape of executed ops; single-owner, one training step at a time."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        if _current_graph() is not None:
            raise RuntimeError("a Graph is already active on this thread")
        _active.graph = self
        return self

    def __exit__(self, *exc):
        _active.graph = None
        return False

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf."""
        if self._consumed:
            raise RuntimeError("backward already ran on this graph; re-execute the forward pass")
        if loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
        if not self.nodes:
            raise RuntimeError("graph is empty; nothing to differentiate")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward_fn(g)
            # Intermediate grads are transient; free them as soon as the
            # producing node has consumed its output grad.
            if node.output is not loss:
                node.output.grad = None
        self.nodes = []
        self._consumed = True


def backward(loss):
    """Run backward on the thread's active graph."""
    g = _current_graph()
    if g is None:
        raise RuntimeError("no active Graph; run the forward pass inside `with Graph():`")
    g.backward(loss)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _check_dtypes(op, *tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValueError(f"{op}: mixed dtypes {dt} and {t.data.dtype}")
    return dt


def _make(op, out_data, inputs, backward_fn):
    _check_finite(out_data, op)
    graph = _current_graph()
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req and graph is not None)
    if out.requires_grad:
        graph.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(g, shape):
    # Reduce a broadcasted gradient back to the operand's shape.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# ops


def add(a, b):
    _check_dtypes("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make("add", out, (a, b), bwd)


def mul(a, b):
    _check_dtypes("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make("mul", out, (a, b), bwd)


def scale(a, k):
    k = float(k)
    out = a.data * k

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * k)

    return _make("scale", out, (a,), bwd)


def matmul(a, b, transpose_a=False, transpose_b=False):
    """Batched matrix product with numpy broadcasting over leading dims.

    1-D operands are rejected; express vectors as explicit row/column
    matrices so the backward rules stay unambiguous.
    """
    _check_dtypes("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul: operands must have ndim >= 2")
    ad = a.data.swapaxes(-1, -2) if transpose_a else a.data
    bd = b.data.swapaxes(-1, -2) if transpose_b else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dims {ad.shape} x {bd.shape} do not align")
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ValueError(f"matmul: batch dims {a.shape} x {b.shape} do not broadcast") from None

    def bwd(g):
        if a.requires_grad:
            da = np.matmul(g, bd.swapaxes(-1, -2))
            if transpose_a:
                da = da.swapaxes(-1, -2)
            a.accumulate_grad(_unbroadcast(da, a.shape))
        if b.requires_grad:
            db = np.matmul(ad.swapaxes(-1, -2), g)
            if transpose_b:
                db = db.swapaxes(-1, -2)
            b.accumulate_grad(_unbroadcast(db, b.shape))

    return _make("matmul", out, (a, b), bwd)


def conv2d(x, w):
    """3x3 convolution, stride 1, zero-padded "same". x: (B,C,H,W), w: (O,C,3,3)."""
    _check_dtypes("conv2d", x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d: x must be (B,C,H,W) and w (O,C,3,3)")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ValueError("conv2d: kernel size is fixed to 3")
    if Cw != C:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    dt = x.data.dtype
    xp = np.zeros((B, C, H + 2, W + 2), dtype=dt)
    xp[:, :, 1 : H + 1, 1 : W + 1] = x.data
    cols = np.empty((B, 9 * C, H * W), dtype=dt)
    for idx in range(9):
        i, j = divmod(idx, 3)
        cols[:, idx * C : (idx + 1) * C, :] = xp[:, :, i : i + H, j : j + W].reshape(B, C, H * W)
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(O, 9 * C)
    out = np.matmul(w2, cols).reshape(B, O, H, W)

    def bwd(g):
        g2 = g.reshape(B, O, H * W)
        if w.requires_grad:
            dw2 = np.matmul(g2, cols.swapaxes(-1, -2)).sum(axis=0)
            dw = dw2.reshape(O, 3, 3, C).transpose(0, 3, 1, 2)
            w.accumulate_grad(dw)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dxp = np.zeros_like(xp)
            for idx in range(9):
                i, j = divmod(idx, 3)
                dxp[:, :, i : i + H, j : j + W] += dcols[:, idx * C : (idx + 1) * C, :].reshape(B, C, H, W)
            x.accumulate_grad(dxp[:, :, 1 : H + 1, 1 : W + 1])

    return _make("conv2d", out, (x, w), bwd)


def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make("silu", out, (x,), bwd)


def group_norm(x, groups, eps=GN_EPS):
    """Normalize (B,C,H,W) per group of channels; no affine (apply mul/add after)."""
    if x.data.ndim != 4:
        raise ValueError("group_norm: expected (B,C,H,W)")
    B, C, H, W = x.shape
    if groups < 1 or C % groups != 0:
        raise ValueError(f"group_norm: {groups} groups do not divide {C} channels")
    xg = x.data.reshape(B, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    invstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (xg - mean) * invstd
    out = xhat.reshape(B, C, H, W)

    def bwd(g):
        if not x.requires_grad:
            return
        gg = g.reshape(B, groups, -1)
        m1 = gg.mean(axis=2, keepdims=True)
        m2 = (gg * xhat).mean(axis=2, keepdims=True)
        dx = invstd * (gg - m1 - xhat * m2)
        x.accumulate_grad(dx.reshape(B, C, H, W))

    return _make("group_norm", out, (x,), bwd)


def softmax(x):
    """Softmax along the last axis, computed with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out * (g - dot))

    return _make("softmax", out, (x,), bwd)


def reshape(x, shape):
    out = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _make("reshape", out, (x,), bwd)


def concat(tensors, axis):
    tensors = tuple(tensors)
    _check_dtypes("concat", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _make("concat", out, tensors, bwd)


def avgpool2(x):
    """2x2 mean pooling, stride 2; spatial dims must be even."""
    if x.data.ndim != 4:
        raise ValueError("avgpool2: expected (B,C,H,W)")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avgpool2: odd spatial dims ({H},{W})")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype)
            x.accumulate_grad(gx)

    return _make("avgpool2", out, (x,), bwd)


def nearest_upsample2(x):
    if x.data.ndim != 4:
        raise ValueError("nearest_upsample2: expected (B,C,H,W)")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        if x.requires_grad:
            B, C, H, W = x.shape
            x.accumulate_grad(g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _make("nearest_upsample2", out, (x,), bwd)


def mse_loss(a, b):
    _check_dtypes("mse_loss", a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse_loss: shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def bwd(g):
        d = (2.0 / n) * diff * g
        if a.requires_grad:
            a.accumulate_grad(d)
        if b.requires_grad:
            b.accumulate_grad(-d)

    return _make("mse_loss", out, (a, b), bwd)


_OP_TABLE = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "scale": scale,
    "silu": silu,
    "group_norm": group_norm,
    "softmax": softmax,
    "reshape": reshape,
    "concat": concat,
    "avgpool2": avgpool2,
    "nearest_upsample2": nearest_upsample2,
    "mse_loss": mse_loss,
}


def forward_op(name, inputs, **attrs):
    """Dispatch into the closed op set by name."""
    if name not in _OP_TABLE:
        raise ValueError(f"unknown op kind {name!r}")
    fn = _OP_TABLE[name]
    if name == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def op_kinds():
    return tuple(_OP_TABLE)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x, eps=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a Tensor to a scalar Tensor.  Error per element is
    |analytic - cd| / (|analytic| + |cd| + 1e-8); the max over elements of
    ``x`` is returned.
    """
    if eps is None:
        eps = 1e-6 if x.data.dtype == np.float64 else 3e-3
    eps = float(eps)
    if eps <= 0:
        raise ValueError("eps must be positive")

    xv = Tensor(x.data.copy(), requires_grad=True)
    with Graph() as g:
        y = f(xv)
        if y.data.ndim != 0:
            raise ValueError("grad_check: f must be scalar-valued")
        _check_finite(y.data, "grad_check f(x)")
        g.backward(y)
    analytic = xv.grad if xv.grad is not None else np.zeros_like(xv.data)

    flat = x.data.copy().reshape(-1)
    cd = np.zeros_like(flat)
    probe = Tensor(flat.reshape(x.shape))  # shares `flat`'s buffer
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(probe).data)
        flat[i] = orig - eps
        fm = float(f(probe).data)
        flat[i] = orig
        cd[i] = (fp - fm) / (2.0 * eps)
    cd = cd.reshape(x.shape)

    denom = np.abs(analytic) + np.abs(cd) + 1e-8
    return float(np.max(np.abs(analytic - cd) / denom))
