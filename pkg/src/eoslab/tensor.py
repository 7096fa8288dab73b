"""Minimal reverse-mode autodiff over dense float64 arrays.

The engine is built around an explicit gradient tape: primitives compute
with numpy and, when an active tape is present and some input participates
in differentiation, append a node holding the backward closure.  A tape is
single-shot: one backward pass per recorded graph.

Conventions fixed here:
  * float64 everywhere; any NaN/Inf input or output aborts the primitive.
  * conv2d is cross-correlation (no kernel flip).
  * the primitive set is closed; training code composes these and nothing
    else touches the tape internals.
"""

from __future__ import annotations

import numpy as np


class TensorError(Exception):
    """Base class for engine failures."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class TapeError(TensorError):
    pass


class KinkError(TensorError):
    """Gradient check requested at a non-differentiable point."""


class UnknownPrimitiveError(TensorError):
    pass


class Tensor:
    """Dense float64 array plus participation flag for the tape.

    `requires_grad` marks a leaf parameter; `node` is set when the tensor
    was produced by a recorded primitive.  Tensors are hashable by
    identity, which is what the gradient map is keyed on.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def needs_flow(self):
        return self.requires_grad or self.node is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x, requires_grad=False):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "relu_kink_min")

    def __init__(self, op, inputs, output, backward_fn, relu_kink_min=None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.relu_kink_min = relu_kink_min


class Tape:
    """Ordered record of primitive applications, consumed by one backward.

    Usable as a context manager; tapes nest (innermost is active).
    """

    _active_stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        Tape._active_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = Tape._active_stack.pop()
        assert popped is self
        return False

    @staticmethod
    def active():
        return Tape._active_stack[-1] if Tape._active_stack else None

    def min_relu_margin(self):
        """Smallest |input| seen at any recorded relu, or None."""
        margins = [n.relu_kink_min for n in self.nodes if n.relu_kink_min is not None]
        return min(margins) if margins else None


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _record(op, inputs, out_data, backward_fn, relu_kink_min=None):
    _check_finite(out_data, f"output of {op}")
    tape = Tape.active()
    out = Tensor(out_data)
    if tape is not None and any(t.needs_flow() for t in inputs):
        if tape.consumed:
            raise TapeError("recording on a tape that was already consumed")
        out.requires_grad = True
        node = Node(op, inputs, out, backward_fn, relu_kink_min)
        out.node = node
        tape.nodes.append(node)
    return out


def _reduce_to_shape(grad, shape):
    """Undo numpy broadcasting: sum grad down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _validate_inputs(op, inputs):
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op}: inputs must be Tensors, got {type(t).__name__}")
        _check_finite(t.data, f"input of {op}")


# --- elementwise / arithmetic -------------------------------------------------

def _binary_data(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b):
    _validate_inputs("add", (a, b))
    _binary_data("add", a, b)
    out = a.data + b.data

    def backward(g):
        return (_reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape))

    return _record("add", (a, b), out, backward)


def sub(a, b):
    _validate_inputs("sub", (a, b))
    _binary_data("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return (_reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape))

    return _record("sub", (a, b), out, backward)


def mul(a, b):
    _validate_inputs("mul", (a, b))
    _binary_data("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return (
            _reduce_to_shape(g * b.data, a.shape),
            _reduce_to_shape(g * a.data, b.shape),
        )

    return _record("mul", (a, b), out, backward)


def scale(a, factor):
    _validate_inputs("scale", (a,))
    factor = float(factor)
    if not np.isfinite(factor):
        raise NonFiniteError("scale: non-finite factor")
    out = a.data * factor

    def backward(g):
        return (g * factor,)

    return _record("scale", (a,), out, backward)


def relu(a):
    _validate_inputs("relu", (a,))
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)
    margin = float(np.min(np.abs(a.data))) if a.data.size else None

    def backward(g):
        return (g * mask,)

    return _record("relu", (a,), out, backward, relu_kink_min=margin)


def sigmoid(a):
    _validate_inputs("sigmoid", (a,))
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, backward)


def exp(a):
    _validate_inputs("exp", (a,))
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _record("exp", (a,), out, backward)


def log(a):
    _validate_inputs("log", (a,))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    # log of non-positive input is a non-finite output; _record aborts.

    def backward(g):
        return (g / a.data,)

    return _record("log", (a,), out, backward)


def softmax(a, axis=-1):
    _validate_inputs("softmax", (a,))
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (a,), out, backward)


# --- reductions ---------------------------------------------------------------

def t_sum(a):
    _validate_inputs("sum", (a,))
    out = np.asarray(a.data.sum())

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, backward)


def t_mean(a):
    _validate_inputs("mean", (a,))
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    out = np.asarray(a.data.mean())

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean", (a,), out, backward)


# --- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    _validate_inputs("reshape", (a,))
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, backward)


def concat_channels(a, b):
    """Concatenate along axis 1 (the channel axis of [N,C,H,W])."""
    _validate_inputs("concat_channels", (a, b))
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("concat_channels: need at least 2-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape}, {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward(g):
        return (g[:, :ca], g[:, ca:])

    return _record("concat_channels", (a, b), out, backward)


# --- matmul / convolution -----------------------------------------------------

def matmul(a, b):
    _validate_inputs("matmul", (a, b))
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul: 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record("matmul", (a, b), out, backward)


def _windows(x, kh, kw, stride):
    """Strided [N,C,Ho,Wo,kh,kw] view over a (padded) [N,C,H,W] array."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add [N,C,kh,kw,Ho,Wo] patch gradients into [N,C,Hp,Wp]."""
    x = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return x


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of [N,C,H,W] with [F,C,kh,kw]."""
    _validate_inputs("conv2d", (x, kernel))
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d: expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride)  # [N,C,Ho,Wo,kh,kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    k2 = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ k2.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        dk = (g2.T @ cols).reshape(f, c, kh, kw)
        dcols = (g2 @ k2).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = _col2im(dcols, n, c, hp, wp, kh, kw, stride, ho, wo)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (dx, dk)

    return _record("conv2d", (x, kernel), np.ascontiguousarray(out), backward)


def transposed_conv2d(x, kernel, stride=1, padding=0):
    """Adjoint of conv2d: [N,C,H,W] with kernel [C,F,kh,kw] -> [N,F,H',W'].

    H' = (H-1)*stride - 2*padding + kh (the usual upsampling arithmetic).
    """
    _validate_inputs("transposed_conv2d", (x, kernel))
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ShapeError("transposed_conv2d: stride must be >= 1")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("transposed_conv2d: expects 4-D input and kernel")
    n, c, h, w = x.shape
    ck, f, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, kernel expects {ck}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError("transposed_conv2d: empty output")
    hop, wop = ho + 2 * padding, wo + 2 * padding

    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    k2 = kernel.data.reshape(c, f * kh * kw)
    cols = (x2 @ k2).reshape(n, h, w, f, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    yp = _col2im(cols, n, f, hop, wop, kh, kw, stride, h, w)
    out = yp[:, :, padding : padding + ho, padding : padding + wo] if padding else yp

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        win = _windows(gp, kh, kw, stride)  # [N,F,H,W,kh,kw]
        gcols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, f * kh * kw)
        dx = (gcols @ k2.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dk = (x2.T @ gcols).reshape(c, f, kh, kw)
        return (np.ascontiguousarray(dx), dk)

    return _record("transposed_conv2d", (x, kernel), np.ascontiguousarray(out), backward)


# --- stochastic / loss helpers ------------------------------------------------

def dropout_apply(x, mask):
    """Multiply activations by a precomputed dropout mask (constant)."""
    _validate_inputs("dropout_apply", (x, mask))
    if x.shape != mask.shape:
        raise ShapeError(f"dropout_apply: mask shape {mask.shape} != input {x.shape}")
    out = x.data * mask.data

    def backward(g):
        return (g * mask.data, np.zeros_like(mask.data))

    return _record("dropout_apply", (x, mask), out, backward)


def mse(pred, target):
    """Scalar mean of squared differences."""
    _validate_inputs("mse", (pred, target))
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} != {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def backward(g):
        base = (2.0 / n) * diff * g
        return (base, -base)

    return _record("mse", (pred, target), out, backward)


def cross_entropy(logits, target):
    """Mean cross-entropy between softmax(logits) and a one-hot target.

    Class axis is 1 for >=2-D inputs, else 0; the mean runs over every
    other position (batch and pixels).  Stable log-sum-exp form.
    """
    _validate_inputs("cross_entropy", (logits, target))
    if logits.shape != target.shape:
        raise ShapeError(f"cross_entropy: shapes {logits.shape} != {target.shape}")
    axis = 1 if logits.data.ndim >= 2 else 0
    x = logits.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    logp = x - lse
    npos = x.size // x.shape[axis]
    out = np.asarray(-(target.data * logp).sum() / npos)
    probs = np.exp(logp)

    def backward(g):
        dlogits = (probs - target.data) * (g / npos)
        dtarget = -logp * (g / npos)
        return (dlogits, dtarget)

    return _record("cross_entropy", (logits, target), out, backward)


def grl(x, lam):
    """Gradient reversal: identity forward, -lam * grad backward."""
    _validate_inputs("grl", (x,))
    lam = float(lam)
    if lam < 0:
        raise ValueError("grl: lambda must be >= 0")
    out = x.data.copy()

    def backward(g):
        return (-lam * g,)

    return _record("grl", (x,), out, backward)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "transposed_conv2d": transposed_conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "mean": t_mean,
    "sum": t_sum,
    "reshape": reshape,
    "concat_channels": concat_channels,
    "scale": scale,
    "dropout_apply": dropout_apply,
    "mse": mse,
    "cross_entropy": cross_entropy,
    "grl": grl,
}


def apply_primitive(op, *inputs, **kwargs):
    """Generic dispatch into the closed primitive set."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise UnknownPrimitiveError(f"unknown primitive id: {op!r}")
    return fn(*inputs, **kwargs)


def backward(tape, loss):
    """Reverse sweep over `tape` from scalar `loss`.

    Returns {leaf Tensor: Tensor gradient} for every requires_grad leaf
    reached from the loss.  The tape is consumed.
    """
    if not isinstance(tape, Tape):
        raise TapeError("backward: not a tape")
    if tape.consumed:
        raise TapeError("backward: tape already consumed; re-record the forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, input_grads):
            if not t.needs_flow():
                continue
            _check_finite(ig, f"gradient from {node.op}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if t.requires_grad and t.node is None:
                leaf_grads[t] = Tensor(grads[key])
    return leaf_grads


def grad_check(f, x, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor and must be deterministic.  The
    check refuses to run when the recorded forward pass hits a relu within
    `eps` of its kink, since central differences are meaningless there.
    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    x = as_tensor(x, requires_grad=True)
    x.data = np.ascontiguousarray(x.data)
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    margin = tape.min_relu_margin()
    if margin is not None and margin <= eps:
        raise KinkError(f"relu input within {eps} of kink (margin {margin:.3g})")
    analytic = backward(tape, y)[x].data

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.data)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x.data)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("grad_check: non-finite f at probe point")
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
