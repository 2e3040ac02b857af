"""Rank-4 tensor values with reverse-mode automatic differentiation.

Every value flowing through a network is a :class:`Tensor` of shape
(N, C, H, W); scalars are represented as shape (1, 1, 1, 1). Each operator
computes its forward result eagerly with numpy and attaches a backward
closure to the output; :func:`backward` replays the closures in reverse
topological order, accumulating adjoints additively into ``Tensor.grad``.

Convolutions are evaluated as window-view/tensordot contractions so the
heavy lifting lands in BLAS. Training normally runs in float32; gradient
checking builds float64 graphs, where central differences at step 1e-5 are
meaningful (see :func:`grad_check`).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "scalar",
    "conv2d",
    "maxpool2x2",
    "transposed_conv2x2",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "div",
    "concat_channels",
    "tsum",
    "scale",
    "add_scalar",
    "trace",
    "backward",
    "zero_grads",
    "finite_difference_grads",
    "grad_check",
    "kink_margin",
]


class Tensor:
    """A rank-4 float array with an optional accumulated-gradient buffer."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, parents=(), backward_fn=None, op="leaf"):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeError(
                f"tensors are rank-4 (N, C, H, W); got shape {data.shape}"
            )
        if data.size == 0:
            raise ShapeError(f"empty tensor (shape {data.shape}) rejected")
        self.data = data
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward_fn
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Same data, no graph history."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"


def tensor(data, dtype=np.float32):
    """Wrap array-like data (reshaped to rank 4 if 1-3 dimensional) as a leaf."""
    arr = np.asarray(data, dtype=dtype)
    while arr.ndim < 4:
        arr = arr[np.newaxis]
    return Tensor(arr)


def scalar(value, dtype=np.float32):
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def _acc(t, g):
    # First write copies so parents never alias a shared upstream buffer.
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(g, t.data.shape).astype(t.data.dtype)
    else:
        t.grad += g


def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# convolution / pooling / upsampling


def conv2d(x, w, bias, padding="same"):
    """2-D convolution (cross-correlation) with zero padding.

    x: (N, Cin, H, W); w: (Cout, Cin, kH, kW) with kH, kW in {1, 3};
    bias: (1, Cout, 1, 1). ``same`` keeps H and W; ``valid`` shrinks them.
    """
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if 0 in x.shape:
        raise ShapeError(f"conv2d: empty input tensor, shape {x.shape}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if cin_w != cin:
        raise ShapeError(
            f"conv2d: weight expects {cin_w} input channels, input has {cin}"
        )
    if bias.shape != (1, cout, 1, 1):
        raise ShapeError(
            f"conv2d: bias shape {bias.shape} != (1, {cout}, 1, 1)"
        )
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if h + 2 * ph < kh or wdt + 2 * pw < kw:
        raise ShapeError(f"conv2d: input {h}x{wdt} too small for {kh}x{kw} valid conv")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,Cin,Ho,Wo,kh,kw)
    out = np.tensordot(win, w.data, axes=((1, 4, 5), (1, 2, 3)))  # (N,Ho,Wo,Cout)
    out = out.transpose(0, 3, 1, 2) + bias.data

    def _bw(g):
        _acc(bias, g.sum(axis=(0, 2, 3), keepdims=True))
        _acc(w, np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3))))
        # dL/dx: correlate the padded adjoint with the spatially flipped kernel.
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - ph,) * 2, (kw - 1 - pw,) * 2))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        wf = w.data[:, :, ::-1, ::-1]
        dx = np.tensordot(gwin, wf, axes=((1, 4, 5), (0, 2, 3)))
        _acc(x, dx.transpose(0, 3, 1, 2))

    return Tensor(out, (x, w, bias), _bw, "conv2d")


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling.

    Returns (pooled, argmax) where argmax holds the within-window winner in
    row-major order (0..3), ties going to the first index. The backward pass
    routes the adjoint only to the winning position.
    """
    n, c, h, wdt = x.shape
    if h % 2 or wdt % 2:
        raise ShapeError(f"maxpool2x2: H and W must be even, got {h}x{wdt}")
    h2, w2 = h // 2, wdt // 2
    win = (
        x.data.reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out = win.max(axis=-1)

    def _bw(g):
        buf = np.zeros_like(win)
        np.put_along_axis(buf, idx[..., np.newaxis], g[..., np.newaxis], axis=-1)
        dx = (
            buf.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, wdt)
        )
        _acc(x, dx)

    return Tensor(out, (x,), _bw, "maxpool2x2"), idx


def transposed_conv2x2(x, w):
    """Stride-2 2x2 transposed convolution; doubles H and W.

    x: (N, Cin, H, W); w: (Cin, Cout, 2, 2). Exact adjoint of a stride-2
    2x2 convolution: each input value scatters a weighted 2x2 block into a
    disjoint region of the output.
    """
    n, cin, h, wdt = x.shape
    cin_w, cout, kh, kw = w.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed_conv2x2: kernel must be 2x2, got {kh}x{kw}")
    if cin_w != cin:
        raise ShapeError(
            f"transposed_conv2x2: weight expects {cin_w} input channels, input has {cin}"
        )

    t = np.tensordot(x.data, w.data, axes=((1,), (0,)))  # (N,H,W,Cout,2,2)
    out = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5)).reshape(
        n, cout, 2 * h, 2 * wdt
    )

    def _bw(g):
        gr = g.reshape(n, cout, h, 2, wdt, 2).transpose(0, 2, 4, 1, 3, 5)
        dx = np.tensordot(gr, w.data, axes=((3, 4, 5), (1, 2, 3)))  # (N,H,W,Cin)
        _acc(x, dx.transpose(0, 3, 1, 2))
        dw = np.tensordot(x.data, gr, axes=((0, 2, 3), (0, 1, 2)))  # (Cin,Cout,2,2)
        _acc(w, dw)

    return Tensor(out, (x, w), _bw, "transposed_conv2x2")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def relu(x):
    out = np.maximum(x.data, 0)

    def _bw(g):
        _acc(x, g * (x.data > 0))

    return Tensor(out, (x,), _bw, "relu")


def sigmoid(x):
    s = expit(x.data)

    def _bw(g):
        _acc(x, g * s * (1 - s))

    return Tensor(s, (x,), _bw, "sigmoid")


def add(a, b):
    _require_same_shape(a, b, "add")
    out = a.data + b.data

    def _bw(g):
        _acc(a, g)
        _acc(b, g)

    return Tensor(out, (a, b), _bw, "add")


def sub(a, b):
    _require_same_shape(a, b, "sub")
    out = a.data - b.data

    def _bw(g):
        _acc(a, g)
        _acc(b, -g)

    return Tensor(out, (a, b), _bw, "sub")


def mul(a, b):
    _require_same_shape(a, b, "mul")
    out = a.data * b.data

    def _bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return Tensor(out, (a, b), _bw, "mul")


def div(a, b):
    _require_same_shape(a, b, "div")
    out = a.data / b.data

    def _bw(g):
        _acc(a, g / b.data)
        _acc(b, -g * out / b.data)

    return Tensor(out, (a, b), _bw, "div")


def concat_channels(a, b):
    """Concatenate along the channel axis; N, H, W must match."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: batch/spatial dims differ, {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def _bw(g):
        _acc(a, g[:, :ca])
        _acc(b, g[:, ca:])

    return Tensor(out, (a, b), _bw, "concat_channels")


def tsum(x):
    """Sum all elements into a (1, 1, 1, 1) scalar tensor."""
    out = x.data.sum(dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def _bw(g):
        _acc(x, np.broadcast_to(g, x.shape))

    return Tensor(out, (x,), _bw, "tsum")


def scale(x, c):
    c = float(c)
    out = x.data * c

    def _bw(g):
        _acc(x, g * c)

    return Tensor(out, (x,), _bw, "scale")


def add_scalar(x, c):
    out = x.data + float(c)

    def _bw(g):
        _acc(x, g)

    return Tensor(out, (x,), _bw, "add_scalar")


# ---------------------------------------------------------------------------
# graph replay


def trace(root):
    """Topologically ordered list of the graph below ``root``.

    Every tensor's parents precede it; this is the executed-operation record
    that backward replays in reverse.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor below loss.

    Gradients add across multiple uses of a tensor. Pre-existing ``grad``
    buffers are accumulated into, so callers must clear them between steps
    (see :func:`zero_grads`).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = trace(loss)
    _acc(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_difference_grads(fn, tensors, step=1e-5):
    """Central-difference gradients of the scalar ``fn()`` w.r.t. each tensor.

    ``fn`` must rebuild its value from the tensors' current ``data``; entries
    are perturbed in place by ±step and restored.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn()
            flat[i] = orig - step
            fm = fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        grads.append(g.reshape(t.shape))
    return grads


def grad_check(build_loss, tensors, step=1e-5):
    """Max relative error between backward() and central differences.

    ``build_loss`` constructs a fresh scalar-loss graph from the tensors'
    current data. Relative error per entry is
    |analytic - numeric| / max(|numeric|, 1e-8); the max over all entries of
    all tensors is returned. Use float64 tensors: 1e-4 tolerances are not
    reachable in float32.
    """
    zero_grads(tensors)
    backward(build_loss())
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in tensors
    ]
    numeric = finite_difference_grads(
        lambda: build_loss().item(), tensors, step=step
    )
    worst = 0.0
    for a, nmr in zip(analytic, numeric):
        err = np.abs(a - nmr) / np.maximum(np.abs(nmr), 1e-8)
        worst = max(worst, float(err.max()))
    return worst


def kink_margin(root):
    """Distance of the graph under ``root`` to the nearest non-differentiability.

    Scans every ReLU input for |x| and every maxpool window for the gap
    between its two largest entries. Exact ties (gap 0) are skipped: with
    continuous inputs they only arise from structural plateaus (ReLU-clamped
    patches and the constant conv outputs they induce), whose tied entries
    move in lockstep under any parameter perturbation. Near-ties are the
    dangerous case; finite-difference inputs are resampled until this margin
    clears the step size comfortably.
    """
    margin = np.inf
    for node in trace(root):
        if node._op == "relu":
            margin = min(margin, float(np.abs(node._parents[0].data).min()))
        elif node._op == "maxpool2x2":
            src = node._parents[0].data
            n, c, h, wdt = src.shape
            win = (
                src.reshape(n, c, h // 2, 2, wdt // 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h // 2, wdt // 2, 4)
            )
            part = np.partition(win, (2, 3), axis=-1)
            gaps = part[..., 3] - part[..., 2]
            gaps = gaps[gaps > 0.0]
            if gaps.size:
                margin = min(margin, float(gaps.min()))
    return margin
