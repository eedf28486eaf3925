"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` is an append-only Wengert list: every differentiable op
records one node holding the indices of its input nodes and a backward
closure. Because nodes are appended as the forward pass runs, the list is
already topologically ordered; ``backward`` walks it once in reverse and
accumulates gradients by node index. Parameters never reached from the loss
keep a zero gradient.

All values are float64. Tensors are immutable once constructed: ops build
new tensors, nothing writes in place.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .instrumentation import margin_probe

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class _Node:
    __slots__ = ("inputs", "bwd")

    def __init__(self, inputs: tuple, bwd):
        self.inputs = inputs  # node indices of inputs (None for constants)
        self.bwd = bwd        # g -> tuple of input gradients, None for leaves


class Tensor:
    """Handle to a float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: Array, tape: "Tape | None" = None, node: int | None = None):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor(shape={self.data.shape}, {tag})"

    # small operator sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only op record for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        """Record an input/parameter tensor. Leaves have no backward closure."""
        arr = _as_f64(data).copy()
        self.nodes.append(_Node((), None))
        return Tensor(arr, self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> "Grads":
        """Accumulate d(root)/d(node) for every node that can reach ``root``.

        ``root`` must be a scalar (size-1) tensor recorded on this tape. Each
        node's closure runs at most once, in reverse insertion order.
        """
        if root.tape is not self:
            raise ContractError("backward root does not belong to this tape")
        if root.data.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {root.data.shape}")
        grads: list[Array | None] = [None] * len(self.nodes)
        grads[root.node] = np.ones_like(root.data)
        for i in range(root.node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.bwd is None:
                continue
            for j, gj in zip(node.inputs, node.bwd(g)):
                if j is None or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return Grads(self, grads)


class Grads:
    """Gradient lookup for one backward pass."""

    def __init__(self, tape: Tape, glist: list):
        self._tape = tape
        self._g = glist

    def of(self, t: Tensor) -> Array:
        if t.tape is not self._tape:
            raise ContractError("tensor does not belong to the differentiated tape")
        g = self._g[t.node] if t.node < len(self._g) else None
        if g is None:
            return np.zeros_like(t.data)
        # normalize strides: backward closures may hand back broadcast views
        return np.ascontiguousarray(g)


def const(data) -> Tensor:
    """Wrap an array as a tape-free constant."""
    return Tensor(_as_f64(data))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def record_op(inputs: Sequence[Tensor], out_data: Array,
              bwd: Callable[[Array], tuple]) -> Tensor:
    """Attach ``out_data`` to the tape of ``inputs`` with backward ``bwd``.

    ``bwd`` maps the output gradient to one gradient per input (None allowed
    for inputs that need none). Constant inputs are legal; if every input is
    constant the result is constant and nothing is recorded. Mixing tensors
    from two different tapes is an error.
    """
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("op inputs come from different tapes")
    if tape is None:
        return Tensor(out_data)
    ids = tuple(t.node if t.tape is tape else None for t in inputs)
    tape.nodes.append(_Node(ids, bwd))
    return Tensor(out_data, tape, len(tape.nodes) - 1)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape
    return record_op((a, b), out,
                     lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape
    return record_op((a, b), out,
                     lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return record_op((a, b), out,
                     lambda g: (_unbroadcast(g * bd, ad.shape),
                                _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return record_op((x,), x.data * k, lambda g: (g * k,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may be 1-D (treated as a row) or 2-D; ``b`` is 2-D."""
    if b.data.ndim != 2 or a.data.ndim not in (1, 2):
        raise DimensionError(f"matmul: unsupported ranks {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    if ad.ndim == 1:
        return record_op((a, b), out,
                         lambda g: (bd @ g, ad[:, None] * g[None, :]))
    return record_op((a, b), out, lambda g: (g @ bd.T, ad.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    if margin_probe.active and x.data.size:
        margin_probe.add("relu", np.abs(x.data).min())
        margin_probe.branch("relu", mask)
    return record_op((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form stays finite for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record_op((x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record_op((x,), out, lambda g: (g * (1.0 - out * out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ContractError(f"unknown activation kind {kind!r}")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record_op((x,), np.log(xd), lambda g: (g / xd,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo) elementwise; gradient is zero on the clamped region."""
    mask = x.data > lo
    if margin_probe.active and x.data.size:
        margin_probe.add("clamp", np.abs(x.data - lo).min())
        margin_probe.branch("clamp", mask)
    return record_op((x,), np.where(mask, x.data, lo), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability.

    Rows sum to 1 up to float rounding; every entry is strictly positive.
    """
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return record_op((x,), out, bwd)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise.

    Value and slope agree at |x| = 1 from both pieces (0.5 and sign(x)).
    """
    ax = np.abs(x.data)
    inner = ax < 1.0
    if margin_probe.active and ax.size:
        margin_probe.add("smooth_l1", np.abs(ax - 1.0).min())
        margin_probe.branch("smooth_l1", inner)
    out = np.where(inner, 0.5 * x.data * x.data, ax - 0.5)
    dgrad = np.where(inner, x.data, np.sign(x.data))
    return record_op((x,), out, lambda g: (g * dgrad,))


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Whole-tensor L2 normalization: y = x / max(||x||, eps).

    A unit-norm tensor passes through exactly; the zero tensor stays zero.
    """
    xd = x.data
    n = float(np.sqrt((xd * xd).sum()))
    if margin_probe.active:
        margin_probe.add("normalize", abs(n - eps))
        margin_probe.branch("normalize", np.array([n <= eps]))
    if n <= eps:
        inv = 1.0 / eps
        return record_op((x,), xd * inv, lambda g: (g * inv,))
    inv = 1.0 / n
    out = xd * inv

    def bwd(g):
        s = float((g * out).sum())
        return ((g - out * s) * inv,)

    return record_op((x,), out, bwd)


def l2_normalize_rows(x: Tensor, eps: float = 1e-8) -> Tensor:
    """l2_normalize applied independently to each row x[i] of a batched tensor.

    The norm is taken over all axes past the first.
    """
    xd = x.data
    if xd.ndim < 2:
        raise DimensionError(f"l2_normalize_rows needs a batch axis, got shape {xd.shape}")
    flat = xd.reshape(xd.shape[0], -1)
    n = np.sqrt((flat * flat).sum(axis=1))
    small = n <= eps
    if margin_probe.active and n.size:
        margin_probe.add("normalize", float(np.abs(n - eps).min()))
        margin_probe.branch("normalize", small)
    bshape = (xd.shape[0],) + (1,) * (xd.ndim - 1)
    inv = np.where(small, 1.0 / eps, 1.0 / np.maximum(n, eps)).reshape(bshape)
    out = xd * inv

    def bwd(g):
        gf = g.reshape(g.shape[0], -1)
        of = out.reshape(out.shape[0], -1)
        s = (gf * of).sum(axis=1).reshape(bshape)
        # rows in the eps regime scale by a constant, so no projection term
        proj = np.where(small.reshape(bshape), 0.0, s)
        return ((g - out * proj) * inv,)

    return record_op((x,), out, bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    orig = x.data.shape
    if int(np.prod(orig, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
        raise DimensionError(f"reshape: cannot view {orig} as {shape}")
    return record_op((x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op((x,), np.ascontiguousarray(x.data.transpose(axes)),
                     lambda g: (g.transpose(inv),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat of zero tensors")
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(tuple(parts), out, bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""
    n = x.data.shape[-1]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice_last: [{start}:{stop}] out of range for extent {n}")
    out = np.ascontiguousarray(x.data[..., start:stop])
    shp = x.data.shape

    def bwd(g):
        full = np.zeros(shp)
        full[..., start:stop] = g
        return (full,)

    return record_op((x,), out, bwd)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a [1, m] (or [m]) tensor into [n, m]; gradient sums the rows."""
    xd = x.data if x.data.ndim == 2 else x.data[None, :]
    if xd.shape[0] != 1:
        raise DimensionError(f"broadcast_rows expects one row, got {x.data.shape}")
    orig = x.data.shape
    out = np.broadcast_to(xd, (n, xd.shape[1])).copy()
    return record_op((x,), out, lambda g: (g.sum(axis=0).reshape(orig),))


def sum_all(x: Tensor) -> Tensor:
    shp = x.data.shape
    return record_op((x,), np.asarray(x.data.sum()),
                     lambda g: (np.broadcast_to(g, shp).copy(),))


def sum_axes(x: Tensor, axes) -> Tensor:
    axes = tuple(sorted(int(a) % x.data.ndim for a in axes))
    out = x.data.sum(axis=axes)
    shp = x.data.shape

    def bwd(g):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, shp).copy(),)

    return record_op((x,), out, bwd)


def mean_axes(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) % x.data.ndim for a in axes)
    n = int(np.prod([x.data.shape[a] for a in axes], dtype=np.int64))
    return scale(sum_axes(x, axes), 1.0 / n)


def take_rows(x: Tensor, idx) -> Tensor:
    """Select rows x[idx] along axis 0; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"take_rows expects a 1-D index list, got shape {idx.shape}")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"take_rows: index out of range for {n} rows")
    shp = x.data.shape

    def bwd(g):
        dx = np.zeros(shp)
        np.add.at(dx, idx, g)
        return (dx,)

    return record_op((x,), x.data[idx].copy(), bwd)


def gather_last(x: Tensor, idx: Array) -> Tensor:
    """out[b, k] = x[b, idx[b, k]] for a 2-D ``x`` and integer index matrix."""
    if x.data.ndim != 2 or idx.ndim != 2:
        raise DimensionError(
            f"gather_last expects 2-D data and indices, got {x.data.shape} / {idx.shape}")
    rows = np.arange(x.data.shape[0])[:, None]
    out = x.data[rows, idx]
    shp = x.data.shape

    def bwd(g):
        dx = np.zeros(shp)
        np.add.at(dx, (rows, idx), g)
        return (dx,)

    return record_op((x,), out, bwd)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x [Cin,H,W], k [Cout,Cin,kh,kw] -> [Cout,H',W'].

    H' = (H + 2*pad - kh)//stride + 1, likewise W'. Zero padding.
    """
    xd, kd = x.data, k.data
    if xd.ndim != 3 or kd.ndim != 4:
        raise DimensionError(f"conv2d: need [C,H,W] and [O,C,kh,kw], got {xd.shape}, {kd.shape}")
    cin, h, w = xd.shape
    cout, cin_k, kh, kw = kd.shape
    if cin != cin_k:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = cols[:, ::stride, ::stride]  # [Cin, Ho, Wo, kh, kw]
    a = np.ascontiguousarray(cols.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, cin * kh * kw)
    w2 = kd.reshape(cout, cin * kh * kw)
    out = np.ascontiguousarray((a @ w2.T).T).reshape(cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bwd(g):
        gm = g.reshape(cout, ho * wo)
        dk = (gm @ a).reshape(kd.shape)
        da = gm.T @ w2  # [Ho*Wo, Cin*kh*kw]
        dcols = da.reshape(ho, wo, cin, kh, kw).transpose(2, 0, 1, 3, 4)
        dxp = np.zeros((cin, hp, wp))
        for u in range(kh):
            for v in range(kw):
                dxp[:, u:u + stride * ho:stride, v:v + stride * wo:stride] += dcols[:, :, :, u, v]
        dx = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
        db = g.sum(axis=(1, 2)) if bias is not None else None
        return (np.ascontiguousarray(dx), dk, db)

    ins = (x, k) if bias is None else (x, k, bias)
    return record_op(ins, out, bwd)


def _window_bounds(extent: int, cells: int) -> list[tuple[int, int]]:
    """Adaptive pooling bounds: cell i covers [floor(i*e/c), ceil((i+1)*e/c))."""
    return [((i * extent) // cells, -((-(i + 1) * extent) // cells)) for i in range(cells)]


def max_pool_window(data: Array, oh: int, ow: int) -> tuple[Array, Array]:
    """Window max over [C,H,W] -> values [C,oh,ow] and flat argmax into H*W.

    Ties pick the first element in row-major (y, then x) scan order within the
    window, matching a nested-loop reference exactly. An output grid finer
    than the input replicates cells (every window is nonempty).
    """
    c, h, w = data.shape
    if oh < 1 or ow < 1 or h < 1 or w < 1:
        raise DimensionError(f"pool: output ({oh},{ow}) invalid for input ({h},{w})")
    if oh <= h and ow <= w and h % oh == 0 and w % ow == 0:
        sh, sw = h // oh, w // ow
        v = data.reshape(c, oh, sh, ow, sw).transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, sh * sw)
        arg = v.argmax(axis=3)
        vals = np.take_along_axis(v, arg[..., None], axis=3)[..., 0]
        if margin_probe.active and sh * sw > 1:
            top2 = np.partition(v, v.shape[3] - 2, axis=3)[..., -2]
            margin_probe.add("pool_gap", (vals - top2).min())
        oy = np.arange(oh)[None, :, None]
        ox = np.arange(ow)[None, None, :]
        flat = (oy * sh + arg // sw) * w + (ox * sw + arg % sw)
        if margin_probe.active:
            margin_probe.branch("pool", flat)
        return np.ascontiguousarray(vals), flat
    ys = _window_bounds(h, oh)
    xs = _window_bounds(w, ow)
    vals = np.empty((c, oh, ow))
    flat = np.empty((c, oh, ow), dtype=np.int64)
    crange = np.arange(c)
    for i, (y0, y1) in enumerate(ys):
        for j, (x0, x1) in enumerate(xs):
            win = data[:, y0:y1, x0:x1]
            ww = x1 - x0
            wf = win.reshape(c, -1)
            a = wf.argmax(axis=1)
            vals[:, i, j] = wf[crange, a]
            if margin_probe.active and wf.shape[1] > 1:
                top2 = np.partition(wf, wf.shape[1] - 2, axis=1)[:, -2]
                margin_probe.add("pool_gap", (vals[:, i, j] - top2).min())
            flat[:, i, j] = (y0 + a // ww) * w + (x0 + a % ww)
    if margin_probe.active:
        margin_probe.branch("pool", flat)
    return vals, flat


def adaptive_max_pool(x: Tensor, oh: int, ow: int) -> Tensor:
    """Max pool [C,H,W] onto an (oh, ow) grid of adaptive windows.

    Overlap appears whenever H or W is not divisible by the grid; the gradient
    routes to each window's first row-major argmax.
    """
    c, h, w = x.data.shape
    if oh > h or ow > w:
        raise DimensionError(f"pool: output ({oh},{ow}) larger than input ({h},{w})")
    vals, flat = max_pool_window(x.data, oh, ow)
    crange = np.arange(c)[:, None, None]

    def bwd(g):
        dx = np.zeros((c, h * w))
        np.add.at(dx, (crange, flat), g)
        return (dx.reshape(c, h, w),)

    return record_op((x,), vals, bwd)


# ---------------------------------------------------------------------------
# optimizer and finite differences
# ---------------------------------------------------------------------------

class OptimizerState:
    """Momentum buffers plus the fixed hyperparameters of plain SGD."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict[str, Array] = {}


def sgd_momentum_step(params: dict[str, Array], grads: dict[str, Array],
                      lr: float, state: OptimizerState) -> None:
    """v <- mu*v - lr*(g + wd*w); w <- w + v, in place on ``params``."""
    mu, wd = state.momentum, state.weight_decay
    for name, w in params.items():
        g = grads[name]
        if wd:
            g = g + wd * w
        v = state.velocity.get(name)
        v = -lr * g if v is None else mu * v - lr * g
        state.velocity[name] = v
        w += v


def finite_diff_grad(f: Callable[[dict], float], params: dict[str, Array],
                     eps: float = 1e-3) -> dict[str, Array]:
    """Central-difference gradient of ``f`` at ``params``, coordinate by coordinate.

    ``f`` must treat its argument as read-only; (f(w+e) - f(w-e)) / (2e) per
    entry. Cost is two evaluations per scalar parameter.
    """
    work = {k: v.copy() for k, v in params.items()}
    out = {}
    for name, w in work.items():
        g = np.zeros_like(w)
        flat = w.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            fp = f(work)
            flat[i] = keep - eps
            fm = f(work)
            flat[i] = keep
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out
