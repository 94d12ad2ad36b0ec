"""Minimal reverse-mode autodiff on dense float64 numpy arrays.

Every tracked operation records a node holding its input tensors and a
backward rule. Calling :func:`backward` on a scalar result walks the
recorded graph once in reverse topological order and accumulates
gradients into ``.grad`` of every tracked tensor. The graph is rebuilt
on every forward pass; tensors and their tape are not shared across
threads.
"""
from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Node:
    """One recorded operation: input tensors plus a backward rule.

    The backward rule maps the output gradient to a tuple of gradients
    aligned with ``inputs`` (``None`` for inputs that need no gradient).
    """

    __slots__ = ("inputs", "fn")

    def __init__(self, inputs, fn):
        self.inputs = inputs
        self.fn = fn


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``node`` is the creation record when the tensor is the output of a
    tracked operation, else ``None`` (leaves and constants).
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self._backward_ran = False

    # -- bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"

    # -- operator sugar ----------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return powi(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)


def tensor(data) -> Tensor:
    """Wrap data as an untracked constant tensor."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """Wrap data as a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_op(data, inputs, backward_fn) -> Tensor:
    """Create the output tensor of a custom operation.

    Records a node iff grad mode is on and any input is tracked;
    otherwise returns an untracked constant.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.tracked for t in inputs):
        out.node = Node(tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ash, bsh = a.data.shape, b.data.shape

    def fn(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return make_op(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ash, bsh = a.data.shape, b.data.shape

    def fn(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return make_op(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_op(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return make_op(ad / bd, (a, b), fn)


def neg(a) -> Tensor:
    a = _coerce(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def powi(a, exponent) -> Tensor:
    """Elementwise power with a fixed scalar exponent."""
    a = _coerce(a)
    n = float(exponent)
    ad = a.data

    def fn(g):
        return (g * n * ad ** (n - 1.0),)

    return make_op(ad ** n, (a,), fn)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def fn(g):
        return (g * out_data,)

    return make_op(out_data, (a,), fn)


def log(a) -> Tensor:
    a = _coerce(a)
    ad = a.data

    def fn(g):
        return (g / ad,)

    return make_op(np.log(ad), (a,), fn)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_data = np.sqrt(a.data)

    def fn(g):
        # derivative clamped near zero so exact-zero inputs stay finite
        return (g * 0.5 / np.maximum(out_data, 1e-150),)

    return make_op(out_data, (a,), fn)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0.0

    def fn(g):
        return (g * mask,)

    return make_op(np.where(mask, a.data, 0.0), (a,), fn)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradients pass only inside the range."""
    a = _coerce(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def fn(g):
        return (g * inside,)

    return make_op(np.clip(a.data, lo, hi), (a,), fn)


def arccos(a) -> Tensor:
    """Inverse cosine on [-1, 1]; the derivative denominator is clamped
    so endpoint inputs stay finite."""
    a = _coerce(a)
    ad_ = a.data
    if np.any(ad_ < -1.0) or np.any(ad_ > 1.0):
        raise ValueError("arccos input outside [-1, 1]")

    def fn(g):
        return (-g / np.sqrt(np.maximum(1.0 - ad_ * ad_, 1e-12)),)

    return make_op(np.arccos(ad_), (a,), fn)


# -- reductions and shape ops -----------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    ash = a.data.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, ash).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, ash).copy(),)

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, *shape) -> Tensor:
    a = _coerce(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    ash = a.data.shape

    def fn(g):
        return (g.reshape(ash),)

    return make_op(a.data.reshape(shape), (a,), fn)


def transpose(a, *axes) -> Tensor:
    a = _coerce(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def fn(g):
        return (g.transpose(inverse),)

    return make_op(a.data.transpose(axes), (a,), fn)


def take(a, idx) -> Tensor:
    """Basic (int/slice/tuple) indexing."""
    a = _coerce(a)
    ash = a.data.shape

    def fn(g):
        full = np.zeros(ash, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(a.data[idx].copy(), (a,), fn)


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack same-shaped tensors along a new axis."""
    ts = [_coerce(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def fn(g):
        pieces = np.split(g, len(ts), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in pieces)

    return make_op(data, ts, fn)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    ts = [_coerce(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in ts], axis=axis), ts, fn)


def matmul(a, b) -> Tensor:
    """Matrix product for operands of rank one or two."""
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim > 2 or bd.ndim > 2:
        raise ValueError("matmul supports rank-1 and rank-2 operands only")

    def fn(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return make_op(ad @ bd, (a, b), fn)


# -- softmax -----------------------------------------------------------


def softmax(scores, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax along one axis.

    The scaled scores are shifted by their maximum before
    exponentiation, so any finite score range is safe.

    Args:
        scores: real-valued tensor.
        temperature: positive scale divisor applied to the scores.
        axis: normalization axis.

    Returns:
        Tensor of the same shape; slices along ``axis`` are probability
        vectors.
    """
    t = _coerce(scores)
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(t.data)):
        raise ValueError("softmax scores must be finite")
    scaled = t.data / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner) / temperature,)

    return make_op(p, (t,), fn)


# -- 2-D correlation ---------------------------------------------------


def _check_kernel(hw, kshape):
    if len(kshape) != 2 or kshape[0] != kshape[1]:
        raise ValueError(f"kernel must be square, got shape {kshape}")
    s = kshape[0]
    if s % 2 == 0:
        raise ValueError(f"kernel side must be odd, got {s}")
    if s > min(hw):
        raise ValueError(f"kernel side {s} exceeds input extent {hw}")
    return s


def correlate2d(image, kernel) -> Tensor:
    """Zero-padded 'same' cross-correlation of one 2-D map with one kernel.

    out[i, j] = sum over the kernel window centered at (i, j) of
    kernel * image, cells outside the map contributing zero. The kernel
    side must be odd and no larger than either image extent. Both
    arguments are differentiable.
    """
    img, ker = _coerce(image), _coerce(kernel)
    if img.data.ndim != 2:
        raise ValueError(f"image must be rank 2, got rank {img.data.ndim}")
    s = _check_kernel(img.data.shape, ker.data.shape)
    r = s // 2
    h, w = img.data.shape
    padded = np.pad(img.data, r)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (s, s))
    out_data = np.tensordot(windows, ker.data, axes=([2, 3], [0, 1]))

    def fn(g):
        dker = np.tensordot(g, windows, axes=([0, 1], [0, 1]))
        dpad = np.zeros_like(padded)
        kd = ker.data
        for a in range(s):
            for b in range(s):
                dpad[a:a + h, b:b + w] += g * kd[a, b]
        return dpad[r:r + h, r:r + w], dker

    return make_op(out_data, (img, ker), fn)


def depthwise_correlate(maps, kernels) -> Tensor:
    """Per-channel correlation of a (C, H, W) stack against (P, C, s, s) kernels.

    Returns a (P, C, H, W) tensor where out[p, c] is the zero-padded
    'same' correlation of maps[c] with kernels[p, c]. Matches stacking
    :func:`correlate2d` over p and c exactly.
    """
    m, ker = _coerce(maps), _coerce(kernels)
    if m.data.ndim != 3 or ker.data.ndim != 4:
        raise ValueError("depthwise_correlate expects (C,H,W) maps and (P,C,s,s) kernels")
    if ker.data.shape[1] != m.data.shape[0]:
        raise ValueError(
            f"channel mismatch: maps have {m.data.shape[0]}, kernels have {ker.data.shape[1]}"
        )
    s = _check_kernel(m.data.shape[1:], ker.data.shape[2:])
    r = s // 2
    c, h, w = m.data.shape
    padded = np.pad(m.data, ((0, 0), (r, r), (r, r)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (s, s), axis=(1, 2))
    out_data = np.einsum("chwab,pcab->pchw", windows, ker.data, optimize=True)

    def fn(g):
        dker = np.einsum("pchw,chwab->pcab", g, windows, optimize=True)
        dpad = np.zeros_like(padded)
        kd = ker.data
        for a in range(s):
            for b in range(s):
                dpad[:, a:a + h, b:b + w] += np.einsum(
                    "pchw,pc->chw", g, kd[:, :, a, b], optimize=True
                )
        return dpad[:, r:r + h, r:r + w], dker

    return make_op(out_data, (m, ker), fn)


# -- backward pass -----------------------------------------------------


class Tape:
    """Recorded operations behind one result, in topological order."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        self.entries = entries

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        """Collect the nodes reachable from root, inputs before users."""
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                stack.append((parent, False))
        return cls(order)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar result into every tracked tensor.

    Each tensor's ``.grad`` receives the sum over all uses. Repeating
    the call on the same result is rejected; rebuild the graph with a
    fresh forward pass instead.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    if root.node is None:
        raise ValueError("backward root is not attached to any recorded operation")
    if root._backward_ran:
        raise RuntimeError("backward was already run for this root; rebuild the graph")
    root._backward_ran = True

    tape = Tape.trace(root)
    seed = np.ones_like(root.data)
    root.grad = seed if root.grad is None else root.grad + seed
    for t in reversed(tape.entries):
        g = t.grad
        if g is None:
            continue
        grads = t.node.fn(g)
        for parent, pg in zip(t.node.inputs, grads):
            if pg is None or not parent.tracked:
                continue
            if parent.grad is None:
                parent.grad = pg.copy() if pg.base is not None else pg
            else:
                parent.grad = parent.grad + pg


def grad_check(f, params, perturbation: float = 1e-5, rng=None, max_coords: int | None = None) -> float:
    """Compare analytic gradients of f() against central differences.

    Args:
        f: zero-argument callable returning a scalar Tensor; must
            rebuild its graph on every call.
        params: leaf tensors whose coordinates are perturbed in place.
        perturbation: half-step for the central difference.
        rng: numpy Generator used to subsample coordinates.
        max_coords: cap on checked coordinates per parameter (all when
            None).

    Returns:
        The largest relative error |a - n| / max(1e-12, |a| + |n|)
        over all checked coordinates.
    """
    for p in params:
        p.zero_grad()
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n_coords = flat.size
        if max_coords is not None and n_coords > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n_coords, size=max_coords, replace=False)
        else:
            coords = range(n_coords)
        aflat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + perturbation
            with no_grad():
                f_plus = f().item()
            flat[i] = orig - perturbation
            with no_grad():
                f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * perturbation)
            err = abs(aflat[i] - numeric) / max(1e-12, abs(aflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
