"""Dense float64 tensors with reverse-mode automatic differentiation.

Gradients are recorded on an explicit tape: ops executed while a
``Tape`` is active append one node each, in execution order, and
``backward`` replays the tape in reverse. Ops executed with no active
tape run as plain numpy and track nothing, which is what rendering and
evaluation code wants.

Tensors are immutable once created; a tape is single-threaded and good
for exactly one backward pass.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A shape-carrying float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return tmax(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of executed ops, consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False


def _record(inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and not tape.consumed and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Propagate d(root)/d(leaf) into the grad of every tracked leaf.

    The tape's nodes were appended in execution order, so walking them
    in reverse visits every consumer of a tensor before its producer.
    The tape is cleared afterwards and cannot be replayed.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward pass")
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        gout = node.out.grad
        if gout is None:
            continue
        grads = node.backward_fn(gout)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            inp.grad = g if inp.grad is None else inp.grad + g
    tape.consumed = True
    tape.nodes.clear()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")
    return arr


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record((a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record((a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise NumericError("division by zero")
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record((a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return _record((a,), -a.data, lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise NumericError(f"x**{p} undefined for negative base")
    if p < 0 and np.any(a.data == 0.0):
        raise NumericError(f"x**{p} undefined at zero")
    out = _check_finite(a.data**p, "power")

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record((a,), out, bwd)


def texp(a: Tensor) -> Tensor:
    out = _check_finite(np.exp(a.data), "exp")

    def bwd(g):
        return (g * out,)

    return _record((a,), out, bwd)


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log requires strictly positive input")
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record((a,), out, bwd)


def tsqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise NumericError("sqrt requires non-negative input")
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _record((a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _record((a,), out, bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record((a,), out, bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record((a,), out, bwd)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; steps through views, so no aliasing in backward."""
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record((a,), np.ascontiguousarray(out), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record(tuple(tensors), out, bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(tuple(tensors), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _record((a,), out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient routes to the first argmax only."""
    if a.data.shape[axis] == 0:
        raise DegenerateInputError(f"max over empty axis {axis}")
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)

    def bwd(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g2, axis=axis)
        return (full,)

    return _record((a,), out, bwd)


def global_maxpool(a: Tensor, axis: int) -> Tensor:
    """Element-wise max over one axis (the symmetric pooling used on point sets)."""
    return tmax(a, axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul expects ndim >= 2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner axes disagree: {a.data.shape}[-1] != {b.data.shape}[-2]"
        )
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record((a, b), out, bwd)


# ---------------------------------------------------------------------------
# gathers


def gather_pixels(fmap: Tensor, n_idx, v_idx, u_idx) -> Tensor:
    """Pick per-pixel feature vectors out of an NCHW map: out[k] = fmap[n_k, :, v_k, u_k]."""
    n_idx = np.asarray(n_idx, dtype=np.intp)
    v_idx = np.asarray(v_idx, dtype=np.intp)
    u_idx = np.asarray(u_idx, dtype=np.intp)
    N, C, H, W = fmap.data.shape
    if np.any(n_idx < 0) or np.any(n_idx >= N) or np.any(v_idx < 0) or np.any(v_idx >= H) \
            or np.any(u_idx < 0) or np.any(u_idx >= W):
        raise ContractError("gather_pixels index out of range")
    out = fmap.data[n_idx, :, v_idx, u_idx]

    def bwd(g):
        full = np.zeros_like(fmap.data)
        np.add.at(full, (n_idx, slice(None), v_idx, u_idx), g)
        return (full,)

    return _record((fmap,), out, bwd)


def gather_rows(x: Tensor, i_idx, j_idx) -> Tensor:
    """Pick rows out of a (N, L, C) tensor: out[k] = x[i_k, j_k, :]."""
    i_idx = np.asarray(i_idx, dtype=np.intp)
    j_idx = np.asarray(j_idx, dtype=np.intp)
    N, L, _ = x.data.shape
    if np.any(i_idx < 0) or np.any(i_idx >= N) or np.any(j_idx < 0) or np.any(j_idx >= L):
        raise ContractError("gather_rows index out of range")
    out = x.data[i_idx, j_idx, :]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (i_idx, j_idx, slice(None)), g)
        return (full,)

    return _record((x,), out, bwd)


# ---------------------------------------------------------------------------
# convolution / resampling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    # (N, oh, ow, C, kh, kw) -> rows indexed by output pixel
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2D cross-correlation of an NCHW batch with an FCkk kernel stack."""
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4D input and kernel, got {x.data.shape} and {w.data.shape}"
        )
    n, c, h, wdt = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise DimensionError(f"channel axes disagree: input C={c}, kernel C={cw}")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel ({kh}x{kw}) larger than padded input ({hp}x{wp}) on spatial axes"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        gw = (gmat.T @ cols).reshape(w.data.shape)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                # tap (i, j) of the kernel touches a strided slab of the input
                tap = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))  # (N, oh, ow, C)
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    tap.transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record(inputs, out, bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NCHW map."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample2x expects NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record((x,), out, bwd)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running mean/var for one channel axis, updated in training mode."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def copy(self):
        s = BatchNormState(self.mean.size)
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    momentum: float,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per channel (axis 1), affine-transform, and track running stats.

    Training mode normalizes by batch statistics and folds them into the
    running estimates as ``running <- (1-momentum)*running + momentum*batch``;
    eval mode normalizes by the running estimates alone.
    """
    if not 0.0 < momentum <= 1.0:
        raise ContractError(f"momentum must be in (0, 1], got {momentum}")
    if x.data.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects (N,C) or (N,C,H,W), got {x.data.shape}")
    ch = x.data.shape[1]
    if ch != state.mean.size:
        raise DimensionError(f"channel axis {ch} != state size {state.mean.size}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    shape = (1, ch) if x.data.ndim == 2 else (1, ch, 1, 1)
    g = reshape(gamma, shape)
    b = reshape(beta, shape)

    if training:
        n = int(np.prod([x.data.shape[a] for a in axes]))
        if n < 2:
            raise DegenerateInputError("batchnorm needs at least 2 samples per channel in training")
        mu = x
        for ax in axes:
            mu = tmean(mu, axis=ax, keepdims=True)
        xc = sub(x, mu)
        var = mul(xc, xc)
        for ax in axes:
            var = tmean(var, axis=ax, keepdims=True)
        inv = power(add(var, Tensor(eps)), -0.5)
        y = mul(xc, inv)
        # running stats are plain state, outside the tape
        batch_mean = mu.data.reshape(ch)
        batch_var = var.data.reshape(ch) * (n / (n - 1))
        state.mean = (1.0 - momentum) * state.mean + momentum * batch_mean
        state.var = (1.0 - momentum) * state.var + momentum * batch_var
    else:
        mean_c = Tensor(state.mean.reshape(shape))
        inv_c = Tensor(1.0 / np.sqrt(state.var.reshape(shape) + eps))
        y = mul(sub(x, mean_c), inv_c)
    return add(mul(y, g), b)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(fn, point: Tensor, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``fn`` at ``point`` against central differences.

    Returns the max over coordinates of |g_auto - g_fd| / max(1, |g_auto|, |g_fd|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must be in (0, 1e-2], got {eps}")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    if out.data.size != 1:
        raise ContractError("grad_check target must return a scalar")
    _check_finite(out.data, "grad_check function")
    backward(tape, out)
    g_auto = np.zeros_like(x.data) if x.grad is None else x.grad

    flat = x.data.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = fn(Tensor((flat + bump).reshape(x.data.shape)))
        lo = fn(Tensor((flat - bump).reshape(x.data.shape)))
        _check_finite(hi.data, "grad_check function")
        _check_finite(lo.data, "grad_check function")
        g_fd[i] = (float(hi.data) - float(lo.data)) / (2.0 * eps)
    g_fd = g_fd.reshape(x.data.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(g_auto), np.abs(g_fd)))
    err = np.abs(g_auto - g_fd) / denom
    return float(err.max()) if err.size else 0.0


def grad_check_params(fn, params: list[Tensor], eps: float = 1e-5) -> float:
    """grad_check over a list of parameter tensors; fn() closes over them.

    Each parameter is perturbed in place for the finite-difference pass,
    so ``fn`` must re-read the live tensors on every call.
    """
    with Tape() as tape:
        out = fn()
    if out.data.size != 1:
        raise ContractError("grad_check target must return a scalar")
    backward(tape, out)
    worst = 0.0
    for p in params:
        g_auto = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            gfd = (hi - lo) / (2.0 * eps)
            ga = g_auto.reshape(-1)[i]
            worst = max(worst, abs(ga - gfd) / max(1.0, abs(ga), abs(gfd)))
        p.grad = None
    return worst
