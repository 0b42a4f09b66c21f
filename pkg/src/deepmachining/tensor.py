"""Minimal reverse-mode differentiable array engine.

Only the primitives the DeepMachining network needs are provided. Arrays are
numpy buffers laid out ``[..., L, C]`` (time/sequence axis second to last,
channels last). Operations record themselves on the active :class:`Graph`;
outside of a graph nothing is recorded and dropout is the identity.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import _kernels

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class MaskError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class GradCheckError(ArithmeticError):
    pass


_local = threading.local()


def _graphs() -> list:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with (64-bit is for grad checks)."""
    prev = get_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        dt = get_dtype()
        if arr.dtype != dt:
            arr = arr.astype(dt)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class Graph:
    """Tape of executed ops. ``backward`` replays it in exact reverse order.

    In ``infer`` mode nothing is recorded and dropout is disabled.
    """

    mode: str = "train"
    rng: np.random.Generator | None = None
    dropout: bool = True
    nodes: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("train", "infer"):
            raise ConfigError(f"unknown graph mode {self.mode!r}")

    def __enter__(self) -> "Graph":
        _graphs().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graphs().pop()

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def backward(self, out: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if out.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(out.data)
        out.grad = grad if out.grad is None else out.grad + grad
        for node_out, fn in reversed(self.nodes):
            g = node_out.grad
            if g is None:
                continue
            fn(g)
            # intermediate results are not leaves; release their gradient buffers
            node_out.grad = None
        self.nodes.clear()


def current_graph() -> Graph | None:
    stack = _graphs()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    g = current_graph()
    if g is None or g.mode != "train":
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.nodes.append((out, fn))
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise / structural ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor._wrap(a.data + b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor._wrap(a.data - b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise product (attention maps use this)."""
    try:
        out = Tensor._wrap(a.data * b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(x.data * x.data.dtype.type(c))

    def backward(g):
        _acc(x, g * g.dtype.type(c))

    return _record(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1))

    def backward(g):
        _acc(x, np.broadcast_to(g.reshape(()), x.shape).copy())

    return _record(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = Tensor._wrap(x.data.reshape(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        _acc(x, g.reshape(src))

    return _record(out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    try:
        out = Tensor._wrap(np.concatenate([t.data for t in xs], axis=axis))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(xs, np.split(g, cuts, axis=axis)):
            _acc(t, piece)

    return _record(out, xs, backward)


# activations ------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_SQRT_2_OVER_PI)
    k = xd.dtype.type(GELU_COEF)
    x2 = xd * xd
    t = np.tanh(c * xd * (1 + k * x2))
    out = Tensor._wrap(0.5 * xd * (1 + t))

    def backward(g):
        sech2 = 1 - t * t
        d = 0.5 * (1 + t) + 0.5 * xd * sech2 * c * (1 + 3 * k * x2)
        _acc(x, g * d)

    return _record(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype, copy=False)
    out = Tensor._wrap(y)

    def backward(g):
        _acc(x, g * y * (1 - y))

    return _record(out, (x,), backward)


def dropout(x: Tensor, p: float) -> Tensor:
    """Inverted dropout; identity outside a training graph."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    g_ = current_graph()
    if p == 0 or g_ is None or not g_.training or not g_.dropout:
        return x
    if g_.rng is None:
        raise ConfigError("training graph needs an rng for dropout")
    dt = x.data.dtype
    keep = g_.rng.random(x.shape, dtype=np.float32 if dt == np.float32 else np.float64) >= p
    mask = keep.astype(dt) * dt.type(1.0 / (1.0 - p))
    out = Tensor._wrap(x.data * mask)

    def backward(g):
        _acc(x, g * mask)

    return _record(out, (x,), backward)


# layers -----------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ w + b`` with ``w`` of shape [Din, Dout]."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y += b.data
    out = Tensor._wrap(y.reshape(*lead, w.shape[1]))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if w.requires_grad:
            _acc(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _acc(b, g2.sum(axis=0))
        if x.requires_grad:
            _acc(x, (g2 @ w.data.T).reshape(x.shape))

    return _record(out, (x, w) if b is None else (x, w, b), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise each position over the channel axis, then scale/shift per channel."""
    C = x.shape[-1]
    if C < 1 or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape} do not match channels {C}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, C))
    y, xhat, rstd = _kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)
    out = Tensor._wrap(y.reshape(x.shape))

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, C))
        dx, dgamma, dbeta = _kernels.layer_norm_bwd(g2, xhat, rstd, gamma.data, x.requires_grad)
        if gamma.requires_grad:
            _acc(gamma, dgamma)
        if beta.requires_grad:
            _acc(beta, dbeta)
        if x.requires_grad:
            _acc(x, dx.reshape(x.shape))

    return _record(out, (x, gamma, beta), backward)


def _padding(L: int, span: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (left, right, L_out). ``span`` is the effective (dilated) window length."""
    if padding == "valid":
        if span > L:
            raise ShapeError(f"effective kernel span {span} exceeds input length {L}")
        return 0, 0, (L - span) // stride + 1
    if padding == "same":
        L_out = -(-L // stride)
        total = max((L_out - 1) * stride + span - L, 0)
        return total // 2, total - total // 2, L_out
    raise ConfigError(f"unknown padding {padding!r}")


def conv_output_length(L: int, k: int, stride: int = 1, dilation: int = 1, padding: str = "same") -> int:
    return _padding(L, dilation * (k - 1) + 1, stride, padding)[2]


def conv1d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: str = "same",
) -> Tensor:
    """Cross-correlation over the length axis. ``x`` is [..., L, Cin], ``w`` is [k, Cin, Cout].

    Same padding is stride-aware and symmetric; the odd element goes on the right,
    so the output length is exactly ceil(L / stride).
    """
    if w.data.ndim != 3:
        raise ShapeError(f"conv1d weight must be [k, Cin, Cout], got {w.shape}")
    k, cin, cout = w.shape
    if k < 1 or stride < 1 or dilation < 1:
        raise ConfigError("conv1d needs k, stride, dilation >= 1")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != weight Cin {cin}")
    if x.data.ndim < 2:
        raise ShapeError("conv1d input must be at least [L, C]")

    lead = x.shape[:-2]
    L = x.shape[-2]
    xd = x.data.reshape(-1, L, cin)
    B = xd.shape[0]
    span = dilation * (k - 1) + 1
    left, right, L_out = _padding(L, span, stride, padding)

    if k == 1 and stride == 1:
        cols = xd.reshape(-1, cin)
        padded = False
    else:
        xp = np.pad(xd, ((0, 0), (left, right), (0, 0))) if (left or right) else xd
        cols = _im2col(xp, k, dilation, stride, L_out)
        padded = True
    wmat = w.data.reshape(k * cin, cout)
    y = cols @ wmat
    if b is not None:
        y += b.data
    out = Tensor._wrap(y.reshape(*lead, L_out, cout))

    def backward(g):
        g2 = g.reshape(B * L_out, cout)
        if w.requires_grad:
            _acc(w, (cols.T @ g2).reshape(k, cin, cout))
        if b is not None and b.requires_grad:
            _acc(b, g2.sum(axis=0))
        if not x.requires_grad:
            return
        if not padded:
            _acc(x, (g2 @ wmat.T).reshape(x.shape))
            return
        g3 = g.reshape(B, L_out, cout)
        if stride == 1:
            # transposed conv == correlation of the padded gradient with the flipped kernel
            lp = dilation * (k - 1) - left
            rp = L + dilation * (k - 1) - L_out - lp
            gp = np.pad(g3, ((0, 0), (max(lp, 0), max(rp, 0)), (0, 0)))
            if lp < 0:
                gp = gp[:, -lp:]
            gcols = _im2col(gp, k, dilation, 1, L)
            wflip = np.ascontiguousarray(w.data[::-1].transpose(0, 2, 1)).reshape(k * cout, cin)
            _acc(x, (gcols @ wflip).reshape(x.shape))
            return
        gcols = (g2 @ wmat.T).reshape(B, L_out, k, cin)
        gxp = np.zeros((B, L + left + right, cin), dtype=g.dtype)
        stop = (L_out - 1) * stride + 1
        for j in range(k):
            off = j * dilation
            gxp[:, off : off + stop : stride] += gcols[:, :, j]
        _acc(x, gxp[:, left : left + L].reshape(x.shape))

    return _record(out, (x, w) if b is None else (x, w, b), backward)


def _im2col(xp: np.ndarray, k: int, dilation: int, stride: int, L_out: int) -> np.ndarray:
    """[B, Lp, C] -> [B * L_out, k * C] with window taps laid out tap-major."""
    B, _, C = xp.shape
    span = dilation * (k - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, span, axis=1)
    win = win[:, : (L_out - 1) * stride + 1 : stride, :, ::dilation]  # [B, L_out, C, k]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B * L_out, k * C)


def maxpool1d(x: Tensor, k: int, stride: int | None = None, padding: str = "valid") -> Tensor:
    """Windowed max over the length axis, per channel. Same padding fills with -inf."""
    if k < 1:
        raise ConfigError("maxpool1d needs k >= 1")
    stride = k if stride is None else stride
    if x.data.ndim < 2:
        raise ShapeError("maxpool1d input must be at least [L, C]")
    lead = x.shape[:-2]
    L, C = x.shape[-2:]
    xd = x.data.reshape(-1, L, C)
    B = xd.shape[0]
    left, right, L_out = _padding(L, k, stride, padding)
    if k == 1 and stride == 1:
        return x
    xp = np.pad(xd, ((0, 0), (left, right), (0, 0)), constant_values=-np.inf) if (left or right) else xd
    y, arg = _kernels.maxpool_fwd(np.ascontiguousarray(xp), k, stride, L_out)
    out = Tensor._wrap(y.reshape(*lead, L_out, C))
    Lp = xp.shape[1]

    def backward(g):
        gxp = _kernels.maxpool_bwd(np.ascontiguousarray(g.reshape(B, L_out, C)), arg, Lp)
        _acc(x, gxp[:, left : left + L].reshape(x.shape))

    return _record(out, (x,), backward)


def global_pool(x: Tensor, kind: str = "avg", mask: np.ndarray | None = None) -> Tensor:
    """Reduce the length axis of [..., L, C]; ``mask`` (True = keep) excludes padded positions."""
    if kind not in ("avg", "max"):
        raise ConfigError(f"unknown pooling kind {kind!r}")
    xd = x.data
    L = xd.shape[-2]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != L:
            raise ShapeError(f"mask length {mask.shape[-1]} != sequence length {L}")
        if not mask.any(axis=-1).all():
            raise MaskError("every position is masked")
        m = mask[..., :, None]
    if kind == "avg":
        if mask is None:
            y = xd.mean(axis=-2)
        else:
            mf = np.broadcast_to(m, xd.shape).astype(xd.dtype)
            cnt = mf.sum(axis=-2)
            y = (xd * mf).sum(axis=-2) / cnt
        out = Tensor._wrap(y)

        def backward(g):
            if mask is None:
                gx = np.broadcast_to(g[..., None, :] / xd.dtype.type(L), xd.shape)
            else:
                gx = mf * (g / cnt)[..., None, :]
            _acc(x, np.array(gx))

        return _record(out, (x,), backward)

    src = xd if mask is None else np.where(m, xd, -np.inf)
    arg = src.argmax(axis=-2)  # [..., C]
    y = np.take_along_axis(src, arg[..., None, :], axis=-2)[..., 0, :]
    out = Tensor._wrap(np.ascontiguousarray(y))

    def backward_max(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, arg[..., None, :], g[..., None, :], axis=-2)
        _acc(x, gx)

    return _record(out, (x,), backward_max)


def channel_pool(x: Tensor, kind: str = "avg") -> Tensor:
    """Reduce the channel (last) axis, keeping it as size 1."""
    xd = x.data
    C = xd.shape[-1]
    if kind == "avg":
        out = Tensor._wrap(xd.mean(axis=-1, keepdims=True))

        def backward(g):
            _acc(x, np.broadcast_to(g / xd.dtype.type(C), xd.shape).copy())

        return _record(out, (x,), backward)
    if kind != "max":
        raise ConfigError(f"unknown pooling kind {kind!r}")
    arg = xd.argmax(axis=-1)[..., None]
    out = Tensor._wrap(np.take_along_axis(xd, arg, axis=-1))

    def backward_max(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, arg, g, axis=-1)
        _acc(x, gx)

    return _record(out, (x,), backward_max)


# gradient checking --------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    rel_tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.rel_tol


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rel_tol: float = 1e-4,
    h: float = 1e-5,
    abs_floor: float = 1e-6,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``fn`` closes over ``inputs`` (which should be 64-bit); each is perturbed in place.
    Per element the error is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
    With ``max_elements`` only a random subset of each input is probed.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    g = Graph("train", dropout=False)
    with g:
        out = fn()
    if out.data.size != 1:
        raise ShapeError("grad_check closure must return a scalar")
    if not np.isfinite(out.data).all():
        raise GradCheckError("closure output is not finite")
    g.backward(out)

    pick = np.random.default_rng(seed)
    report = {}
    for i, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(pick.choice(flat.size, max_elements, replace=False))
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            fp = float(fn().data.reshape(-1)[0])
            flat[j] = orig - h
            fm = float(fn().data.reshape(-1)[0])
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic.reshape(-1)[j])
            if not (math.isfinite(num) and math.isfinite(ana)):
                raise GradCheckError(f"non-finite gradient for input {t.name or i} element {j}")
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            worst = max(worst, err)
        report[t.name or f"input{i}"] = worst
        t.grad = None
    return GradCheckReport(report, rel_tol)
