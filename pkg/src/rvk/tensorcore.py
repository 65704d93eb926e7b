"""Small dense-tensor engine with reverse-mode differentiation.

Only the handful of layers the distance/velocity network needs are provided:
2D convolution, ReLU, fully connected, concatenation, slicing and MSE.  All
arithmetic is float64.  Graphs are recorded dynamically on every forward
pass and walked once by :func:`backward`; leaf tensors created with
``requires_grad=True`` accumulate into ``.grad`` until an optimizer clears it.

Batched variants are accepted where it is cheap to do so: ``conv2d`` takes
``[C, H, W]`` or ``[B, C, H, W]`` and ``fully_connected`` takes ``[N]`` or
``[B, N]``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        """Wrap an op result; records the graph edge only when a parent needs it."""
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, k):
        return scale(self, k)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise RuntimeError("backward() called on a tensor with no recorded history")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return Tensor.from_op(a.data * k, (a,), lambda g: (g * k,))


def affine(a: Tensor, mul, shift) -> Tensor:
    """a * mul + shift with constant, broadcastable ``mul`` and ``shift``."""
    mul = np.asarray(mul, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    out = a.data * mul + shift
    if out.shape != a.shape:
        raise ValueError(f"affine: constants broadcast {a.shape} to {out.shape}")
    return Tensor.from_op(out, (a,), lambda g: (g * mul,))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def index(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing; the gradient scatters back into a zero array."""
    out = np.array(a.data[idx], dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g.reshape(full[idx].shape)
        return (full,)

    return Tensor.from_op(out, (a,), bw)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Join rank-1 tensors (or rank-2 ``[B, n_i]`` tensors along the last axis)."""
    if not parts:
        raise ValueError("concat needs at least one part")
    parts = [as_tensor(p) for p in parts]
    ranks = {p.data.ndim for p in parts}
    if ranks == {2}:
        lead = {p.shape[0] for p in parts}
        if len(lead) != 1:
            raise ValueError(f"concat: batch sizes differ {[p.shape for p in parts]}")
    elif ranks != {1}:
        raise ValueError(f"concat expects rank-1 parts, got shapes {[p.shape for p in parts]}")
    sizes = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return [g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=-1), parts, bw)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not parts:
        raise ValueError("stack needs at least one part")
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes differ {sorted(shapes)}")
    return Tensor.from_op(np.stack([p.data for p in parts]), parts,
                          lambda g: [g[i] for i in range(len(parts))])


def split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat` along the last axis."""
    if sum(sizes) != x.shape[-1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[-1]}")
    out = []
    start = 0
    for n in sizes:
        out.append(index(x, (Ellipsis, slice(start, start + n))))
        start += n
    return out


# ---------------------------------------------------------------------------
# layers


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out = weight @ x + bias, for x of shape [N] or [B, N]."""
    if weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError(f"fully_connected: bad parameter shapes {weight.shape}, {bias.shape}")
    m, n = weight.shape
    if x.shape[-1] != n or bias.shape[0] != m:
        raise ValueError(
            f"fully_connected: input {x.shape} incompatible with weight {weight.shape} "
            f"and bias {bias.shape}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        if xd.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return g @ wd, gw, gb

    return Tensor.from_op(out, (x, weight, bias), bw)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation. No dilation, no groups."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected input [C,H,W] or [B,C,H,W] and 4-d weight, "
                         f"got input {x.shape}, weight {weight.shape}")
    xd = x.data if batched else x.data[None]
    b, c, h, w = xd.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input shape {x.shape} has {c} channels but weight shape "
                         f"{weight.shape} expects {ci}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(o, -1)
    out = (cols @ w2.T + bias.data).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def bw(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(b, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            if not batched:
                gx = gx[0]
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = (2.0 / n) * diff * g[0]
        return gp, -gp

    return Tensor.from_op(np.array([np.mean(diff * diff)]), (pred, target), bw)


# ---------------------------------------------------------------------------
# parameters and optimisation


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int,
                   name: str | None = None) -> Tensor:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=tuple(shape)), requires_grad=True, name=name)


def zeros_param(shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0   # decoupled (AdamW-style); 0 is plain Adam

    @classmethod
    def for_param(cls, param: Tensor, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), lr=lr, **kw)


def adam_step(param: Tensor, state: AdamState) -> None:
    """One bias-corrected Adam update in place; clears ``param.grad`` afterwards."""
    if param.grad is None:
        raise ValueError(f"adam_step: parameter {param.name or param.shape} has no gradient")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValueError(f"adam_step: state shape {state.m.shape} does not match parameter {param.shape}")
    g = param.grad
    b1, b2 = state.beta1, state.beta2
    state.step += 1
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    if state.lr != 0.0:
        if state.weight_decay:
            param.data *= 1.0 - state.lr * state.weight_decay
        denom = np.sqrt(state.v / c2)
        denom += state.eps
        param.data -= (state.lr / c1) * state.m / denom
    param.grad = None


def step_decay_lr(epoch: int, base_lr: float, decay: float = 0.2, every: int = 30) -> float:
    """Learning rate for a 0-based epoch under a step schedule."""
    return base_lr * decay ** (epoch // every)


class Adam:
    """Adam over a list of parameters, sharing one learning rate."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.states = [AdamState.for_param(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                                           weight_decay=weight_decay)
                       for p in self.params]

    @property
    def lr(self) -> float:
        return self.states[0].lr if self.states else 0.0

    def set_lr(self, lr: float) -> None:
        for s in self.states:
            s.lr = lr

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            adam_step(p, s)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[int, int] | None = None
    nonfinite: list[tuple[int, int]] = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.nonfinite


def grad_check(build: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               floor: float = 1e-6) -> GradCheckResult:
    """Compare analytic gradients with central differences for every input element.

    ``build`` must recompute the scalar loss from the current ``.data`` of
    ``inputs``.  The relative error per element is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps exactly-zero gradients
    from turning round-off into a 100% error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = build()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    result = GradCheckResult(0.0)
    with no_grad():
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            ga = analytic[k].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = build().item()
                flat[i] = orig - eps
                fm = build().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                result.checked += 1
                if not (math.isfinite(num) and math.isfinite(ga[i])):
                    result.nonfinite.append((k, i))
                    continue
                err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
                if err > result.max_rel_error:
                    result.max_rel_error = err
                    result.worst = (k, i)
    if result.nonfinite:
        result.max_rel_error = math.inf
    return result
