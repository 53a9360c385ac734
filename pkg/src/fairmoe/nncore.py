"""Minimal reverse-mode autodiff on top of numpy.

Every forward operation returns a :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients.  Calling
:func:`backward` linearises the graph into a :class:`GradTape` (a
deterministic topological order) and replays it in reverse.

All arithmetic is float64.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_state = threading.local()


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class DimensionError(ContractError):
    """Raised on incompatible tensor shapes."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# Discrete decisions (top-k masks, clamps) are logged here so that gradient
# checks can detect when a perturbation crosses a kink.


def record_decision(arr: np.ndarray) -> None:
    stack = getattr(_state, "decisions", None)
    if stack:
        stack[-1].append(np.ascontiguousarray(arr).tobytes())


@contextlib.contextmanager
def decision_log():
    stack = getattr(_state, "decisions", None)
    if stack is None:
        stack = _state.decisions = []
    log: list[bytes] = []
    stack.append(log)
    try:
        yield log
    finally:
        stack.pop()


class Tensor:
    """n-dimensional float64 array with gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_grad_fn")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return bmm(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    # -- reductions / reshaping ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


ACTIVATIONS = {"gelu": gelu, "relu": relu}


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)
    inside = out == x
    record_decision(inside)
    return _make(out, (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` (a constant boolean array) else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def variance(a: Tensor, axis=0) -> Tensor:
    """Population variance (divides by the count) along ``axis``."""
    mu = mean(a, axis, keepdims=True)
    d = a - mu
    return mean(d * d, axis)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product ``[m, k] @ [k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return bmm(a, b)


def bmm(a, b) -> Tensor:
    """Broadcasting matrix product (numpy ``@`` semantics, operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("bmm operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _matmul_operand_grad(g, bd, ad.shape, left=True), _matmul_operand_grad(g, ad, bd.shape, left=False)

    return _make(ad @ bd, (a, b), grad_fn)


def _matmul_operand_grad(g: np.ndarray, other: np.ndarray, shape: tuple, left: bool) -> np.ndarray:
    """Gradient of one ``@`` operand; broadcast batch axes are summed out."""
    other = np.broadcast_to(other, g.shape[:-2] + other.shape[-2:])
    if len(shape) == 2 and g.ndim > 2:
        # shared 2-D weight under a batched input: fold the batch into one GEMM
        if left:  # d(a) = sum_b g_b @ other_b^T, with g [.., x, z], other [.., y, z]
            gz = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
            oz = np.moveaxis(other, -2, 0).reshape(other.shape[-2], -1)
            return gz @ oz.T
        return other.reshape(-1, other.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    full = g @ np.swapaxes(other, -1, -2) if left else np.swapaxes(other, -1, -2) @ g
    return _unbroadcast(full, shape)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilised by the row max."""
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a, axis=1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    w = np.exp(x - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return _make(out, (a,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (1/c variance, ``eps`` inside the sqrt)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if c < 2:
        raise ContractError("layer_norm needs at least two features")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"gain/bias must have shape ({c},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def grad_fn(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), grad_fn)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = sqrt(sum_(x * x, axis, keepdims=True))
    return x / norm


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass
class GradTape:
    """Topologically ordered list of taped nodes ending at the loss."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed_grad: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed_grad}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._grad_fn is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=DTYPE)
        return grads


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss``.

    Returns a mapping from tensor to gradient array.  When ``params`` is given
    the map has exactly those keys, with zeros for parameters the loss does
    not depend on; otherwise it holds every leaf that requires grad.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape.from_loss(loss)
    raw = tape.replay(np.ones(loss.shape, dtype=DTYPE)) if loss.requires_grad else {}
    if params is None:
        return {n: raw[id(n)] for n in tape.nodes if n._grad_fn is None and id(n) in raw}
    out = {}
    for p in params:
        g = raw.get(id(p))
        out[p] = np.zeros(p.shape, dtype=DTYPE) if g is None else np.broadcast_to(g, p.shape).copy()
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimizerState":
        return cls(
            m=[np.zeros(p.shape, dtype=DTYPE) for p in params],
            v=[np.zeros(p.shape, dtype=DTYPE) for p in params],
            **kw,
        )


def adam_step(
    params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState
) -> OptimizerState:
    """One bias-corrected Adam update.  Parameters get fresh ``data`` arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer moments differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v = [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ContractError(f"shape mismatch for parameter {p.name or '?'}: {g.shape} vs {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m.append(m)
        new_v.append(v)
    state.m, state.v, state.step = new_m, new_v, t
    return state


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@dataclass
class BlockReport:
    name: str
    checked: int
    failed: int
    kinks: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.failed == 0


@dataclass
class FDReport:
    blocks: list[BlockReport]
    tol: float

    @property
    def checked(self) -> int:
        return sum(b.checked for b in self.blocks)

    @property
    def failed(self) -> int:
        return sum(b.failed for b in self.blocks)

    @property
    def kinks(self) -> int:
        return sum(b.kinks for b in self.blocks)

    @property
    def pass_fraction(self) -> float:
        return 1.0 - self.failed / self.checked if self.checked else 1.0

    @property
    def passed(self) -> bool:
        return self.failed == 0

    def summary(self) -> str:
        lines = [f"{'block':40s} {'checked':>8s} {'failed':>7s} {'kinks':>6s} {'max rel':>10s}"]
        for b in self.blocks:
            lines.append(f"{b.name:40s} {b.checked:8d} {b.failed:7d} {b.kinks:6d} {b.max_rel_err:10.2e}")
        return "\n".join(lines)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-3,
    floor: float = 1e-6,
    max_per_block: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> FDReport:
    """Compare :func:`backward` gradients of ``f()`` against central differences.

    ``f`` takes no arguments and must read the current values of ``params``.
    The relative error of an entry is ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)``.  Entries whose ``+h`` or ``-h`` evaluation takes a
    different discrete branch (see :func:`record_decision`) are counted as
    kinks and excluded.  ``names`` labels the blocks in the report.
    """
    with decision_log() as base_sig:
        loss = f()
    base_sig = list(base_sig)
    grads = backward(loss, params)
    rng = np.random.default_rng(seed)
    blocks = []
    for i, p in enumerate(params):
        flat_idx = np.arange(p.size)
        if max_per_block is not None and p.size > max_per_block:
            flat_idx = np.sort(rng.choice(p.size, max_per_block, replace=False))
        g = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        if not flat.flags.writeable or not np.shares_memory(flat, p.data):
            p.data = p.data.copy()
            flat = p.data.reshape(-1)
        checked = failed = kinks = 0
        worst = 0.0
        for j in flat_idx:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                with decision_log() as sp:
                    fp = f().item()
                flat[j] = orig - h
                with decision_log() as sm:
                    fm = f().item()
            flat[j] = orig
            if sp != base_sig or sm != base_sig:
                kinks += 1
                continue
            num = (fp - fm) / (2.0 * h)
            ana = g[j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            worst = max(worst, err)
            if err > tol:
                failed += 1
        label = names[i] if names is not None else (p.name or f"param{i}")
        blocks.append(BlockReport(label, checked, failed, kinks, worst))
    return FDReport(blocks, tol)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


def init_weight(rng: np.random.Generator, shape, std: float = 0.02, name: str | None = None) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape), name=name)


def init_zeros(shape, name: str | None = None) -> Tensor:
    return parameter(np.zeros(shape), name=name)


class Module:
    """Attribute-walking parameter container.

    Parameters are attributes holding a ``Tensor`` with ``requires_grad``;
    sub-modules are attributes holding a ``Module`` or a list of them.
    Canonical paths join attribute names (and list positions) with dots.
    """

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((path, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(path + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{path}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        unexpected = set(state) - set(named)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in named.items():
            arr = np.asarray(state[k], dtype=DTYPE)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = init_weight(rng, (d_in, d_out))
        if bias:
            self.bias = init_zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        y = bmm(x, self.weight) if x.ndim >= 2 else bmm(reshape(x, (1, -1)), self.weight).reshape(-1)
        b = getattr(self, "bias", None)
        return y + b if b is not None else y
