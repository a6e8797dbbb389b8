"""Dense tensors on a define-by-run reverse-mode tape.

A :class:`Tape` is created per forward pass.  Parameters enter it as leaves
(:meth:`Tape.leaf`), every differentiable op appends one node holding its
backward rule, and :meth:`Tape.backward` sweeps the nodes in reverse order.
Tensors that are not on any tape are constants; ops over constants only
produce constants.

Only the shapes the model needs are supported.  ``add`` broadcasts a right
operand whose shape is a suffix of the left one, ``matmul`` follows numpy's
batch-dimension broadcasting; there are no other broadcasting rules.
"""

from __future__ import annotations

import contextlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DimensionError

logger = logging.getLogger(__name__)

DTYPES = {32: np.float32, 64: np.float64}

_debug = os.environ.get("SF_DEBUG", "") not in ("", "0")
_flop_counters: list["FlopCounter"] = []


def set_debug(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every op."""
    global _debug
    _debug = bool(enabled)


def dtype_for_bits(bits: int) -> np.dtype:
    try:
        return np.dtype(DTYPES[bits])
    except KeyError:
        raise ConfigError(f"precision must be 32 or 64 bits, got {bits}") from None


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give bit-identical draws."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = f"node={self.node_id}" if self.node_id is not None else "const"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {where})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_const(self, other)
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_const(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(slots=True)
class Node:
    op: str
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def leaf(self, value, name: str | None = None) -> Tensor:
        data = np.asarray(value)
        node_id = len(self.nodes)
        self.nodes.append(Node(name or "leaf", (), None, data.shape))
        return Tensor(data, self, node_id)

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward: Callable) -> Tensor:
        ids = []
        for t in inputs:
            if t.tape is None:
                ids.append(None)
            elif t.tape is not self:
                raise ContractError(f"{op}: inputs come from different tapes")
            else:
                ids.append(t.node_id)
        node_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(ids), backward, out.shape))
        return Tensor(out, self, node_id)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of ``loss`` for every leaf on the tape, keyed by node id.

        Leaves the loss does not depend on receive zeros.
        """
        if loss.tape is not self:
            raise ContractError("loss tensor is not on this tape")
        if loss.data.size != 1 or loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: list[np.ndarray | None] = [None] * len(self.nodes)
        pending[loss.node_id] = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {}
        for i in range(loss.node_id, -1, -1):
            g = pending[i]
            node = self.nodes[i]
            if node.backward is None:
                if g is not None:
                    grads[i] = g
                continue
            if g is None:
                continue
            pending[i] = None
            for nid, ig in zip(node.inputs, node.backward(g)):
                if nid is None or ig is None:
                    continue
                pending[nid] = ig if pending[nid] is None else pending[nid] + ig
        for i, node in enumerate(self.nodes):
            if node.backward is None and i not in grads:
                grads[i] = np.zeros(node.shape, dtype=loss.dtype)
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        return self.grads[t.node_id]


def _apply(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = next((t.tape for t in inputs if t.tape is not None), None)
    if tape is None:
        return Tensor(out)
    return tape.record(op, inputs, out, backward)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo leading-axis broadcasting by summation."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# --------------------------------------------------------------------------
# FLOP accounting (matmul only)


@dataclass
class FlopCounter:
    matmul: int = 0


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


# --------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None
    if _flop_counters:
        p, q, r = a.shape[-2], a.shape[-1], b.shape[-1]
        n = 2 * p * q * r * int(np.prod(out.shape[:-2], dtype=np.int64))
        for c in _flop_counters:
            c.matmul += n
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.tape is not None:
            ga = _sum_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.tape is not None:
            if bd.ndim == 2 and ad.ndim > 2:
                q = ad.shape[-1]
                gb = ad.reshape(-1, q).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _sum_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _apply("matmul", (a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` where ``b.shape`` equals ``a.shape`` or is a suffix of it."""
    if a.shape[a.ndim - b.ndim:] != b.shape or b.ndim > a.ndim:
        raise DimensionError(f"add: shape {b.shape} is not a suffix of {a.shape}")
    bshape = b.shape

    def backward(g):
        return g, _sum_to(g, bshape)

    return _apply("add", (a, b), a.data + b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def mul_const(x: Tensor, c: float) -> Tensor:
    return _apply("mul_const", (x,), x.data * c, lambda g: (g * c,))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the 0-d tensor ``s``."""
    if s.ndim != 0:
        raise DimensionError(f"scale: factor must be 0-d, got shape {s.shape}")
    xd, sd = x.data, s.data
    return _apply("scale", (x, s), xd * sd,
                  lambda g: (g * sd, np.asarray(np.sum(g * xd), dtype=sd.dtype)))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _apply("transpose", (x,), np.swapaxes(x.data, -1, -2),
                  lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _apply("permute", (x,), np.transpose(x.data, axes),
                  lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _apply("reshape", (x,), x.data.reshape(tuple(shape)), lambda g: (g.reshape(src),))


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    axis = axis % x.ndim
    src, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src, dtype=dtype)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _apply("take", (x,), np.take(x.data, index, axis=axis), backward)


def narrow(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    src, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src, dtype=dtype)
        out[sl] = g
        return (out,)

    return _apply("narrow", (x,), x.data[sl], backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    axis = axis % xs[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _apply("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=axis),
                  lambda g: tuple(np.split(g, bounds, axis=axis)))


def expand(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``x`` over new leading axes of extents ``lead``."""
    lead = tuple(lead)
    src = x.shape
    out = np.broadcast_to(x.data, lead + src).copy()
    return _apply("expand", (x,), out, lambda g: (_sum_to(g, src),))


def sum_all(x: Tensor) -> Tensor:
    src, dtype = x.shape, x.dtype
    return _apply("sum", (x,), np.asarray(x.data.sum(), dtype=dtype),
                  lambda g: (np.full(src, g, dtype=dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    src, dtype = x.shape, x.dtype
    return _apply("mean", (x,), np.asarray(x.data.sum() / n, dtype=dtype),
                  lambda g: (np.full(src, g / n, dtype=dtype),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    src = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, src).copy(),)

    return _apply("mean_axis", (x,), x.data.mean(axis=axis), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _apply("softmax", (x,), y, backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _apply("log_softmax", (x,), y, backward)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick: need (B, K) values and B indices, got {x.shape} / {index.shape}")
    rows = np.arange(x.shape[0])
    src, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src, dtype=dtype)
        out[rows, index] = g
        return (out,)

    return _apply("pick", (x,), x.data[rows, index], backward)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU, ``x * Phi(x)``."""
    xd = x.data
    y = (0.5 * xd * (1.0 + erf(xd / math.sqrt(2.0)))).astype(xd.dtype, copy=False)
    # looked up through the module so tests can swap in a broken rule
    return _apply("gelu", (x,), y, lambda g: (g * _gelu_grad(xd).astype(xd.dtype, copy=False),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to(g * xhat, (d,)), _sum_to(g, (d,))

    return _apply("layer_norm", (x, gamma, beta), out, backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity when ``p == 0`` or outside training."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _apply("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    max_error: float
    worst: tuple[str, tuple[int, ...]] | None
    checked: int
    tape_grad: float = 0.0
    fd_grad: float = 0.0


def grad_check(f: Callable[[Tape, dict[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray],
               eps: float = 1e-4,
               max_coords: int | None = None,
               rng: np.random.Generator | None = None,
               fd_dtype=None) -> GradCheckResult:
    """Compare tape gradients of ``f`` with central finite differences.

    ``f`` receives a fresh tape and the parameters as leaves on it and must
    return a scalar loss.  With ``max_coords`` set, a seeded random subset of
    coordinates is checked, spread over every parameter tensor.  The error
    for one coordinate is ``|g_tape - g_fd| / max(1e-8, |g_tape| + |g_fd|)``.

    ``fd_dtype`` evaluates the finite differences at a different precision
    than the tape; 32-bit gradients are best judged against a 64-bit
    reference, since 32-bit differences drown in rounding noise.
    """
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    loss = f(tape, leaves)
    grads = tape.backward(loss)
    tape_grads = {k: grads[t.node_id] for k, t in leaves.items()}
    if fd_dtype is not None:
        params = {k: v.astype(fd_dtype) for k, v in params.items()}

    def value() -> float:
        t = Tape()
        return float(f(t, {k: t.leaf(v, k) for k, v in params.items()}).data)

    coords: list[tuple[str, tuple[int, ...]]] = []
    total = sum(v.size for v in params.values())
    if max_coords is None or max_coords >= total:
        for k, v in params.items():
            coords.extend((k, idx) for idx in np.ndindex(v.shape))
    else:
        rng = rng if rng is not None else make_rng(0)
        per = max(1, max_coords // len(params))
        for k, v in params.items():
            flat = rng.choice(v.size, size=min(per, v.size), replace=False)
            coords.extend((k, np.unravel_index(int(i), v.shape)) for i in sorted(flat))

    result = GradCheckResult(0.0, None, len(coords))
    for k, idx in coords:
        arr = params[k]
        orig = arr[idx]
        arr[idx] = orig + eps
        up = value()
        arr[idx] = orig - eps
        down = value()
        arr[idx] = orig
        fd = (up - down) / (2.0 * eps)
        g = float(tape_grads[k][idx])
        err = abs(g - fd) / max(1e-8, abs(g) + abs(fd))
        if err > result.max_error or result.worst is None:
            result.max_error, result.worst = err, (k, tuple(int(i) for i in idx))
            result.tape_grad, result.fd_grad = g, fd
    return result
