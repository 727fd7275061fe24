"""Dense float64 tensors with tape-based reverse-mode differentiation.

All values flowing through the networks are `Tensor` objects holding
row-major float64 arrays.  Operations executed while a `Tape` is active
record themselves onto that tape; `backward` then replays the tape in
exact reverse order to accumulate gradients.  With no tape active the
same operations run as plain numpy forward passes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, UsageError

# Clamp for denominators in roots/divisions so finite inputs never
# produce NaN or Inf.
EPS_DENOM = 1e-12


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking.

    `data` exposes the flat row-major storage; `array` is the shaped view
    used internally.  `grad` is populated by `backward` for tensors that
    were created with `requires_grad=True`.
    """

    __slots__ = ("array", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.array = np.array(values, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal constructor that adopts a freshly computed array.
        t = cls.__new__(cls)
        t.array = np.ascontiguousarray(array, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=np.float64), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the storage."""
        return self.array.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.array

    def item(self) -> float:
        if self.array.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs, output, backward_rule):
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class Tape:
    """Ordered record of operations; single-owner, used once.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction and `backward` visits it in exact reverse.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise UsageError("tape context exited out of order")


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(
    inputs: Sequence[Tensor],
    out_array: np.ndarray,
    backward_rule: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap `out_array` in a Tensor, recording the op if a tape is active.

    `backward_rule(grad_out)` must return one gradient array (or None)
    per input, in input order.  Outputs of recorded ops are marked
    `requires_grad` so downstream ops keep recording.
    """
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(out_array, requires_grad=True)
        tape.nodes.append(TapeNode(tuple(inputs), out, backward_rule))
        return out
    return Tensor._wrap(out_array)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse-replay `tape` from scalar `loss`; returns leaf gradients.

    Every tensor the caller created with `requires_grad=True` that
    contributed to `loss` appears in the returned map and has its
    `.grad` set.  The tape is consumed and cannot be replayed.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise UsageError("tape already consumed by a previous backward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.array)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        input_grads = node.backward_rule(gout)
        for t, g in zip(node.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g
            if id(t) not in produced:
                leaves[id(t)] = t

    result: dict[Tensor, np.ndarray] = {}
    for tid, t in leaves.items():
        g = np.ascontiguousarray(grads[tid])
        t.grad = g
        result[t] = g
    tape.consumed = True
    tape.nodes.clear()
    return result


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record_op((a, b), a.array + b.array, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record_op((a, b), a.array - b.array, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    av, bv = a.array, b.array
    return record_op((a, b), av * bv, lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op((x,), x.array * c, lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record_op((x,), x.array + float(c), lambda g: (g,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record_op(
        (x,),
        np.asarray(x.array.sum()),
        lambda g: (np.full(shape, g.reshape(-1)[0]),),
    )


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def relu(x: Tensor) -> Tensor:
    xv = x.array
    return record_op((x,), np.maximum(xv, 0.0), lambda g: (g * (xv > 0.0),))


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root.

    Negative inputs are clamped to zero before the root; the gradient at
    zero is defined as zero (the subgradient choice that keeps hinge
    losses finite when two inputs coincide).
    """
    y = np.sqrt(np.maximum(x.array, 0.0))

    def _bw(g):
        denom = np.maximum(2.0 * y, EPS_DENOM)
        return (g / denom * (y > EPS_DENOM),)

    return record_op((x,), y, _bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise ConfigurationError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    av, bv = a.array, b.array
    needs_a, needs_b = a.requires_grad, b.requires_grad

    def _bw(g):
        da = g @ bv.T if needs_a else None
        db = av.T @ g if needs_b else None
        return (da, db)

    return record_op((a, b), av @ bv, _bw)


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """Matrix (out, n) times vector (n,) -> vector (out,)."""
    if m.array.ndim != 2 or v.array.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ConfigurationError(f"matvec: incompatible shapes {m.shape} x {v.shape}")
    mv, vv = m.array, v.array
    needs_m, needs_v = m.requires_grad, v.requires_grad

    def _bw(g):
        dm = np.outer(g, vv) if needs_m else None
        dv = mv.T @ g if needs_v else None
        return (dm, dv)

    return record_op((m, v), mv @ vv, _bw)


# ---------------------------------------------------------------------------
# convolution and spatial ops
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D convolution over a C_in x H x W map with zero padding.

    Kernels are C_out x C_in x k x k; output spatial extents follow
    floor((H + 2*padding - k) / stride) + 1.
    """
    if x.array.ndim != 3:
        raise ConfigurationError(f"conv2d input must be CxHxW, got {x.shape}")
    if kernels.array.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ConfigurationError(
            f"conv2d kernels must be C_out x C_in x k x k, got {kernels.shape}"
        )
    c_in, h, w = x.shape
    c_out, kc_in, k, _ = kernels.shape
    if kc_in != c_in:
        raise ConfigurationError(
            f"conv2d: input has {c_in} channels but kernels expect {kc_in}"
        )
    if bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ConfigurationError(
            f"conv2d: kernel {k} exceeds padded extents {hp}x{wp}"
        )
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1

    xp = x.array
    if padding > 0:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding)))
    sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(c_in, k, k, h_out, w_out),
        strides=(sc, sh, sw, sh * stride, sw * stride),
    )
    cols = patches.reshape(c_in * k * k, h_out * w_out)
    wmat = kernels.array.reshape(c_out, c_in * k * k)
    out = (wmat @ cols).reshape(c_out, h_out, w_out) + bias.array[:, None, None]

    needs_x = x.requires_grad
    needs_w = kernels.requires_grad
    needs_b = bias.requires_grad
    kshape = kernels.shape

    def _bw(g):
        gmat = g.reshape(c_out, h_out * w_out)
        dw = (gmat @ cols.T).reshape(kshape) if needs_w else None
        db = gmat.sum(axis=1) if needs_b else None
        dx = None
        if needs_x:
            dcols = (wmat.T @ gmat).reshape(c_in, k, k, h_out, w_out)
            dxp = np.zeros((c_in, hp, wp))
            for di in range(k):
                for dj in range(k):
                    dxp[
                        :,
                        di : di + stride * h_out : stride,
                        dj : dj + stride * w_out : stride,
                    ] += dcols[:, di, dj]
            dx = dxp[:, padding : padding + h, padding : padding + w]
        return (dx, dw, db)

    return record_op((x, kernels, bias), out, _bw)


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Average a CxHxW map over its spatial locations, yielding (C,)."""
    if x.array.ndim != 3:
        raise ConfigurationError(f"spatial_avg_pool needs CxHxW, got {x.shape}")
    c, h, w = x.shape
    inv = 1.0 / (h * w)
    out = x.array.mean(axis=(1, 2))

    def _bw(g):
        return (np.broadcast_to(g[:, None, None] * inv, (c, h, w)).copy(),)

    return record_op((x,), out, _bw)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack CxHxW maps along the channel axis in argument order."""
    if not xs:
        raise ConfigurationError("concat_channels needs at least one input")
    spatial = xs[0].shape[1:]
    for t in xs:
        if t.array.ndim != 3:
            raise ConfigurationError(f"concat_channels needs CxHxW, got {t.shape}")
        if t.shape[1:] != spatial:
            raise ConfigurationError(
                f"concat_channels: spatial mismatch {t.shape[1:]} vs {spatial}"
            )
    splits = [t.shape[0] for t in xs]
    offsets = np.cumsum([0] + splits)

    def _bw(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(splits)))

    return record_op(tuple(xs), np.concatenate([t.array for t in xs], axis=0), _bw)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of scalar `f` against central differences.

    Returns the maximum relative error over the checked coordinates,
    with relative error |a - n| / max(|a|, |n|, 1e-8).  When
    `max_coords` is given, a random subset of coordinates is checked
    (useful for large parameter tensors).
    """
    if not x.requires_grad:
        raise UsageError("finite_diff_check needs a requires_grad tensor")
    with Tape() as tape:
        loss = f(x)
    grads = backward(loss, tape)
    analytic = grads.get(x)
    if analytic is None:
        analytic = np.zeros_like(x.array)
    analytic = analytic.reshape(-1)

    flat = x.array.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
