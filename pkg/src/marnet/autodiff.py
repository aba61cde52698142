"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a float32 or float64 numpy array. Operations build an
implicit DAG by storing parent links and a backward closure on each output
node; ``Tensor.backward`` walks the graph once in reverse topological order
and accumulates gradients additively into every node it reaches, so leaves
used multiple times receive the sum of their contributions.

The op set is exactly what the network layers need: elementwise arithmetic,
grouped linear maps, ReLU, set pooling, channel/row concatenation, gather,
adjacent-channel summation, batch norm, dropout and softmax cross-entropy.
Every op validates its output and raises ``NonFiniteError`` on NaN or Inf.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ConfigError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "grouped_linear",
    "relu",
    "max_over_set",
    "mean_over_set",
    "concat_channels",
    "concat_rows",
    "reshape",
    "gather_rows",
    "sum_all",
    "sum_adjacent",
    "batch_norm",
    "dropout",
    "softmax_cross_entropy",
    "softmax",
    "AdamState",
    "adam_step",
    "GradCheckResult",
    "grad_check",
    "count_graph",
    "peak_live_bytes",
    "reset_peak_live_bytes",
]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class ConfigError(ValueError):
    """A shape, dtype or hyperparameter contract was violated."""


# Per-thread recording flag: evaluation harnesses shard clouds across worker
# threads, and a process-global flag would let one thread's no_grad scope
# clobber another's (or leak a disabled state past the last exit).
_grad_state = threading.local()


def _grad_on() -> bool:
    return getattr(_grad_state, "enabled", True)


# High-water mark of live tensor data bytes, used by the benchmark harness.
_live_bytes = 0
_peak_bytes = 0


def peak_live_bytes() -> int:
    """Return the high-water mark of live tensor data bytes since last reset."""
    return _peak_bytes


def reset_peak_live_bytes() -> None:
    global _peak_bytes
    _peak_bytes = _live_bytes


@contextmanager
def no_grad():
    """Context manager that disables graph recording (forward-only mode) for
    the current thread."""
    prev = _grad_on()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # One float64 reduction instead of an isfinite scan: any NaN/Inf entry
    # poisons the sum, and finite float32/float64 data cannot overflow a
    # float64 accumulator.
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteError(f"{op}: non-finite values in output")


class Tensor:
    """A numpy array with an optional gradient and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        _count_alloc(arr)

    def __del__(self):
        global _live_bytes
        data = getattr(self, "data", None)
        if data is not None:
            _live_bytes -= data.nbytes

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Return a new leaf sharing this tensor's data, cut from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this node, visiting each graph node exactly once.

        Args:
            seed: upstream gradient; defaults to ones (the node must be scalar
                in that case).
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError("seed gradient shape does not match output shape")

        # Iterative topological sort; graphs can be deeper than the default
        # recursion limit.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar used throughout the layers.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scale(self, 1.0, shift=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scale(self, 1.0, shift=-float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _count_alloc(arr: np.ndarray) -> None:
    global _live_bytes, _peak_bytes
    _live_bytes += arr.nbytes
    if _live_bytes > _peak_bytes:
        _peak_bytes = _live_bytes


def _node(
    data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn, check: bool = True
) -> Tensor:
    """Wrap an op output, recording graph links when recording is enabled.

    ``check=False`` is reserved for rearrangement ops (reshape, gather,
    concatenation, max-pool) whose outputs are subsets of already-validated
    values; arithmetic ops always validate.
    """
    if check:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    _count_alloc(data)
    if _grad_on() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _require_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ConfigError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype("add", a, b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype("sub", a, b)
    data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype("mul", a, b)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, "mul", (a, b), backward)


def scale(a: Tensor, factor: float, shift: float = 0.0) -> Tensor:
    """Affine map ``a * factor + shift`` with python-scalar coefficients."""
    data = a.data * a.data.dtype.type(factor)
    if shift != 0.0:
        data = data + a.data.dtype.type(shift)

    def backward(g):
        a._accumulate(g * a.data.dtype.type(factor))

    return _node(data, "scale", (a,), backward)


def grouped_linear(x: Tensor, weight: Tensor, bias: Tensor | None, n_groups: int) -> Tensor:
    """Channel-grouped linear map over the last axis.

    The input channels are split into ``n_groups`` contiguous groups; group
    ``j`` is mapped by ``weight[j]`` to its slice of the output channels, so
    the layer holds ``c_in * c_out / n_groups`` weights instead of
    ``c_in * c_out``. ``n_groups == 1`` is a dense linear map.

    Args:
        x: ``(..., c_in)`` input.
        weight: ``(n_groups, c_in / n_groups, c_out / n_groups)``.
        bias: ``(c_out,)`` or None.
        n_groups: number of channel groups; must divide both channel counts.

    Returns:
        ``(..., c_out)`` tensor.
    """
    if n_groups < 1:
        raise ConfigError(f"grouped_linear: n_groups must be >= 1, got {n_groups}")
    c_in = x.data.shape[-1]
    if weight.data.ndim != 3 or weight.data.shape[0] != n_groups:
        raise ConfigError(
            f"grouped_linear: weight shape {weight.data.shape} does not match n_groups={n_groups}"
        )
    cig, cog = weight.data.shape[1], weight.data.shape[2]
    c_out = cog * n_groups
    if c_in % n_groups != 0 or cig * n_groups != c_in:
        raise ConfigError(
            f"grouped_linear: c_in={c_in} not divisible into {n_groups} groups of {cig}"
        )
    if bias is not None and bias.data.shape != (c_out,):
        raise ConfigError(f"grouped_linear: bias shape {bias.data.shape}, expected ({c_out},)")
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _require_same_dtype("grouped_linear", *tensors)

    lead = x.data.shape[:-1]
    m = int(np.prod(lead)) if lead else 1
    if n_groups == 1:
        x2 = x.data.reshape(m, c_in)
        y = x2 @ weight.data[0]
        if bias is not None:
            y += bias.data
        y = y.reshape(*lead, c_out)

        def backward(g):
            g2 = g.reshape(m, c_out)
            x._accumulate((g2 @ weight.data[0].T).reshape(x.data.shape))
            weight._accumulate((x2.T @ g2)[None])
            if bias is not None:
                bias._accumulate(g2.sum(axis=0))

        return _node(y, "grouped_linear", tensors, backward)

    # Expand the grouped weight to its block-diagonal dense form: one BLAS
    # matmul beats per-group batched matmuls plus the transpose copies they
    # force, even with the zero blocks along for the ride.
    wd = np.zeros((c_in, c_out), dtype=weight.data.dtype)
    for j in range(n_groups):
        wd[j * cig : (j + 1) * cig, j * cog : (j + 1) * cog] = weight.data[j]
    x2 = x.data.reshape(m, c_in)
    y = x2 @ wd
    if bias is not None:
        y += bias.data
    y = y.reshape(*lead, c_out)

    def backward(g):
        g2 = g.reshape(m, c_out)
        x._accumulate((g2 @ wd.T).reshape(x.data.shape))
        gw_full = x2.T @ g2
        gw = np.empty_like(weight.data)
        for j in range(n_groups):
            gw[j] = gw_full[j * cig : (j + 1) * cig, j * cog : (j + 1) * cog]
        weight._accumulate(gw)
        if bias is not None:
            bias._accumulate(g2.sum(axis=0))

    return _node(y, "grouped_linear", tensors, backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0). The subgradient at exactly 0 is taken as 1 so
    parameter-free residual paths keep a live gradient through zero-valued
    activations."""
    data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data >= 0))

    return _node(data, "relu", (x,), backward, check=False)


def max_over_set(x: Tensor) -> Tensor:
    """Max-pool over the set axis (second to last). Ties route the gradient to
    the lowest index."""
    if x.data.ndim < 2:
        raise ConfigError("max_over_set: input must have a set axis")
    if x.data.shape[-2] == 0:
        raise ConfigError("max_over_set: empty set")
    argmax = x.data.argmax(axis=-2)  # first occurrence = lowest index
    data = np.take_along_axis(x.data, np.expand_dims(argmax, -2), axis=-2).squeeze(-2)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(argmax, -2), np.expand_dims(g, -2), axis=-2)
        x._accumulate(gx)

    return _node(data, "max_over_set", (x,), backward, check=False)


def mean_over_set(x: Tensor) -> Tensor:
    """Mean-pool over the set axis (second to last)."""
    if x.data.ndim < 2:
        raise ConfigError("mean_over_set: input must have a set axis")
    s = x.data.shape[-2]
    if s == 0:
        raise ConfigError("mean_over_set: empty set")
    data = x.data.mean(axis=-2)

    def backward(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g / s, -2), x.data.shape))

    return _node(data, "mean_over_set", (x,), backward)


def _concat(tensors: list[Tensor], axis: int, op: str) -> Tensor:
    if not tensors:
        raise ConfigError(f"{op}: nothing to concatenate")
    _require_same_dtype(op, *tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    return _node(data, op, tuple(tensors), backward, check=False)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the channel (last) axis."""
    return _concat(tensors, -1, "concat_channels")


def concat_rows(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the leading axis (stack rows)."""
    return _concat(tensors, 0, "concat_rows")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _node(data, "reshape", (x,), backward, check=False)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Index rows of ``x`` by an integer array; duplicates are allowed and
    their gradients accumulate.

    Args:
        x: ``(n, ...)`` tensor.
        indices: integer array of any shape with values in ``[0, n)``.

    Returns:
        Tensor of shape ``indices.shape + x.shape[1:]``.
    """
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(
            f"gather_rows: indices out of range [0, {x.data.shape[0]}) "
            f"(min {idx.min()}, max {idx.max()})"
        )
    data = x.data[idx]

    def backward(g):
        cols = int(np.prod(x.data.shape[1:])) if x.data.ndim > 1 else 1
        g2 = g.reshape(-1, cols)
        if g2.shape[0] == 0:
            x._accumulate(np.zeros_like(x.data))
            return
        # Sort-and-segment scatter-add; np.add.at is several times slower.
        flat = idx.ravel()
        order = np.argsort(flat, kind="stable")
        si = flat[order]
        starts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
        sums = np.add.reduceat(g2[order], starts, axis=0)
        gx = np.zeros((x.data.shape[0], cols), dtype=x.data.dtype)
        gx[si[starts]] = sums
        x._accumulate(gx.reshape(x.data.shape))

    return _node(data, "gather_rows", (x,), backward, check=False)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _node(data, "sum_all", (x,), backward)


def sum_adjacent(x: Tensor, k: int) -> Tensor:
    """Sum each run of ``k`` adjacent channels: ``(..., d) -> (..., d / k)``.

    The backward pass copies each output gradient into its k-wide bucket.
    """
    d = x.data.shape[-1]
    if k < 1:
        raise ConfigError(f"sum_adjacent: k must be >= 1, got {k}")
    if d % k != 0:
        raise ConfigError(f"sum_adjacent: channel count {d} not divisible by k={k}")
    lead = x.data.shape[:-1]
    data = x.data.reshape(*lead, d // k, k).sum(axis=-1)

    def backward(g):
        x._accumulate(np.repeat(g, k, axis=-1))

    return _node(data, "sum_adjacent", (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Batch normalization over the leading axis of a 2-D input.

    Train mode normalizes with biased batch statistics and folds the batch
    mean/variance into the running buffers (unbiased variance, exponential
    update with the given momentum). Eval mode normalizes with the running
    buffers. The running buffers are plain arrays mutated in place.

    Args:
        x: ``(n, d)`` input; train mode requires ``n >= 2``.
        gamma, beta: ``(d,)`` scale and shift parameters.
        running_mean, running_var: ``(d,)`` buffers.
        mode: ``"train"`` or ``"eval"``.
        update_running: set False to freeze the buffers during a train-mode
            forward (used by gradient checking).
    """
    if x.data.ndim != 2:
        raise ConfigError(f"batch_norm: expected (n, d) input, got shape {x.data.shape}")
    n, d = x.data.shape
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ConfigError("batch_norm: gamma/beta shape mismatch")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm: unknown mode {mode!r}")
    _require_same_dtype("batch_norm", x, gamma, beta)

    if mode == "train":
        if n < 2:
            raise ConfigError("batch_norm: train mode requires at least 2 rows")
        mu = x.data.mean(axis=0)
        xhat = x.data - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / n  # biased, used for normalization
        ivar = 1.0 / np.sqrt(var + eps)
        xhat *= ivar
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (n / (n - 1.0))  # unbiased for the buffer
        data = gamma.data * xhat
        data += beta.data

        def backward(g):
            dbeta = g.sum(axis=0)
            dgamma = np.einsum("ij,ij->j", g, xhat)
            dx = g - (dgamma / n) * xhat
            dx -= dbeta / n
            dx *= gamma.data * ivar
            x._accumulate(dx)
            gamma._accumulate(dgamma)
            beta._accumulate(dbeta)

    else:
        rm = running_mean.copy()
        iv = 1.0 / np.sqrt(running_var + eps)
        scale = gamma.data * iv
        data = x.data * scale
        data += beta.data - rm * scale

        def backward(g):
            x._accumulate(g * scale)
            gamma._accumulate(np.einsum("ij,ij->j", g, (x.data - rm) * iv))
            beta._accumulate(g.sum(axis=0))

    return _node(data.astype(x.data.dtype, copy=False), "batch_norm", (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes entries with probability ``p`` and
    scales survivors by ``1 / (1 - p)``; eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: p must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ConfigError(f"dropout: unknown mode {mode!r}")
    if rng is None:
        raise ConfigError("dropout: train mode needs an rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    keep /= x.data.dtype.type(1.0 - p)
    data = x.data * keep

    def backward(g):
        x._accumulate(g * keep)

    return _node(data, "dropout", (x,), backward, check=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (plain numpy, no graph)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer targets.

    Args:
        logits: ``(n, c)`` tensor.
        targets: ``(n,)`` integer class array with values in ``[0, c)``.

    Returns:
        Scalar loss tensor; its gradient is ``(softmax - onehot) / n``.
    """
    if logits.data.ndim != 2:
        raise ConfigError(f"softmax_cross_entropy: expected (n, c) logits, got {logits.data.shape}")
    n, c = logits.data.shape
    t = np.asarray(targets)
    if t.shape != (n,):
        raise ConfigError(f"softmax_cross_entropy: targets shape {t.shape}, expected ({n},)")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ConfigError("softmax_cross_entropy: target class out of range")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = np.asarray(-logp[np.arange(n), t].mean(), dtype=z.dtype)
    prob = np.exp(logp)

    def backward(g):
        gx = prob.copy()
        gx[np.arange(n), t] -= 1.0
        gx *= g / n
        logits._accumulate(gx.astype(z.dtype, copy=False))

    return _node(loss, "softmax_cross_entropy", (logits,), backward)


@dataclass
class AdamState:
    """First/second-moment buffers and the shared step counter."""

    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """One Adam update over a named parameter set, in place.

    Weight decay is coupled: ``weight_decay * param`` is added to the gradient
    before the moment updates. Gradients default to each tensor's ``.grad``.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise ConfigError(f"adam_step: no gradient for parameter {name!r}")
        g = np.asarray(g, dtype=p.data.dtype)
        if weight_decay:
            g = g + p.data.dtype.type(weight_decay) * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference gradient check."""

    max_rel_err: float
    n_checked: int
    ok: bool
    failures: list = field(default_factory=list)
    note: str = ""


def grad_check(
    fn,
    wrt: list[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_per_tensor: int | None = None,
    atol: float = 0.0,
    select: str = "random",
    eps_check: float | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of a scalar function against central
    finite differences.

    Args:
        fn: zero-argument callable that rebuilds the forward graph and returns
            a scalar Tensor. It must be deterministic in the checked inputs.
        wrt: float64 leaf tensors to differentiate with respect to.
        eps: finite-difference step, clamped to [1e-7, 1e-4].
        tol: per-element relative error bound
            ``|a - n| / max(|a|, |n|, 1e-12)``.
        rng: when given with ``max_per_tensor``, check a random subset of
            elements per tensor instead of all of them.
        atol: absolute noise floor; elements where both the analytic and the
            numeric value are at most ``atol`` in magnitude are skipped. A
            central difference of a loss L resolves nothing below roughly
            ``machine_eps * |L| / eps``, so gradients under the floor carry
            no comparable signal. 0 disables the floor.
        select: with ``max_per_tensor``, ``"random"`` samples elements via
            ``rng`` while ``"largest"`` takes the strongest analytic entries
            per tensor — the ones whose magnitude clears the difference
            quotient's noise floor on deep graphs.
        eps_check: optional second step size. An element over ``tol`` is then
            re-estimated at this step; if the two difference quotients do not
            agree with each other within ``tol`` the disagreement is numerical
            (a ReLU crossing inside the probe interval, or accumulated
            roundoff), so the element is recorded as unresolved rather than
            failed. A genuine backward bug yields step-independent quotients
            and still fails.

    Returns:
        GradCheckResult; ``ok`` is False when any enforced element exceeds
        ``tol`` or a perturbed forward produced non-finite values (recorded
        in ``note``).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"grad_check: eps {eps} outside [1e-7, 1e-4]")
    if eps_check is not None and not 1e-7 <= eps_check <= 1e-4:
        raise ConfigError(f"grad_check: eps_check {eps_check} outside [1e-7, 1e-4]")
    if select not in ("random", "largest"):
        raise ConfigError(f"grad_check: unknown selection policy {select!r}")
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ConfigError("grad_check: all checked tensors must be float64")
        if not t.requires_grad:
            raise ConfigError("grad_check: checked tensors must require grad")

    for t in wrt:
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise ConfigError("grad_check: fn must return a scalar")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt
    ]

    max_rel = 0.0
    n_checked = 0
    n_floored = 0
    n_unresolved = 0
    failures: list[tuple[int, int, float, float, float]] = []

    def quotient(flat, i, orig, step):
        flat[i] = orig + step
        f_plus = float(fn().data)
        flat[i] = orig - step
        f_minus = float(fn().data)
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * step)

    try:
        with no_grad():
            for k, t in enumerate(wrt):
                idx = np.arange(t.data.size)
                if max_per_tensor is not None and t.data.size > max_per_tensor:
                    if select == "largest":
                        mags = np.abs(analytic[k].reshape(-1))
                        idx = np.argsort(-mags)[:max_per_tensor]
                    else:
                        if rng is None:
                            raise ConfigError("grad_check: sampled checking needs an rng")
                        idx = rng.choice(t.data.size, size=max_per_tensor, replace=False)
                flat = t.data.reshape(-1)
                for i in idx:
                    orig = flat[i]
                    numeric = quotient(flat, i, orig, eps)
                    a = float(analytic[k].reshape(-1)[i])
                    n_checked += 1
                    if max(abs(a), abs(numeric)) <= atol:
                        n_floored += 1
                        continue
                    rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
                    if rel > tol and eps_check is not None:
                        second = quotient(flat, i, orig, eps_check)
                        spread = abs(numeric - second) / max(
                            abs(numeric), abs(second), 1e-12
                        )
                        if spread > tol:
                            n_unresolved += 1
                            continue
                    if rel > max_rel:
                        max_rel = rel
                    if rel > tol:
                        failures.append((k, int(i), a, numeric, rel))
    except NonFiniteError as e:
        return GradCheckResult(
            max_rel_err=float("inf"),
            n_checked=n_checked,
            ok=False,
            failures=failures,
            note=f"non-finite forward during perturbation: {e}",
        )
    notes = []
    if n_floored:
        notes.append(f"{n_floored} elements under the atol={atol} floor")
    if n_unresolved:
        notes.append(f"{n_unresolved} elements unresolved by finite differences")
    return GradCheckResult(
        max_rel_err=max_rel, n_checked=n_checked, ok=max_rel <= tol,
        failures=failures, note="; ".join(notes),
    )


def count_graph(root: Tensor) -> tuple[int, int]:
    """Count (nodes, edges) of the recorded graph reachable from ``root``."""
    seen: set[int] = set()
    stack = [root]
    nodes = 0
    edges = 0
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes += 1
        edges += len(node._parents)
        stack.extend(p for p in node._parents if id(p) not in seen)
    return nodes, edges
