"""Dense tensors with reverse-mode automatic differentiation.

Storage and raw arithmetic are delegated to numpy; the gradient tape,
the operation set, and all backward rules live here. Tensors are 32-bit
by default; verification suites construct 64-bit tensors explicitly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import fft as _spfft

DEFAULT_DTYPE = np.float32

# Flipped on in tests that exercise the no-NaN contract; off by default
# because the check touches every element of every op output.
nan_guard = False


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# allocation accounting (peak live tensor bytes; used by the benchmark CLI)

_live_bytes = 0
_peak_bytes = 0


def reset_peak_memory() -> None:
    global _peak_bytes
    _peak_bytes = _live_bytes


def peak_memory_bytes() -> int:
    return _peak_bytes


def live_memory_bytes() -> int:
    return _live_bytes


# ---------------------------------------------------------------------------
# grad mode

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array participating in the gradient tape.

    Data is immutable by convention once the tensor has been consumed by
    an op; in-place mutation is reserved for the optimizer, which runs
    strictly between forward/backward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        global _live_bytes, _peak_bytes
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._consumed = False
        _live_bytes += arr.nbytes
        if _live_bytes > _peak_bytes:
            _peak_bytes = _live_bytes

    def __del__(self):
        global _live_bytes
        try:
            _live_bytes -= self.data.nbytes
        except Exception:
            pass

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(out_data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording parents/backward when grads are live."""
    if nan_guard and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("op produced non-finite values")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def custom_op(out_data: np.ndarray, parents, backward_fn) -> Tensor:
    """Public hook for modules that define ops with hand-written backwards."""
    return _result(out_data, parents, backward_fn)


class Tape:
    """The recorded computation reachable from one scalar loss.

    Nodes are in topological order (inputs before consumers). A tape is
    consumed by exactly one backward pass.
    """

    def __init__(self, nodes):
        self.nodes = nodes


def trace(root: Tensor) -> Tape:
    """Topologically ordered list of tensors reachable from ``root``."""
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
    return Tape(order)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    loss._consumed = True
    tape = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if not p.requires_grad and p._backward_fn is None:
                continue  # constant leaf: no one downstream wants this gradient
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to ``shape`` (row-vector-over-rows only)."""
    if g.shape == tuple(shape):
        return g
    return g.sum(axis=0).reshape(shape)


def _check_addmul_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return  # row vector broadcast over rows
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_addmul_shapes(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_addmul_shapes(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_addmul_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (g * bd, _unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b),
                   lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.full(shape, g, dtype=a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def mean_rows(a: Tensor) -> Tensor:
    """[L x d] -> [d], mean over rows (sequence pooling)."""
    L = a.shape[0]
    return _result(a.data.mean(axis=0), (a,),
                   lambda g: (np.repeat(g[None, :], L, axis=0) / L,))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ {a.shape} vs {b.shape}")
    da = a.shape[1]
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :da], g[:, da:]))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)
    return _result(a.data[:, start:stop].copy(), (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)
    return _result(a.data[start:stop].copy(), (a,), bwd)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _result(a.data[idx].copy(), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x2)))

    def bwd(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)
    return _result(0.5 * x * (1.0 + t), (a,), bwd)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with optional additive mask (may contain -inf).

    Rows that are masked everywhere come back as all zeros; the count of
    such rows is available to callers via the returned array having zero
    row sums (attention patterns guarantee self-attendance, so this only
    fires in deliberately degenerate inputs).
    """
    z = x.data if mask is None else x.data + mask
    finite = np.isfinite(z)
    any_finite = finite.any(axis=1, keepdims=True)
    zmax = np.max(np.where(finite, z, -np.inf), axis=1, keepdims=True,
                  initial=-np.inf)
    zmax = np.where(any_finite, zmax, 0.0)
    e = np.exp(np.where(finite, z - zmax, -np.inf))
    e = np.where(finite, e, 0.0)
    s = e.sum(axis=1, keepdims=True)
    p = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    p = p.astype(x.dtype, copy=False)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)
    return _result(p, (x,), bwd)


def fully_masked_rows(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Boolean flags of rows where the additive mask kills every entry."""
    return ~np.isfinite(x + mask).any(axis=1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        ggain = (g * xhat).sum(axis=0)
        gbias = g.sum(axis=0)
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return (gx, ggain, gbias)
    return _result(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)
    return _result(table.data[ids].copy(), (table,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy of [N x V] logits against int targets."""
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = -logp[np.arange(n), targets].mean()

    def bwd(g):
        p = ez / sez
        p[np.arange(n), targets] -= 1.0
        return (g * p / n,)
    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Train-time Bernoulli mask with inverted scaling; identity at eval."""
    if not train or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# FFT convolution


def _fft_length(L: int) -> int:
    n = 1
    while n < 2 * L - 1:
        n *= 2
    return n


# scipy's pocketfft keeps single precision single (complex64 intermediates),
# halving memory traffic on the long-sequence path; numpy's always promotes
# to double. Dtype in == dtype out either way.
def _rfft(x: np.ndarray, n: int, axis: int = -1) -> np.ndarray:
    return _spfft.rfft(x, n, axis=axis)


def _irfft(x: np.ndarray, n: int, axis: int = -1) -> np.ndarray:
    return _spfft.irfft(x, n, axis=axis)


def fft_conv(kernel: np.ndarray, signal: np.ndarray) -> np.ndarray:
    """Causal 1-D convolution of equal-length arrays via FFT.

    out[k] = sum_{i<=k} kernel[i] * signal[k-i]. Zero-pads to the next
    power of two >= 2L-1 so one radix-2 transform length covers any L.
    """
    kernel = np.asarray(kernel)
    signal = np.asarray(signal)
    if kernel.shape != signal.shape or kernel.ndim != 1:
        raise DimensionError(
            f"fft_conv: lengths differ, kernel {kernel.shape} vs signal {signal.shape}")
    L = kernel.shape[0]
    n = _fft_length(L)
    out = _irfft(_rfft(kernel, n) * _rfft(signal, n), n)[:L]
    return out.astype(np.result_type(kernel.dtype, signal.dtype), copy=False)


def direct_conv(kernel: np.ndarray, signal: np.ndarray) -> np.ndarray:
    """O(L^2) reference convolution; the oracle for fft_conv."""
    L = len(kernel)
    out = np.zeros(L, dtype=np.result_type(kernel.dtype, signal.dtype))
    for k in range(L):
        for i in range(k + 1):
            out[k] += kernel[i] * signal[k - i]
    return out


def causal_conv_channels(kernels: Tensor, u: Tensor,
                         kernel_fft: np.ndarray | None = None) -> Tensor:
    """Per-channel causal convolution: kernels [C x L], u [L x C] -> [L x C].

    Differentiable w.r.t. both arguments; gradients are causal
    correlations, also computed via FFT. ``kernel_fft`` lets callers with a
    fixed kernel (frozen SSMs) reuse its transform across passes.
    """
    C, L = kernels.shape
    if u.shape != (L, C):
        raise DimensionError(f"causal_conv_channels: kernels {kernels.shape}, u {u.shape}")
    n = _fft_length(L)
    kf = _rfft(kernels.data, n, axis=1) if kernel_fft is None else kernel_fft
    uf = _rfft(u.data.T, n, axis=1)                 # [C, nf]
    y = _irfft(kf * uf, n, axis=1)[:, :L].T         # [L, C]
    out_dtype = np.result_type(kernels.dtype, u.dtype)
    # A constant kernel (no grad, not produced by an op) never receives its
    # gradient, so skip that inverse transform entirely.
    need_gk = kernels.requires_grad or kernels._backward_fn is not None

    def bwd(g):
        gf = _rfft(g.T, n, axis=1)                  # [C, nf]
        # d/du: correlation with the kernel; d/dk: correlation with u.
        gu = _irfft(np.conj(kf) * gf, n, axis=1)[:, :L].T
        gk = None
        if need_gk:
            gk = _irfft(np.conj(uf) * gf, n, axis=1)[:, :L].astype(
                kernels.dtype, copy=False)
        return (gk, gu.astype(u.dtype, copy=False))
    return _result(y.astype(out_dtype, copy=False), (kernels, u), bwd)


# ---------------------------------------------------------------------------
# constructors


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 1.0,
          requires_grad: bool = False, dtype=None) -> Tensor:
    arr = rng.standard_normal(shape) * std
    return Tensor(arr.astype(dtype or DEFAULT_DTYPE), requires_grad=requires_grad)
