"""State-space pipeline: structured init -> bilinear discretization ->
kernel materialization -> execution by recurrent scan or FFT convolution.

The state matrices (A, B, P) are shared across embedding channels; each
channel owns its output row C[ch] and step size delta[ch], giving one
kernel family with per-channel decay profiles. A, B, P are never trained;
C and log_delta are trainable only when ``trainable=True``.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NumericalError(RuntimeError):
    def __init__(self, msg: str, cond: float | None = None):
        super().__init__(msg if cond is None else f"{msg} (condition estimate {cond:.3e})")
        self.cond = cond


class StabilityError(RuntimeError):
    pass


@dataclass
class ContinuousSSM:
    """Continuous-time parameters (A, B, C, delta) plus the low-rank
    correction P retained for inspection."""
    A: np.ndarray            # [d_s, d_s]
    B: np.ndarray            # [d_s]
    P: np.ndarray            # [d_s]
    C: Tensor                # [channels, d_s]
    log_delta: Tensor        # [channels]
    trainable: bool = False
    _cache: dict = field(default_factory=dict, repr=False)
    _cache_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def d_s(self) -> int:
        return self.A.shape[0]

    @property
    def channels(self) -> int:
        return self.C.shape[0]

    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta.data.astype(np.float64))

    def invalidate_cache(self) -> None:
        with self._cache_lock:
            self._cache.clear()


@dataclass
class DiscreteSSM:
    """Bilinear-discretized recurrence for one channel."""
    A_bar: np.ndarray        # [d_s, d_s]
    B_bar: np.ndarray        # [d_s]
    C_bar: np.ndarray        # [d_s]


@dataclass
class SSMKernel:
    """Impulse-response kernel(s), one row per channel."""
    K_bar: np.ndarray        # [channels, L]
    length: int


def hippo_matrices(d_s: int):
    """The structured (A, P, B) triple: A = A^(d_s) - P P^T."""
    if d_s < 1:
        raise ValueError(f"d_s must be >= 1, got {d_s}")
    i = np.arange(d_s, dtype=np.float64)
    s = np.sqrt(i + 0.5)
    base = s[:, None] * s[None, :]
    A_n = np.where(np.eye(d_s, dtype=bool), -0.5,
                   -np.sign(i[:, None] - i[None, :]) * base)
    P = s.copy()
    B = np.sqrt(2.0 * i + 1.0)
    A = A_n - np.outer(P, P)
    return A, P, B


def hippo_init(d_s: int, channels: int, seed: int,
               trainable: bool = False, dtype=None) -> ContinuousSSM:
    """Structured-init SSM: deterministic A/B/P, random per-channel C,
    log-uniform per-channel step sizes over [1e-3, 1e-1]."""
    dtype = dtype or T.DEFAULT_DTYPE
    A, P, B = hippo_matrices(d_s)
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((channels, d_s)) / np.sqrt(d_s)
    log_delta = rng.uniform(np.log(1e-3), np.log(1e-1), size=channels)
    return ContinuousSSM(
        A=A.astype(dtype), B=B.astype(dtype), P=P.astype(dtype),
        C=Tensor(C.astype(dtype), requires_grad=trainable),
        log_delta=Tensor(log_delta.astype(dtype), requires_grad=trainable),
        trainable=trainable,
    )


def _bilinear(A: np.ndarray, B: np.ndarray, delta: float):
    d_s = A.shape[0]
    I = np.eye(d_s)
    M = I - (delta / 2.0) * A
    try:
        A_bar = np.linalg.solve(M, I + (delta / 2.0) * A)
        B_bar = np.linalg.solve(M, delta * B)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"bilinear solve failed: {exc}", float(np.linalg.cond(M)))
    if not (np.all(np.isfinite(A_bar)) and np.all(np.isfinite(B_bar))):
        raise NumericalError("bilinear solve produced non-finite values",
                             float(np.linalg.cond(M)))
    return A_bar, B_bar


def discretize(ssm: ContinuousSSM, channel: int) -> DiscreteSSM:
    """Bilinear discretization at the given channel's step size."""
    delta = float(ssm.delta()[channel])
    A_bar, B_bar = _bilinear(ssm.A.astype(np.float64), ssm.B.astype(np.float64), delta)
    return DiscreteSSM(A_bar=A_bar, B_bar=B_bar,
                       C_bar=ssm.C.data[channel].astype(np.float64))


def materialize_kernel(disc: DiscreteSSM, L: int) -> SSMKernel:
    """K[i] = C_bar A_bar^i B_bar by the state recursion (no matrix powers)."""
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    k = np.empty(L, dtype=np.float64)
    v = disc.B_bar.copy()
    with np.errstate(over="ignore", invalid="ignore"):  # blow-up detected below
        for i in range(L):
            k[i] = disc.C_bar @ v
            v = disc.A_bar @ v
            if not np.all(np.isfinite(v)):
                raise StabilityError(
                    f"state blew up at step {i + 1}; spectral radius >= 1?")
    return SSMKernel(K_bar=k[None, :], length=L)


def scan(disc: DiscreteSSM, u: np.ndarray) -> np.ndarray:
    """Run the recurrence x_k = A_bar x_{k-1} + B_bar u_k, y_k = C_bar x_k
    from zero initial state."""
    u = np.asarray(u)
    if not np.issubdtype(u.dtype, np.floating):
        u = u.astype(np.float64)
    L = u.shape[0]
    y = np.empty(L, dtype=u.dtype)
    x = np.zeros(disc.B_bar.shape[0], dtype=u.dtype)
    A_bar = disc.A_bar.astype(u.dtype, copy=False)
    B_bar = disc.B_bar.astype(u.dtype, copy=False)
    C_bar = disc.C_bar.astype(u.dtype, copy=False)
    for k in range(L):
        x = A_bar @ x + B_bar * u[k]
        y[k] = C_bar @ x
    return y


def _bilinear_all(ssm: ContinuousSSM, with_tangents: bool):
    """Stacked per-channel discretization in float64; optionally also the
    derivatives of (A_bar, B_bar) w.r.t. delta for the trainable path."""
    A = ssm.A.astype(np.float64)
    B = ssm.B.astype(np.float64)
    deltas = ssm.delta()
    d_s, C = A.shape[0], deltas.shape[0]
    I = np.eye(d_s)
    M = I[None] - 0.5 * deltas[:, None, None] * A[None]
    N = I[None] + 0.5 * deltas[:, None, None] * A[None]
    A_bar = np.linalg.solve(M, N)
    B_bar = np.linalg.solve(M, (deltas[:, None] * B[None]).reshape(C, d_s, 1))[..., 0]
    if not (np.all(np.isfinite(A_bar)) and np.all(np.isfinite(B_bar))):
        raise NumericalError("batched bilinear solve produced non-finite values")
    if not with_tangents:
        return A_bar, B_bar, None, None
    half_A = 0.5 * A[None].repeat(C, axis=0)
    Minv_halfA = np.linalg.solve(M, half_A)
    dA_bar = Minv_halfA @ (I[None] + A_bar)
    rhs = (B[None, :] + (0.5 * A[None] @ B_bar[..., None])[..., 0])
    dB_bar = np.linalg.solve(M, rhs[..., None])[..., 0]
    return A_bar, B_bar, dA_bar, dB_bar


def _kernel_trajectories(A_bar, B_bar, L, dA_bar=None, dB_bar=None):
    """State trajectories v_i = A_bar^i B_bar for all channels, plus the
    delta-tangent trajectories when requested."""
    C, d_s = B_bar.shape
    V = np.empty((C, L, d_s), dtype=np.float64)
    v = B_bar[..., None].copy()                       # [C, d_s, 1]
    tangents = dA_bar is not None
    if tangents:
        Tv = np.empty((C, L, d_s), dtype=np.float64)
        t = dB_bar[..., None].copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(L):
            V[:, i] = v[..., 0]
            if tangents:
                Tv[:, i] = t[..., 0]
                t = np.matmul(A_bar, t) + np.matmul(dA_bar, v)
            v = np.matmul(A_bar, v)                   # batched over channels
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(V))):
        raise StabilityError(f"state blew up within {L} steps")
    return (V, Tv) if tangents else (V, None)


def ssm_kernel(ssm: ContinuousSSM, L: int) -> Tensor:
    """All-channel kernel [channels x L].

    Frozen SSMs compute it once per length and cache it; the cached kernel
    is a constant on the tape. Trainable SSMs rebuild it every call and
    the result carries gradients to C (reverse mode) and log_delta
    (analytic forward-mode tangent folded into the backward closure).
    """
    dtype = ssm.C.dtype
    if not ssm.trainable:
        key = (L, np.dtype(dtype).name)
        with ssm._cache_lock:
            cached = ssm._cache.get(key)
        if cached is None:
            A_bar, B_bar, _, _ = _bilinear_all(ssm, with_tangents=False)
            V, _ = _kernel_trajectories(A_bar, B_bar, L)
            K = np.einsum("cs,cls->cl", ssm.C.data.astype(np.float64), V)
            cached = K.astype(dtype)
            with ssm._cache_lock:
                ssm._cache[key] = cached
        return Tensor(cached)

    A_bar, B_bar, dA_bar, dB_bar = _bilinear_all(ssm, with_tangents=True)
    V, Tv = _kernel_trajectories(A_bar, B_bar, L, dA_bar, dB_bar)
    C64 = ssm.C.data.astype(np.float64)
    K = np.einsum("cs,cls->cl", C64, V)
    dK_ddelta = np.einsum("cs,cls->cl", C64, Tv)
    deltas = ssm.delta()

    def bwd(g):
        g64 = g.astype(np.float64)
        gC = np.einsum("cl,cls->cs", g64, V)
        glog = deltas * np.einsum("cl,cl->c", g64, dK_ddelta)
        return (gC.astype(ssm.C.dtype, copy=False),
                glog.astype(ssm.log_delta.dtype, copy=False))
    return T.custom_op(K.astype(dtype), (ssm.C, ssm.log_delta), bwd)


def ssm_forward(ssm: ContinuousSSM, X: Tensor) -> Tensor:
    """Each embedding channel run through its own kernel by causal FFT
    convolution; [L x d] -> [L x d] with d == channels."""
    L, d = X.shape
    if d != ssm.channels:
        raise T.DimensionError(
            f"ssm_forward: input has {d} channels, SSM has {ssm.channels}")
    K = ssm_kernel(ssm, L)
    kf = None
    if not ssm.trainable:
        key = (L, np.dtype(ssm.C.dtype).name, "fft")
        with ssm._cache_lock:
            kf = ssm._cache.get(key)
        if kf is None:
            kf = T._rfft(K.data, T._fft_length(L), axis=1)
            with ssm._cache_lock:
                ssm._cache[key] = kf
    return T.causal_conv_channels(K, X, kernel_fft=kf)


def spectral_radius_estimate(M: np.ndarray, squarings: int = 30) -> float:
    """Gelfand estimate rho(M) ~= ||M^(2^k)||^(1/2^k) by repeated squaring,
    with renormalization to dodge under/overflow."""
    M = M.astype(np.float64)
    log_scale = 0.0  # log of the factor pulled out of M^(2^j) so far
    for _ in range(squarings):
        norm = float(np.linalg.norm(M, 2))
        if norm == 0.0:
            return 0.0
        Mn = M / norm
        M = Mn @ Mn
        log_scale = 2.0 * (log_scale + np.log(norm))
    final = float(np.linalg.norm(M, 2))
    return float(np.exp((log_scale + np.log(final + 1e-300)) / 2 ** squarings))


def dump_kernel_csv(kernel: SSMKernel, path) -> None:
    """Write the kernel as ``channel,index,value`` rows for offline plots."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "index", "value"])
        for ch in range(kernel.K_bar.shape[0]):
            for i in range(kernel.length):
                w.writerow([ch, i, repr(float(kernel.K_bar[ch, i]))])
