"""The hybrid model: embedding, a stack of global/local layers, task head.

The global layer fuses a local-attention branch with a state-space branch:

    X_local  = Local(LN(X))
    X_global = SSM(LN(X))
    X_a      = [LN(X_local), LN(X_global)] W_combine + X
    Y        = FFN(LN(X_a)) + X_a

Local layers are plain pre-norm blocks with the attention replaced by a
locality pattern. There is no positional embedding anywhere; order
information enters only through the SSM recurrence (and causal masks).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as attn
from . import ssm as S
from . import tensor as T
from .tensor import Tensor


class CheckpointError(RuntimeError):
    pass


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class FFNParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


@dataclass
class GlobalLayer:
    ln_in: LayerNormParams
    ln_local: LayerNormParams
    ln_global: LayerNormParams
    ln_ffn: LayerNormParams
    local: attn.AttentionParams
    pattern: attn.LocalityPattern
    ssm: S.ContinuousSSM
    W_combine: Tensor            # [2d, d]: concat(local, global) -> d
    ffn: FFNParams


@dataclass
class LocalLayer:
    ln_in: LayerNormParams
    ln_ffn: LayerNormParams
    local: attn.AttentionParams
    pattern: attn.LocalityPattern
    ffn: FFNParams


@dataclass
class SSMOnlyLayer:
    """Baseline layer used by the separation harness: SSM in place of
    attention inside a pre-norm block."""
    ln_in: LayerNormParams
    ln_ffn: LayerNormParams
    ssm: S.ContinuousSSM
    W_out: Tensor                # [d, d] projection after the SSM
    ffn: FFNParams


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 128
    depth: int = 4
    n_heads: int = 4
    d_s: int = 64
    pattern_kind: str = "window"      # full | window | chunk
    window_w: int = 8
    chunk_c: int = 16
    causal: bool = True
    placement: str = "bottom-1"       # bottom-K | all | top-1 | none
    variant: str = "spade"            # spade | attn_only | ssm_only
    ffn_mult: float = 4.0
    dropout: float = 0.1
    tie_embedding: bool = True
    n_classes: int = 0                # >0 adds a pooled classifier head
    ssm_trainable: bool = False
    dtype: str = "float32"

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def ffn_hidden(self) -> int:
        return max(1, int(round(self.ffn_mult * self.d)))


def parse_placement(placement: str, depth: int) -> set[int]:
    """Which layer indices are global layers."""
    if placement == "none":
        return set()
    if placement == "all":
        return set(range(depth))
    if placement == "top-1":
        return {depth - 1}
    if placement.startswith("bottom-"):
        k = int(placement.split("-", 1)[1])
        if k > depth:
            raise ValueError(f"placement {placement} exceeds depth {depth}")
        return set(range(k))
    raise ValueError(f"unknown placement {placement!r}")


@dataclass
class SpadeModel:
    config: ModelConfig
    embedding: Tensor
    layers: list
    head: Tensor | None          # untied LM head or classifier weight
    global_placement: set[int] = field(default_factory=set)

    def parameters(self):
        """(name, tensor) pairs in declaration order; includes frozen SSM
        buffers so checkpoints reload bit-exactly."""
        out = [("embedding", self.embedding)]
        for li, layer in enumerate(self.layers):
            pre = f"layer{li}"
            if isinstance(layer, GlobalLayer):
                for tag in ("ln_in", "ln_local", "ln_global", "ln_ffn"):
                    ln = getattr(layer, tag)
                    out += [(f"{pre}.{tag}.gain", ln.gain), (f"{pre}.{tag}.bias", ln.bias)]
                out += self._attn_params(pre, layer.local)
                out += self._ssm_params(pre, layer.ssm)
                out.append((f"{pre}.W_combine", layer.W_combine))
                out += self._ffn_params(pre, layer.ffn)
            elif isinstance(layer, LocalLayer):
                for tag in ("ln_in", "ln_ffn"):
                    ln = getattr(layer, tag)
                    out += [(f"{pre}.{tag}.gain", ln.gain), (f"{pre}.{tag}.bias", ln.bias)]
                out += self._attn_params(pre, layer.local)
                out += self._ffn_params(pre, layer.ffn)
            else:
                for tag in ("ln_in", "ln_ffn"):
                    ln = getattr(layer, tag)
                    out += [(f"{pre}.{tag}.gain", ln.gain), (f"{pre}.{tag}.bias", ln.bias)]
                out += self._ssm_params(pre, layer.ssm)
                out.append((f"{pre}.W_out", layer.W_out))
                out += self._ffn_params(pre, layer.ffn)
        if self.head is not None:
            out.append(("head", self.head))
        return out

    @staticmethod
    def _attn_params(pre, p):
        return [(f"{pre}.attn.W_q", p.W_q), (f"{pre}.attn.W_k", p.W_k),
                (f"{pre}.attn.W_v", p.W_v), (f"{pre}.attn.W_o", p.W_o)]

    @staticmethod
    def _ssm_params(pre, m):
        return [(f"{pre}.ssm.A", Tensor(m.A)), (f"{pre}.ssm.B", Tensor(m.B)),
                (f"{pre}.ssm.P", Tensor(m.P)), (f"{pre}.ssm.C", m.C),
                (f"{pre}.ssm.log_delta", m.log_delta)]

    @staticmethod
    def _ffn_params(pre, f):
        return [(f"{pre}.ffn.W1", f.W1), (f"{pre}.ffn.b1", f.b1),
                (f"{pre}.ffn.W2", f.W2), (f"{pre}.ffn.b2", f.b2)]

    def trainable_parameters(self):
        return [(n, t) for n, t in self.parameters() if t.requires_grad]

    def trainable_count(self) -> int:
        return sum(t.data.size for _, t in self.trainable_parameters())

    def ssm_modules(self):
        return [ly.ssm for ly in self.layers if hasattr(ly, "ssm")]


# ---------------------------------------------------------------------------
# construction


def _init_ln(d, dtype):
    return LayerNormParams(gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                           bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True))


def _init_ffn(d, hidden, rng, dtype):
    return FFNParams(
        W1=Tensor((rng.standard_normal((d, hidden)) / math.sqrt(d)).astype(dtype),
                  requires_grad=True),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        W2=Tensor((rng.standard_normal((hidden, d)) / math.sqrt(hidden)).astype(dtype),
                  requires_grad=True),
        b2=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )


def build_model(cfg: ModelConfig, seed: int) -> SpadeModel:
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype()
    d = cfg.d
    pattern = attn.LocalityPattern(kind=cfg.pattern_kind, window_w=cfg.window_w,
                                   chunk_c=cfg.chunk_c, causal=cfg.causal)
    if cfg.variant == "ssm_only":
        globals_at: set[int] = set()
    elif cfg.variant == "attn_only":
        globals_at = set()
    else:
        globals_at = parse_placement(cfg.placement, cfg.depth)

    embedding = Tensor((rng.standard_normal((cfg.vocab_size, d)) / math.sqrt(d)).astype(dtype),
                       requires_grad=True)
    layers = []
    for li in range(cfg.depth):
        if cfg.variant == "ssm_only":
            m = S.hippo_init(cfg.d_s, d, seed=int(rng.integers(2 ** 31)),
                             trainable=cfg.ssm_trainable, dtype=dtype)
            layers.append(SSMOnlyLayer(
                ln_in=_init_ln(d, dtype), ln_ffn=_init_ln(d, dtype), ssm=m,
                W_out=Tensor((rng.standard_normal((d, d)) / math.sqrt(d)).astype(dtype),
                             requires_grad=True),
                ffn=_init_ffn(d, cfg.ffn_hidden(), rng, dtype)))
        elif li in globals_at:
            m = S.hippo_init(cfg.d_s, d, seed=int(rng.integers(2 ** 31)),
                             trainable=cfg.ssm_trainable, dtype=dtype)
            Wc = rng.standard_normal((2 * d, d)) / math.sqrt(2 * d)
            Wc[d:] *= 0.1  # SSM half starts small: early training ~ local-only
            layers.append(GlobalLayer(
                ln_in=_init_ln(d, dtype), ln_local=_init_ln(d, dtype),
                ln_global=_init_ln(d, dtype), ln_ffn=_init_ln(d, dtype),
                local=attn.init_attention(d, cfg.n_heads, rng, dtype),
                pattern=pattern, ssm=m,
                W_combine=Tensor(Wc.astype(dtype), requires_grad=True),
                ffn=_init_ffn(d, cfg.ffn_hidden(), rng, dtype)))
        else:
            layers.append(LocalLayer(
                ln_in=_init_ln(d, dtype), ln_ffn=_init_ln(d, dtype),
                local=attn.init_attention(d, cfg.n_heads, rng, dtype),
                pattern=pattern,
                ffn=_init_ffn(d, cfg.ffn_hidden(), rng, dtype)))

    head = None
    if cfg.n_classes > 0:
        head = Tensor((rng.standard_normal((d, cfg.n_classes)) / math.sqrt(d)).astype(dtype),
                      requires_grad=True)
    elif not cfg.tie_embedding:
        head = Tensor((rng.standard_normal((d, cfg.vocab_size)) / math.sqrt(d)).astype(dtype),
                      requires_grad=True)
    return SpadeModel(config=cfg, embedding=embedding, layers=layers, head=head,
                      global_placement=globals_at)


def configure_globals(model: SpadeModel, placement: str, seed: int) -> SpadeModel:
    """Rebuild the layer stack with a different global-layer placement."""
    parse_placement(placement, model.config.depth)  # validate before building
    cfg = replace(model.config, placement=placement)
    return build_model(cfg, seed)


# ---------------------------------------------------------------------------
# forward


def _ffn_forward(ffn: FFNParams, x: Tensor, drop: float, rng, train: bool) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, ffn.W1), ffn.b1))
    h = T.dropout(h, drop, rng, train)
    return T.add(T.matmul(h, ffn.W2), ffn.b2)


def _combine(a: Tensor, b: Tensor, W: Tensor) -> Tensor:
    """[a | b] @ W without materializing the concatenation; W is [2d x d]."""
    d = a.shape[1]
    Wa, Wb = W.data[:d], W.data[d:]

    def bwd(g):
        gW = np.empty_like(W.data)
        np.matmul(a.data.T, g, out=gW[:d])
        np.matmul(b.data.T, g, out=gW[d:])
        return (g @ Wa.T, g @ Wb.T, gW)
    return T.custom_op(a.data @ Wa + b.data @ Wb, (a, b, W), bwd)


def global_layer_forward(layer: GlobalLayer, X: Tensor, drop: float = 0.0,
                         rng=None, train: bool = False) -> Tensor:
    ln_x = T.layer_norm(X, layer.ln_in.gain, layer.ln_in.bias)  # shared by both branches
    x_local = attn.local_attention(ln_x, layer.local, layer.pattern)
    x_local = T.dropout(x_local, drop, rng, train)
    x_global = S.ssm_forward(layer.ssm, ln_x)
    x_a = T.add(_combine(
        T.layer_norm(x_local, layer.ln_local.gain, layer.ln_local.bias),
        T.layer_norm(x_global, layer.ln_global.gain, layer.ln_global.bias),
        layer.W_combine), X)
    y = _ffn_forward(layer.ffn, T.layer_norm(x_a, layer.ln_ffn.gain, layer.ln_ffn.bias),
                     drop, rng, train)
    return T.add(y, x_a)


def local_layer_forward(layer: LocalLayer, X: Tensor, drop: float = 0.0,
                        rng=None, train: bool = False) -> Tensor:
    a = attn.local_attention(T.layer_norm(X, layer.ln_in.gain, layer.ln_in.bias),
                             layer.local, layer.pattern)
    a = T.dropout(a, drop, rng, train)
    x_a = T.add(a, X)
    y = _ffn_forward(layer.ffn, T.layer_norm(x_a, layer.ln_ffn.gain, layer.ln_ffn.bias),
                     drop, rng, train)
    return T.add(y, x_a)


def ssm_layer_forward(layer: SSMOnlyLayer, X: Tensor, drop: float = 0.0,
                      rng=None, train: bool = False) -> Tensor:
    g = S.ssm_forward(layer.ssm, T.layer_norm(X, layer.ln_in.gain, layer.ln_in.bias))
    g = T.dropout(T.matmul(T.gelu(g), layer.W_out), drop, rng, train)
    x_a = T.add(g, X)
    y = _ffn_forward(layer.ffn, T.layer_norm(x_a, layer.ln_ffn.gain, layer.ln_ffn.bias),
                     drop, rng, train)
    return T.add(y, x_a)


def model_forward(model: SpadeModel, tokens: np.ndarray, mode: str = "lm",
                  train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """lm -> [L x vocab] next-token logits; classify -> [n_classes] from
    mean-pooled final states."""
    cfg = model.config
    drop = cfg.dropout if train else 0.0
    if train and drop > 0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")
    X = T.embedding(model.embedding, tokens)
    for layer in model.layers:
        if isinstance(layer, GlobalLayer):
            X = global_layer_forward(layer, X, drop, rng, train)
        elif isinstance(layer, LocalLayer):
            X = local_layer_forward(layer, X, drop, rng, train)
        else:
            X = ssm_layer_forward(layer, X, drop, rng, train)
    if mode == "classify":
        if cfg.n_classes <= 0:
            raise ValueError("model has no classifier head")
        pooled = T.mean_rows(X)
        row = T.custom_op(pooled.data[None, :], (pooled,), lambda g: (g[0],))
        logits = T.matmul(row, model.head)
        return T.custom_op(logits.data[0], (logits,), lambda g: (g[None, :],))
    if cfg.tie_embedding:
        return T.matmul(X, T.transpose(model.embedding))
    return T.matmul(X, model.head)


# ---------------------------------------------------------------------------
# checkpoint format: b"SPADE\0" | u16 version | u32 metadata length |
# metadata text (key=value lines) | shape table | raw LE float32 params

MAGIC = b"SPADE\x00"
VERSION = 1


def save_checkpoint(model: SpadeModel, path) -> None:
    cfg = model.config
    meta_lines = [f"{k}={v}" for k, v in vars(cfg).items()]
    meta = ("\n".join(meta_lines) + "\n").encode("utf-8")
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.data.ndim))
        for dim in t.data.shape:
            buf.write(struct.pack("<I", dim))
    for _, t in params:
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


_META_TYPES = {
    "vocab_size": int, "d": int, "depth": int, "n_heads": int, "d_s": int,
    "pattern_kind": str, "window_w": int, "chunk_c": int,
    "causal": lambda s: s == "True", "placement": str, "variant": str,
    "ffn_mult": float, "dropout": float, "tie_embedding": lambda s: s == "True",
    "n_classes": int, "ssm_trainable": lambda s: s == "True", "dtype": str,
}


def load_checkpoint(path) -> SpadeModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if len(raw) < 12 or view[:6] != MAGIC:
        raise CheckpointError("bad magic: not a model checkpoint")
    (version,) = struct.unpack_from("<H", raw, 6)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    off = 12
    if off + meta_len > len(raw):
        raise CheckpointError("truncated metadata block")
    meta = {}
    for line in raw[off:off + meta_len].decode("utf-8").splitlines():
        if line:
            k, v = line.split("=", 1)
            meta[k] = v
    off += meta_len
    try:
        cfg = ModelConfig(**{k: _META_TYPES[k](v) for k, v in meta.items()})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad metadata: {exc}")
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    shapes = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        ndim = raw[off]
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        shapes.append((name, dims))

    model = build_model(cfg, seed=0)
    params = model.parameters()
    if len(params) != count:
        raise CheckpointError(f"parameter count mismatch: file {count}, model {len(params)}")
    dtype = cfg.np_dtype()
    for (name, t), (fname, fshape) in zip(params, shapes):
        if name != fname or tuple(t.data.shape) != tuple(fshape):
            raise CheckpointError(
                f"shape table mismatch at {fname}: file {fshape}, model {name} {t.data.shape}")
        n = int(np.prod(fshape)) if fshape else 1
        end = off + 4 * n
        if end > len(raw):
            raise CheckpointError("truncated parameter data")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(fshape)
        t.data = arr.astype(dtype)
        off = end
    # parameters() wraps the SSM A/B/P numpy buffers in fresh Tensors, so
    # the loop above never touched the modules themselves; copy them in.
    _restore_ssm_buffers(model, shapes, raw)
    for m in model.ssm_modules():
        m.invalidate_cache()
    return model


def _restore_ssm_buffers(model: SpadeModel, shapes, raw) -> None:
    # Recompute offsets for the flat float32 section.
    header = 12
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    off = header + meta_len + 4
    for name, dims in shapes:
        off += 2 + len(name.encode("utf-8")) + 1 + 4 * len(dims)
    offsets = {}
    for name, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        offsets[name] = (off, dims)
        off += 4 * n
    dtype = model.config.np_dtype()
    for li, layer in enumerate(model.layers):
        if not hasattr(layer, "ssm"):
            continue
        m = layer.ssm
        for field_name in ("A", "B", "P"):
            key = f"layer{li}.ssm.{field_name}"
            o, dims = offsets[key]
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=o).reshape(dims)
            setattr(m, field_name, arr.astype(dtype))
