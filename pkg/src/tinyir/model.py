"""A tiny decoder-only transformer: rotary positions, pre-norm residual
blocks, tied LM head, EOS-pooled sequence embeddings, low-rank adapters.

Sequences are processed one at a time as [n x d] matrices; batching is a
caller-side loop. The checkpoint format is a self-describing binary blob
(magic "L2IR") that round-trips float32 parameters bit-exactly.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .corpus import EOS, TokenSeq
from .errors import ConfigError, ContextOverflowError, DataError, ShapeError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"L2IR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_context: int = 256
    rope_theta: float = 10000.0
    attn_mode: str = "causal"
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary pairs")
        if self.max_context < 2:
            raise ConfigError(f"max_context must be >= 2, got {self.max_context}")
        if self.attn_mode not in ("causal", "bidirectional"):
            raise ConfigError(f"attn_mode must be causal or bidirectional, got {self.attn_mode!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.rope_theta <= 0:
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    attn_gain: Tensor
    ffn_gain: Tensor


@dataclass
class ModelParams:
    embed: Tensor
    layers: list[LayerParams]
    final_gain: Tensor

    def named(self) -> dict[str, Tensor]:
        """Stable name -> tensor map; the order defines checkpoint layout."""
        out = {"embed": self.embed}
        for i, layer in enumerate(self.layers):
            for f in fields(LayerParams):
                out[f"layers.{i}.{f.name}"] = getattr(layer, f.name)
        out["final_gain"] = self.final_gain
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.named().values():
            t.requires_grad = flag


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)

    def w(rows, cols, std=0.02):
        return Tensor(rng.normal(0.0, std, size=(rows, cols)).astype(dtype), requires_grad=True)

    def gain(d):
        return Tensor(np.ones((1, d), dtype=dtype), requires_grad=True)

    d = cfg.d_model
    layers = [
        LayerParams(
            wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
            w1=w(d, cfg.d_ff), w2=w(cfg.d_ff, d),
            attn_gain=gain(d), ffn_gain=gain(d),
        )
        for _ in range(cfg.n_layers)
    ]
    return ModelParams(embed=w(cfg.vocab_size, d), layers=layers, final_gain=gain(d))


def count_parameters(params: ModelParams) -> int:
    return sum(t.data.size for t in params.named().values())


# ---------------------------------------------------------------------------
# attention machinery
# ---------------------------------------------------------------------------


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    """0 on and below the diagonal, sentinel -inf above."""
    if n < 1:
        raise ConfigError(f"mask size must be >= 1, got {n}")
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = T.NEG_INF
    return m


def attention_mask(n: int, mode: str, dtype=np.float64) -> np.ndarray:
    if mode == "bidirectional":
        return np.zeros((n, n), dtype=dtype)
    return causal_mask(n, dtype)


def rope_tables(positions, head_dim: int, theta: float, dtype=np.float64):
    """cos/sin tables [n x head_dim]; pair (2i, 2i+1) turns by pos * theta^(-2i/head_dim)."""
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = float(theta) ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(pos, inv_freq)
    cos = np.repeat(np.cos(ang), 2, axis=1).astype(dtype)
    sin = np.repeat(np.sin(ang), 2, axis=1).astype(dtype)
    return cos, sin


def rope_rotate(x: Tensor, positions, theta: float) -> Tensor:
    """Rotate each dimension pair of x by its position-dependent angle."""
    n, d = x.shape
    if d % 2:
        raise ShapeError(f"rope needs an even width, got {x.shape}")
    if len(positions) != n:
        raise ShapeError(f"{len(positions)} positions for {n} rows")
    cos, sin = rope_tables(positions, d, theta, dtype=x.dtype)
    return T.add(T.mul(x, T.constant(cos)), T.mul(T.rotate_pairs(x), T.constant(sin)))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v for one head."""
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: q={q.shape} k={k.shape} v={v.shape}")
    n = q.shape[0]
    if mask.shape != (n, n):
        raise ShapeError(f"mask must be ({n}, {n}), got {mask.shape}")
    logits = T.add(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(q.shape[1])), mask)
    return T.matmul(T.softmax_rows(logits), v)


def multi_head(x: Tensor, layer: LayerParams, mask: Tensor, cfg: ModelConfig,
               positions=None) -> Tensor:
    """Fused projections, per-head rotary attention, concat, output projection."""
    n = x.shape[0]
    if positions is None:
        positions = range(n)
    q = T.matmul(x, layer.wq)
    k = T.matmul(x, layer.wk)
    v = T.matmul(x, layer.wv)
    hd = cfg.head_dim
    heads = []
    for h in range(cfg.n_heads):
        cols = slice(h * hd, (h + 1) * hd)
        qh = rope_rotate(T.slice2d(q, slice(0, n), cols), positions, cfg.rope_theta)
        kh = rope_rotate(T.slice2d(k, slice(0, n), cols), positions, cfg.rope_theta)
        vh = T.slice2d(v, slice(0, n), cols)
        heads.append(attention(qh, kh, vh, mask))
    return T.matmul(T.concat(heads, axis=1), layer.wo)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


def forward(seq: TokenSeq, params: ModelParams, cfg: ModelConfig,
            mode: str = "infer", rng: np.random.Generator | None = None) -> Tensor:
    """Hidden states [n x d_model]; raises instead of truncating on overflow."""
    ids = list(seq)
    n = len(ids)
    if n == 0:
        raise DataError("cannot run the model on an empty sequence")
    if n > cfg.max_context:
        raise ContextOverflowError(f"sequence of {n} tokens exceeds max_context {cfg.max_context}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be train or infer, got {mode!r}")
    drop = mode == "train" and cfg.dropout_p > 0.0
    if drop and rng is None:
        raise ConfigError("train-mode dropout needs an rng")

    dtype = params.embed.dtype
    x = T.embedding_lookup(params.embed, ids)
    mask = T.constant(attention_mask(n, cfg.attn_mode, dtype=dtype))
    for layer in params.layers:
        a = multi_head(T.rms_norm(x, layer.attn_gain), layer, mask, cfg)
        if drop:
            a = T.dropout(a, cfg.dropout_p, rng)
        x = T.add(x, a)
        f = T.matmul(T.gelu(T.matmul(T.rms_norm(x, layer.ffn_gain), layer.w1)), layer.w2)
        if drop:
            f = T.dropout(f, cfg.dropout_p, rng)
        x = T.add(x, f)
    return T.rms_norm(x, params.final_gain)


def embed_eos(seq: TokenSeq, params: ModelParams, cfg: ModelConfig,
              mode: str = "infer", rng: np.random.Generator | None = None) -> Tensor:
    """Unit-normalized final-position hidden state, shape [1 x d_model]."""
    if not seq or seq[-1] != EOS:
        raise DataError("embed_eos requires a sequence ending in EOS")
    h = forward(seq, params, cfg, mode=mode, rng=rng)
    n = h.shape[0]
    return T.unit_rows(T.slice2d(h, slice(n - 1, n), slice(0, h.shape[1])))


def lm_loss(seq: TokenSeq, params: ModelParams, cfg: ModelConfig,
            mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Mean next-token negative log-likelihood with the head tied to the
    embedding matrix."""
    ids = list(seq)
    if len(ids) < 2:
        raise DataError("lm loss needs at least two tokens")
    h = forward(ids, params, cfg, mode=mode, rng=rng)
    n = len(ids)
    logits = T.matmul(T.slice2d(h, slice(0, n - 1), slice(0, h.shape[1])),
                      T.transpose(params.embed))
    return T.cross_entropy_rows(logits, ids[1:])


# ---------------------------------------------------------------------------
# low-rank adapters
# ---------------------------------------------------------------------------

LORA_DEFAULT_TARGETS = ("wq", "wv")


@dataclass
class LoraAdapter:
    """Additive low-rank deltas W + (alpha/rank) * A @ B on selected matrices."""

    pairs: dict[str, tuple[Tensor, Tensor]]
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def named(self) -> dict[str, Tensor]:
        out = {}
        for target, (a, b) in self.pairs.items():
            out[f"lora.{target}.A"] = a
            out[f"lora.{target}.B"] = b
        return out

    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.named().values())


def init_lora(params: ModelParams, rank: int = 8, alpha: float = 16.0,
              targets: tuple[str, ...] = LORA_DEFAULT_TARGETS, seed: int = 0) -> LoraAdapter:
    """Fresh adapter with B = 0 so the adapted model equals the base model."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    named = params.named()
    pairs: dict[str, tuple[Tensor, Tensor]] = {}
    for name, t in named.items():
        if name.split(".")[-1] in targets:
            d_in, d_out = t.shape
            a = Tensor(rng.normal(0.0, 1.0 / rank, size=(d_in, rank)).astype(t.dtype),
                       requires_grad=True)
            b = Tensor(np.zeros((rank, d_out), dtype=t.dtype), requires_grad=True)
            pairs[name] = (a, b)
    if not pairs:
        raise ConfigError(f"no parameters match lora targets {targets}")
    return LoraAdapter(pairs=pairs, rank=rank, alpha=alpha)


def _with_replaced(params: ModelParams, new: dict[str, Tensor]) -> ModelParams:
    layers = []
    for i, layer in enumerate(params.layers):
        kwargs = {
            f.name: new.get(f"layers.{i}.{f.name}", getattr(layer, f.name))
            for f in fields(LayerParams)
        }
        layers.append(LayerParams(**kwargs))
    return ModelParams(
        embed=new.get("embed", params.embed),
        layers=layers,
        final_gain=new.get("final_gain", params.final_gain),
    )


def apply_lora(params: ModelParams, adapter: LoraAdapter) -> ModelParams:
    """Effective parameters with deltas composed on the active tape, so
    gradients reach A and B during training."""
    named = params.named()
    new = {}
    for target, (a, b) in adapter.pairs.items():
        w = named[target]
        if (a.shape[0], b.shape[1]) != w.shape or a.shape[1] != b.shape[0]:
            raise ShapeError(f"adapter for {target} has shapes {a.shape} x {b.shape}, "
                             f"target is {w.shape}")
        new[target] = T.add(w, T.scale(T.matmul(a, b), adapter.scaling))
    return _with_replaced(params, new)


def merge_lora(params: ModelParams, adapter: LoraAdapter) -> ModelParams:
    """Fold the deltas into fresh base weights (no tape involvement)."""
    named = params.named()
    new = {}
    for target, (a, b) in adapter.pairs.items():
        w = named[target]
        merged = w.data + adapter.scaling * (a.data @ b.data)
        new[target] = Tensor(merged.astype(w.dtype), requires_grad=w.requires_grad)
    return _with_replaced(params, new)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _config_block(cfg: ModelConfig) -> bytes:
    items = {f.name: getattr(cfg, f.name) for f in fields(ModelConfig)}
    text = "".join(f"{k}={items[k]}\n" for k in sorted(items))
    return text.encode("utf-8")


def _parse_config_block(blob: bytes) -> ModelConfig:
    kwargs = {}
    known = {f.name for f in fields(ModelConfig)}
    for line in blob.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        if key not in known:
            raise ConfigError(f"unknown checkpoint config key {key!r}")
        if key in ("rope_theta", "dropout_p"):
            kwargs[key] = float(value)
        elif key == "attn_mode":
            kwargs[key] = value
        else:
            kwargs[key] = int(value)
    return ModelConfig(**kwargs)


def serialize_checkpoint(params: ModelParams, cfg: ModelConfig) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    block = _config_block(cfg)
    out.append(struct.pack("<I", len(block)))
    out.append(block)
    named = params.named()
    out.append(struct.pack("<I", len(named)))
    for name, t in named.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", t.data.ndim))
        out.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        out.append(t.data.astype("<f4", copy=False).tobytes())
    return b"".join(out)


def save_checkpoint(path: str, params: ModelParams, cfg: ModelConfig) -> None:
    """Atomic write: serialize, write to a temp file, rename into place."""
    blob = serialize_checkpoint(params, cfg)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str, dtype=np.float32) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as f:
        blob = f.read()
    return deserialize_checkpoint(blob, dtype=dtype)


def deserialize_checkpoint(blob: bytes, dtype=np.float32) -> tuple[ModelParams, ModelConfig]:
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise DataError("not a model checkpoint (bad magic)")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", view, off)
    except struct.error as exc:
        raise DataError(f"truncated checkpoint: {exc}") from exc
    off += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    tensors: dict[str, Tensor] = {}
    try:
        (clen,) = struct.unpack_from("<I", view, off)
        off += 4
        if off + clen > len(view):
            # Slicing past the end would silently shorten the config text.
            raise DataError("truncated checkpoint: config block cut short")
        cfg = _parse_config_block(bytes(view[off:off + clen]))
        off += clen
        (nparams,) = struct.unpack_from("<I", view, off)
        off += 4
        for _ in range(nparams):
            (nlen,) = struct.unpack_from("<I", view, off)
            off += 4
            if off + nlen > len(view):
                raise DataError("truncated checkpoint: name cut short")
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", view, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            count = int(np.prod(dims))
            data = np.frombuffer(view, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"truncated or corrupt checkpoint: {exc}") from exc
    expected = init_params(cfg, seed=0, dtype=dtype).named().keys()
    if set(tensors) != set(expected):
        raise DataError("checkpoint parameter names do not match the config")
    layers = []
    for i in range(cfg.n_layers):
        layers.append(LayerParams(**{
            f.name: tensors[f"layers.{i}.{f.name}"] for f in fields(LayerParams)
        }))
    return ModelParams(embed=tensors["embed"], layers=layers,
                       final_gain=tensors["final_gain"]), cfg


def checkpoint_fingerprint(blob_or_path) -> str:
    """sha256 of the serialized checkpoint, as a hex digest."""
    if isinstance(blob_or_path, (bytes, bytearray)):
        blob = bytes(blob_or_path)
    else:
        with open(blob_or_path, "rb") as f:
            blob = f.read()
    return hashlib.sha256(blob).hexdigest()


def config_for_context(cfg: ModelConfig, max_context: int,
                       rope_theta: float | None = None) -> ModelConfig:
    """Same architecture with a different context window (and optionally a
    different rotary base)."""
    return replace(cfg, max_context=max_context,
                   rope_theta=cfg.rope_theta if rope_theta is None else rope_theta)
