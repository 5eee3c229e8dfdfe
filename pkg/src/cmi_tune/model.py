"""Toy decoder-only transformer with a classification head.

Shapes: token ids are ``(B, T)`` integer arrays, right-padded with PAD. Causal
masking means padding never influences real positions, so no padding mask is
needed for the forward pass itself.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import Tensor
from .tokenizer import CLS, PAD

CHECKPOINT_VERSION = 1
_MASK_VALUE = -1e30


class ModelError(ValueError):
    pass


class ContextOverflowError(ModelError):
    pass


class PoolingError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    embed_dim: int = 64
    context_len: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ff_mult: int = 4
    num_classes: int = 2
    pooling: str = "first_special"

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.context_len < 2:
            raise ModelError("context_len must be >= 2")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if self.num_layers < 1:
            raise ModelError("num_layers must be >= 1")
        if self.vocab_size < 1 or self.ff_mult < 1:
            raise ModelError("vocab_size and ff_mult must be positive")
        if self.pooling not in ("first_special", "last_token"):
            raise ModelError(f"unknown pooling {self.pooling!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hd = cfg.embed_dim, cfg.embed_dim * cfg.ff_mult
    return {
        "ln1.g": (d,), "ln1.b": (d,),
        "attn.W_qkv": (d, 3 * d), "attn.b_qkv": (3 * d,),
        "attn.W_o": (d, d), "attn.b_o": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "mlp.W_1": (d, hd), "mlp.b_1": (hd,),
        "mlp.W_2": (hd, d), "mlp.b_2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"W_e": (cfg.vocab_size, cfg.embed_dim), "W_p": (cfg.context_len, cfg.embed_dim)}
    for layer in range(cfg.num_layers):
        for name, shape in _block_shapes(cfg).items():
            shapes[f"blocks.{layer}.{name}"] = shape
    shapes["ln_f.g"] = (cfg.embed_dim,)
    shapes["ln_f.b"] = (cfg.embed_dim,)
    shapes["W"] = (cfg.embed_dim, cfg.num_classes)
    return shapes


class ModelParams:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ModelError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ModelError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self, prefixes=None) -> list[Tensor]:
        if prefixes is None:
            return list(self.tensors.values())
        return [t for n, t in self.tensors.items() if any(n.startswith(p) for p in prefixes)]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data, requires_grad=True, name=n)
                                         for n, t in self.tensors.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            t.data[...] = state[n]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """N(0, 0.02) weights, zero biases/shifts, unit norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


# -- forward pieces ---------------------------------------------------------

def _as_batch(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ModelError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    return ids


def embed(tokens, params: ModelParams) -> Tensor:
    """X_0 with rows ``W_e[t_i] + W_p[i]``; shape ``(B, T, d)``."""
    ids = _as_batch(tokens)
    cfg = params.config
    if ids.shape[1] > cfg.context_len:
        raise ContextOverflowError(f"sequence of length {ids.shape[1]} exceeds context {cfg.context_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ModelError(f"token id outside [0, {cfg.vocab_size})")
    return params["W_e"][ids] + params["W_p"][: ids.shape[1]]


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), _MASK_VALUE), k=1)


def block_forward(x: Tensor, params: ModelParams, layer: int) -> Tensor:
    """Pre-norm block: masked multi-head self-attention then GELU MLP, both residual."""
    cfg = params.config
    d, nh, hd = cfg.embed_dim, cfg.num_heads, cfg.head_dim
    if x.ndim != 3 or x.shape[-1] != d:
        raise tn.ShapeError(f"block_forward: expected (B, T, {d}), got {x.shape}")
    B, T, _ = x.shape
    p = f"blocks.{layer}."

    h = tn.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    qkv = h @ params[p + "attn.W_qkv"] + params[p + "attn.b_qkv"]

    def heads(part):
        return part.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)

    q, k, v = heads(qkv[..., :d]), heads(qkv[..., d:2 * d]), heads(qkv[..., 2 * d:])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd)) + causal_mask(T)
    att = tn.softmax(scores) @ v
    att = att.transpose(0, 2, 1, 3).reshape(B, T, d)
    x = x + (att @ params[p + "attn.W_o"] + params[p + "attn.b_o"])

    h = tn.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    h = tn.gelu(h @ params[p + "mlp.W_1"] + params[p + "mlp.b_1"])
    return x + (h @ params[p + "mlp.W_2"] + params[p + "mlp.b_2"])


def final_hidden(tokens, params: ModelParams) -> Tensor:
    """X_L: embeddings through all blocks and the final layer norm."""
    x = embed(tokens, params)
    for layer in range(params.config.num_layers):
        x = block_forward(x, params, layer)
    return tn.layer_norm(x, params["ln_f.g"], params["ln_f.b"])


def lm_logits(x_final: Tensor, params: ModelParams) -> Tensor:
    return x_final @ params["W_e"].T


def lm_probs(x_final: Tensor, params: ModelParams) -> Tensor:
    """Per-position next-token distributions ``softmax(X_L W_e^T)``."""
    return tn.softmax(lm_logits(x_final, params))


def pool_positions(ids: np.ndarray, lengths, pooling: str) -> np.ndarray:
    ids = _as_batch(ids)
    lengths = np.asarray(lengths, dtype=np.int64)
    if pooling == "last_token":
        return lengths - 1
    pos = np.empty(len(ids), dtype=np.int64)
    for i, row in enumerate(ids):
        hits = np.flatnonzero(row[: lengths[i]] == CLS)
        if not hits.size:
            raise PoolingError(f"first_special pooling but sequence {i} has no CLS token")
        pos[i] = hits[0]
    return pos


def _lengths_of(ids: np.ndarray) -> np.ndarray:
    # Right padding: length is one past the last non-PAD token.
    real = ids != PAD
    return np.where(real.any(axis=1), ids.shape[1] - np.argmax(real[:, ::-1], axis=1), 0)


@dataclass
class Forward:
    hidden: Tensor
    pooled: Tensor
    logits: Tensor


def forward(tokens, params: ModelParams, lengths=None) -> Forward:
    """Full pass returning X_L, the pooled feature h_s and class logits h_s W."""
    ids = _as_batch(tokens)
    if lengths is None:
        lengths = _lengths_of(ids)
    hidden = final_hidden(ids, params)
    pos = pool_positions(ids, lengths, params.config.pooling)
    pooled = hidden[np.arange(len(ids)), pos]
    return Forward(hidden, pooled, pooled @ params["W"])


def pooled_feature(tokens, params: ModelParams) -> Tensor:
    """h_s for one sequence (shape ``(d,)``) or a batch (``(B, d)``)."""
    out = forward(tokens, params).pooled
    return out[0] if np.ndim(tokens) == 1 else out


def classify(tokens, params: ModelParams) -> Tensor:
    """P(.|x) = softmax(h_s W) over the C classes."""
    probs = tn.softmax(forward(tokens, params).logits)
    return probs[0] if np.ndim(tokens) == 1 else probs


def token_log_probs(ids, params: ModelParams, hidden: Tensor | None = None) -> Tensor:
    """log P(t_i | t_1..t_{i-1}) for i >= 2, shape ``(B, T-1)``.

    ``hidden`` may be a precomputed X_L covering at least the first T-1
    positions; the last token is only predicted, never fed in.
    """
    ids = _as_batch(ids)
    B, T = ids.shape
    if hidden is None:
        hidden = final_hidden(ids[:, : T - 1], params)
    logp = tn.log(lm_probs(hidden[:, : T - 1], params))
    rows = np.repeat(np.arange(B), T - 1)
    cols = np.tile(np.arange(T - 1), B)
    return logp[rows, cols, ids[:, 1:].reshape(-1)].reshape(B, T - 1)


def sequence_log_prob(tokens, params: ModelParams) -> Tensor:
    """sum_{i>=2} log P(t_i | t_1..t_{i-1}) for a single sequence."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or len(ids) < 2:
        raise ModelError("sequence_log_prob needs a 1-D sequence of length >= 2")
    if len(ids) > params.config.context_len + 1:
        raise ContextOverflowError(f"length {len(ids)} exceeds context {params.config.context_len} + 1")
    return token_log_probs(ids, params).sum()


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """JSON header line, then little-endian float64 arrays back to back."""
    manifest, offset, chunks = [], 0, []
    for name, t in params.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": CHECKPOINT_VERSION, "config": params.config.to_dict(),
              "arrays": manifest, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(chunks)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    blob = Path(path).read_bytes()
    head, _, payload = blob.partition(b"\n")
    header = json.loads(head)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg = ModelConfig(**header["config"])
    tensors = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tensors[entry["name"]] = Tensor(arr.reshape(entry["shape"]), requires_grad=True,
                                        name=entry["name"])
    return ModelParams(cfg, tensors), header.get("extra", {})
