"""Decoder-only transformer: pre-RMSNorm, RoPE, grouped-KV attention, SwiGLU.

Weights are plain float32 numpy arrays. A forward pass mutates only the
cache handle it is given; weights are immutable after creation and safe to
share across sessions. matmuls accumulate in float64 (weights are pre-cast
once), so chunked and token-by-token decoding over the same cache state
produce bit-identical logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, FiniteError, ShapeError
from .tensor import F32, F64, rope_angles

# byte-level tokenizer: 256 raw bytes + specials
BOS = 256
EOS = 257
PAD = 258
TOKENIZER_VOCAB = 259


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    max_seq: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError("n_heads must be a multiple of n_kv_heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even")
        if self.max_seq < 1 or self.vocab_size < 2:
            raise ValueError("max_seq >= 1 and vocab_size >= 2 required")
        for name in ("n_layers", "n_heads", "n_kv_heads", "head_dim", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        # reals are stored as f32 in the weight file; canonicalize so a
        # config and its file round trip compare equal and compute alike
        for name in ("rope_theta", "norm_eps"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))
        if self.rope_theta <= 0 or self.norm_eps < 0:
            raise ValueError("rope_theta must be positive and norm_eps non-negative")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim


# tensor names in file and generation order
def tensor_order(config: ModelConfig, tied_head: bool) -> list[tuple[str, tuple[int, ...]]]:
    d = config.d_model
    order = [("embedding", (config.vocab_size, d))]
    for i in range(config.n_layers):
        kv = config.n_kv_heads * config.head_dim
        order += [
            (f"layers.{i}.attn_norm", (d,)),
            (f"layers.{i}.wq", (d, d)),
            (f"layers.{i}.wk", (d, kv)),
            (f"layers.{i}.wv", (d, kv)),
            (f"layers.{i}.wo", (d, d)),
            (f"layers.{i}.mlp_norm", (d,)),
            (f"layers.{i}.w_gate", (d, config.d_ff)),
            (f"layers.{i}.w_up", (d, config.d_ff)),
            (f"layers.{i}.w_down", (config.d_ff, d)),
        ]
    order.append(("final_norm", (d,)))
    if not tied_head:
        order.append(("lm_head", (d, config.vocab_size)))
    return order


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    tied_head: bool = True
    _runtime: Optional[SimpleNamespace] = field(default=None, repr=False, compare=False)

    def validate(self):
        expected = dict(tensor_order(self.config, self.tied_head))
        if set(expected) != set(self.tensors):
            missing = set(expected) ^ set(self.tensors)
            raise ShapeError(f"weight tensor set mismatch: {sorted(missing)}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise ShapeError(f"{name}: shape {t.shape}, expected {shape}")
            if t.dtype != np.float32:
                raise ShapeError(f"{name}: dtype {t.dtype}, expected float32")
            if not np.isfinite(t).all():
                raise ShapeError(f"{name}: non-finite entries")
        return self

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, _ in tensor_order(self.config, self.tied_head):
            h.update(name.encode())
            h.update(self.tensors[name].tobytes())
        return h.hexdigest()

    def runtime(self) -> SimpleNamespace:
        """Fused float64 projection matrices and RoPE tables, built once."""
        if self._runtime is not None:
            return self._runtime
        cfg = self.config
        layers = []
        for i in range(cfg.n_layers):
            t = lambda n: self.tensors[f"layers.{i}.{n}"]
            layers.append(SimpleNamespace(
                attn_norm=t("attn_norm").astype(F64),
                wqkv=np.concatenate([t("wq"), t("wk"), t("wv")], axis=1).astype(F64),
                wo=t("wo").astype(F64),
                mlp_norm=t("mlp_norm").astype(F64),
                wgateup=np.concatenate([t("w_gate"), t("w_up")], axis=1).astype(F64),
                wdown=t("w_down").astype(F64),
            ))
        head = self.tensors["embedding"].T if self.tied_head else self.tensors["lm_head"]
        cos, sin = rope_angles(np.arange(cfg.max_seq), cfg.head_dim, cfg.rope_theta)
        rt = SimpleNamespace(
            emb=self.tensors["embedding"],
            layers=layers,
            final_norm=self.tensors["final_norm"].astype(F64),
            head=head.astype(F64),
            rope_cos=cos.astype(F64),
            rope_sin=sin.astype(F64),
        )
        object.__setattr__(self, "_runtime", rt)
        return rt


def generate_weights(config: ModelConfig, seed: int, tied_head: bool = True) -> ModelWeights:
    """Deterministic random init: numpy PCG64 stream, tensors drawn in file
    order; projections and embedding are N(0, 0.02), norm gains 1 + N(0, 0.02).
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_order(config, tied_head):
        draw = rng.standard_normal(shape) * 0.02
        if "norm" in name:
            draw = 1.0 + draw
        tensors[name] = draw.astype(F32)
    return ModelWeights(config, tensors, tied_head).validate()


# ---------------------------------------------------------------------------
# tokenizer

def tokenize(data: bytes) -> list[int]:
    """Byte-level tokenization: BOS followed by the raw byte values."""
    return [BOS] + list(data)


def detokenize(tokens: Sequence[int], vocab_size: int = TOKENIZER_VOCAB) -> bytes:
    """Inverse of tokenize; specials are dropped. Ids >= vocab_size are rejected."""
    out = bytearray()
    for t in tokens:
        if not 0 <= t < vocab_size:
            raise ValueError(f"token id {t} outside vocab of size {vocab_size}")
        if t < 256:
            out.append(t)
    return bytes(out)


# ---------------------------------------------------------------------------
# sampling

def prob_from_logits(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Float64 distribution over the vocab; temperature 0 is a one-hot argmax
    (lowest index wins ties)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    z = logits.astype(F64).ravel()
    if temperature == 0.0:
        p = np.zeros_like(z)
        p[int(np.argmax(z))] = 1.0
        return p
    z = z / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def sample_from_probs(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw consuming exactly one uniform from the stream."""
    u = rng.random()
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, u, side="right"), len(probs) - 1))


def sample(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    return sample_from_probs(prob_from_logits(logits, temperature), rng)


# ---------------------------------------------------------------------------
# forward passes

@dataclass
class AttentionProbe:
    """Post-softmax attention row of the most recent query at (layer, head)."""
    layer: int
    head: int
    query_position: int
    positions: np.ndarray  # absolute positions of the exposed entries
    weights: np.ndarray    # float32, sums to 1 within 1e-5


class ForwardRecorder:
    """Captures per-layer state of the most recent forward: the final row's
    post-RoPE query vectors, and (if record_probs) each head's post-softmax
    attention row with the exposed positions it spans."""

    def __init__(self, record_probs: bool = False):
        self.record_probs = record_probs
        self.last_queries: list[np.ndarray] = []   # per layer [n_heads, head_dim]
        self.last_probs: list[np.ndarray] = []     # per layer [n_heads, L]
        self.positions: list[np.ndarray] = []      # per layer [L]
        self.query_position: int = -1


def _rope_rows(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x [t, heads, dh] float32; cos/sin [t, dh/2] float64
    c = cos[:, None, :]
    s = sin[:, None, :]
    even = x[..., 0::2].astype(F64)
    odd = x[..., 1::2].astype(F64)
    out = np.empty(x.shape, dtype=F64)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out.astype(F32)


def _forward(weights: ModelWeights, tokens: Sequence[int], cache,
             recorder: Optional[ForwardRecorder] = None) -> np.ndarray:
    """Causal forward over `tokens` at the cache frontier. Returns one logits
    row per input token (row i predicts the position after input i)."""
    cfg = weights.config
    rt = weights.runtime()
    t = len(tokens)
    if t == 0:
        raise ValueError("empty token sequence")
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.min() < 0 or tok.max() >= cfg.vocab_size:
        raise ValueError("token id outside model vocab")
    start = cache.frontier
    positions = np.arange(start, start + t, dtype=np.int64)
    if positions[-1] >= rt.rope_cos.shape[0]:
        cos, sin = rope_angles(np.arange(positions[-1] + 1), cfg.head_dim, cfg.rope_theta)
        rt.rope_cos, rt.rope_sin = cos.astype(F64), sin.astype(F64)
    cos = rt.rope_cos[start:start + t]
    sin = rt.rope_sin[start:start + t]

    H, KVH, dh = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    g = H // KVH
    scale = F64(1.0 / np.sqrt(dh))
    qdim = H * dh
    kvdim = KVH * dh
    eps = F64(cfg.norm_eps)

    x = rt.emb[tok]
    if recorder is not None:
        recorder.last_queries = []
        recorder.last_probs = []
        recorder.positions = []
        recorder.query_position = int(positions[-1])

    for li, lw in enumerate(rt.layers):
        h64 = x.astype(F64)
        h = (h64 / np.sqrt(np.square(h64).mean(axis=-1, keepdims=True) + eps)
             * lw.attn_norm).astype(F32)
        qkv = np.matmul(h.astype(F64), lw.wqkv).astype(F32)
        q = _rope_rows(qkv[:, :qdim].reshape(t, H, dh), cos, sin)
        k = _rope_rows(qkv[:, qdim:qdim + kvdim].reshape(t, KVH, dh), cos, sin)
        v = qkv[:, qdim + kvdim:].reshape(t, KVH, dh)
        cache.append(li, k, v)
        K, V, pos_exp, group_mask = cache.expose(li, q)
        L = K.shape[0]
        # scores grouped by kv head: [KVH, g*t, L]
        qg = q.reshape(t, KVH, g, dh).transpose(1, 2, 0, 3).reshape(KVH, g * t, dh)
        scores = np.matmul(qg.astype(F64), K.transpose(1, 2, 0).astype(F64)).astype(F32)
        if t > 1 or group_mask is not None:
            m = np.ones((KVH, g, t, L), dtype=bool)
            if t > 1:
                m &= (pos_exp[None, :] <= positions[:, None])[None, None, :, :]
            if group_mask is not None:
                m &= group_mask[:, None, None, :]
            scores = np.where(m.reshape(KVH, g * t, L), scores, F32(-np.inf))
        z = scores.astype(F64) * scale
        z -= z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        probs = (e / e.sum(axis=-1, keepdims=True)).astype(F32)
        if cache.wants_attention:
            cache.observe_attention(li, probs.reshape(KVH, g, t, L), positions)
        if recorder is not None:
            recorder.last_queries.append(q[-1].copy())
            if recorder.record_probs:
                row = probs.reshape(KVH, g, t, L)[:, :, -1, :].reshape(H, L)
                recorder.last_probs.append(row.copy())
                recorder.positions.append(np.asarray(pos_exp).copy())
        attn = np.matmul(probs.astype(F64), V.transpose(1, 0, 2).astype(F64))
        attn = attn.reshape(KVH, g, t, dh).transpose(2, 0, 1, 3).reshape(t, H * dh).astype(F32)
        x = x + np.matmul(attn.astype(F64), lw.wo).astype(F32)
        h64 = x.astype(F64)
        h = (h64 / np.sqrt(np.square(h64).mean(axis=-1, keepdims=True) + eps)
             * lw.mlp_norm).astype(F32)
        gu = np.matmul(h.astype(F64), lw.wgateup).astype(F32)
        gate64 = gu[:, :cfg.d_ff].astype(F64)
        act = (gate64 * (0.5 * (np.tanh(0.5 * gate64) + 1.0))).astype(F32) * gu[:, cfg.d_ff:]
        x = x + np.matmul(act.astype(F64), lw.wdown).astype(F32)

    h64 = x.astype(F64)
    fin = (h64 / np.sqrt(np.square(h64).mean(axis=-1, keepdims=True) + eps)
           * rt.final_norm).astype(F32)
    logits = np.matmul(fin.astype(F64), rt.head).astype(F32)
    if not np.isfinite(logits).all():
        raise FiniteError("forward produced non-finite logits")
    return logits


def prefill(weights: ModelWeights, tokens: Sequence[int], cache,
            recorder: Optional[ForwardRecorder] = None) -> np.ndarray:
    """Populate the cache with KV for all input positions and commit them.

    On an empty cache whose policy admits it (exposure only ever grows) this
    is a single batched causal forward; otherwise it decodes token by token,
    which matches the rolling exposure of windowed policies. Returns all
    logits rows.
    """
    if len(tokens) == 0:
        raise ValueError("prefill needs at least one token")
    if cache.frontier + len(tokens) > weights.config.max_seq:
        raise CapacityError(
            f"sequence of {cache.frontier + len(tokens)} exceeds max_seq {weights.config.max_seq}")
    if cache.frontier == 0 and getattr(cache, "batched_prefill_ok", True):
        logits = _forward(weights, tokens, cache, recorder)
    else:
        rows = [_forward(weights, [tk], cache, recorder) for tk in tokens]
        logits = np.concatenate(rows, axis=0)
    cache.commit(cache.frontier)
    return logits


def decode_step(weights: ModelWeights, token: int, cache,
                recorder: Optional[ForwardRecorder] = None) -> np.ndarray:
    """Append one position (speculative until committed) and return the
    next-token logits row."""
    if cache.frontier < 1:
        raise ValueError("decode_step requires a non-empty cache")
    return _forward(weights, [token], cache, recorder)[0]


def decode_chunk(weights: ModelWeights, tokens: Sequence[int], cache,
                 recorder: Optional[ForwardRecorder] = None) -> np.ndarray:
    """Score a short token sequence causally, one logits row per token.

    Decoded position by position so the rows are bit-identical to a
    decode_step loop over the same cache state.
    """
    if len(tokens) == 0:
        raise ValueError("empty chunk")
    if cache.frontier < 1:
        raise ValueError("decode_chunk requires a non-empty cache")
    rows = [_forward(weights, [tk], cache, recorder) for tk in tokens]
    return np.concatenate(rows, axis=0)


def attention_probe(recorder: ForwardRecorder, layer: int, head: int) -> AttentionProbe:
    """Extract one head's attention row from a recorded forward."""
    if not recorder.record_probs or not recorder.last_probs:
        raise ValueError("recorder has no recorded attention (pass record_probs=True)")
    if not 0 <= layer < len(recorder.last_probs):
        raise IndexError(f"layer {layer} out of range")
    row = recorder.last_probs[layer]
    if not 0 <= head < row.shape[0]:
        raise IndexError(f"head {head} out of range")
    return AttentionProbe(
        layer=layer, head=head, query_position=recorder.query_position,
        positions=recorder.positions[layer], weights=row[head],
    )
