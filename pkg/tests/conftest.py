"""Shared fixtures and independent reference implementations.

The reference forward below recomputes the transformer naively (per-head
python loops over the public kernels, no cache) and is kept independent of
the production forward pass.
"""

from __future__ import annotations

import numpy as np
import pytest

from hierspec.model import ModelConfig, ModelWeights, generate_weights
from hierspec.tensor import matmul, rms_norm, rope_apply, silu, softmax_rows


def small_config(**overrides) -> ModelConfig:
    base = dict(n_layers=2, n_heads=4, n_kv_heads=4, head_dim=8, d_ff=32,
                vocab_size=40, max_seq=128, rope_theta=10000.0, norm_eps=1e-5)
    base.update(overrides)
    return ModelConfig(**base)


def desk_target_config(**overrides) -> ModelConfig:
    base = dict(n_layers=4, n_heads=8, n_kv_heads=4, head_dim=16, d_ff=256,
                vocab_size=260, max_seq=4096, rope_theta=10000.0, norm_eps=1e-5)
    base.update(overrides)
    return ModelConfig(**base)


def desk_draft_config(**overrides) -> ModelConfig:
    base = dict(n_layers=2, n_heads=4, n_kv_heads=4, head_dim=16, d_ff=128,
                vocab_size=260, max_seq=4096, rope_theta=10000.0, norm_eps=1e-5)
    base.update(overrides)
    return ModelConfig(**base)


def reference_forward(weights: ModelWeights, tokens) -> np.ndarray:
    """Whole-sequence causal forward, one logits row per position, computed
    per head with the public kernels and no KV cache."""
    cfg = weights.config
    t = len(tokens)
    positions = np.arange(t)
    g = cfg.n_heads // cfg.n_kv_heads
    x = weights.tensors["embedding"][np.asarray(tokens)]
    causal = positions[None, :] <= positions[:, None]
    for li in range(cfg.n_layers):
        w = lambda n: weights.tensors[f"layers.{li}.{n}"]
        h = rms_norm(x, w("attn_norm"), cfg.norm_eps)
        q = matmul(h, w("wq")).reshape(t, cfg.n_heads, cfg.head_dim)
        k = matmul(h, w("wk")).reshape(t, cfg.n_kv_heads, cfg.head_dim)
        v = matmul(h, w("wv")).reshape(t, cfg.n_kv_heads, cfg.head_dim)
        heads_out = []
        for head in range(cfg.n_heads):
            qh = rope_apply(q[:, head], positions, cfg.rope_theta)
            kh = rope_apply(k[:, head // g], positions, cfg.rope_theta)
            scores = matmul(qh, kh.T)
            scores = np.where(causal, scores, np.float32(-np.inf))
            probs = softmax_rows(scores, 1.0 / np.sqrt(cfg.head_dim))
            heads_out.append(matmul(probs, v[:, head // g]))
        attn = np.concatenate(heads_out, axis=1)
        x = x + matmul(attn, w("wo"))
        h = rms_norm(x, w("mlp_norm"), cfg.norm_eps)
        act = silu(matmul(h, w("w_gate"))) * matmul(h, w("w_up"))
        x = x + matmul(act, w("w_down"))
    fin = rms_norm(x, weights.tensors["final_norm"], cfg.norm_eps)
    head_w = weights.tensors["embedding"].T if weights.tied_head else weights.tensors["lm_head"]
    return matmul(fin, np.ascontiguousarray(head_w))


@pytest.fixture(scope="session")
def small_weights() -> ModelWeights:
    return generate_weights(small_config(), seed=11)
