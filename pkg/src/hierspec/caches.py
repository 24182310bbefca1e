"""KV-cache policies: full, streaming (sink + recent), heavy-hitter,
chunk-retrieval over a retained full cache, and an exact top-k oracle.

All caches share one bookkeeping model:

  * `frontier` is the next absolute position to be appended; entries at
    positions >= `committed` are speculative.
  * `rollback_to(n)` drops every entry with position >= n. Bounded policies
    refuse to roll below the committed frontier (evicted history is gone);
    the lossless caches (full, top-k) allow it.
  * `commit(n)` promotes positions < n and then applies the policy's
    eviction/overwrite rule, so speculative entries are never evicted and a
    speculate-then-rollback sequence is observationally a no-op.

Eviction-based policies therefore expose at most `budget` committed entries
after any commit; while speculation is in flight the heavy-hitter and
retrieval caches carry the speculative tail on top of the budget (the
streaming window already absorbs it).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CapacityError, ContractError, ShapeError
from .tensor import F32, F64


@dataclass(frozen=True)
class StreamingConfig:
    n_sink: int = 4
    budget: int = 64

    def __post_init__(self):
        if not 0 <= self.n_sink < self.budget:
            raise ValueError("need 0 <= n_sink < budget")


@dataclass(frozen=True)
class H2OConfig:
    budget: int = 64
    recent_window: int = 32

    def __post_init__(self):
        if not 0 <= self.recent_window < self.budget:
            raise ValueError("need 0 <= recent_window < budget")


@dataclass(frozen=True)
class RetrievalConfig:
    chunk_size: int = 16
    budget: int = 64
    rebuild_stride: int = 128
    rebuild_accept_threshold: float = 0.8
    rolling_window: int = 16

    def __post_init__(self):
        if self.chunk_size < 1 or self.budget < self.chunk_size:
            raise ValueError("need chunk_size >= 1 and budget >= chunk_size")
        if self.budget % self.chunk_size != 0:
            raise ValueError("budget must be a multiple of chunk_size")
        if not 0.0 < self.rebuild_accept_threshold < 1.0:
            raise ValueError("rebuild_accept_threshold must be in (0, 1)")
        if self.rebuild_stride < 1 or self.rolling_window < 1:
            raise ValueError("rebuild_stride and rolling_window must be >= 1")


class _LayerStore:
    """Append-only grow-able K/V arrays for one layer."""

    __slots__ = ("k", "v", "pos", "n")

    def __init__(self, kvh: int, dh: int, cap: int):
        self.k = np.empty((cap, kvh, dh), dtype=F32)
        self.v = np.empty((cap, kvh, dh), dtype=F32)
        self.pos = np.empty(cap, dtype=np.int64)
        self.n = 0

    def _grow(self, need: int):
        cap = max(2 * self.k.shape[0], self.n + need)
        for name in ("k", "v"):
            buf = np.empty((cap,) + getattr(self, name).shape[1:], dtype=F32)
            buf[:self.n] = getattr(self, name)[:self.n]
            setattr(self, name, buf)
        pos = np.empty(cap, dtype=np.int64)
        pos[:self.n] = self.pos[:self.n]
        self.pos = pos

    def push(self, k: np.ndarray, v: np.ndarray, positions: np.ndarray):
        t = k.shape[0]
        if self.n + t > self.k.shape[0]:
            self._grow(t)
        self.k[self.n:self.n + t] = k
        self.v[self.n:self.n + t] = v
        self.pos[self.n:self.n + t] = positions
        self.n += t

    def keep_mask(self, mask: np.ndarray):
        m = int(mask.sum())
        self.k[:m] = self.k[:self.n][mask]
        self.v[:m] = self.v[:self.n][mask]
        self.pos[:m] = self.pos[:self.n][mask]
        self.n = m

    def copy_into(self, other: "_LayerStore"):
        other._grow(self.n)
        other.k[:self.n] = self.k[:self.n]
        other.v[:self.n] = self.v[:self.n]
        other.pos[:self.n] = self.pos[:self.n]
        other.n = self.n


class KVCache:
    """Base cache: shape bookkeeping plus the policy hooks."""

    policy = "base"
    wants_attention = False
    batched_prefill_ok = True

    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int):
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.frontier = 0
        self.committed = 0

    @classmethod
    def from_config(cls, model_config, *args, **kwargs):
        return cls(model_config.n_layers, model_config.n_kv_heads,
                   model_config.head_dim, *args, **kwargs)

    # -- hooks -------------------------------------------------------------
    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        raise NotImplementedError

    def expose(self, layer: int, queries: Optional[np.ndarray] = None):
        """(K, V, positions, group_mask) currently visible to attention."""
        raise NotImplementedError

    def observe_attention(self, layer: int, probs: np.ndarray, query_positions: np.ndarray):
        pass

    def rollback_to(self, n: int):
        raise NotImplementedError

    def commit(self, n: int):
        raise NotImplementedError

    def clone(self):
        raise NotImplementedError

    # -- shared helpers -----------------------------------------------------
    def _check_kv(self, k: np.ndarray, v: np.ndarray):
        if k.shape != v.shape or k.ndim != 3 or k.shape[1:] != (self.n_kv_heads, self.head_dim):
            raise ShapeError(f"bad kv shape {k.shape}")

    def _check_commit(self, n: int):
        if not self.committed <= n <= self.frontier:
            raise ContractError(f"commit({n}) outside [{self.committed}, {self.frontier}]")

    def exposed_positions(self, layer: int = 0) -> np.ndarray:
        return np.asarray(self.expose(layer)[2]).copy()

    def to_json(self) -> dict:
        layers = []
        for li in range(self.n_layers):
            _, _, pos, _ = self.expose(li)
            layers.append({"exposed_positions": np.asarray(pos).tolist()})
        return {"policy": self.policy, "frontier": self.frontier,
                "committed": self.committed, "layers": layers}


class FullCache(KVCache):
    """Keeps every position; capacity-bounded by the model's max_seq."""

    policy = "full"

    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int, max_entries: int):
        super().__init__(n_layers, n_kv_heads, head_dim)
        self.max_entries = max_entries
        cap = min(max_entries, 128)
        self._layers = [_LayerStore(n_kv_heads, head_dim, cap) for _ in range(n_layers)]

    @classmethod
    def from_config(cls, model_config):
        return cls(model_config.n_layers, model_config.n_kv_heads,
                   model_config.head_dim, model_config.max_seq)

    def append(self, layer, k, v):
        self._check_kv(k, v)
        st = self._layers[layer]
        if st.n + k.shape[0] > self.max_entries:
            raise CapacityError(f"full cache overflow past {self.max_entries}")
        start = st.pos[st.n - 1] + 1 if st.n else 0
        st.push(k, v, np.arange(start, start + k.shape[0]))
        if layer == self.n_layers - 1:
            self.frontier = st.n

    def expose(self, layer, queries=None):
        st = self._layers[layer]
        return st.k[:st.n], st.v[:st.n], st.pos[:st.n], None

    def rollback_to(self, n):
        for st in self._layers:
            st.n = min(st.n, n)
        self.frontier = min(self.frontier, n)
        self.committed = min(self.committed, n)

    def commit(self, n):
        self._check_commit(n)
        self.committed = n

    def clone(self):
        c = FullCache(self.n_layers, self.n_kv_heads, self.head_dim, self.max_entries)
        for mine, theirs in zip(self._layers, c._layers):
            mine.copy_into(theirs)
        c.frontier, c.committed = self.frontier, self.committed
        return c


class StreamingCache(KVCache):
    """Sink tokens plus a sliding recent window; the middle is evicted
    irrecoverably at commit time. Exposure never exceeds the budget: the
    speculative tail rides inside the recent window."""

    policy = "streaming"
    batched_prefill_ok = False

    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int, config: StreamingConfig):
        super().__init__(n_layers, n_kv_heads, head_dim)
        self.config = config
        self._layers = [_LayerStore(n_kv_heads, head_dim, config.budget + 32)
                        for _ in range(n_layers)]

    def append(self, layer, k, v):
        self._check_kv(k, v)
        st = self._layers[layer]
        start = self.frontier
        st.push(k, v, np.arange(start, start + k.shape[0]))
        if layer == self.n_layers - 1:
            self.frontier = start + k.shape[0]

    def expose(self, layer, queries=None):
        st = self._layers[layer]
        cfg = self.config
        if st.n <= cfg.budget:
            return st.k[:st.n], st.v[:st.n], st.pos[:st.n], None
        recent = cfg.budget - cfg.n_sink
        idx0 = cfg.n_sink
        k = np.concatenate([st.k[:idx0], st.k[st.n - recent:st.n]])
        v = np.concatenate([st.v[:idx0], st.v[st.n - recent:st.n]])
        pos = np.concatenate([st.pos[:idx0], st.pos[st.n - recent:st.n]])
        return k, v, pos, None

    def rollback_to(self, n):
        if n < self.committed:
            raise ContractError(f"streaming cache cannot roll below committed {self.committed}")
        for st in self._layers:
            cut = int(np.searchsorted(st.pos[:st.n], n))
            st.n = cut
        self.frontier = min(self.frontier, n)

    def commit(self, n):
        self._check_commit(n)
        self.committed = n
        cfg = self.config
        for st in self._layers:
            pos = st.pos[:st.n]
            committed_mask = pos < n
            n_comm = int(committed_mask.sum())
            if n_comm <= cfg.budget:
                continue
            recent = cfg.budget - cfg.n_sink
            comm_pos = pos[committed_mask]
            keep_pos = set(comm_pos[:cfg.n_sink].tolist()) | set(comm_pos[-recent:].tolist())
            keep = np.array([(not committed_mask[i]) or (int(pos[i]) in keep_pos)
                             for i in range(st.n)])
            st.keep_mask(keep)

    def clone(self):
        c = StreamingCache(self.n_layers, self.n_kv_heads, self.head_dim, self.config)
        for mine, theirs in zip(self._layers, c._layers):
            mine.copy_into(theirs)
        c.frontier, c.committed = self.frontier, self.committed
        return c


class H2OCache(KVCache):
    """Heavy-hitter eviction: per layer, cumulative attention scores summed
    across heads; at commit, the lowest-score entry outside the recent window
    is evicted (ties to the oldest position) until the committed set fits the
    budget. Scores earned by speculative queries stay pending until the
    query's position commits, so rollback also rolls the statistics back."""

    policy = "h2o"
    wants_attention = True

    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int, config: H2OConfig):
        super().__init__(n_layers, n_kv_heads, head_dim)
        self.config = config
        self._layers = [_LayerStore(n_kv_heads, head_dim, config.budget + 32)
                        for _ in range(n_layers)]
        self._scores = [np.zeros(config.budget + 32, dtype=F64) for _ in range(n_layers)]
        # pending[layer] = list of (query_pos, entry_positions, weights)
        self._pending: list[list] = [[] for _ in range(n_layers)]

    def append(self, layer, k, v):
        self._check_kv(k, v)
        st = self._layers[layer]
        start = self.frontier
        old_cap = st.k.shape[0]
        st.push(k, v, np.arange(start, start + k.shape[0]))
        if st.k.shape[0] != old_cap:
            grown = np.zeros(st.k.shape[0], dtype=F64)
            grown[:len(self._scores[layer])] = self._scores[layer]
            self._scores[layer] = grown
        self._scores[layer][st.n - k.shape[0]:st.n] = 0.0
        if layer == self.n_layers - 1:
            self.frontier = start + k.shape[0]

    def expose(self, layer, queries=None):
        st = self._layers[layer]
        return st.k[:st.n], st.v[:st.n], st.pos[:st.n], None

    def observe_attention(self, layer, probs, query_positions):
        # probs [KVH, g, t, L] over this layer's exposed entries
        st = self._layers[layer]
        if probs.shape[-1] != st.n:
            raise ShapeError(
                f"attention row spans {probs.shape[-1]} entries, layer exposes {st.n}")
        rows = probs.astype(F64).sum(axis=(0, 1))  # [t, L]
        pos_exp = st.pos[:st.n].copy()
        for i, qpos in enumerate(np.asarray(query_positions)):
            self._pending[layer].append((int(qpos), pos_exp, rows[i].copy()))

    def rollback_to(self, n):
        if n < self.committed:
            raise ContractError(f"h2o cache cannot roll below committed {self.committed}")
        for li, st in enumerate(self._layers):
            cut = int(np.searchsorted(st.pos[:st.n], n))
            st.n = cut
            self._pending[li] = [p for p in self._pending[li] if p[0] < n]
        self.frontier = min(self.frontier, n)

    def commit(self, n):
        self._check_commit(n)
        self.committed = n
        cfg = self.config
        for li, st in enumerate(self._layers):
            scores = self._scores[li]
            keep_pending = []
            for qpos, entry_pos, w in self._pending[li]:
                if qpos >= n:
                    keep_pending.append((qpos, entry_pos, w))
                    continue
                idx = np.searchsorted(st.pos[:st.n], entry_pos)
                ok = (idx < st.n)
                ok[ok] &= st.pos[idx[ok]] == entry_pos[ok]
                np.add.at(scores[:st.n], idx[ok], w[ok])
            self._pending[li] = keep_pending
            # evict lowest-score committed entries outside the recent window
            while True:
                pos = st.pos[:st.n]
                committed_mask = pos < n
                n_comm = int(committed_mask.sum())
                if n_comm <= cfg.budget:
                    break
                comm_pos = pos[committed_mask]
                recent_cut = comm_pos[-cfg.recent_window] if cfg.recent_window else n
                cand = committed_mask & (pos < recent_cut)
                cand_idx = np.nonzero(cand)[0]
                s = scores[cand_idx]
                victim = cand_idx[np.lexsort((pos[cand_idx], s))[0]]
                keep = np.ones(st.n, dtype=bool)
                keep[victim] = False
                scores[:st.n - 1] = scores[:st.n][keep]
                st.keep_mask(keep)

    def cumulative_scores(self, layer: int) -> dict[int, float]:
        st = self._layers[layer]
        return {int(p): float(s) for p, s in
                zip(st.pos[:st.n], self._scores[layer][:st.n])}

    def clone(self):
        c = H2OCache(self.n_layers, self.n_kv_heads, self.head_dim, self.config)
        for li, (mine, theirs) in enumerate(zip(self._layers, c._layers)):
            mine.copy_into(theirs)
            if len(c._scores[li]) < mine.n:
                c._scores[li] = np.zeros(mine.k.shape[0], dtype=F64)
            c._scores[li][:mine.n] = self._scores[li][:mine.n]
            c._pending[li] = [(q, p.copy(), w.copy()) for q, p, w in self._pending[li]]
        c.frontier, c.committed = self.frontier, self.committed
        return c


@dataclass
class ChunkScoreTable:
    """Per-layer chunk scoring snapshot from a retrieval build."""
    chunk_size: int
    boundaries: list[np.ndarray]      # per layer, chunk start offsets plus end
    scores: list[np.ndarray]          # per layer, float64 score per chunk
    selected: list[list[int]]         # per layer, chunk ids in importance order
    clamped: bool = False

    def ranking(self, layer: int) -> list[int]:
        """All chunk ids by descending score, ties to the lower id."""
        s = self.scores[layer]
        return sorted(range(len(s)), key=lambda c: (-s[c], c))


def score_chunks(keys: np.ndarray, queries: np.ndarray, chunk_size: int,
                 n_kv_heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Chunk scores for one layer: mean over query heads of
    dot(q_head, mean key of the head's kv group) / sqrt(head_dim).

    keys [L, KVH, dh] (post-RoPE, as cached); queries [H, dh]. Returns
    (boundaries [n_chunks+1], scores [n_chunks] float64).
    """
    L = keys.shape[0]
    dh = keys.shape[2]
    H = queries.shape[0]
    g = H // n_kv_heads
    n_chunks = (L + chunk_size - 1) // chunk_size
    bounds = np.minimum(np.arange(n_chunks + 1) * chunk_size, L)
    scores = np.empty(n_chunks, dtype=F64)
    k64 = keys.astype(F64)
    q64 = queries.astype(F64)
    for c in range(n_chunks):
        mean_k = k64[bounds[c]:bounds[c + 1]].mean(axis=0)        # [KVH, dh]
        per_head = np.einsum("hd,hd->h", q64.reshape(H, dh),
                             np.repeat(mean_k, g, axis=0))
        scores[c] = per_head.mean() / np.sqrt(dh)
    return bounds, scores


class RetrievalCache(KVCache):
    """Budgeted view over a retained full cache, selected chunk-wise per
    layer against the most recent committed token's query vectors. Newly
    committed tokens overwrite the least-important slot, so the exposed
    count is constant between rebuilds; rebuilding from the full source can
    re-expose any position, which is what makes the policy lossless."""

    policy = "retrieval"
    batched_prefill_ok = False

    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int, config: RetrievalConfig):
        super().__init__(n_layers, n_kv_heads, head_dim)
        self.config = config
        self._sel = [_LayerStore(n_kv_heads, head_dim, config.budget + 8)
                     for _ in range(n_layers)]
        self._spec = [_LayerStore(n_kv_heads, head_dim, 32) for _ in range(n_layers)]
        self._victims: list[list[int]] = [[] for _ in range(n_layers)]  # positions, least important first
        self.table: Optional[ChunkScoreTable] = None

    def build(self, source: FullCache, queries: list[np.ndarray], upto: int) -> ChunkScoreTable:
        """Select chunks of source positions [0, upto) using per-layer query
        vectors [n_heads, head_dim]; replaces the current selection and any
        speculative tail, and resets the frontier to `upto`."""
        if upto < 1:
            raise ContractError("retrieval build needs a non-empty source prefix")
        cfg = self.config
        quota = cfg.budget // cfg.chunk_size
        clamped = cfg.budget >= upto
        bounds_l, scores_l, selected_l = [], [], []
        for li in range(self.n_layers):
            K, V, pos, _ = source.expose(li)
            if pos.shape[0] < upto:
                raise ContractError("source cache shorter than requested build range")
            bounds, scores = score_chunks(K[:upto], queries[li], cfg.chunk_size,
                                          self.n_kv_heads)
            n_chunks = len(scores)
            last = n_chunks - 1
            if clamped:
                chosen = list(range(n_chunks))
            else:
                by_score = sorted((c for c in range(n_chunks) if c != last),
                                  key=lambda c: (-scores[c], c))
                chosen = sorted(by_score[:quota - 1] + [last])
            # importance order: descending score, but the recent chunk is
            # pinned most-important; victims are the reverse, oldest first
            # within a chunk
            rest = sorted((c for c in chosen if c != last), key=lambda c: (-scores[c], c))
            importance = [last] + rest
            victims: list[int] = []
            for c in reversed(importance):
                victims.extend(range(int(bounds[c]), int(bounds[c + 1])))
            sel_idx = np.concatenate([np.arange(bounds[c], bounds[c + 1]) for c in chosen])
            st = self._sel[li]
            st.n = 0
            st.push(K[sel_idx], V[sel_idx], pos[sel_idx])
            self._spec[li].n = 0
            self._victims[li] = victims
            bounds_l.append(bounds)
            scores_l.append(scores)
            selected_l.append(importance)
        self.frontier = upto
        self.committed = upto
        self.table = ChunkScoreTable(cfg.chunk_size, bounds_l, scores_l, selected_l, clamped)
        return self.table

    def append(self, layer, k, v):
        self._check_kv(k, v)
        st = self._spec[layer]
        start = self.frontier
        st.push(k, v, np.arange(start, start + k.shape[0]))
        if layer == self.n_layers - 1:
            self.frontier = start + k.shape[0]

    def expose(self, layer, queries=None):
        sel, spec = self._sel[layer], self._spec[layer]
        if spec.n == 0:
            return sel.k[:sel.n], sel.v[:sel.n], sel.pos[:sel.n], None
        k = np.concatenate([sel.k[:sel.n], spec.k[:spec.n]])
        v = np.concatenate([sel.v[:sel.n], spec.v[:spec.n]])
        pos = np.concatenate([sel.pos[:sel.n], spec.pos[:spec.n]])
        return k, v, pos, None

    def rollback_to(self, n):
        if n < self.committed:
            raise ContractError(f"retrieval cache cannot roll below committed {self.committed}")
        for st in self._spec:
            cut = int(np.searchsorted(st.pos[:st.n], n))
            st.n = cut
        self.frontier = min(self.frontier, n)

    def commit(self, n):
        self._check_commit(n)
        for li in range(self.n_layers):
            sel, spec = self._sel[li], self._spec[li]
            take = int(np.searchsorted(spec.pos[:spec.n], n))
            for i in range(take):
                self._overwrite(li, spec.k[i].copy(), spec.v[i].copy(), int(spec.pos[i]))
            if take:
                rest = spec.n - take
                spec.k[:rest] = spec.k[take:spec.n]
                spec.v[:rest] = spec.v[take:spec.n]
                spec.pos[:rest] = spec.pos[take:spec.n]
                spec.n = rest
        self.committed = n

    def _overwrite(self, layer: int, k: np.ndarray, v: np.ndarray, position: int):
        sel = self._sel[layer]
        victims = self._victims[layer]
        if not victims:
            raise ContractError("retrieval cache has no slots")
        victim_pos = victims.pop(0)
        idx = int(np.searchsorted(sel.pos[:sel.n], victim_pos))
        keep = np.ones(sel.n, dtype=bool)
        keep[idx] = False
        sel.keep_mask(keep)
        sel.push(k[None], v[None], np.array([position]))
        victims.append(position)

    def clone(self):
        c = RetrievalCache(self.n_layers, self.n_kv_heads, self.head_dim, self.config)
        for li in range(self.n_layers):
            self._sel[li].copy_into(c._sel[li])
            self._spec[li].copy_into(c._spec[li])
            c._victims[li] = list(self._victims[li])
        c.frontier, c.committed = self.frontier, self.committed
        c.table = self.table
        return c


class TopKCache(KVCache):
    """Oracle upper bound: retains everything and, for each single-query
    decode, exposes exactly the budget entries with the highest attention
    weight per layer and kv-head group (group-mean of the exact softmax row
    over the full cache)."""

    policy = "topk"

    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int,
                 max_entries: int, budget: int):
        super().__init__(n_layers, n_kv_heads, head_dim)
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.budget = budget
        self.max_entries = max_entries
        self._layers = [_LayerStore(n_kv_heads, head_dim, min(max_entries, 128))
                        for _ in range(n_layers)]

    @classmethod
    def from_config(cls, model_config, budget: int):
        return cls(model_config.n_layers, model_config.n_kv_heads,
                   model_config.head_dim, model_config.max_seq, budget)

    def append(self, layer, k, v):
        self._check_kv(k, v)
        st = self._layers[layer]
        if st.n + k.shape[0] > self.max_entries:
            raise CapacityError(f"top-k cache overflow past {self.max_entries}")
        start = self.frontier
        st.push(k, v, np.arange(start, start + k.shape[0]))
        if layer == self.n_layers - 1:
            self.frontier = start + k.shape[0]

    def group_weights(self, layer: int, queries: np.ndarray) -> np.ndarray:
        """Exact per-group mean softmax weights over all stored entries.

        queries [n_heads, head_dim] for a single decode position; returns
        [n_kv_heads, L] float64.
        """
        st = self._layers[layer]
        KVH, dh = self.n_kv_heads, self.head_dim
        g = queries.shape[0] // KVH
        qg = queries.reshape(KVH, g, dh).astype(F64)
        scores = np.einsum("kgd,lkd->kgl", qg, st.k[:st.n].astype(F64)) / np.sqrt(dh)
        z = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(z)
        w = e / e.sum(axis=-1, keepdims=True)
        return w.mean(axis=1)

    def select(self, layer: int, queries: np.ndarray) -> np.ndarray:
        """Boolean mask [n_kv_heads, L]: budget highest-weight entries per
        group, ties to the lower position."""
        st = self._layers[layer]
        w = self.group_weights(layer, queries)
        mask = np.zeros((self.n_kv_heads, st.n), dtype=bool)
        b = min(self.budget, st.n)
        order = np.lexsort((np.arange(st.n)[None, :].repeat(self.n_kv_heads, 0), -w), axis=1)
        for kv in range(self.n_kv_heads):
            mask[kv, order[kv, :b]] = True
        return mask

    def expose(self, layer, queries=None):
        st = self._layers[layer]
        if queries is None or queries.shape[0] > 1 or st.n <= self.budget:
            return st.k[:st.n], st.v[:st.n], st.pos[:st.n], None
        mask = self.select(layer, queries[0])
        return st.k[:st.n], st.v[:st.n], st.pos[:st.n], mask

    def rollback_to(self, n):
        for st in self._layers:
            st.n = min(st.n, n)
        self.frontier = min(self.frontier, n)
        self.committed = min(self.committed, n)

    def commit(self, n):
        self._check_commit(n)
        self.committed = n

    def clone(self):
        c = TopKCache(self.n_layers, self.n_kv_heads, self.head_dim,
                      self.max_entries, self.budget)
        for mine, theirs in zip(self._layers, c._layers):
            mine.copy_into(theirs)
        c.frontier, c.committed = self.frontier, self.committed
        return c


class RollingAcceptance:
    """Fixed-size window of per-round acceptance rates."""

    def __init__(self, window: int):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.rates: list[float] = []

    def push(self, rate: float):
        self.rates.append(float(rate))
        if len(self.rates) > self.window:
            self.rates.pop(0)

    @property
    def full(self) -> bool:
        return len(self.rates) >= self.window

    def mean(self) -> float:
        return float(np.mean(self.rates)) if self.rates else 1.0


def should_rebuild(config: RetrievalConfig, tokens_since_build: int,
                   rolling: RollingAcceptance) -> bool:
    """True at the rebuild stride, or when a full rolling window of
    acceptance rates has dropped below the configured threshold."""
    if tokens_since_build >= config.rebuild_stride:
        return True
    return rolling.full and rolling.mean() < config.rebuild_accept_threshold
