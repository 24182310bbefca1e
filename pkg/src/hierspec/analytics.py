"""Measurement harnesses: attention-mass recovery, needle fixtures,
acceptance-rate benchmarks, and the analytic + Monte-Carlo speedup model.

Paper-scale acceptance numbers and wall-clock speedups are not reproducible
with desk-scale models; these harnesses reproduce orderings and mechanisms,
and the speedup model takes externally measured acceptance rates and
latencies as inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .caches import (FullCache, H2OCache, H2OConfig, RetrievalCache,
                     RetrievalConfig, StreamingCache, StreamingConfig, TopKCache)
from .model import (BOS, ForwardRecorder, ModelConfig, ModelWeights,
                    decode_step, generate_weights, prefill, prob_from_logits,
                    sample_from_probs)
from .speculation import (HierarchicalSession, LevelStats, SingleLevelSession,
                          SpecConfig)

DIGIT_TOKENS = tuple(range(ord("0"), ord("9") + 1))


# ---------------------------------------------------------------------------
# attention-mass recovery

def _top_mass(row: np.ndarray, budget: int) -> float:
    b = min(budget, row.shape[0])
    return float(np.sort(row.astype(np.float64))[::-1][:b].sum())


def sparsity_recovery(weights: ModelWeights, context_tokens: Sequence[int],
                      budget: int) -> np.ndarray:
    """Recovered attention mass of the final-position query per layer
    (averaged over heads): the sum of the top-`budget` post-softmax weights.
    Budgets beyond the context are clamped."""
    cache = FullCache.from_config(weights.config)
    rec = ForwardRecorder(record_probs=True)
    prefill(weights, context_tokens, cache, rec)
    out = np.empty(weights.config.n_layers, dtype=np.float64)
    for li, rows in enumerate(rec.last_probs):
        out[li] = float(np.mean([_top_mass(r, budget) for r in rows]))
    return out


@dataclass
class LocalityCurves:
    """Per-offset recovery over the original context region.

    frozen[o, layer]: mass captured by the index set frozen from the last
    prefill query; fresh[o, layer]: mass of a fresh top-k set at that offset.
    Offset 0 is the prefill query itself. Both are normalized within the
    original context region.
    """
    budget: int
    frozen: np.ndarray
    fresh: np.ndarray


def locality_recovery(weights: ModelWeights, context_tokens: Sequence[int],
                      budget: int, horizon: int, temperature: float = 0.0,
                      seed: int = 0) -> LocalityCurves:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    cfg = weights.config
    cache = FullCache.from_config(cfg)
    rec = ForwardRecorder(record_probs=True)
    logits = prefill(weights, context_tokens, cache, rec)[-1]
    L = len(context_tokens)
    b = min(budget, L)
    frozen_idx = []
    for rows in rec.last_probs:
        per_head = []
        for r in rows:
            order = np.lexsort((np.arange(L), -r.astype(np.float64)))
            per_head.append(order[:b])
        frozen_idx.append(per_head)
    frozen = np.empty((horizon + 1, cfg.n_layers), dtype=np.float64)
    fresh = np.empty_like(frozen)

    def measure(offset: int):
        for li, rows in enumerate(rec.last_probs):
            fr, fh = [], []
            for h, r in enumerate(rows):
                orig = r[:L].astype(np.float64)
                denom = orig.sum()
                fr.append(orig[frozen_idx[li][h]].sum() / denom)
                fh.append(np.sort(orig)[::-1][:b].sum() / denom)
            frozen[offset, li] = np.mean(fr)
            fresh[offset, li] = np.mean(fh)

    measure(0)
    rng = np.random.default_rng(seed)
    for off in range(1, horizon + 1):
        tok = sample_from_probs(prob_from_logits(logits, temperature), rng)
        logits = decode_step(weights, tok, cache, rec)
        cache.commit(cache.frontier)
        measure(off)
    return LocalityCurves(budget=b, frozen=frozen, fresh=fresh)


# ---------------------------------------------------------------------------
# planted-needle fixture

def planted_attention_weights(config: ModelConfig, context_len: int,
                              n_needle_tokens: int, strength: float,
                              answer_token: int, seed: int = 0,
                              needle_token_ids: Sequence[int] = DIGIT_TOKENS,
                              designated_layers: Sequence[int] = (0,),
                              margin: float = 2.0) -> ModelWeights:
    """Random weights rigged so every decode query concentrates at least
    `strength` attention mass (summed over needle positions) on needle-token
    positions at the designated layers, and attending the needle drives the
    output distribution onto `answer_token`.

    Mechanism: two reserved embedding channels act as a query marker (carried
    by every token) and a key marker (carried only by needle token ids); the
    designated layers wire them into the slowest RoPE pair of every head so
    the score survives relative rotation. The needle value path is isolated
    onto one attention channel and one residual dimension that nothing else
    writes, so without the needle exposed the answer logit stays at the
    noise floor.
    """
    if not 0.0 < strength <= 0.99:
        raise ValueError("strength must be in (0, 0.99]")
    if n_needle_tokens < 1 or context_len <= n_needle_tokens:
        raise ValueError("need 1 <= n_needle_tokens < context_len")
    if answer_token in needle_token_ids:
        raise ValueError("answer_token must not be a needle token")
    d, dh = config.d_model, config.head_dim
    if d < 8 or dh < 4:
        raise ValueError("planted construction needs d_model >= 8 and head_dim >= 4")
    # slowest rope pair must be effectively position-independent
    max_rot = 2 * context_len * config.rope_theta ** (-(dh - 2) / dh)
    if max_rot > 0.15:
        raise ValueError(
            f"rope_theta {config.rope_theta} rotates the slow pair by {max_rot:.3f} rad "
            f"over this context; use a larger rope_theta")

    w = generate_weights(config, seed, tied_head=False)
    m_query, m_key = d - 2, d - 1
    a_dim = d - 3
    slow = dh - 2  # even member of the slowest rope pair

    emb = w.tensors["embedding"]
    emb[:, m_query] = 1.0
    emb[:, m_key] = 0.0
    emb[:, a_dim] = 0.0
    emb[list(needle_token_ids), m_key] = 1.0

    # normed marker magnitudes after the first RMS norm (gains are ~1)
    rms = np.sqrt(np.mean(np.square(emb.astype(np.float64)), axis=1) + config.norm_eps)
    nq = float((1.0 / rms).min())
    nk = float((emb[list(needle_token_ids), m_key].astype(np.float64)
                / rms[list(needle_token_ids)]).min())
    p = n_needle_tokens
    required = np.log(strength / (1.0 - strength) * (context_len - p) / p) + margin
    alpha = float(np.sqrt(max(required, 1.0) * np.sqrt(dh) / (nq * nk)))

    for li in designated_layers:
        wq = w.tensors[f"layers.{li}.wq"]
        wk = w.tensors[f"layers.{li}.wk"]
        wq[m_query, :] = 0.0
        wk[m_key, :] = 0.0
        for h in range(config.n_heads):
            wq[m_query, h * dh + slow] = alpha
        for kv in range(config.n_kv_heads):
            wk[m_key, kv * dh + slow] = alpha
    # answer channel: only the needle marker writes attention value dim 0 of
    # head 0, only that channel writes a_dim, and only a_dim drives the answer
    li0 = designated_layers[0]
    wv = w.tensors[f"layers.{li0}.wv"]
    wo = w.tensors[f"layers.{li0}.wo"]
    wv[:, 0] = 0.0
    wv[m_key, 0] = 1.0
    wo[:, a_dim] = 0.0
    wo[0, a_dim] = 1.0
    head = w.tensors["lm_head"]
    head[a_dim, :] = 0.0
    head[a_dim, answer_token] = 1.0
    w._runtime = None
    return w.validate()


@dataclass
class NeedleCase:
    tokens: list[int]
    needle_positions: list[int]
    passkey: bytes
    trigger_position: int


def needle_corpus(context_len: int, n_cases: int, seed: int,
                  passkey_len: int = 6) -> list[NeedleCase]:
    """Synthetic byte prompts: BOS, letter/space filler, a digit passkey at a
    position uniform over the middle 80% of the context, more filler, and a
    trailing '?' trigger. Digits appear only in the passkey, so the
    detokenized prompt contains it exactly once."""
    if context_len < passkey_len + 8:
        raise ValueError("context too short for a passkey")
    rng = np.random.default_rng(seed)
    filler = [ord(c) for c in "abcdefghijklmnopqrstuvwxyz "]
    lo = max(1, int(np.ceil(0.1 * context_len)))
    hi = int(np.floor(0.9 * context_len)) - passkey_len
    cases = []
    for _ in range(n_cases):
        toks = [BOS] + [int(filler[i]) for i in rng.integers(0, len(filler), context_len - 2)]
        start = int(rng.integers(lo, hi + 1))
        passkey = bytes(int(d) + ord("0") for d in rng.integers(0, 10, passkey_len))
        toks[start:start + passkey_len] = list(passkey)
        toks.append(ord("?"))
        cases.append(NeedleCase(
            tokens=toks,
            needle_positions=list(range(start, start + passkey_len)),
            passkey=passkey,
            trigger_position=len(toks) - 1,
        ))
    return cases


# ---------------------------------------------------------------------------
# acceptance measurement

@dataclass
class AcceptanceStats:
    pairing: str
    proposed: int = 0
    accepted: int = 0
    rounds: int = 0
    per_case: list[float] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    def absorb(self, stats: LevelStats):
        self.proposed += stats.proposed
        self.accepted += stats.accepted
        self.rounds += stats.rounds
        self.per_case.append(stats.rate)


SELF_PAIRINGS = ("self:streaming", "self:h2o", "self:retrieval", "self:topk")


def _draft_cache_for(pairing: str, config: ModelConfig, *,
                     streaming: StreamingConfig, h2o: H2OConfig,
                     retrieval: RetrievalConfig, topk_budget: int):
    kind = pairing.split(":", 1)[1]
    if kind == "streaming":
        return StreamingCache.from_config(config, streaming)
    if kind == "h2o":
        return H2OCache.from_config(config, h2o)
    if kind == "retrieval":
        return RetrievalCache.from_config(config, retrieval)
    if kind == "topk":
        return TopKCache.from_config(config, topk_budget)
    raise ValueError(f"unknown pairing {pairing!r}")


def measure_acceptance(pairing: str, target: ModelWeights,
                       prompts: Sequence[Sequence[int]], *,
                       draft: Optional[ModelWeights] = None,
                       gamma: int = 4, temperature: float = 0.0,
                       gen_tokens: int = 16, seed: int = 0,
                       streaming: StreamingConfig = StreamingConfig(),
                       h2o: H2OConfig = H2OConfig(),
                       retrieval: RetrievalConfig = RetrievalConfig(),
                       topk_budget: int = 64,
                       gamma2: int = 6) -> dict[str, AcceptanceStats]:
    """Aggregate acceptance rates for one speculation pairing over a corpus.

    Pairings: 'hierarchical' (draft model + streaming speculated against the
    retrieval-cache target, full-cache verified; returns both levels) and
    'self:streaming' / 'self:h2o' / 'self:retrieval' / 'self:topk'
    (self-speculation against the full cache). Per-case seeds are derived as
    seed XOR case index.
    """
    if pairing == "hierarchical":
        if draft is None:
            raise ValueError("hierarchical pairing needs a draft model")
        inner = AcceptanceStats("hierarchical:inner")
        outer = AcceptanceStats("hierarchical:outer")
        for i, prompt in enumerate(prompts):
            cfg = SpecConfig(target_len=len(prompt) + gen_tokens, gamma1=gamma,
                             gamma2=gamma2, temperature=temperature,
                             seed=seed ^ i, streaming=streaming, retrieval=retrieval)
            _, trace = HierarchicalSession(target, draft, prompt, cfg).generate()
            inner.absorb(trace.inner)
            outer.absorb(trace.outer)
        return {"inner": inner, "outer": outer}
    if pairing not in SELF_PAIRINGS:
        raise ValueError(f"unknown pairing {pairing!r}")
    stats = AcceptanceStats(pairing)
    for i, prompt in enumerate(prompts):
        cache = _draft_cache_for(pairing, target.config, streaming=streaming,
                                 h2o=h2o, retrieval=retrieval, topk_budget=topk_budget)
        session = SingleLevelSession(target, cache, target, prompt, gamma,
                                     temperature, retrieval_config=retrieval)
        _, s = session.generate(len(prompt) + gen_tokens, seed=seed ^ i)
        stats.absorb(s)
    return {"self": stats}


# ---------------------------------------------------------------------------
# speedup model

def expected_tokens(alpha: float, gamma: int) -> float:
    """Expected committed tokens of one verification round with gamma
    proposals: (1 - alpha^(gamma+1)) / (1 - alpha), -> gamma+1 as alpha -> 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if alpha >= 1.0:
        return float(gamma + 1)
    return float((1.0 - alpha ** (gamma + 1)) / (1.0 - alpha))


@dataclass(frozen=True)
class LatencyModel:
    """Affine per-forward latencies in milliseconds.

    t_draft and t_target_retrieval grow with the exposed budget, the full
    target forward with the context length.
    """
    draft_base: float = 0.5
    draft_per_token: float = 0.0005
    retrieval_base: float = 2.0
    retrieval_per_token: float = 0.002
    full_base: float = 2.0
    full_per_token: float = 0.006

    def __post_init__(self):
        for name in ("draft_base", "retrieval_base", "full_base"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("draft_per_token", "retrieval_per_token", "full_per_token"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def t_draft(self, context: int, budget: int) -> float:
        return self.draft_base + self.draft_per_token * min(budget, context)

    def t_target_retrieval(self, context: int, budget: int) -> float:
        return self.retrieval_base + self.retrieval_per_token * min(budget, context)

    def t_target_full(self, context: int) -> float:
        return self.full_base + self.full_per_token * context

    def check(self, context: int, budget: int):
        if budget < context and self.t_target_full(context) < self.t_target_retrieval(context, budget):
            raise ValueError("full-cache forward must not be faster than the retrieval forward")


@dataclass
class SpeedupEstimate:
    tokens_per_round: float
    wall_ms_per_round: float
    speedup: float
    ci_halfwidth: float = 0.0
    inner_rounds_per_outer: float = 0.0


def _round_yield_distribution(alpha1: float, gamma1: int) -> dict[int, float]:
    # tokens emitted by one inner round: k accepted then a correction, or
    # gamma1 accepted plus the bonus
    dist = {k + 1: (alpha1 ** k) * (1.0 - alpha1) for k in range(gamma1)}
    dist[gamma1 + 1] = dist.get(gamma1 + 1, 0.0) + alpha1 ** gamma1
    return dist


def _inner_phase(alpha1: float, gamma1: int, gamma2: int):
    """Exact E[inner rounds] and the distribution of the inner token count n
    at the first time n >= gamma2 (renewal DP)."""
    yd = _round_yield_distribution(alpha1, gamma1)
    mass = {0: 1.0}
    e_rounds = 0.0
    terminal: dict[int, float] = {}
    while mass:
        nxt: dict[int, float] = {}
        for s, pr in mass.items():
            e_rounds += pr
            for x, q in yd.items():
                if q == 0.0:
                    continue
                s2 = s + x
                if s2 >= gamma2:
                    terminal[s2] = terminal.get(s2, 0.0) + pr * q
                else:
                    nxt[s2] = nxt.get(s2, 0.0) + pr * q
        mass = nxt
    return e_rounds, terminal


def hierarchical_speedup(alpha1: float, alpha2: float, gamma1: int, gamma2: int,
                         latency: LatencyModel, context: int, budget: int,
                         draft_budget: Optional[int] = None) -> SpeedupEstimate:
    """Closed-form speedup of the two-level loop versus the autoregressive
    baseline: exact expectations of the simulated process (inner rounds by
    renewal DP, outer tokens over the exact terminal-count distribution)."""
    for a in (alpha1, alpha2):
        if not 0.0 <= a <= 1.0:
            raise ValueError("acceptance rates must be in [0, 1]")
    if gamma1 < 1 or gamma2 < 1:
        raise ValueError("gamma1 and gamma2 must be >= 1")
    latency.check(context, budget)
    if draft_budget is None:
        draft_budget = max(context // 8, 1)
    e_rounds, terminal = _inner_phase(alpha1, gamma1, gamma2)
    e_tokens = sum(pr * expected_tokens(alpha2, n) for n, pr in terminal.items())
    t_d = latency.t_draft(context, draft_budget)
    t_r = latency.t_target_retrieval(context, budget)
    t_f = latency.t_target_full(context)
    wall = e_rounds * (gamma1 * t_d + t_r) + t_f
    return SpeedupEstimate(tokens_per_round=e_tokens, wall_ms_per_round=wall,
                           speedup=e_tokens * t_f / wall,
                           inner_rounds_per_outer=e_rounds)


def hierarchical_speedup_coarse(alpha1: float, alpha2: float, gamma1: int,
                                gamma2: int, latency: LatencyModel, context: int,
                                budget: int,
                                draft_budget: Optional[int] = None) -> SpeedupEstimate:
    """First-order variant that ignores inner-phase overshoot: gamma2 /
    expected_tokens(alpha1, gamma1) inner rounds and exactly gamma2 outer
    proposals. Kept for comparison; drifts a few percent at high alpha."""
    latency.check(context, budget)
    if draft_budget is None:
        draft_budget = max(context // 8, 1)
    rounds = gamma2 / expected_tokens(alpha1, gamma1)
    tokens = expected_tokens(alpha2, gamma2)
    t_d = latency.t_draft(context, draft_budget)
    t_r = latency.t_target_retrieval(context, budget)
    t_f = latency.t_target_full(context)
    wall = rounds * (gamma1 * t_d + t_r) + t_f
    return SpeedupEstimate(tokens_per_round=tokens, wall_ms_per_round=wall,
                           speedup=tokens * t_f / wall,
                           inner_rounds_per_outer=rounds)


def _capped_geometric(u: np.ndarray, alpha: float, cap: np.ndarray | int) -> np.ndarray:
    """Accepted-run length before the first rejection, capped: exact inverse
    CDF using one uniform per chain."""
    if alpha <= 0.0:
        return np.zeros_like(u, dtype=np.int64)
    cap_arr = np.broadcast_to(np.asarray(cap, dtype=np.int64), u.shape)
    if alpha >= 1.0:
        return cap_arr.copy()
    with np.errstate(divide="ignore"):
        k = np.floor(np.log(u) / np.log(alpha))
    k = np.where(np.isfinite(k), k, cap_arr)
    return np.minimum(k.astype(np.int64), cap_arr)


def simulate_speedup(alpha1: float, alpha2: float, gamma1: int, gamma2: int,
                     latency: LatencyModel, context: int, budget: int,
                     rounds: int, seed: int,
                     draft_budget: Optional[int] = None) -> SpeedupEstimate:
    """Monte-Carlo oracle for hierarchical_speedup: independent Bernoulli
    accept/reject chains through the two-level loop structure, with the same
    per-phase latency charges. Reports a 95% CI half-width from batch means.
    """
    if rounds < 100:
        raise ValueError("need at least 100 simulated rounds")
    latency.check(context, budget)
    if draft_budget is None:
        draft_budget = max(context // 8, 1)
    rng = np.random.default_rng(seed)
    n = np.zeros(rounds, dtype=np.int64)
    inner_rounds = np.zeros(rounds, dtype=np.int64)
    active = np.ones(rounds, dtype=bool)
    while active.any():
        u = rng.random(rounds)
        k = _capped_geometric(u, alpha1, gamma1)
        n[active] += k[active] + 1
        inner_rounds[active] += 1
        active = n < gamma2
    u = rng.random(rounds)
    tokens = _capped_geometric(u, alpha2, n) + 1
    t_d = latency.t_draft(context, draft_budget)
    t_r = latency.t_target_retrieval(context, budget)
    t_f = latency.t_target_full(context)
    wall = inner_rounds * (gamma1 * t_d + t_r) + t_f
    speedup = tokens.sum() * t_f / wall.sum()
    n_batches = 100
    per = rounds // n_batches
    bt = tokens[:n_batches * per].reshape(n_batches, per).sum(axis=1).astype(np.float64)
    bw = wall[:n_batches * per].reshape(n_batches, per).sum(axis=1)
    batch_speedups = bt * t_f / bw
    ci = 1.96 * float(batch_speedups.std(ddof=1)) / np.sqrt(n_batches)
    return SpeedupEstimate(tokens_per_round=float(tokens.mean()),
                           wall_ms_per_round=float(wall.mean()),
                           speedup=float(speedup), ci_halfwidth=ci,
                           inner_rounds_per_outer=float(inner_rounds.mean()))
