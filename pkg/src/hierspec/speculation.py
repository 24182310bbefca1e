"""Speculative decoding primitives and the hierarchical generation loop.

Two-level structure: a small draft model with a streaming cache proposes
tokens that the target model scores under a budgeted retrieval cache
(inner level); the tokens surviving the inner level are then verified by
the target model under its full cache (outer level), which preserves the
target's output distribution exactly.

RNG discipline: one seeded PCG64 stream per generation call, consumed in a
fixed order so traces replay exactly. Every sampling event (draft sample,
bonus sample, correction sample) and every verification consumes exactly
one uniform, in loop order.

Acceptance accounting convention: per round, proposed counts every drafted
token presented to the verifier; tokens discarded unexamined after the
first rejection count as rejected, so accepted + rejected == proposed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .caches import (FullCache, KVCache, RetrievalCache, RetrievalConfig,
                     RollingAcceptance, StreamingCache, StreamingConfig,
                     should_rebuild)
from .errors import ContractError
from .model import (ForwardRecorder, ModelWeights, decode_step, prefill,
                    prob_from_logits, sample_from_probs)


@dataclass
class SpecConfig:
    target_len: int
    gamma1: int = 2
    gamma2: int = 6
    temperature: float = 0.0
    seed: int = 0
    streaming: StreamingConfig = field(default_factory=StreamingConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)

    def __post_init__(self):
        if self.gamma1 < 1 or self.gamma2 < 1:
            raise ValueError("gamma1 and gamma2 must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def verify_token(x: int, q: np.ndarray, p: np.ndarray,
                 rng: np.random.Generator) -> bool:
    """Accept x (sampled from q) with probability min(1, p[x]/q[x]).

    Consumes exactly one uniform regardless of outcome.
    """
    qx = float(q[x])
    if qx <= 0.0:
        raise ContractError(f"verify_token: draft distribution assigns 0 to token {x}")
    ratio = float(p[x]) / qx
    return rng.random() < min(1.0, ratio)


def correct_token(q: np.ndarray, p: np.ndarray, rng: np.random.Generator) -> int:
    """Sample from normalize(max(p - q, 0)); falls back to p when the
    residual is numerically zero (p == q). Consumes exactly one uniform."""
    residual = np.maximum(p - q, 0.0)
    z = residual.sum()
    if z <= 1e-12:
        return sample_from_probs(p, rng)
    return sample_from_probs(residual / z, rng)


class Lane:
    """A model plus one cache handle plus the frontier logits row.

    The cache holds KV for absolute positions [0, frontier); frontier_logits
    is the logits row predicting position `frontier` (None right after a
    rollback that shrank the frontier, until the next advance recomputes it).
    """

    def __init__(self, weights: ModelWeights, cache: KVCache):
        self.weights = weights
        self.cache = cache
        self.frontier_logits: Optional[np.ndarray] = None
        self.recorder = ForwardRecorder(record_probs=False)

    @property
    def frontier(self) -> int:
        return self.cache.frontier

    def prefill(self, tokens: Sequence[int]) -> None:
        logits = prefill(self.weights, tokens, self.cache, self.recorder)
        self.frontier_logits = logits[-1]

    def advance(self, tokens: Sequence[int]) -> None:
        for tok in tokens:
            self.frontier_logits = decode_step(self.weights, tok, self.cache, self.recorder)

    def catch_up(self, sequence: Sequence[int]) -> None:
        if self.frontier < len(sequence):
            self.advance(sequence[self.frontier:])

    def score(self, tokens: Sequence[int]) -> list[np.ndarray]:
        """Logits rows for the positions of `tokens` plus the next position:
        len(tokens) + 1 rows, the first being the current frontier row."""
        if self.frontier_logits is None:
            raise ContractError("lane has no frontier logits; advance over committed tokens first")
        rows = [self.frontier_logits]
        for tok in tokens:
            rows.append(decode_step(self.weights, tok, self.cache, self.recorder))
        self.frontier_logits = rows[-1]
        return rows

    def rollback_to(self, n: int) -> None:
        if n < self.cache.frontier:
            self.frontier_logits = None
        self.cache.rollback_to(n)

    def commit(self) -> None:
        self.cache.commit(self.cache.frontier)

    def last_queries(self) -> list[np.ndarray]:
        return [q.copy() for q in self.recorder.last_queries]

    def clone(self) -> "Lane":
        c = Lane(self.weights, self.cache.clone())
        c.frontier_logits = None if self.frontier_logits is None else self.frontier_logits.copy()
        return c


@dataclass
class LevelStats:
    proposed: int = 0
    accepted: int = 0
    rounds: int = 0

    @property
    def rejected(self) -> int:
        return self.proposed - self.accepted

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


class StepTrace:
    """Per-token provenance of one generation, serializable to JSON lines.

    Each record: position (absolute), token, level (draft / retrieval /
    corrected / bonus), accepted flag, outer_round. Counters aggregate both
    speculation levels.
    """

    def __init__(self):
        self.records: list[dict] = []
        self.inner = LevelStats()
        self.outer = LevelStats()

    def add(self, position: int, token: int, level: str, accepted: bool, outer_round: int):
        self.records.append({
            "position": int(position), "token": int(token), "level": level,
            "accepted": bool(accepted), "outer_round": int(outer_round),
        })

    def truncate(self, n_tokens: int):
        self.records = self.records[:n_tokens]

    def emitted_tokens(self) -> list[int]:
        return [r["token"] for r in self.records]

    def to_jsonl(self, fp) -> None:
        for r in self.records:
            fp.write(json.dumps(r) + "\n")

    def summary(self) -> dict:
        return {
            "emitted": len(self.records),
            "inner": {"proposed": self.inner.proposed, "accepted": self.inner.accepted,
                      "rounds": self.inner.rounds, "rate": self.inner.rate},
            "outer": {"proposed": self.outer.proposed, "accepted": self.outer.accepted,
                      "rounds": self.outer.rounds, "rate": self.outer.rate},
        }


def _verify_chain(tokens: Sequence[int], draft_dists: Sequence[np.ndarray],
                  target_dists: Sequence[np.ndarray], rng: np.random.Generator):
    """Sequential verify of drafted tokens against their target
    distributions; on first rejection appends the corrected token, on full
    acceptance appends the bonus. Returns (emitted, labels, accepted_count).
    """
    n = len(tokens)
    emitted: list[int] = []
    labels: list[str] = []
    accepted = 0
    for i in range(n):
        if verify_token(tokens[i], draft_dists[i], target_dists[i], rng):
            emitted.append(int(tokens[i]))
            labels.append("accepted")
            accepted += 1
        else:
            emitted.append(correct_token(draft_dists[i], target_dists[i], rng))
            labels.append("corrected")
            return emitted, labels, accepted
    emitted.append(sample_from_probs(target_dists[n], rng))
    labels.append("bonus")
    return emitted, labels, accepted


def draft_round(draft_lane: Lane, committed: Sequence[int], gamma1: int,
                temperature: float, rng: np.random.Generator):
    """Autoregressively draft gamma1 tokens under the draft lane's cache.

    Returns (tokens, q distributions); the lane's cache contains the drafted
    entries speculatively.
    """
    draft_lane.catch_up(committed)
    tokens: list[int] = []
    qdists: list[np.ndarray] = []
    for _ in range(gamma1):
        q = prob_from_logits(draft_lane.frontier_logits, temperature)
        tok = sample_from_probs(q, rng)
        tokens.append(tok)
        qdists.append(q)
        draft_lane.advance([tok])
    return tokens, qdists


def inner_speculate(retr_lane: Lane, draft_lane: Lane, committed: Sequence[int],
                    config: SpecConfig, rng: np.random.Generator,
                    trace: Optional[StepTrace] = None):
    """Run draft rounds verified against the retrieval-cache target until at
    least gamma2 tokens are collected. Returns (x_hat, p_hat distributions,
    labels); both lanes are left rolled back to len(committed) + len(x_hat)
    minus the trailing unscored token.
    """
    x_hat: list[int] = []
    p_hats: list[np.ndarray] = []
    labels: list[str] = []
    base = len(committed)
    while len(x_hat) < config.gamma2:
        seq = list(committed) + x_hat
        drafted, qdists = draft_round(draft_lane, seq, config.gamma1,
                                      config.temperature, rng)
        retr_lane.catch_up(seq)
        rows = retr_lane.score(drafted)
        pdists = [prob_from_logits(r, config.temperature) for r in rows]
        emitted, round_labels, accepted = _verify_chain(drafted, qdists, pdists, rng)
        x_hat.extend(emitted)
        p_hats.extend(pdists[:len(emitted)])
        labels.extend("draft" if lb == "accepted" else "retrieval" for lb in round_labels)
        if trace is not None:
            trace.inner.rounds += 1
            trace.inner.proposed += config.gamma1
            trace.inner.accepted += accepted
        # the trailing corrected/bonus token was never processed by either lane
        valid = base + len(x_hat) - 1
        draft_lane.rollback_to(valid)
        retr_lane.rollback_to(valid)
    return x_hat, p_hats, labels


def outer_verify(full_lane: Lane, committed: Sequence[int], x_hat: Sequence[int],
                 p_hats: Sequence[np.ndarray], temperature: float,
                 rng: np.random.Generator):
    """Score x_hat under the full cache and run the verification chain.

    Returns (newly committed tokens, labels, accepted count, target dists).
    """
    full_lane.catch_up(committed)
    rows = full_lane.score(x_hat)
    pdists = [prob_from_logits(r, temperature) for r in rows]
    emitted, labels, accepted = _verify_chain(x_hat, p_hats, pdists, rng)
    return emitted, labels, accepted, pdists


class HierarchicalSession:
    """Prefilled lanes for one (target, draft, prefix) triple.

    Sessions are single-threaded; clone() gives an independent snapshot so
    repeated stochastic runs can share one prefill.
    """

    def __init__(self, target: ModelWeights, draft: ModelWeights,
                 prefix: Sequence[int], config: SpecConfig):
        if target.config.vocab_size != draft.config.vocab_size:
            raise ContractError("target and draft models must share a vocabulary")
        if len(prefix) < 1:
            raise ValueError("prefix must be non-empty")
        if config.target_len <= len(prefix):
            raise ValueError("target_len must exceed the prefix length")
        self.config = config
        self.committed = list(prefix)
        self.full_lane = Lane(target, FullCache.from_config(target.config))
        self.draft_lane = Lane(draft, StreamingCache.from_config(draft.config, config.streaming))
        retr = RetrievalCache.from_config(target.config, config.retrieval)
        self.retr_lane = Lane(target, retr)
        self.full_lane.prefill(prefix)
        self.draft_lane.prefill(prefix)
        n = len(prefix)
        queries = self.full_lane.last_queries()
        if n >= 2:
            retr.build(self.full_lane.cache, queries, upto=n - 1)
        else:
            # degenerate one-token prefix: borrow the full-cache frontier row
            retr.build(self.full_lane.cache, queries, upto=n)
            self.retr_lane.frontier_logits = self.full_lane.frontier_logits
        self.rolling = RollingAcceptance(config.retrieval.rolling_window)
        self.tokens_since_build = 0

    def clone(self) -> "HierarchicalSession":
        c = object.__new__(HierarchicalSession)
        c.config = self.config
        c.committed = list(self.committed)
        c.full_lane = self.full_lane.clone()
        c.draft_lane = self.draft_lane.clone()
        c.retr_lane = self.retr_lane.clone()
        c.rolling = RollingAcceptance(self.config.retrieval.rolling_window)
        c.rolling.rates = list(self.rolling.rates)
        c.tokens_since_build = self.tokens_since_build
        return c

    def _maybe_rebuild(self):
        cache: RetrievalCache = self.retr_lane.cache
        if not should_rebuild(cache.config, self.tokens_since_build, self.rolling):
            return False
        # capture the last committed token's queries under the old exposure,
        # then rebuild the selection from the full source
        self.retr_lane.catch_up(self.committed)
        queries = self.retr_lane.last_queries()
        cache.build(self.full_lane.cache, queries, upto=self.full_lane.frontier)
        self.retr_lane.frontier_logits = None
        self.tokens_since_build = 0
        self.rolling.rates.clear()
        return True

    def generate(self, seed: Optional[int] = None) -> tuple[list[int], StepTrace]:
        """Run the two-level loop until target_len tokens are committed."""
        cfg = self.config
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        trace = StepTrace()
        while len(self.committed) < cfg.target_len:
            self._maybe_rebuild()
            x_hat, p_hats, inner_labels = inner_speculate(
                self.retr_lane, self.draft_lane, self.committed, cfg, rng, trace)
            emitted, outer_labels, accepted, _ = outer_verify(
                self.full_lane, self.committed, x_hat, p_hats, cfg.temperature, rng)
            trace.outer.rounds += 1
            trace.outer.proposed += len(x_hat)
            trace.outer.accepted += accepted
            base = len(self.committed)
            # the final round may overshoot the requested length
            emitted = emitted[:cfg.target_len - base]
            for i, tok in enumerate(emitted):
                level = inner_labels[i] if outer_labels[i] == "accepted" else outer_labels[i]
                trace.add(base + i, tok, level, outer_labels[i] == "accepted",
                          trace.outer.rounds)
            self.committed.extend(emitted)
            valid = base + min(accepted, len(emitted))
            self.full_lane.rollback_to(valid)
            self.full_lane.commit()
            for lane in (self.draft_lane, self.retr_lane):
                lane.rollback_to(min(lane.frontier, valid))
                lane.commit()
            self.rolling.push(accepted / len(x_hat))
            self.tokens_since_build += len(emitted)
        return list(self.committed), trace


def hierarchical_generate(target: ModelWeights, draft: ModelWeights,
                          prefix: Sequence[int], config: SpecConfig):
    """Two-level speculative generation; the committed sequence follows the
    target model's own sampling distribution (greedy-identical at T=0)."""
    return HierarchicalSession(target, draft, prefix, config).generate()


def autoregressive_generate(weights: ModelWeights, prefix: Sequence[int],
                            target_len: int, temperature: float = 0.0,
                            seed: int = 0) -> list[int]:
    """Plain decode loop with the full cache; the correctness oracle and the
    latency baseline."""
    if len(prefix) < 1:
        raise ValueError("prefix must be non-empty")
    if target_len <= len(prefix):
        raise ValueError("target_len must exceed the prefix length")
    rng = np.random.default_rng(seed)
    cache = FullCache.from_config(weights.config)
    logits = prefill(weights, prefix, cache)[-1]
    out = list(prefix)
    while len(out) < target_len:
        tok = sample_from_probs(prob_from_logits(logits, temperature), rng)
        out.append(tok)
        if len(out) == target_len:
            break
        logits = decode_step(weights, tok, cache)
        cache.commit(cache.frontier)
    return out


class SingleLevelSession:
    """One draft lane speculated against one verify lane (standard
    speculative decoding); used for acceptance-rate measurement pairings.

    When the draft cache is a RetrievalCache it is built from (and rebuilt
    against) the verify lane's full cache, which requires both lanes to share
    weights (self-speculation).
    """

    def __init__(self, draft_weights: ModelWeights, draft_cache: KVCache,
                 verify_weights: ModelWeights, prefix: Sequence[int],
                 gamma: int, temperature: float,
                 retrieval_config: Optional[RetrievalConfig] = None):
        if draft_weights.config.vocab_size != verify_weights.config.vocab_size:
            raise ContractError("draft and verify models must share a vocabulary")
        if gamma < 1:
            raise ValueError("gamma must be >= 1")
        self.gamma = gamma
        self.temperature = temperature
        self.committed = list(prefix)
        self.verify_lane = Lane(verify_weights, FullCache.from_config(verify_weights.config))
        self.draft_lane = Lane(draft_weights, draft_cache)
        self.verify_lane.prefill(prefix)
        self._retrieval = isinstance(draft_cache, RetrievalCache)
        if self._retrieval:
            if draft_weights is not verify_weights:
                raise ContractError("retrieval drafting requires shared weights (self-speculation)")
            n = len(prefix)
            queries = self.verify_lane.last_queries()
            draft_cache.build(self.verify_lane.cache, queries, upto=max(n - 1, 1))
            if n < 2:
                self.draft_lane.frontier_logits = self.verify_lane.frontier_logits
            self.rolling = RollingAcceptance(draft_cache.config.rolling_window)
            self.tokens_since_build = 0
        else:
            self.draft_lane.prefill(prefix)

    def _maybe_rebuild(self):
        cache: RetrievalCache = self.draft_lane.cache
        if not should_rebuild(cache.config, self.tokens_since_build, self.rolling):
            return
        self.draft_lane.catch_up(self.committed)
        queries = self.draft_lane.last_queries()
        cache.build(self.verify_lane.cache, queries, upto=self.verify_lane.frontier)
        self.draft_lane.frontier_logits = None
        self.tokens_since_build = 0
        self.rolling.rates.clear()

    def generate(self, target_len: int, seed: int = 0) -> tuple[list[int], LevelStats]:
        if target_len <= len(self.committed):
            raise ValueError("target_len must exceed the prefix length")
        rng = np.random.default_rng(seed)
        stats = LevelStats()
        while len(self.committed) < target_len:
            if self._retrieval:
                self._maybe_rebuild()
            drafted, qdists = draft_round(self.draft_lane, self.committed,
                                          self.gamma, self.temperature, rng)
            self.verify_lane.catch_up(self.committed)
            rows = self.verify_lane.score(drafted)
            pdists = [prob_from_logits(r, self.temperature) for r in rows]
            emitted, labels, accepted = _verify_chain(drafted, qdists, pdists, rng)
            stats.rounds += 1
            stats.proposed += self.gamma
            stats.accepted += accepted
            base = len(self.committed)
            self.committed.extend(emitted)
            valid = base + len(emitted) - 1
            self.verify_lane.rollback_to(min(self.verify_lane.frontier, valid))
            self.verify_lane.commit()
            self.draft_lane.rollback_to(min(self.draft_lane.frontier, valid))
            self.draft_lane.commit()
            if self._retrieval:
                self.rolling.push(accepted / self.gamma)
                self.tokens_since_build += len(emitted)
        del self.committed[target_len:]
        return list(self.committed), stats
