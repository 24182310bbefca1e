"""Deterministic CPU engine for hierarchical speculative decoding with
retrieval-based KV-cache drafting, plus its measurement harnesses."""

from .analytics import (AcceptanceStats, LatencyModel, LocalityCurves,
                        NeedleCase, SpeedupEstimate, expected_tokens,
                        hierarchical_speedup, hierarchical_speedup_coarse,
                        locality_recovery, measure_acceptance, needle_corpus,
                        planted_attention_weights, simulate_speedup,
                        sparsity_recovery)
from .caches import (ChunkScoreTable, FullCache, H2OCache, H2OConfig,
                     KVCache, RetrievalCache, RetrievalConfig,
                     RollingAcceptance, StreamingCache, StreamingConfig,
                     TopKCache, score_chunks, should_rebuild)
from .errors import (BadMagicError, CapacityError, ConfigError, ContractError,
                     FiniteError, ShapeError, TruncatedFileError, VersionError,
                     WeightFormatError)
from .model import (BOS, EOS, PAD, TOKENIZER_VOCAB, AttentionProbe,
                    ForwardRecorder, ModelConfig, ModelWeights,
                    attention_probe, decode_chunk, decode_step,
                    detokenize, generate_weights, prefill, prob_from_logits,
                    sample, sample_from_probs, tokenize)
from .speculation import (HierarchicalSession, Lane, LevelStats,
                          SingleLevelSession, SpecConfig, StepTrace,
                          autoregressive_generate, correct_token, draft_round,
                          hierarchical_generate, inner_speculate, outer_verify,
                          verify_token)
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"
