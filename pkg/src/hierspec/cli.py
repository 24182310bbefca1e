"""Experiment runner.

Subcommands: gen-weights, generate, bench-acceptance, sweep, speedup-model,
measure. Each experiment reads a flat key = value config file (one key per
line, '#' comments; every key has a default except the weight paths),
validates it before doing any work, and writes its artifacts atomically
under <output_root>/<experiment>/<config-hash>/ together with a manifest
recording the config hash, base seed, and tool version. The HIERSPEC_OUT
environment variable overrides output_root. Exit codes: 0 success,
1 config error, 2 runtime error.

Sweeps run their grid points in a worker pool; point i uses seed
base_seed XOR i, so any point can be reproduced in isolation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analytics import (LatencyModel, expected_tokens, hierarchical_speedup,
                        hierarchical_speedup_coarse, locality_recovery,
                        measure_acceptance, needle_corpus,
                        planted_attention_weights, simulate_speedup,
                        sparsity_recovery)
from .caches import H2OConfig, RetrievalConfig, StreamingConfig
from .errors import ConfigError
from .model import BOS, ModelConfig, generate_weights
from .speculation import SpecConfig, autoregressive_generate, hierarchical_generate
from .weights_io import load_weights, save_weights

# ---------------------------------------------------------------------------
# config file

_SCHEMA: dict[str, tuple] = {
    # (type, default); None default means "required when used"
    "target_weights": (str, None),
    "draft_weights": (str, None),
    "output_root": (str, "runs"),
    "seed": (int, 0),
    "prefix_len": (int, 64),
    "gen_tokens": (int, 32),
    "temperature": (float, 0.0),
    "gamma1": (int, 2),
    "gamma2": (int, 6),
    "stream_sink": (int, 4),
    "stream_budget": (int, 64),
    "chunk_size": (int, 16),
    "retrieval_budget": (int, 64),
    "rebuild_stride": (int, 128),
    "rebuild_threshold": (float, 0.8),
    "rolling_window": (int, 16),
    "h2o_budget": (int, 64),
    "h2o_recent": (int, 32),
    "topk_budget": (int, 64),
    "corpus_cases": (int, 8),
    "context_len": (int, 96),
    "needle_strength": (float, 0.8),
    "pairings": (str, "self:topk,self:retrieval,self:h2o,self:streaming"),
    "budgets": (str, "8,16,32,64"),
    "budget": (int, 64),
    "horizon": (int, 8),
    "skip_first_layers": (int, 0),
    "alpha1": (float, 0.8),
    "alpha2": (float, 0.9),
    "context": (int, 4096),
    "sim_rounds": (int, 100000),
    "lat_draft_base": (float, 0.5),
    "lat_draft_per_token": (float, 0.0005),
    "lat_retr_base": (float, 2.0),
    "lat_retr_per_token": (float, 0.002),
    "lat_full_base": (float, 2.0),
    "lat_full_per_token": (float, 0.006),
}


@dataclass
class RunConfig:
    values: dict
    text: str

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def require(self, *keys):
        for key in keys:
            if self.values.get(key) is None:
                raise ConfigError(f"config key {key!r} is required for this command")
            if key.endswith("_weights") and not Path(self.values[key]).exists():
                raise ConfigError(f"{key}: file {self.values[key]!r} does not exist")

    def hash(self, extra: str = "") -> str:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        blob = "\n".join(lines) + "\n" + extra
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def streaming(self) -> StreamingConfig:
        return StreamingConfig(n_sink=self.stream_sink, budget=self.stream_budget)

    def retrieval(self) -> RetrievalConfig:
        return RetrievalConfig(chunk_size=self.chunk_size, budget=self.retrieval_budget,
                               rebuild_stride=self.rebuild_stride,
                               rebuild_accept_threshold=self.rebuild_threshold,
                               rolling_window=self.rolling_window)

    def h2o(self) -> H2OConfig:
        return H2OConfig(budget=self.h2o_budget, recent_window=self.h2o_recent)

    def latency(self) -> LatencyModel:
        return LatencyModel(
            draft_base=self.lat_draft_base, draft_per_token=self.lat_draft_per_token,
            retrieval_base=self.lat_retr_base, retrieval_per_token=self.lat_retr_per_token,
            full_base=self.lat_full_base, full_per_token=self.lat_full_per_token)


def parse_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    values = {k: d for k, (_, d) in _SCHEMA.items()}
    text = ""
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path!r} does not exist")
        text = Path(path).read_text()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            typ = _SCHEMA[key][0]
            try:
                values[key] = typ(val)
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: cannot parse {val!r} as {typ.__name__}") from None
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    cfg = RunConfig(values, text)
    try:
        cfg.streaming(), cfg.retrieval(), cfg.h2o(), cfg.latency()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


# ---------------------------------------------------------------------------
# artifact staging

class Artifacts:
    """Atomic experiment directory: stage in a temp dir, publish on success,
    delete on failure so no partial outputs survive."""

    def __init__(self, cfg: RunConfig, experiment: str, extra_hash: str = ""):
        root = Path(os.environ.get("HIERSPEC_OUT", cfg.output_root))
        self.cfg_hash = cfg.hash(experiment + extra_hash)
        self.final = root / experiment / self.cfg_hash
        self.stage = root / experiment / f".tmp-{self.cfg_hash}-{os.getpid()}"
        self.experiment = experiment
        self.cfg = cfg
        self.names: list[str] = []

    def __enter__(self):
        self.stage.mkdir(parents=True, exist_ok=True)
        return self

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.stage / name

    def write_csv(self, name: str, header: list[str], rows: list[list]):
        with open(self.path(name), "w", newline="") as fp:
            wr = csv.writer(fp)
            wr.writerow(header)
            wr.writerows(rows)

    def write_json(self, name: str, payload: dict):
        self.path(name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        manifest = {
            "tool_version": __version__,
            "experiment": self.experiment,
            "config_hash": self.cfg_hash,
            "base_seed": self.cfg.seed,
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "artifacts": sorted(self.names),
            "config": {k: v for k, v in sorted(self.cfg.values.items()) if v is not None},
        }
        (self.stage / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.stage, self.final)
        print(f"wrote {self.final}")
        return False


def random_prompts(cfg: RunConfig) -> list[list[int]]:
    rng = np.random.default_rng(cfg.seed ^ 0x5EED)
    return [[BOS] + rng.integers(32, 127, cfg.prefix_len - 1).tolist()
            for _ in range(cfg.corpus_cases)]


def _spec_config(cfg: RunConfig, target_len: int, seed: int) -> SpecConfig:
    return SpecConfig(target_len=target_len, gamma1=cfg.gamma1, gamma2=cfg.gamma2,
                      temperature=cfg.temperature, seed=seed,
                      streaming=cfg.streaming(), retrieval=cfg.retrieval())


def _check_budgets(cfg: RunConfig, model_cfg: ModelConfig):
    for key in ("stream_budget", "retrieval_budget", "h2o_budget", "topk_budget"):
        if cfg.values[key] > model_cfg.max_seq:
            raise ConfigError(f"{key} exceeds model max_seq {model_cfg.max_seq}")


# ---------------------------------------------------------------------------
# subcommands

_PRESETS = {
    "target-desk": dict(n_layers=4, n_heads=8, n_kv_heads=4, head_dim=16, d_ff=256,
                        vocab_size=260, max_seq=4096),
    "draft-desk": dict(n_layers=2, n_heads=4, n_kv_heads=4, head_dim=16, d_ff=128,
                       vocab_size=260, max_seq=4096),
    "toy-16": dict(n_layers=2, n_heads=2, n_kv_heads=2, head_dim=8, d_ff=32,
                   vocab_size=16, max_seq=256),
}


def cmd_gen_weights(args) -> int:
    spec = dict(_PRESETS[args.preset])
    for field in ("n_layers", "n_heads", "n_kv_heads", "head_dim", "d_ff",
                  "vocab_size", "max_seq"):
        val = getattr(args, field)
        if val is not None:
            spec[field] = val
    config = ModelConfig(**spec, rope_theta=args.rope_theta)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    weights = generate_weights(config, args.seed, tied_head=not args.untied_head)
    tmp = out.with_suffix(out.suffix + ".tmp")
    save_weights(weights, tmp)
    os.replace(tmp, out)
    print(f"wrote {out} (checksum {weights.checksum()[:16]})")
    return 0


def cmd_generate(args) -> int:
    cfg = parse_config(args.config)
    cfg.require("target_weights", "draft_weights")
    target = load_weights(cfg.target_weights)
    draft = load_weights(cfg.draft_weights)
    _check_budgets(cfg, target.config)
    prompt = random_prompts(cfg)[0]
    target_len = len(prompt) + cfg.gen_tokens
    with Artifacts(cfg, "generate") as art:
        out_h, trace = hierarchical_generate(target, draft, prompt,
                                             _spec_config(cfg, target_len, cfg.seed))
        out_ar = autoregressive_generate(target, prompt, target_len,
                                         cfg.temperature, cfg.seed)
        art.path("tokens_hier.txt").write_text("\n".join(map(str, out_h)) + "\n")
        art.path("tokens_ar.txt").write_text("\n".join(map(str, out_ar)) + "\n")
        with open(art.path("trace.jsonl"), "w") as fp:
            trace.to_jsonl(fp)
        art.write_json("summary.json", {
            "match_ar": out_h == out_ar,
            "temperature": cfg.temperature,
            **trace.summary(),
        })
    return 0


def cmd_bench_acceptance(args) -> int:
    cfg = parse_config(args.config)
    cfg.require("target_weights")
    target = load_weights(cfg.target_weights)
    _check_budgets(cfg, target.config)
    pairings = [p.strip() for p in cfg.pairings.split(",") if p.strip()]
    draft = None
    if "hierarchical" in pairings:
        cfg.require("draft_weights")
        draft = load_weights(cfg.draft_weights)
    prompts = random_prompts(cfg)
    rows = []
    summary = {}
    kwargs = dict(gamma=cfg.gamma1, gamma2=cfg.gamma2, temperature=cfg.temperature,
                  gen_tokens=cfg.gen_tokens, seed=cfg.seed, streaming=cfg.streaming(),
                  h2o=cfg.h2o(), retrieval=cfg.retrieval(), topk_budget=cfg.topk_budget)
    with Artifacts(cfg, "bench-acceptance") as art:
        for pairing in pairings:
            stats = measure_acceptance(pairing, target, prompts, draft=draft, **kwargs)
            for level, s in stats.items():
                rows.append([pairing, level, f"{s.rate:.6f}", s.accepted,
                             s.proposed, s.rounds])
                summary[f"{pairing}:{level}"] = s.rate
        art.write_csv("acceptance.csv",
                      ["pairing", "level", "rate", "accepted", "proposed", "rounds"],
                      rows)
        art.write_json("summary.json", summary)
    return 0


_AXES = ("budget", "chunk_size", "gamma1", "gamma2", "temperature")


def _parse_axis(spec: str) -> tuple[str, list]:
    name, _, grid = spec.partition("=")
    name = name.strip()
    if name not in _AXES:
        raise ConfigError(f"unknown sweep axis {name!r}; choose from {_AXES}")
    grid = grid.strip()
    if ":" in grid:
        lo, _, hi = grid.partition(":")
        vals = list(range(int(lo), int(hi) + 1))
    else:
        conv = float if name == "temperature" else int
        vals = [conv(v) for v in grid.split(",") if v.strip()]
    if not vals:
        raise ConfigError(f"empty grid for axis {name!r}")
    return name, vals


def _sweep_point(packed):
    cfg_values, text, point_index, assignment = packed
    cfg = RunConfig(dict(cfg_values), text)
    for axis, val in assignment:
        if axis == "budget":
            cfg.values["retrieval_budget"] = int(val)
        elif axis == "temperature":
            cfg.values["temperature"] = float(val)
        else:
            cfg.values[axis] = int(val)
    if cfg.values["retrieval_budget"] % cfg.values["chunk_size"] != 0:
        cfg.values["retrieval_budget"] = (
            max(1, cfg.values["retrieval_budget"] // cfg.values["chunk_size"])
            * cfg.values["chunk_size"])
    seed = cfg.seed ^ point_index
    target = load_weights(cfg.target_weights)
    draft = load_weights(cfg.draft_weights)
    prompts = random_prompts(cfg)[:max(2, cfg.corpus_cases // 4)]
    stats = measure_acceptance(
        "hierarchical", target, prompts, draft=draft, gamma=cfg.gamma1,
        gamma2=cfg.gamma2, temperature=cfg.temperature, gen_tokens=cfg.gen_tokens,
        seed=seed, streaming=cfg.streaming(), retrieval=cfg.retrieval())
    a1, a2 = stats["inner"].rate, stats["outer"].rate
    lat = cfg.latency()
    exact = hierarchical_speedup(a1, a2, cfg.gamma1, cfg.gamma2, lat,
                                 cfg.context, cfg.values["retrieval_budget"])
    coarse = hierarchical_speedup_coarse(a1, a2, cfg.gamma1, cfg.gamma2, lat,
                                         cfg.context, cfg.values["retrieval_budget"])
    return ([val for _, val in assignment]
            + [point_index, seed, f"{a1:.6f}", f"{a2:.6f}",
               f"{exact.tokens_per_round:.6f}", f"{exact.speedup:.6f}",
               f"{coarse.speedup:.6f}",
               f"{expected_tokens(a2, cfg.gamma2):.6f}"])


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    cfg.require("target_weights", "draft_weights")
    _check_budgets(cfg, load_weights(cfg.target_weights).config)
    axes = [_parse_axis(spec) for spec in args.axis]
    if not axes:
        raise ConfigError("sweep needs at least one --axis")
    grids = [[(name, v) for v in vals] for name, vals in axes]
    points = [[]]
    for grid in grids:
        points = [p + [g] for p in points for g in grid]
    packed = [(cfg.values, cfg.text, i, tuple(p)) for i, p in enumerate(points)]
    extra = ";".join(f"{n}={v}" for n, v in ((n, vs) for n, vs in axes))
    with Artifacts(cfg, "sweep", extra_hash=extra) as art:
        if args.workers > 1:
            with get_context("spawn").Pool(args.workers) as pool:
                rows = pool.map(_sweep_point, packed)
        else:
            rows = [_sweep_point(p) for p in packed]
        header = ([name for name, _ in axes]
                  + ["point", "seed", "alpha1", "alpha2", "tokens_per_round",
                     "speedup_exact", "speedup_coarse", "expected_tokens_outer"])
        art.write_csv("sweep.csv", header, rows)
        art.write_json("summary.json", {"points": len(rows),
                                        "axes": {n: v for n, v in axes}})
    return 0


def cmd_speedup_model(args) -> int:
    cfg = parse_config(args.config)
    lat = cfg.latency()
    alphas1 = [float(v) for v in args.alpha1.split(",")] if args.alpha1 else [cfg.alpha1]
    alphas2 = [float(v) for v in args.alpha2.split(",")] if args.alpha2 else [cfg.alpha2]
    rows = []
    with Artifacts(cfg, "speedup-model",
                   extra_hash=f"{alphas1}{alphas2}") as art:
        for a1 in alphas1:
            for a2 in alphas2:
                exact = hierarchical_speedup(a1, a2, cfg.gamma1, cfg.gamma2, lat,
                                             cfg.context, cfg.budget)
                coarse = hierarchical_speedup_coarse(a1, a2, cfg.gamma1, cfg.gamma2,
                                                     lat, cfg.context, cfg.budget)
                sim = simulate_speedup(a1, a2, cfg.gamma1, cfg.gamma2, lat,
                                       cfg.context, cfg.budget,
                                       rounds=cfg.sim_rounds, seed=cfg.seed)
                rows.append([a1, a2, cfg.gamma1, cfg.gamma2,
                             f"{expected_tokens(a1, cfg.gamma1):.6f}",
                             f"{expected_tokens(a2, cfg.gamma2):.6f}",
                             f"{exact.speedup:.6f}", f"{coarse.speedup:.6f}",
                             f"{sim.speedup:.6f}", f"{sim.ci_halfwidth:.6f}"])
        art.write_csv("speedup.csv",
                      ["alpha1", "alpha2", "gamma1", "gamma2",
                       "expected_tokens_inner", "expected_tokens_outer",
                       "speedup_exact", "speedup_coarse", "speedup_sim", "sim_ci"],
                      rows)
    return 0


def cmd_measure(args) -> int:
    cfg = parse_config(args.config)
    if args.kind in ("sparsity", "locality"):
        cfg.require("target_weights")
        target = load_weights(cfg.target_weights)
        rng = np.random.default_rng(cfg.seed ^ 0xC0FFEE)
        vocab = target.config.vocab_size
        context = [BOS] + rng.integers(1, min(vocab, 256), cfg.context_len - 1).tolist()
    if args.kind == "sparsity":
        budgets = [int(b) for b in cfg.budgets.split(",")]
        rows = []
        with Artifacts(cfg, "measure-sparsity") as art:
            for budget in budgets:
                rec = sparsity_recovery(target, context, budget)
                for layer, val in enumerate(rec):
                    rows.append([budget, layer, f"{val:.8f}"])
            art.write_csv("sparsity.csv", ["budget", "layer", "recovered_mass"], rows)
            keep = rec[cfg.skip_first_layers:]
            art.write_json("summary.json", {
                "budgets": budgets,
                "skip_first_layers": cfg.skip_first_layers,
                "mean_recovery_at_largest": float(np.mean(keep)),
            })
        return 0
    if args.kind == "locality":
        with Artifacts(cfg, "measure-locality") as art:
            curves = locality_recovery(target, context, cfg.budget, cfg.horizon,
                                       cfg.temperature, cfg.seed)
            rows = []
            for off in range(curves.frozen.shape[0]):
                for layer in range(curves.frozen.shape[1]):
                    rows.append([off, layer, f"{curves.frozen[off, layer]:.8f}",
                                 f"{curves.fresh[off, layer]:.8f}"])
            art.write_csv("locality.csv",
                          ["offset", "layer", "frozen_mass", "fresh_topk_mass"], rows)
            art.write_json("summary.json", {
                "budget": curves.budget, "horizon": cfg.horizon,
                "final_offset_frozen_mean": float(curves.frozen[-1].mean()),
            })
        return 0
    if args.kind == "needle":
        model_cfg = ModelConfig(n_layers=2, n_heads=4, n_kv_heads=2, head_dim=8,
                                d_ff=32, vocab_size=260, max_seq=4096, rope_theta=1e8)
        corpus = needle_corpus(cfg.context_len, cfg.corpus_cases, cfg.seed)
        weights = planted_attention_weights(
            model_cfg, cfg.context_len, len(corpus[0].needle_positions),
            cfg.needle_strength, answer_token=ord("A"), seed=cfg.seed)
        prompts = [c.tokens for c in corpus]
        pairings = [p.strip() for p in cfg.pairings.split(",") if p.strip()]
        rows = []
        summary = {}
        with Artifacts(cfg, "measure-needle") as art:
            for pairing in pairings:
                stats = measure_acceptance(
                    pairing, weights, prompts, gamma=cfg.gamma1,
                    temperature=cfg.temperature, gen_tokens=cfg.gen_tokens,
                    seed=cfg.seed, streaming=cfg.streaming(), h2o=cfg.h2o(),
                    retrieval=cfg.retrieval(), topk_budget=cfg.topk_budget)
                s = stats["self"]
                rows.append([pairing, f"{s.rate:.6f}", s.accepted, s.proposed])
                summary[pairing] = s.rate
            art.write_csv("needle.csv", ["pairing", "rate", "accepted", "proposed"],
                          rows)
            art.write_json("summary.json", summary)
        return 0
    raise ConfigError(f"unknown measure kind {args.kind!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hierspec",
                                 description="hierarchical speculative decoding testbench")
    sub = ap.add_subparsers(dest="command", required=True)

    gw = sub.add_parser("gen-weights", help="generate a deterministic weight file")
    gw.add_argument("--preset", choices=sorted(_PRESETS), default="target-desk")
    gw.add_argument("--seed", type=int, default=0)
    gw.add_argument("--out", required=True)
    gw.add_argument("--rope-theta", type=float, default=10000.0)
    gw.add_argument("--untied-head", action="store_true")
    gw.add_argument("--force", action="store_true")
    for field in ("n_layers", "n_heads", "n_kv_heads", "head_dim", "d_ff",
                  "vocab_size", "max_seq"):
        gw.add_argument(f"--{field.replace('_', '-')}", type=int, default=None,
                        dest=field)
    gw.set_defaults(func=cmd_gen_weights)

    for name, func, needs_axis in (
            ("generate", cmd_generate, False),
            ("bench-acceptance", cmd_bench_acceptance, False),
            ("sweep", cmd_sweep, True),
            ("speedup-model", cmd_speedup_model, False)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        if needs_axis:
            p.add_argument("--axis", action="append", default=[],
                           help="axis=lo:hi or axis=v1,v2,... "
                                f"(axes: {', '.join(_AXES)})")
            p.add_argument("--workers", type=int, default=1)
        if name == "speedup-model":
            p.add_argument("--alpha1", default=None, help="comma-separated grid")
            p.add_argument("--alpha2", default=None, help="comma-separated grid")
        p.set_defaults(func=func)

    ms = sub.add_parser("measure")
    ms.add_argument("--kind", choices=("sparsity", "locality", "needle"), required=True)
    ms.add_argument("--config", default=None)
    ms.set_defaults(func=cmd_measure)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
