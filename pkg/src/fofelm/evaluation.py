"""Perplexity, parameter audits, latency benchmarks and cross-variant comparison."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .errors import ComparisonError, DataError
from .models import ModelGraph, RoutingKey, count_params

ACCURACY_NOTE = ("perplexity is an accuracy proxy for word error rate; "
                 "latency is LM forward latency, not end-to-end ASR latency")


@dataclass
class NLL:
    """Running sum of per-token negative log-likelihood (natural log)."""

    total: float = 0.0
    count: int = 0

    def add(self, nll: float, count: int) -> None:
        self.total = math.fsum((self.total, nll))
        self.count += count

    def merge(self, other: "NLL") -> "NLL":
        return NLL(math.fsum((self.total, other.total)), self.count + other.count)

    @property
    def perplexity(self) -> float:
        if self.count == 0:
            raise DataError("perplexity of an empty test set")
        return math.exp(self.total / self.count)


def _chunks(sentences: Sequence[Sequence[int]], max_tokens: int):
    piece, n = [], 0
    for s in sentences:
        if len(s) < 2:
            continue
        piece.append((s, range(1, len(s))))
        n += len(s) - 1
        if n >= max_tokens:
            yield piece
            piece, n = [], 0
    if piece:
        yield piece


def sentence_nll(model: ModelGraph, sentences: Sequence[Sequence[int]], key: RoutingKey | None,
                 max_tokens: int = 4096) -> NLL:
    """NLL of every non-initial token (boundary-framed sentences) under ``key``."""
    acc = NLL()
    with ag.no_grad():
        for piece in _chunks(sentences, max_tokens):
            targets = np.concatenate([np.asarray(s)[list(t)] for s, t in piece])
            logits = model.logits(model.encode(piece), key).data
            logp = ag.log_softmax_np(logits)
            acc.add(float(-logp[np.arange(len(targets)), targets].sum()), len(targets))
    return acc


def perplexity(model: ModelGraph, testset: Sequence[Sequence[int]], key: RoutingKey | None) -> float:
    if not testset:
        raise DataError("perplexity of an empty test set")
    return sentence_nll(model, testset, key).perplexity


def keyed_nll(model: ModelGraph, keyed: dict[RoutingKey, Sequence[Sequence[int]]]) -> dict[RoutingKey, NLL]:
    return {key: sentence_nll(model, sents, key) for key, sents in keyed.items() if sents}


def unigram_perplexity(train: Iterable[Sequence[int]], test: Iterable[Sequence[int]],
                       vocab_size: int) -> float:
    """Add-one smoothed unigram baseline over the same predicted positions."""
    counts = np.ones(vocab_size)
    for s in train:
        np.add.at(counts, np.asarray(s[1:], dtype=np.int64), 1.0)
    logp = np.log(counts / counts.sum())
    acc = NLL()
    for s in test:
        acc.add(float(-logp[np.asarray(s[1:], dtype=np.int64)].sum()), len(s) - 1)
    return acc.perplexity


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    if not len(values):
        raise DataError("percentile of an empty sample")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def equally_fast(reference: float, other: float, tolerance: float = 0.10) -> bool:
    """True when ``other`` differs from ``reference`` by less than ``tolerance`` relative."""
    return abs(other - reference) / reference < tolerance


@dataclass
class LatencyStats:
    """Per-run mean and P95 of per-query seconds, averaged over runs."""

    mean: float
    p95: float
    runs: int
    queries: int
    run_means: list[float] = field(default_factory=list)
    run_p95s: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_ms": self.mean * 1e3, "p95_ms": self.p95 * 1e3, "runs": self.runs,
                "queries": self.queries,
                "run_mean_ms": [v * 1e3 for v in self.run_means],
                "run_p95_ms": [v * 1e3 for v in self.run_p95s]}


def time_queries(fn: Callable[[Sequence[int]], object], queries: Sequence[Sequence[int]],
                 runs: int = 3, warmup: int = 1) -> LatencyStats:
    if not queries:
        raise DataError("latency benchmark needs at least one query")
    if runs < 1:
        raise DataError("latency benchmark needs at least one run")
    clock = time.perf_counter
    for q in queries[:warmup]:
        fn(q)
    means, p95s = [], []
    for _ in range(runs):
        durations = []
        for q in queries:
            start = clock()
            fn(q)
            durations.append(clock() - start)
        means.append(math.fsum(durations) / len(durations))
        p95s.append(nearest_rank(durations, 95))
    return LatencyStats(sum(means) / runs, sum(p95s) / runs, runs, len(queries), means, p95s)


def next_token_fn(model: ModelGraph, key: RoutingKey | None) -> Callable[[Sequence[int]], np.ndarray]:
    """Single-history forward pass returning next-token logits."""
    if key is not None:
        model.check_key(key)

    def predict(history: Sequence[int]) -> np.ndarray:
        with ag.no_grad():
            x = model.encode([(list(history) + [0], [len(history)])])
            return model.logits(x, key).data
    return predict


def bench_latency(model: ModelGraph, key: RoutingKey | None, queries: Sequence[Sequence[int]],
                  runs: int = 3) -> LatencyStats:
    """Per-query next-token forward time, BLAS pinned to one thread."""
    with threadpool_limits(limits=1):
        return time_queries(next_token_fn(model, key), queries, runs)


@dataclass
class EvalReport:
    name: str
    variant: str
    vocab_sha256: str
    perplexity: dict[str, float] = field(default_factory=dict)
    params_total: int = 0
    params_active: dict[str, int] = field(default_factory=dict)
    latency: dict[str, dict] = field(default_factory=dict)
    config_fingerprint: str = ""

    FIELD_ORDER = ("name", "variant", "vocab_sha256", "config_fingerprint", "params_total",
                   "params_active", "perplexity", "latency")

    def to_dict(self) -> dict:
        out = {"note": ACCURACY_NOTE}
        for f in self.FIELD_ORDER:
            out[f] = getattr(self, f)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"report not found: {path}") from exc
        return cls(**{f: data[f] for f in cls.FIELD_ORDER if f in data})


def config_fingerprint(model: ModelGraph) -> str:
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate(model: ModelGraph, name: str, vocab_sha256: str,
             keyed: dict[RoutingKey, Sequence[Sequence[int]]]) -> EvalReport:
    if not any(keyed.values()):
        raise DataError("evaluation needs a non-empty test set")
    report = EvalReport(name, model.variant.value, vocab_sha256,
                        config_fingerprint=config_fingerprint(model))
    report.params_total = count_params(model).total
    for key in model.routing_keys():
        report.params_active[str(key)] = count_params(model, key).total
    for key, nll in keyed_nll(model, keyed).items():
        report.perplexity[str(key)] = nll.perplexity
    return report


@dataclass
class Comparison:
    columns: list[str]
    rows: list[str]
    values: list[list[float | None]]
    best: list[list[bool]]

    def to_tsv(self) -> str:
        lines = ["model\t" + "\t".join(self.columns)]
        for name, vals, marks in zip(self.rows, self.values, self.best):
            cells = ["" if v is None else f"{v:.6g}{'*' if m else ''}" for v, m in zip(vals, marks)]
            lines.append(name + "\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"


def compare(reports: Sequence[EvalReport]) -> Comparison:
    """Metric table with '*' on the per-column minimum (ties all marked)."""
    if not reports:
        raise ComparisonError("nothing to compare")
    fps = {r.vocab_sha256 for r in reports}
    if len(fps) != 1:
        raise ComparisonError("reports were produced under different vocabularies")
    ppl_cols = sorted({k for r in reports for k in r.perplexity})
    lat_cols = sorted({k for r in reports for k in r.latency})
    columns = [f"ppl[{k}]" for k in ppl_cols] + ["params_total"]
    columns += [f"{m}[{k}]" for k in lat_cols for m in ("lat_mean_ms", "lat_p95_ms")]
    values = []
    for r in reports:
        row: list[float | None] = [r.perplexity.get(k) for k in ppl_cols] + [float(r.params_total)]
        for k in lat_cols:
            lat = r.latency.get(k)
            row += [lat["mean_ms"], lat["p95_ms"]] if lat else [None, None]
        values.append(row)
    best = [[False] * len(columns) for _ in reports]
    for c in range(len(columns)):
        col = [v[c] for v in values if v[c] is not None]
        if not col:
            continue
        lo = min(col)
        for i, v in enumerate(values):
            best[i][c] = v[c] is not None and v[c] == lo
    return Comparison(columns, [r.name for r in reports], values, best)
