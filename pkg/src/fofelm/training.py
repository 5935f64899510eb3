"""Multi-dialect batch scheduling and the BASE / PT-A / RI-A / FT-A training strategies."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .data import _allocate
from .errors import ConfigError, DataError, RoutingError
from .evaluation import keyed_nll
from .models import BASE_VARIANT, ModelGraph, RoutingKey, Variant, build_model, load_model

log = logging.getLogger(__name__)

Sentences = Sequence[Sequence[int]]
# dialect -> application -> boundary-framed token-id sentences
Corpora = dict[str, dict[str, Sentences]]


class Strategy(str, Enum):
    BASE = "BASE"
    RI_A = "RI_A"
    PT_A = "PT_A"
    FT_A = "FT_A"


@dataclass
class TrainPlan:
    strategy: Strategy = Strategy.BASE
    epochs: int = 2
    batch_size: int = 256
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 3
    batches_per_epoch: int | None = None

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def make_optimizer(self):
        return ag.make_optimizer(self.optimizer, lr=self.lr, beta1=self.beta1,
                                 beta2=self.beta2, eps=self.eps)


@dataclass
class Batch:
    key: RoutingKey
    pieces: list[tuple[Sentences, range]]
    targets: np.ndarray

    @property
    def tokens(self) -> int:
        return len(self.targets)


@dataclass
class BatchSchedule:
    """Deterministic interleaving of per-dialect, application-homogeneous batches.

    A batch holds ``batch_size`` predicted positions from one (dialect,
    application) stream. Epoch ``e`` depends only on (seed, e), which is what
    makes epoch-boundary resumption exact.
    """

    corpora: Corpora
    proportions: dict[str, float]
    seed: int
    batch_size: int = 256

    @property
    def dialects(self) -> list[str]:
        return list(self.proportions)

    def _round(self, dialect: str, rng: np.random.Generator) -> list[tuple[str, list]]:
        chunks = []
        for app in sorted(self.corpora[dialect]):
            sents = self.corpora[dialect][app]
            current, n = [], 0
            for si in rng.permutation(len(sents)).tolist():
                t, end = 1, len(sents[si])
                while t < end:
                    take = min(end - t, self.batch_size - n)
                    current.append((si, t, t + take))
                    n += take
                    t += take
                    if n == self.batch_size:
                        chunks.append((app, current))
                        current, n = [], 0
            if current:
                chunks.append((app, current))
        return [chunks[i] for i in rng.permutation(len(chunks))]

    def natural_batches(self) -> int:
        total = sum(len(s) - 1 for apps in self.corpora.values() for sents in apps.values()
                    for s in sents)
        return math.ceil(total / self.batch_size)

    def dialect_order(self, epoch: int, n_batches: int) -> list[str]:
        counts = _allocate(n_batches, [self.proportions[d] for d in self.dialects])
        order = [d for d, c in zip(self.dialects, counts) for _ in range(c)]
        perm = np.random.default_rng([self.seed, epoch, 0]).permutation(len(order))
        return [order[i] for i in perm]

    def epoch(self, epoch: int, n_batches: int | None = None) -> Iterator[Batch]:
        n_batches = n_batches or self.natural_batches()
        order = self.dialect_order(epoch, n_batches)
        streams: dict[str, list] = {}
        rngs = {d: np.random.default_rng([self.seed, epoch, 1 + i])
                for i, d in enumerate(self.dialects)}
        for dialect in order:
            if not streams.get(dialect):
                # exhausted (or first use): wrap around with a fresh shuffle
                streams[dialect] = self._round(dialect, rngs[dialect])
            app, spans = streams[dialect].pop()
            sents = self.corpora[dialect][app]
            pieces = [(sents[si], range(a, b)) for si, a, b in spans]
            targets = np.concatenate([np.asarray(sents[si][a:b], dtype=np.int64) for si, a, b in spans])
            yield Batch(RoutingKey(dialect, app), pieces, targets)


def make_schedule(corpora: Corpora, proportions: dict[str, float] | Sequence[float] | None = None,
                  seed: int = 0, batch_size: int = 256) -> BatchSchedule:
    nonempty = {d: {a: list(s) for a, s in apps.items() if any(len(x) > 1 for x in s)}
                for d, apps in corpora.items()}
    nonempty = {d: apps for d, apps in nonempty.items() if apps}
    if not nonempty:
        raise DataError("every corpus is empty")
    dialects = list(corpora)
    if proportions is None:
        props = {d: 1.0 for d in dialects}
    elif isinstance(proportions, dict):
        props = {d: float(proportions.get(d, 0.0)) for d in dialects}
    else:
        if len(proportions) != len(dialects):
            raise ConfigError("one proportion per dialect required")
        props = dict(zip(dialects, map(float, proportions)))
    if any(p < 0 for p in props.values()):
        raise ConfigError("proportions must be non-negative")
    props = {d: p for d, p in props.items() if p > 0}
    for d in props:
        if d not in nonempty:
            raise DataError(f"dialect {d!r} has a positive proportion but no data")
    if not props:
        raise ConfigError("all proportions are zero")
    return BatchSchedule({d: nonempty[d] for d in props}, props, seed, batch_size)


@dataclass
class EpochRecord:
    epoch: int
    strategy: str
    train_loss: float
    dev_ppl: dict[str, float]
    seconds: float


@dataclass
class TrainResult:
    model: ModelGraph
    batch_losses: list[float] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epoch_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]


def dev_perplexity(model: ModelGraph, dev: Corpora) -> dict[str, float]:
    """Per-dialect perplexity, each record routed by its application tag."""
    out = {}
    for dialect, apps in dev.items():
        nlls = keyed_nll(model, {RoutingKey(dialect, a): s for a, s in apps.items()})
        total = sum(n.total for n in nlls.values())
        count = sum(n.count for n in nlls.values())
        if count:
            out[dialect] = math.exp(total / count)
    return out


def metrics_header(dialects: Sequence[str]) -> str:
    return "\t".join(["epoch", "strategy", "train_loss"] +
                     [f"dev_ppl[{d}]" for d in dialects] + ["wall_seconds"]) + "\n"


def metrics_line(rec: EpochRecord, dialects: Sequence[str]) -> str:
    ppl = [f"{rec.dev_ppl[d]:.6f}" if d in rec.dev_ppl else "" for d in dialects]
    return "\t".join([str(rec.epoch), rec.strategy, f"{rec.train_loss:.6f}"] + ppl +
                     [f"{rec.seconds:.3f}"]) + "\n"


def _frozen_digest(model: ModelGraph) -> str:
    h = hashlib.sha256()
    for g in model.groups.values():
        if not g.trainable:
            h.update(ag.tensor_bytes(g.tensors))
    return h.hexdigest()


def train(model: ModelGraph, schedule: BatchSchedule, plan: TrainPlan, dev: Corpora | None = None,
          *, strategy_label: str | None = None, state_path: str | Path | None = None,
          metrics_path: str | Path | None = None, resume: bool = False,
          stop_after: int | None = None) -> TrainResult:
    """Generic loop shared by all strategies; trainable groups must already be set.

    Each batch updates only the groups active for its routing key. With
    ``state_path`` the full training state is written at every epoch
    boundary; ``resume`` continues from it. ``stop_after`` ends the call after
    that many epochs of this invocation (for interruption tests).
    """
    label = strategy_label or plan.strategy.value
    optimizer = plan.make_optimizer()
    result = TrainResult(model)
    start_epoch = 0
    best = math.inf
    best_state: dict[str, np.ndarray] | None = None
    bad_epochs = 0
    if resume and state_path and Path(state_path).exists():
        tensors, meta = ag.load_tensors(state_path)
        model.load_state({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        optimizer.load_state_tensors({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
        best_state = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")} or None
        start_epoch = meta["epoch"]
        best, bad_epochs = meta["best"], meta["bad_epochs"]
        result.batch_losses = list(meta["batch_losses"])
        result.epochs = [EpochRecord(**e) for e in meta["epochs"]]
    frozen = _frozen_digest(model)
    dialects = list(model.config.dialects)
    if metrics_path and not Path(metrics_path).exists():
        Path(metrics_path).write_text(metrics_header(dialects), encoding="utf-8")

    ran = 0
    for epoch in range(start_epoch, plan.epochs):
        if bad_epochs >= plan.patience:
            result.stopped_early = True
            break
        t0 = time.perf_counter()
        losses = []
        for batch in schedule.epoch(epoch, plan.batches_per_epoch):
            active = [g for g in model.active_groups(batch.key) if g.trainable]
            if not active:
                continue
            logits = model.logits(model.encode(batch.pieces), batch.key)
            loss = ag.softmax_cross_entropy(logits, batch.targets)
            loss.backward()
            optimizer.step(active)
            losses.append(float(loss.data[0, 0]))
        result.batch_losses += losses
        ppl = dev_perplexity(model, dev) if dev else {}
        rec = EpochRecord(epoch + 1, label, float(np.mean(losses)) if losses else float("nan"),
                          ppl, time.perf_counter() - t0)
        result.epochs.append(rec)
        log.info("epoch %d %s loss=%.4f dev=%s", rec.epoch, label, rec.train_loss, ppl)
        if metrics_path:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(metrics_line(rec, dialects))
        if ppl:
            score = float(np.mean(list(ppl.values())))
            if score < best:
                best, bad_epochs = score, 0
                best_state = {k: v.copy() for k, v in model.state().items()}
            else:
                bad_epochs += 1
        if _frozen_digest(model) != frozen:
            raise AssertionError("a frozen parameter group changed during training")
        if state_path:
            tensors = {f"model.{k}": v for k, v in model.state().items()}
            tensors.update({f"opt.{k}": v for k, v in optimizer.state_tensors().items()})
            if best_state is not None:
                tensors.update({f"best.{k}": v for k, v in best_state.items()})
            meta = {"epoch": epoch + 1, "best": best, "bad_epochs": bad_epochs,
                    "batch_losses": result.batch_losses,
                    "epochs": [{**e.__dict__, "seconds": 0.0} for e in result.epochs]}
            ag.save_tensors(state_path, tensors, meta)
        ran += 1
        if stop_after is not None and ran >= stop_after:
            return result
    if best_state is not None:
        model.load_state(best_state)
    return result


def train_base(model: ModelGraph, schedule: BatchSchedule, plan: TrainPlan,
               dev: Corpora | None = None, **kwargs) -> TrainResult:
    """BASE or PT-A: every parameter group trainable on pooled multi-dialect data."""
    v = model.variant
    if plan.strategy is Strategy.PT_A and not v.has_adapters:
        raise ConfigError(f"PT_A needs an adapter-bearing variant, got {v.value}")
    if plan.strategy is Strategy.BASE and v in BASE_VARIANT:
        raise ConfigError(f"{v.value} carries dialect adapters; train it with PT_A or adapt a "
                          f"{BASE_VARIANT[v].value} base with RI_A")
    if plan.strategy not in (Strategy.BASE, Strategy.PT_A):
        raise ConfigError(f"train_base does not run {plan.strategy.value}")
    model.set_trainable(lambda g: True)
    return train(model, schedule, plan, dev, **kwargs)


def _resolve(checkpoint: ModelGraph | str | Path) -> ModelGraph:
    if isinstance(checkpoint, ModelGraph):
        return checkpoint
    return load_model(checkpoint)[0]


def _freeze_all_but(model: ModelGraph, dialect: str) -> None:
    if dialect not in model.config.dialects:
        raise RoutingError(f"dialect {dialect!r} unknown to this model ({model.config.dialects})")
    model.set_trainable(lambda g: g.role == "adapter" and g.dialect == dialect)


def _dialect_only(schedule: BatchSchedule, dialect: str) -> BatchSchedule:
    if list(schedule.dialects) == [dialect]:
        return schedule
    if dialect not in schedule.corpora:
        raise DataError(f"no training data for dialect {dialect!r}")
    return BatchSchedule({dialect: schedule.corpora[dialect]}, {dialect: 1.0},
                         schedule.seed, schedule.batch_size)


def with_fresh_adapters(base: ModelGraph, dialect: str,
                        placement=None) -> ModelGraph:
    """Adapter-bearing copy of ``base`` whose ``dialect`` adapters are newly initialized."""
    v = base.variant
    cfg = base.config
    if v in (Variant.MIXTURE, Variant.AD):
        target = Variant.MIXTURE_A if v is Variant.MIXTURE else Variant.AD_A
        cfg = cfg.replace(variant=target, adapter_placement=placement)
    fresh = build_model(cfg, base.seed)
    keep = {}
    for name, t in base.params.items():
        keep[name] = t.data
    for g in fresh.groups.values():
        if g.role == "adapter" and g.dialect == dialect:
            for t in g.tensors:
                keep.pop(t.name, None)
    fresh.load_state(keep, strict=False)
    return fresh


def train_adapter_ri(base_checkpoint: ModelGraph | str | Path, dialect: str,
                     schedule: BatchSchedule, plan: TrainPlan, dev: Corpora | None = None,
                     placement=None, **kwargs) -> TrainResult:
    """RI-A: freeze the base, add a near-identity adapter for ``dialect``, train it on that dialect."""
    base = _resolve(base_checkpoint)
    if dialect not in base.config.dialects:
        raise RoutingError(f"dialect {dialect!r} unknown to this model ({base.config.dialects})")
    model = with_fresh_adapters(base, dialect, placement)
    _freeze_all_but(model, dialect)
    dev = {dialect: dev[dialect]} if dev and dialect in dev else None
    return train(model, _dialect_only(schedule, dialect), plan, dev,
                 strategy_label=Strategy.RI_A.value, **kwargs)


def finetune_adapter(pt_checkpoint: ModelGraph | str | Path, dialect: str,
                     schedule: BatchSchedule, plan: TrainPlan, dev: Corpora | None = None,
                     **kwargs) -> TrainResult:
    """FT-A: continue training the pretrained ``dialect`` adapter, everything else frozen."""
    model = _resolve(pt_checkpoint)
    if not model.variant.has_adapters:
        raise ConfigError(f"FT_A needs a checkpoint with pretrained adapters, got {model.variant.value}")
    _freeze_all_but(model, dialect)
    dev = {dialect: dev[dialect]} if dev and dialect in dev else None
    return train(model, _dialect_only(schedule, dialect), plan, dev,
                 strategy_label=Strategy.FT_A.value, **kwargs)


def encode_records(records, vocab, dialects: Sequence[str] | None = None) -> Corpora:
    """Group tagged records into boundary-framed id sequences per dialect and application."""
    out: Corpora = {}
    for d in dialects or []:
        out[d] = {}
    for r in records:
        out.setdefault(r.dialect, {}).setdefault(r.application, []).append(vocab.tokenize(r.text))
    return out

