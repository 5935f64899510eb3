"""Tagged corpora, vocabulary construction and the synthetic multi-dialect generator."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .fofe import RESERVED, Vocabulary


@dataclass(frozen=True)
class TaggedRecord:
    dialect: str
    application: str
    text: str


def write_tagged(path: str | Path, records: Iterable[TaggedRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            if "\t" in r.text or "\n" in r.text:
                raise DataError(f"record text may not contain tabs or newlines: {r.text!r}")
            fh.write(f"{r.dialect}\t{r.application}\t{r.text}\n")


def read_tagged(path: str | Path, dialects: Sequence[str] | None = None,
                applications: Sequence[str] | None = None) -> list[TaggedRecord]:
    try:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
    except FileNotFoundError as exc:
        raise DataError(f"corpus not found: {path}") from exc
    if lines and lines[-1] == "":
        lines.pop()
    out = []
    for n, line in enumerate(lines, 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{n}: expected dialect<TAB>application<TAB>text")
        rec = TaggedRecord(*parts)
        if dialects is not None and rec.dialect not in dialects:
            raise DataError(f"{path}:{n}: undeclared dialect {rec.dialect!r}")
        if applications is not None and rec.application not in applications:
            raise DataError(f"{path}:{n}: undeclared application {rec.application!r}")
        out.append(rec)
    return out


def word_counts(texts: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for text in texts:
        counts.update(text.lower().split())
    for w in RESERVED:
        counts.pop(w, None)
    return counts


def build_vocab(corpus: Iterable[TaggedRecord | str], K: int) -> Vocabulary:
    """Reserved tokens plus the K most frequent words; ties broken lexicographically."""
    if K < 1:
        raise ConfigError(f"vocabulary size K must be >= 1, got {K}")
    counts = word_counts(r.text if isinstance(r, TaggedRecord) else r for r in corpus)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [w for w, _ in ranked[:K]])


def _plain(vocab: Vocabulary | Iterable[str]) -> set[str]:
    words = vocab.words if isinstance(vocab, Vocabulary) else vocab
    return set(words) - set(RESERVED)


def coverage(multi_vocab: Vocabulary | Iterable[str], single_vocab: Vocabulary | Iterable[str]) -> float:
    """Percentage of ``single_vocab`` words (reserved tokens excluded) found in ``multi_vocab``."""
    single = _plain(single_vocab)
    if not single:
        raise DataError("coverage against an empty vocabulary is undefined")
    return 100.0 * len(single & _plain(multi_vocab)) / len(single)


@dataclass
class CorpusStats:
    words: dict[str, int]
    coverage: dict[str, float] = field(default_factory=dict)


def corpus_stats(records: Sequence[TaggedRecord], multi_vocab: Vocabulary | None = None,
                 single_K: int | None = None) -> CorpusStats:
    words: Counter = Counter()
    for r in records:
        words[f"{r.dialect}/{r.application}"] += len(r.text.split())
    stats = CorpusStats(dict(sorted(words.items())))
    if multi_vocab is not None:
        K = single_K or (multi_vocab.size - len(RESERVED))
        for dia in sorted({r.dialect for r in records}):
            single = build_vocab([r for r in records if r.dialect == dia], K)
            stats.coverage[dia] = coverage(multi_vocab, single)
    return stats


def _allocate(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``total`` by ``weights`` (ties to earlier entries)."""
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    counts = np.floor(exact + 1e-9).astype(int)
    rest = total - counts.sum()
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts.tolist()


def split(corpus: Sequence, ratios: Sequence[float], seed: int) -> list[list]:
    """Disjoint, exhaustive, seeded partition of ``corpus`` by ``ratios``."""
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {list(ratios)}")
    counts = _allocate(len(corpus), ratios)
    perm = np.random.default_rng(seed).permutation(len(corpus))
    parts, start = [], 0
    for c in counts:
        parts.append([corpus[i] for i in sorted(perm[start:start + c])])
        start += c
    return parts


FUNCTION_WORDS = (
    "play", "set", "call", "send", "show", "find", "open", "add", "remind", "what",
    "is", "the", "a", "to", "for", "on", "in", "at", "with", "my", "me", "please",
    "and", "then", "i", "we", "will", "need", "about", "from", "tomorrow", "today",
    "it", "was", "that", "some", "you", "should", "bring", "meet",
)
SLOT_NAMES = ("artist", "song", "contact", "city", "app", "food", "item", "place",
              "team", "show", "brand", "street", "dish", "game", "book", "topic")


@dataclass
class GeneratorSpec:
    dialects: tuple[str, ...] = ("en_US", "en_GB", "en_IN")
    applications: tuple[str, ...] = ("assistant", "stt")
    slot_types: int = 8
    words_per_slot: int = 200
    divergence: float = 0.3
    sentences_per_dialect: int = 1000
    templates_per_application: int = 24
    zipf: float = 1.0
    seed: int = 0

    def validate(self) -> "GeneratorSpec":
        if not 0.0 <= self.divergence <= 1.0:
            raise ConfigError(f"divergence must lie in [0, 1], got {self.divergence}")
        if not 1 <= self.slot_types <= len(SLOT_NAMES):
            raise ConfigError(f"slot_types must lie in [1, {len(SLOT_NAMES)}]")
        if self.words_per_slot < 1 or self.sentences_per_dialect < 0 or self.templates_per_application < 1:
            raise ConfigError("words_per_slot and templates_per_application must be >= 1, "
                              "sentences_per_dialect >= 0")
        if not self.dialects or not self.applications:
            raise ConfigError("at least one dialect and one application required")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dialects"] = list(self.dialects)
        out["applications"] = list(self.applications)
        return out


def _zipf_probs(n: int, s: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1) ** s
    return p / p.sum()


def _templates(spec: GeneratorSpec, app_index: int, rng: np.random.Generator) -> list[list]:
    """Token templates: strings are literal words, ints are slot types.

    Even-indexed applications get short command templates, odd-indexed ones
    longer multi-clause dictation templates.
    """
    slots = list(range(spec.slot_types))
    fw = FUNCTION_WORDS
    out = []
    for _ in range(spec.templates_per_application):
        if app_index % 2 == 0:
            tpl = [fw[rng.integers(0, 10)]]
            if rng.random() < 0.5:
                tpl.append(fw[rng.integers(10, 22)])
            tpl.append(int(rng.choice(slots)))
            if rng.random() < 0.6:
                tpl += [fw[rng.integers(13, 19)], int(rng.choice(slots))]
        else:
            tpl = []
            for c in range(int(rng.integers(2, 4))):
                if c:
                    tpl.append(fw[rng.integers(22, 26)])
                tpl += [fw[rng.integers(24, 40)], fw[rng.integers(10, 22)], int(rng.choice(slots))]
                if rng.random() < 0.5:
                    tpl += [fw[rng.integers(13, 19)], int(rng.choice(slots))]
        out.append(tpl)
    return out


def generator_ground_truth(spec: GeneratorSpec) -> dict:
    """Template and lexicon distributions the sampler draws from."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0xF0FE])
    templates = {app: _templates(spec, i, rng) for i, app in enumerate(spec.applications)}
    template_probs = _zipf_probs(spec.templates_per_application, 0.5).tolist()
    n_div = int(round(spec.divergence * spec.words_per_slot))
    lexicon = {}
    for s in range(spec.slot_types):
        name = SLOT_NAMES[s]
        divergent = set(rng.choice(spec.words_per_slot, size=n_div, replace=False).tolist())
        lexicon[name] = {dia: [f"{name}{j}-{dia.lower()}" if j in divergent else f"{name}{j}"
                               for j in range(spec.words_per_slot)]
                         for dia in spec.dialects}
    return {
        "spec": spec.to_dict(),
        "slot_names": list(SLOT_NAMES[:spec.slot_types]),
        "templates": {app: [[t if isinstance(t, str) else SLOT_NAMES[t].upper() for t in tpl]
                            for tpl in tpls] for app, tpls in templates.items()},
        "template_probs": template_probs,
        "slot_word_probs": _zipf_probs(spec.words_per_slot, spec.zipf).tolist(),
        "lexicon": lexicon,
    }


def generate_synthetic_corpus(spec: GeneratorSpec) -> tuple[list[TaggedRecord], dict]:
    truth = generator_ground_truth(spec)
    slot_of = {name.upper(): name for name in truth["slot_names"]}
    tprobs = np.asarray(truth["template_probs"])
    wprobs = np.asarray(truth["slot_word_probs"])
    n_apps = _allocate(spec.sentences_per_dialect, [1.0] * len(spec.applications))
    records = []
    for di, dia in enumerate(spec.dialects):
        rng = np.random.default_rng([spec.seed, 1 + di])
        for app, n in zip(spec.applications, n_apps):
            tpls = truth["templates"][app]
            choices = rng.choice(len(tpls), size=n, p=tprobs)
            n_slots = sum(tok in slot_of for ti in choices for tok in tpls[ti])
            fillers = iter(rng.choice(len(wprobs), size=n_slots, p=wprobs).tolist())
            for ti in choices:
                words = [truth["lexicon"][slot_of[tok]][dia][next(fillers)] if tok in slot_of else tok
                         for tok in tpls[ti]]
                records.append(TaggedRecord(dia, app, " ".join(words)))
    return records, truth


def write_ground_truth(path: str | Path, truth: dict) -> None:
    Path(path).write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
