"""FOFE feedforward LM variants: Mixture, application-dependent (AD) and their adapter extensions.

Every variant shares one embedding matrix between the FOFE input and the output
logits. A routing key (dialect, application) selects which sub-networks and
adapters take part in a forward pass.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Linear, ParamGroup, Tensor
from .errors import ConfigError, DataError, DimensionError, RoutingError
from .fofe import DEFAULT_ALPHA, check_alpha, encode_histories


class Variant(str, Enum):
    MIXTURE = "MIXTURE"
    MIXTURE_A = "MIXTURE_A"
    AD = "AD"
    AD_A = "AD_A"
    AD_DA = "AD_DA"
    AD_CAA_DA = "AD_CAA_DA"

    @property
    def is_mixture(self) -> bool:
        return self in (Variant.MIXTURE, Variant.MIXTURE_A)

    @property
    def has_adapters(self) -> bool:
        return self not in (Variant.MIXTURE, Variant.AD)

    @property
    def dual(self) -> bool:
        return self in (Variant.AD_DA, Variant.AD_CAA_DA)


class Placement(str, Enum):
    """Where dialect adapters sit inside the feature stacks."""

    BEFORE_PROJECTION = "BEFORE_PROJECTION"
    LAST_HIDDEN = "LAST_HIDDEN"
    BOTH = "BOTH"
    EVERY_HIDDEN = "EVERY_HIDDEN"
    EVERY_HIDDEN_PLUS_PROJECTION = "EVERY_HIDDEN_PLUS_PROJECTION"

    @property
    def before_projection(self) -> bool:
        return self in (Placement.BEFORE_PROJECTION, Placement.BOTH,
                        Placement.EVERY_HIDDEN_PLUS_PROJECTION)

    def after_layer(self, layer: int, n_layers: int) -> bool:
        if self in (Placement.EVERY_HIDDEN, Placement.EVERY_HIDDEN_PLUS_PROJECTION):
            return True
        return self in (Placement.LAST_HIDDEN, Placement.BOTH) and layer == n_layers - 1


# adapter-free counterpart of each adapter variant
BASE_VARIANT = {Variant.MIXTURE_A: Variant.MIXTURE, Variant.AD_A: Variant.AD}


@dataclass(frozen=True)
class ArchitectureConfig:
    variant: Variant = Variant.MIXTURE
    d: int = 768
    N: int = 5
    L: int = 4
    k: int = 96
    dialects: tuple[str, ...] = ("en_US", "en_GB", "en_IN")
    applications: tuple[str, ...] = ("assistant", "stt")
    vocab_size: int = 150_000
    adapter_placement: Placement | None = None
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.adapter_placement is not None:
            object.__setattr__(self, "adapter_placement", Placement(self.adapter_placement))
        object.__setattr__(self, "dialects", tuple(self.dialects))
        object.__setattr__(self, "applications", tuple(self.applications))

    @property
    def placement(self) -> Placement | None:
        if not self.variant.has_adapters:
            return None
        return self.adapter_placement or Placement.BEFORE_PROJECTION

    def validate(self) -> "ArchitectureConfig":
        if self.variant.is_mixture and self.N < 2:
            raise ConfigError(f"N must be >= 2 for mixture variants, got {self.N}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.d < 2 or self.vocab_size < 3:
            raise ConfigError("d must be >= 2 and vocab_size >= 3")
        if self.variant.has_adapters and not 0 < self.k < self.d:
            raise ConfigError(f"adapter dim k must satisfy 0 < k < d, got k={self.k}, d={self.d}")
        if not self.dialects or not self.applications:
            raise ConfigError("at least one dialect and one application required")
        if len(set(self.dialects)) != len(self.dialects) or \
                len(set(self.applications)) != len(self.applications):
            raise ConfigError("dialect and application labels must be unique")
        if self.adapter_placement is not None and not self.variant.has_adapters:
            raise ConfigError(f"adapter_placement set on {self.variant.value}, which has no adapters")
        if self.variant.dual and self.placement is not Placement.BEFORE_PROJECTION:
            raise ConfigError(f"{self.variant.value} places dual adapters atop each sub-network; "
                              "adapter_placement must be BEFORE_PROJECTION")
        check_alpha(self.alpha)
        return self

    def replace(self, **changes) -> "ArchitectureConfig":
        return ArchitectureConfig(**{**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variant"] = self.variant.value
        out["adapter_placement"] = self.adapter_placement.value if self.adapter_placement else None
        out["dialects"] = list(self.dialects)
        out["applications"] = list(self.applications)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureConfig":
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad architecture config: {exc}") from exc


@dataclass(frozen=True)
class RoutingKey:
    dialect: str
    application: str

    def __str__(self) -> str:
        return f"{self.dialect}/{self.application}"


@dataclass
class AdapterParams:
    """Bottleneck d -> k -> d with a residual connection."""

    down: Linear
    up: Linear

    @property
    def tensors(self) -> list[Tensor]:
        return self.down.tensors + self.up.tensors

    def branch(self, x: Tensor) -> Tensor:
        return self.up(ag.relu(self.down(x)))

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(x, self)


def adapter_forward(x: Tensor, p: AdapterParams) -> Tensor:
    if x.shape[1] != p.down.weight.shape[0]:
        raise DimensionError(f"adapter expects width {p.down.weight.shape[0]}, got {x.shape[1]}")
    return ag.add(x, p.branch(x))


def adapter_param_count(d: int, k: int) -> int:
    return 2 * d * k + k + d


class _Builder:
    """Creates named parameters; each tensor draws from its own name-seeded stream."""

    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def tensor(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        return t

    def normal(self, name: str, shape: tuple[int, int], std: float) -> Tensor:
        return self.tensor(name, self._rng(name).normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: tuple[int, int]) -> Tensor:
        return self.tensor(name, np.zeros(shape))

    def linear(self, name: str, n_in: int, n_out: int, std: float | None = None) -> Linear:
        std = np.sqrt(2.0 / n_in) if std is None else std
        return Linear(self.normal(f"{name}.W", (n_in, n_out), std), self.zeros(f"{name}.b", (1, n_out)))

    def stack(self, name: str, d: int, n_layers: int) -> list[Linear]:
        return [self.linear(f"{name}.layer{i}", d, d) for i in range(n_layers)]

    def adapter(self, name: str, d: int, k: int) -> AdapterParams:
        down = self.linear(f"{name}.down", d, k, std=0.02)
        up = Linear(self.zeros(f"{name}.up.W", (k, d)), self.zeros(f"{name}.up.b", (1, d)))
        return AdapterParams(down, up)


@dataclass
class Head:
    proj: Linear
    out_bias: Tensor

    @property
    def tensors(self) -> list[Tensor]:
        return self.proj.tensors + [self.out_bias]


@dataclass
class ModelGraph:
    config: ArchitectureConfig
    seed: int
    embedding: Tensor
    groups: dict[str, ParamGroup] = field(default_factory=dict)
    # topology, keyed by role
    blocks: list[list[Linear]] = field(default_factory=list)
    mixture_block: list[Linear] = field(default_factory=list)
    gate: Linear | None = None
    shared_block: list[Linear] = field(default_factory=list)
    subnets: dict[tuple, list[Linear]] = field(default_factory=dict)
    heads: dict[tuple, Head] = field(default_factory=dict)
    adapters: dict[tuple, AdapterParams] = field(default_factory=dict)
    common_adapters: dict[str, AdapterParams] = field(default_factory=dict)
    caa: AdapterParams | None = None

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @property
    def params(self) -> dict[str, Tensor]:
        return {t.name: t for g in self.groups.values() for t in g.tensors}

    def parameters(self) -> list[Tensor]:
        return [t for g in self.groups.values() for t in g.tensors]

    def check_key(self, key: RoutingKey | None, required: bool = True) -> RoutingKey | None:
        cfg = self.config
        if key is None:
            if required:
                raise RoutingError(f"{cfg.variant.value} needs a routing key")
            return None
        if key.dialect not in cfg.dialects or key.application not in cfg.applications:
            raise RoutingError(f"unknown routing key {key} for dialects {cfg.dialects} "
                               f"and applications {cfg.applications}")
        return key

    def routing_keys(self) -> list[RoutingKey]:
        return [RoutingKey(d, a) for d in self.config.dialects for a in self.config.applications]

    def active_groups(self, key: RoutingKey | None) -> list[ParamGroup]:
        if key is None:
            return list(self.groups.values())
        self.check_key(key)
        return [g for g in self.groups.values()
                if g.dialect in (None, key.dialect) and g.application in (None, key.application)]

    def encode(self, pieces: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Tensor:
        return encode_histories(self.embedding, pieces, self.config.alpha)

    def logits(self, x: Tensor, key: RoutingKey | None = None) -> Tensor:
        return forward(self, x, key)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching tensors in; returns the names of parameters left untouched."""
        params = self.params
        if strict:
            missing = sorted(set(params) ^ set(state))
            if missing:
                raise DataError(f"checkpoint/model parameter mismatch: {missing[:5]}")
        untouched = []
        for name, t in params.items():
            if name in state:
                if state[name].shape != t.shape:
                    raise DataError(f"{name}: shape {state[name].shape} != {t.shape}")
                t.data[...] = state[name]
            else:
                untouched.append(name)
        return untouched

    def set_trainable(self, predicate) -> None:
        for g in self.groups.values():
            g.set_trainable(bool(predicate(g)))


def _group(m: ModelGraph, name: str, tensors: Iterable[Tensor], role: str,
           dialect: str | None = None, application: str | None = None) -> None:
    m.groups[name] = ParamGroup(name, list(tensors), True, role, dialect, application)


def _flat(layers: Iterable[Linear]) -> list[Tensor]:
    return [t for layer in layers for t in layer.tensors]


def build_model(cfg: ArchitectureConfig, seed: int) -> ModelGraph:
    cfg.validate()
    b = _Builder(seed)
    d, V = cfg.d, cfg.vocab_size
    emb = b.normal("embedding", (V, d), 1.0 / np.sqrt(d))
    m = ModelGraph(cfg, seed, emb)
    _group(m, "shared:embedding", [emb], "shared")

    def head(name: str) -> Head:
        return Head(b.linear(f"{name}.proj", d, d), b.zeros(f"{name}.out_bias", (1, V)))

    v = cfg.variant
    if v.is_mixture:
        for i in range(cfg.N - 1):
            m.blocks.append(b.stack(f"block{i}", d, cfg.L))
            _group(m, f"shared:block{i}", _flat(m.blocks[i]), "block")
        m.mixture_block = b.stack("mixture", d, cfg.L)
        m.gate = b.linear("mixture.gate", d, cfg.N - 1, std=0.02)
        _group(m, "shared:mixture", _flat(m.mixture_block) + m.gate.tensors, "mixture")
        m.heads[()] = head("head")
        _group(m, "shared:head", m.heads[()].tensors, "head")
        if v is Variant.MIXTURE_A:
            pl = cfg.placement
            for dia in cfg.dialects:
                tensors = []
                for i in range(cfg.N - 1):
                    for layer in range(cfg.L):
                        if pl.after_layer(layer, cfg.L):
                            a = b.adapter(f"adapter.{dia}.block{i}.layer{layer}", d, cfg.k)
                            m.adapters[(dia, f"block{i}", layer)] = a
                            tensors += a.tensors
                if pl.before_projection:
                    a = b.adapter(f"adapter.{dia}.pre_proj", d, cfg.k)
                    m.adapters[(dia, "pre_proj")] = a
                    tensors += a.tensors
                _group(m, f"dialect:{dia}:adapter", tensors, "adapter", dialect=dia)
    elif v in (Variant.AD, Variant.AD_A):
        for dia in cfg.dialects:
            for app in cfg.applications:
                m.subnets[(dia, app)] = b.stack(f"subnet.{dia}.{app}", d, cfg.L)
                _group(m, f"subnet:{dia}:{app}", _flat(m.subnets[(dia, app)]), "subnet", dia, app)
                m.heads[(dia, app)] = head(f"head.{dia}.{app}")
                _group(m, f"head:{dia}:{app}", m.heads[(dia, app)].tensors, "head", dia, app)
        if v is Variant.AD_A:
            pl = cfg.placement
            for dia in cfg.dialects:
                tensors = []
                for layer in range(cfg.L):
                    if pl.after_layer(layer, cfg.L):
                        a = b.adapter(f"adapter.{dia}.layer{layer}", d, cfg.k)
                        m.adapters[(dia, "subnet", layer)] = a
                        tensors += a.tensors
                if pl.before_projection:
                    a = b.adapter(f"adapter.{dia}.pre_proj", d, cfg.k)
                    m.adapters[(dia, "pre_proj")] = a
                    tensors += a.tensors
                _group(m, f"dialect:{dia}:adapter", tensors, "adapter", dialect=dia)
    else:
        if v is Variant.AD_CAA_DA:
            m.shared_block = b.stack("shared_block", d, cfg.L)
            _group(m, "shared:block", _flat(m.shared_block), "block")
            m.caa = b.adapter("caa", d, cfg.k)
            _group(m, "caa:adapter", m.caa.tensors, "common_adapter")
        for app in cfg.applications:
            m.subnets[(app,)] = b.stack(f"subnet.{app}", d, cfg.L)
            _group(m, f"subnet:{app}", _flat(m.subnets[(app,)]), "subnet", application=app)
            m.heads[(app,)] = head(f"head.{app}")
            _group(m, f"head:{app}", m.heads[(app,)].tensors, "head", application=app)
            for dia in cfg.dialects:
                a = b.adapter(f"adapter.{app}.{dia}", d, cfg.k)
                m.adapters[(dia, app)] = a
                _group(m, f"dialect:{dia}:adapter:{app}", a.tensors, "adapter", dia, app)
            m.common_adapters[app] = b.adapter(f"common.{app}", d, cfg.k)
            _group(m, f"common:adapter:{app}", m.common_adapters[app].tensors,
                   "common_adapter", application=app)

    names = [t.name for g in m.groups.values() for t in g.tensors]
    assert len(names) == len(set(names)) == len(b.params), "every parameter in exactly one group"
    return m


def _stack_forward(layers: list[Linear], x: Tensor, adapters: list[AdapterParams | None] | None = None) -> Tensor:
    h = x
    for i, layer in enumerate(layers):
        h = ag.relu(layer(h))
        if adapters and adapters[i] is not None:
            h = adapter_forward(h, adapters[i])
    return h


def _output(m: ModelGraph, head: Head, h: Tensor) -> Tensor:
    out = head.proj(h)
    return ag.add(ag.matmul_nt(out, m.embedding), head.out_bias)


def mixture_weights(m: ModelGraph, x: Tensor) -> Tensor:
    return ag.softmax(m.gate(_stack_forward(m.mixture_block, x)))


def forward_mixture(m: ModelGraph, x: Tensor, key: RoutingKey | None = None) -> Tensor:
    cfg = m.config
    if not cfg.variant.is_mixture:
        raise ConfigError(f"forward_mixture called on {cfg.variant.value}")
    key = m.check_key(key, required=cfg.variant is Variant.MIXTURE_A)
    dia = key.dialect if key is not None and cfg.variant is Variant.MIXTURE_A else None
    w = mixture_weights(m, x)
    avg = None
    for i, block in enumerate(m.blocks):
        ads = [m.adapters.get((dia, f"block{i}", layer)) for layer in range(cfg.L)] if dia else None
        feat = ag.mul(ag.take(w, (slice(None), slice(i, i + 1))), _stack_forward(block, x, ads))
        avg = feat if avg is None else ag.add(avg, feat)
    if dia and (dia, "pre_proj") in m.adapters:
        avg = adapter_forward(avg, m.adapters[(dia, "pre_proj")])
    return _output(m, m.heads[()], avg)


def forward_ad(m: ModelGraph, x: Tensor, key: RoutingKey) -> Tensor:
    cfg = m.config
    if cfg.variant.is_mixture:
        raise ConfigError(f"forward_ad called on {cfg.variant.value}")
    key = m.check_key(key)
    if cfg.variant is Variant.AD_CAA_DA:
        return forward_ad_caa_da(m, x, key)
    if cfg.variant is Variant.AD_DA:
        app = key.application
        c = _stack_forward(m.subnets[(app,)], x)
        return _output(m, m.heads[(app,)], _dual_adapter(m, c, key))
    sub = (key.dialect, key.application)
    ads = None
    if cfg.variant is Variant.AD_A:
        ads = [m.adapters.get((key.dialect, "subnet", layer)) for layer in range(cfg.L)]
    h = _stack_forward(m.subnets[sub], x, ads)
    if cfg.variant is Variant.AD_A and (key.dialect, "pre_proj") in m.adapters:
        h = adapter_forward(h, m.adapters[(key.dialect, "pre_proj")])
    return _output(m, m.heads[sub], h)


def _dual_adapter(m: ModelGraph, c: Tensor, key: RoutingKey) -> Tensor:
    dialect_branch = m.adapters[(key.dialect, key.application)].branch(c)
    common_branch = m.common_adapters[key.application].branch(c)
    return ag.add(ag.add(c, dialect_branch), common_branch)


def forward_ad_caa_da(m: ModelGraph, x: Tensor, key: RoutingKey) -> Tensor:
    if m.config.variant is not Variant.AD_CAA_DA:
        raise ConfigError(f"forward_ad_caa_da called on {m.config.variant.value}")
    key = m.check_key(key)
    app = key.application
    h = _stack_forward(m.shared_block, x)
    c = ag.add(ag.add(_stack_forward(m.subnets[(app,)], h), m.caa.branch(h)), h)
    return _output(m, m.heads[(app,)], _dual_adapter(m, c, key))


def forward(m: ModelGraph, x: Tensor, key: RoutingKey | None = None) -> Tensor:
    if m.config.variant.is_mixture:
        return forward_mixture(m, x, key)
    return forward_ad(m, x, key)


@dataclass
class ParamCount:
    per_group: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.per_group.values())


def count_params(m: ModelGraph, key: RoutingKey | None = None) -> ParamCount:
    """TOTAL when ``key`` is None, otherwise the footprint active for ``key``."""
    return ParamCount({g.name: g.size for g in m.active_groups(key)})


def adapter_overhead_pct(base_params: int, n_adapters: int, d: int, k: int) -> float:
    return 100.0 * n_adapters * adapter_param_count(d, k) / base_params


def save_model(m: ModelGraph, path: str | Path, vocab_sha256: str | None = None,
               extra: dict | None = None) -> None:
    groups = [{"name": g.name, "role": g.role, "dialect": g.dialect, "application": g.application,
               "trainable": g.trainable, "tensors": [t.name for t in g.tensors]}
              for g in m.groups.values()]
    meta = {"config": m.config.to_dict(), "seed": m.seed, "vocab_sha256": vocab_sha256,
            "groups": groups}
    if extra:
        meta.update(extra)
    ag.save_tensors(path, m.state(), meta)


def load_model(path: str | Path) -> tuple[ModelGraph, dict]:
    try:
        state, meta = ag.load_tensors(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    m = build_model(ArchitectureConfig.from_dict(meta["config"]), meta["seed"])
    m.load_state(state)
    for g in meta.get("groups", []):
        if g["name"] in m.groups:
            m.groups[g["name"]].set_trainable(g["trainable"])
    return m, meta


def group_bytes(m: ModelGraph, predicate) -> bytes:
    """Serialized payload of every group matching ``predicate``, in group order."""
    return b"".join(ag.tensor_bytes(g.tensors) for g in m.groups.values() if predicate(g))
