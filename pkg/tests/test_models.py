import numpy as np
import pytest

from fofelm import autograd as ag
from fofelm.autograd import Tensor
from fofelm.errors import ConfigError, DimensionError, RoutingError
from fofelm.models import (ArchitectureConfig, Placement, RoutingKey, Variant, adapter_forward,
                           adapter_overhead_pct, adapter_param_count, build_model, count_params,
                           forward, load_model, mixture_weights, save_model)
from oracles import central_diff, rel_err

AD_FAMILY = ["AD", "AD_A", "AD_DA", "AD_CAA_DA"]
ALL = ["MIXTURE", "MIXTURE_A"] + AD_FAMILY
KEY = RoutingKey("en_GB", "stt")


def randomize(m, seed=0, scale=0.3):
    """Give every parameter (zero-init ones included) a random nonzero value."""
    rng = np.random.default_rng(seed)
    for t in m.parameters():
        t.data[...] = rng.normal(0, scale, size=t.shape)
    return m


def batch(V, seed=0, n=3):
    rng = np.random.default_rng(seed)
    sents = [[1] + rng.integers(2, V, size=int(rng.integers(2, 6))).tolist() + [1] for _ in range(n)]
    pieces = [(s, range(1, len(s))) for s in sents]
    targets = [s[t] for s in sents for t in range(1, len(s))]
    return pieces, targets


def loss_of(m, pieces, targets, key):
    return ag.softmax_cross_entropy(forward(m, m.encode(pieces), key), targets)


def test_adapter_param_count_at_full_width():
    assert adapter_param_count(768, 96) == 148_320 == 2 * 768 * 96 + 96 + 768
    # three dialect adapters over an 89M base: integer check 3·148,320·200 ≤ 89,000,000
    assert 3 * 148_320 * 200 <= 89_000_000
    assert adapter_overhead_pct(89_000_000, 3, 768, 96) <= 0.50


def test_adapter_counts_match_built_tensors(tiny_cfg):
    m = build_model(tiny_cfg("AD_A"), seed=0)
    for dia in m.config.dialects:
        assert m.groups[f"dialect:{dia}:adapter"].size == adapter_param_count(6, 3)


def test_adapter_identity_at_init_and_width_check(tiny_cfg):
    m = build_model(tiny_cfg("MIXTURE_A"), seed=0)
    a = m.adapters[("en_US", "pre_proj")]
    x = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
    assert np.array_equal(a(x).data, x.data)
    assert not a.up.weight.data.any() and a.down.weight.data.std() > 0
    with pytest.raises(DimensionError):
        adapter_forward(Tensor(np.ones((2, 5))), a)


def test_adapter_forward_matches_numpy(tiny_cfg):
    m = randomize(build_model(tiny_cfg("AD_A"), seed=0))
    a = m.adapters[("en_IN", "pre_proj")]
    x = np.random.default_rng(1).normal(size=(4, 6))
    ref = x + np.maximum(x @ a.down.weight.data + a.down.bias.data, 0) @ a.up.weight.data + a.up.bias.data
    assert np.allclose(adapter_forward(Tensor(x), a).data, ref, rtol=0, atol=1e-12)


def test_build_ad_topology(tiny_cfg):
    m = build_model(tiny_cfg("AD"), seed=0)
    assert len(m.subnets) == len(m.heads) == 6
    assert len([g for g in m.groups.values() if g.role == "subnet"]) == 6


def test_build_ad_da_topology(tiny_cfg):
    m = build_model(tiny_cfg("AD_DA"), seed=0)
    assert len(m.subnets) == 2 and len(m.heads) == 2
    assert len(m.adapters) == 6 and len(m.common_adapters) == 2
    for app in m.config.applications:
        assert sum(1 for (_, a) in m.adapters if a == app) == 3


def test_build_caa_topology(tiny_cfg):
    m = build_model(tiny_cfg("AD_CAA_DA"), seed=0)
    assert m.shared_block and m.caa is not None and len(m.subnets) == 2


def test_tied_embedding_is_single_parameter(tiny_cfg):
    for v in ALL:
        m = build_model(tiny_cfg(v), seed=0)
        assert sum(1 for t in m.parameters() if t.shape == (13, 6)) == 1
        pieces, targets = batch(13)
        m.zero_grad()
        loss_of(m, pieces, targets, KEY).backward()
        # gradient reaches the shared table from both the input code and the output logits
        assert m.embedding.grad.any()


def test_output_uses_embedding_transpose(tiny_cfg):
    m = randomize(build_model(tiny_cfg("AD"), seed=0))
    x = Tensor(np.random.default_rng(2).normal(size=(2, 6)))
    head = m.heads[("en_GB", "stt")]
    h = x.data
    for layer in m.subnets[("en_GB", "stt")]:
        h = np.maximum(h @ layer.weight.data + layer.bias.data, 0)
    ref = (h @ head.proj.weight.data + head.proj.bias.data) @ m.embedding.data.T + head.out_bias.data
    assert np.allclose(forward(m, x, KEY).data, ref, rtol=0, atol=1e-12)


def test_mixture_weights_sum_to_one(tiny_cfg):
    m = randomize(build_model(tiny_cfg("MIXTURE", N=4), seed=0))
    w = mixture_weights(m, Tensor(np.random.default_rng(3).normal(size=(5, 6)))).data
    assert w.shape == (5, 3) and np.all(w >= 0)
    assert np.all(np.abs(w.sum(axis=1) - 1) <= 1e-12)


def test_mixture_with_two_blocks_reduces_to_single_block(tiny_cfg):
    m = randomize(build_model(tiny_cfg("MIXTURE", N=2), seed=0))
    x = np.random.default_rng(4).normal(size=(3, 6))
    h = x
    for layer in m.blocks[0]:
        h = np.maximum(h @ layer.weight.data + layer.bias.data, 0)
    head = m.heads[()]
    ref = (h @ head.proj.weight.data + head.proj.bias.data) @ m.embedding.data.T + head.out_bias.data
    assert np.allclose(forward(m, Tensor(x)).data, ref, rtol=0, atol=1e-12)


def test_caa_da_matches_straight_line_oracle(tiny_cfg):
    m = randomize(build_model(tiny_cfg("AD_CAA_DA"), seed=0))
    x = np.random.default_rng(5).normal(size=(3, 6))

    def stack(layers, v):
        for layer in layers:
            v = np.maximum(v @ layer.weight.data + layer.bias.data, 0)
        return v

    def branch(a, v):
        return np.maximum(v @ a.down.weight.data + a.down.bias.data, 0) @ a.up.weight.data + a.up.bias.data

    h = stack(m.shared_block, x)
    c = stack(m.subnets[("stt",)], h) + branch(m.caa, h) + h
    y = c + branch(m.adapters[("en_GB", "stt")], c) + branch(m.common_adapters["stt"], c)
    head = m.heads[("stt",)]
    ref = (y @ head.proj.weight.data + head.proj.bias.data) @ m.embedding.data.T + head.out_bias.data
    assert np.max(np.abs(forward(m, Tensor(x), KEY).data - ref)) <= 1e-12


def test_caa_zero_subnet_and_adapters_pass_shared_features(tiny_cfg):
    m = randomize(build_model(tiny_cfg("AD_CAA_DA"), seed=0))
    for layer in m.subnets[("stt",)]:
        layer.weight.data[...] = 0
        layer.bias.data[...] = 0
    for a in (m.caa, m.adapters[("en_GB", "stt")], m.common_adapters["stt"]):
        a.up.weight.data[...] = 0
        a.up.bias.data[...] = 0
    x = np.random.default_rng(6).normal(size=(2, 6))
    h = x
    for layer in m.shared_block:
        h = np.maximum(h @ layer.weight.data + layer.bias.data, 0)
    head = m.heads[("stt",)]
    ref = (h @ head.proj.weight.data + head.proj.bias.data) @ m.embedding.data.T + head.out_bias.data
    assert np.array_equal(forward(m, Tensor(x), KEY).data, ref)


@pytest.mark.parametrize("adapted,base", [("MIXTURE_A", "MIXTURE"), ("AD_A", "AD")])
@pytest.mark.parametrize("placement", list(Placement))
def test_identity_at_init_bit_exact(tiny_cfg, adapted, base, placement):
    ma = build_model(tiny_cfg(adapted, adapter_placement=placement), seed=11)
    mb = build_model(tiny_cfg(base), seed=11)
    for name, t in mb.params.items():
        assert ma.params[name].data.tobytes() == t.data.tobytes()
    x = Tensor(np.random.default_rng(7).normal(size=(5, 6)))
    for key in ma.routing_keys():
        assert forward(ma, x, key).data.tobytes() == forward(mb, x, key).data.tobytes()


@pytest.mark.parametrize("variant", AD_FAMILY)
def test_activation_exclusivity(tiny_cfg, variant):
    m = randomize(build_model(tiny_cfg(variant), seed=0))
    pieces, targets = batch(13)
    rng = np.random.default_rng(8)
    for key in m.routing_keys():
        active = {g.name for g in m.active_groups(key)}
        inactive = [g for g in m.groups.values() if g.name not in active]
        assert inactive, "every AD-family key leaves some groups unselected"
        before = forward(m, m.encode(pieces), key).data.tobytes()
        saved = {t.name: t.data.copy() for g in inactive for t in g.tensors}
        for g in inactive:
            for t in g.tensors:
                t.data += rng.normal(size=t.shape)
        assert forward(m, m.encode(pieces), key).data.tobytes() == before
        for g in inactive:
            for t in g.tensors:
                t.data[...] = saved[t.name]
        m.zero_grad()
        loss_of(m, pieces, targets, key).backward()
        for g in inactive:
            for t in g.tensors:
                assert t.grad is None or not t.grad.any(), (str(key), g.name)


@pytest.mark.parametrize("variant", ALL)
def test_end_to_end_gradient(tiny_cfg, variant):
    m = randomize(build_model(tiny_cfg(variant, d=4, vocab_size=7), seed=0), seed=1)
    pieces, targets = batch(7, seed=2)
    m.zero_grad()
    loss_of(m, pieces, targets, KEY).backward()
    params = [t for g in m.active_groups(KEY if variant != "MIXTURE" else None) for t in g.tensors]

    def f():
        with ag.no_grad():
            return float(loss_of(m, pieces, targets, KEY).data[0, 0])

    numeric = central_diff(f, [t.data for t in params], 1e-5)
    worst = max(rel_err(t.grad, n, floor=1e-6) for t, n in zip(params, numeric))
    assert worst <= 1e-4


def test_total_size_ordering():
    cfg = ArchitectureConfig(variant="AD", d=64, L=2, k=16, vocab_size=2000)
    totals = {v: count_params(build_model(cfg.replace(variant=v), seed=0)).total
              for v in ("AD", "AD_CAA_DA", "AD_DA")}
    assert totals["AD"] > totals["AD_CAA_DA"] > totals["AD_DA"]


@pytest.mark.parametrize("variant", ALL)
def test_active_not_above_total(tiny_cfg, variant):
    m = build_model(tiny_cfg(variant), seed=0)
    total = count_params(m).total
    assert total == sum(t.data.size for t in m.parameters())
    for key in m.routing_keys():
        active = count_params(m, key).total
        assert active <= total
        assert (active == total) == (variant == "MIXTURE")


def test_routing_errors(tiny_cfg):
    m = build_model(tiny_cfg("AD"), seed=0)
    x = Tensor(np.zeros((1, 6)))
    with pytest.raises(RoutingError):
        forward(m, x, RoutingKey("en_AU", "stt"))
    with pytest.raises(RoutingError):
        forward(m, x, None)
    with pytest.raises(RoutingError):
        forward(build_model(tiny_cfg("MIXTURE_A"), seed=0), x, None)
    forward(build_model(tiny_cfg("MIXTURE"), seed=0), x, None)


@pytest.mark.parametrize("kw", [
    dict(variant="MIXTURE", N=1),
    dict(variant="AD_A", k=6),
    dict(variant="AD_A", k=0),
    dict(variant="AD", adapter_placement="LAST_HIDDEN"),
    dict(variant="AD_DA", adapter_placement="EVERY_HIDDEN"),
    dict(variant="AD", alpha=1.0),
    dict(variant="AD", dialects=("en_US", "en_US")),
])
def test_config_errors(tiny_cfg, kw):
    with pytest.raises(ConfigError):
        build_model(tiny_cfg(**kw), seed=0)


def test_unknown_variant_and_placement_rejected():
    with pytest.raises(ValueError):
        ArchitectureConfig(variant="LSTM")
    with pytest.raises(ConfigError):
        ArchitectureConfig.from_dict({"variant": "AD_A", "adapter_placement": "NOWHERE"})


@pytest.mark.parametrize("placement,per_dialect", [
    ("BEFORE_PROJECTION", 1), ("LAST_HIDDEN", 2), ("BOTH", 3),
    ("EVERY_HIDDEN", 4), ("EVERY_HIDDEN_PLUS_PROJECTION", 5),
])
def test_mixture_adapter_placements(tiny_cfg, placement, per_dialect):
    # N=3 gives two feature blocks of L=2 layers each
    m = build_model(tiny_cfg("MIXTURE_A", adapter_placement=placement), seed=0)
    assert sum(1 for k in m.adapters if k[0] == "en_US") == per_dialect


def test_checkpoint_round_trip(tiny_cfg, tmp_path):
    m = randomize(build_model(tiny_cfg("AD_CAA_DA"), seed=3))
    m.groups["shared:embedding"].set_trainable(False)
    path = tmp_path / "m.ckpt"
    save_model(m, path, vocab_sha256="abc")
    m2, meta = load_model(path)
    assert meta["vocab_sha256"] == "abc" and m2.config == m.config
    assert all(m2.params[n].data.tobytes() == t.data.tobytes() for n, t in m.params.items())
    assert not m2.groups["shared:embedding"].trainable
    save_model(m2, tmp_path / "again.ckpt", vocab_sha256="abc")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_same_seed_same_model(tiny_cfg):
    a = build_model(tiny_cfg("AD_DA"), seed=5)
    b = build_model(tiny_cfg("AD_DA"), seed=5)
    c = build_model(tiny_cfg("AD_DA"), seed=6)
    assert all(a.params[n].data.tobytes() == t.data.tobytes() for n, t in b.params.items())
    assert a.embedding.data.tobytes() != c.embedding.data.tobytes()


def test_variant_enum_properties():
    assert Variant.MIXTURE_A.is_mixture and Variant.MIXTURE_A.has_adapters
    assert not Variant.AD.has_adapters and Variant.AD_CAA_DA.dual
