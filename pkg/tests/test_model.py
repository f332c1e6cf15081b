import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudadapt import tensor as T
from cloudadapt.config import COMPONENT_ROWS, STRATEGIES, large_shape_config
from cloudadapt.errors import ConfigError
from cloudadapt.model import CloudAdapterNet, interaction_schedule, param_report
from conftest import small_model_config


def batch(n=2, size=16, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


def test_schedule_examples():
    assert interaction_schedule(4, 24) == [0, 6, 12, 18]
    assert interaction_schedule(24, 24) == list(range(24))
    assert interaction_schedule(12, 24) == list(range(0, 24, 2))
    with pytest.raises(ConfigError):
        interaction_schedule(5, 24)
    with pytest.raises(ConfigError):
        interaction_schedule(0, 24)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 48), st.integers(1, 48))
def test_schedule_properties(n, depth):
    if n > depth or depth % n:
        with pytest.raises(ConfigError):
            interaction_schedule(n, depth)
        return
    s = interaction_schedule(n, depth)
    assert len(s) == n and s[0] == 0
    assert all(b > a for a, b in zip(s, s[1:]))


def test_logits_shape_and_determinism(small_cfg):
    x = batch()
    a = CloudAdapterNet(small_cfg, 5).forward(x).data
    b = CloudAdapterNet(small_cfg, 5).forward(x).data
    assert a.shape == (2, 4, 16, 16)
    assert np.array_equal(a, b)


def test_identity_at_init_matches_hooks_off(small_cfg):
    m = CloudAdapterNet(small_cfg, 1)
    for i in range(3):
        x = batch(seed=i)
        assert np.array_equal(m.forward(x).data, m.forward(x, adapt=False).data)


def test_nonzero_w2_changes_logits(small_cfg):
    m = CloudAdapterNet(small_cfg, 1)
    m.adapter.units[0].w2.data[:] = 0.3
    x = batch()
    assert not np.array_equal(m.forward(x).data, m.forward(x, adapt=False).data)


def test_backbone_contributes_no_trainables(small_cfg):
    m = CloudAdapterNet(small_cfg, 0)
    names = [n for n, _ in m.trainable_named()]
    assert names and not any(n.startswith("backbone.") for n in names)
    assert m.backbone.num_params(trainable=True) == 0


def test_shape_table_matches_instantiated_counts(small_cfg):
    m = CloudAdapterNet(small_cfg, 0)
    live = m.count_params(include_head=True)
    table = param_report(small_cfg, include_head=True)
    assert live.trainable == table.trainable
    assert live.frozen == table.frozen
    assert live.per_module == table.per_module
    assert table.per_module["aggregator"] == 0


def test_large_shape_reproduces_headline_count():
    r = param_report(large_shape_config())
    assert abs(r.trainable - 1.82e6) / 1.82e6 <= 0.15
    assert 0.4 <= r.percent <= 0.8
    assert 290e6 < r.frozen < 320e6


def test_strategy_does_not_change_counts():
    counts = {s: param_report(large_shape_config(strategy=s)).trainable for s in STRATEGIES}
    assert len(set(counts.values())) == 1
    small = {s: CloudAdapterNet(small_model_config(strategy=s), 0).count_params().trainable for s in STRATEGIES}
    assert len(set(small.values())) == 1


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_every_strategy_runs(strategy):
    m = CloudAdapterNet(small_model_config(strategy=strategy), 0)
    m.adapter.units[0].w2.data[:] = 0.1
    assert m.forward(batch(1)).shape == (1, 4, 16, 16)


def test_counts_grow_with_rank_and_interactions():
    ranks = [param_report(large_shape_config(rank=r)).trainable for r in (2, 4, 8, 16, 32)]
    assert all(b > a for a, b in zip(ranks, ranks[1:]))
    ns = [param_report(large_shape_config(interaction_count=n)).trainable for n in (1, 2, 4, 8, 12, 24)]
    assert all(b > a for a, b in zip(ns, ns[1:]))


def test_component_rows_are_monotone():
    counts = []
    for row in COMPONENT_ROWS:
        cfg = small_model_config()
        cfg.components = row
        counts.append(param_report(cfg).trainable)
    assert counts[0] == 0
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_components_all_off_is_backbone_plus_head():
    cfg = small_model_config(components={"use_stem": False, "use_blocks": False,
                                         "use_aggregator": False, "use_adapting": False})
    m = CloudAdapterNet(cfg, 0)
    assert m.spm is None and m.adapter is None
    assert [n.split(".")[0] for n, _ in m.trainable_named()] == ["head"] * 4
    assert m.forward(batch(1)).shape == (1, 4, 16, 16)


def test_concat_fallback():
    cfg = small_model_config(components={"use_adapting": False})
    m = CloudAdapterNet(cfg, 0)
    full = CloudAdapterNet(small_model_config(), 0)
    assert m.count_params(include_head=False).trainable < full.count_params(include_head=False).trainable
    x = batch(1)
    logits = m.concat_fallback_forward(x)
    r = np.random.default_rng(0).standard_normal(logits.shape).astype(np.float32)
    (logits * T.Tensor(r)).sum().backward()
    assert all(p.grad is not None for _, p in m.spm.named_parameters())
    with pytest.raises(ConfigError):
        full.concat_fallback_forward(x)


def test_concat_identity_with_zero_spm_output():
    cfg = small_model_config(components={"use_adapting": False})
    m = CloudAdapterNet(cfg, 0)
    for blk in m.spm.blocks:
        blk.norm.weight.data[:] = 0
        blk.norm.bias.data[:] = 0  # gelu(0) = 0, so every summed SPM map is exactly zero
    cfg_off = small_model_config(components={"use_stem": False, "use_blocks": False,
                                             "use_aggregator": False, "use_adapting": False})
    base = CloudAdapterNet(cfg_off, 0)
    d = cfg.backbone.embed_dim
    # copy head weights with the SPM channel columns dropped
    base.head.proj.weight.data = m.head.proj.weight.data[:, :d].copy()
    base.head.proj.bias.data = m.head.proj.bias.data.copy()
    base.head.classifier.weight.data = m.head.classifier.weight.data.copy()
    base.head.classifier.bias.data = m.head.classifier.bias.data.copy()
    x = batch(1)
    assert np.allclose(m.forward(x).data, base.forward(x).data, atol=1e-6)


def test_invalid_component_wiring_rejected():
    with pytest.raises(ConfigError):
        small_model_config(components={"use_stem": False})
