from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftlab import adapters as A
from shiftlab.adapters import AdapterKind, DomainId
from shiftlab.backbone import (
    AttentionMode,
    Backbone,
    BackboneConfig,
    Selector,
    attention_mask,
    grid_to_views,
    views_to_grid,
)
from shiftlab.errors import ContractError, DimensionError, UnknownPromptError
from shiftlab.numerics import Tensor, finite_diff_check, mse_loss, precision

from .conftest import TINY, grid_batch, jitter

R, S = DomainId.REAL, DomainId.SYN


def shifted_model(cfg, seed=0, rank=4):
    model = jitter(Backbone(cfg, seed=seed), seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    A.attach(model, AdapterKind.SHIFTER, rng, rank=rank)
    for s in A.shifters(model):
        s.w_right.data[...] = rng.normal(0, 0.2, size=s.w_right.shape)
        s.e_syn.data[...] = rng.normal(0, 0.5, size=s.e_syn.shape)
        s.e_real.data[...] = rng.normal(0, 0.5, size=s.e_real.shape)
    return model


def test_config_invariants():
    with pytest.raises(ContractError):
        BackboneConfig(image_side=30)
    with pytest.raises(ContractError):
        BackboneConfig(d_model=130)
    with pytest.raises(ContractError):
        BackboneConfig(n_blocks=3)
    cfg = BackboneConfig()
    assert (cfg.grid_side, cfg.tokens_per_view, cfg.n_tokens) == (64, 64, 256)


def test_masks():
    assert attention_mask(AttentionMode.GRID_FULL, 3).all()
    m = attention_mask(AttentionMode.SINGLE_IMAGE, 2)
    expected = np.kron(np.eye(4, dtype=bool), np.ones((2, 2), dtype=bool))
    np.testing.assert_array_equal(m, expected)


def test_grid_view_roundtrip():
    x = np.arange(2 * 3 * 8 * 8, dtype=float).reshape(2, 3, 8, 8)
    v = grid_to_views(x)
    np.testing.assert_array_equal(v[:, 1], x[:, :, :4, 4:])
    np.testing.assert_array_equal(v[:, 2], x[:, :, 4:, :4])
    np.testing.assert_array_equal(views_to_grid(v), x)


def test_output_shape_and_determinism(tiny_cfg):
    model = jitter(Backbone(tiny_cfg))
    x, c = grid_batch(tiny_cfg, 3)
    a = model(x, [0, 1, 999], [0, 8, 2], c).data
    b = model(x, [0, 1, 999], [0, 8, 2], c).data
    assert a.shape == x.shape and a.dtype == np.float32
    np.testing.assert_array_equal(a, b)


def test_fresh_model_ignores_control(tiny_cfg):
    model = Backbone(tiny_cfg)
    model.final.out.weight.data[...] = np.random.default_rng(0).normal(size=model.final.out.weight.shape)
    x, c = grid_batch(tiny_cfg, 2)
    np.testing.assert_array_equal(model(x, 5, [0, 0], c).data, model(x, 5, [0, 0]).data)


def test_typed_errors(tiny_cfg):
    model = shifted_model(tiny_cfg)
    x, c = grid_batch(tiny_cfg, 2)
    with pytest.raises(UnknownPromptError):
        model(x, 5, [0, tiny_cfg.n_prompts + 1])
    with pytest.raises(ContractError):
        model(x, 5, [0, 0], plan=[R] * (tiny_cfg.n_blocks - 1))
    with pytest.raises(ContractError):
        model(x, tiny_cfg.T, [0, 0])
    with pytest.raises(DimensionError):
        model(x[:, :, :-4], 5, [0, 0])
    with pytest.raises(DimensionError):
        model(x, 5, [0])
    with pytest.raises(DimensionError):
        model(x, 5, [0, 0], c[:, :2])
    with pytest.raises(ContractError):
        Backbone(tiny_cfg)(x, 5, [0, 0], plan=[R] * tiny_cfg.n_blocks)


@pytest.mark.parametrize("mode", list(AttentionMode))
def test_attention_rows_sum_to_one(tiny_cfg, mode):
    model = shifted_model(tiny_cfg)
    x, c = grid_batch(tiny_cfg, 2)
    probe: list = []
    model(x, [3, 400], [1, 2], c, mode=mode, plan=[S] * tiny_cfg.n_blocks, attn_probe=probe)
    assert len(probe) == tiny_cfg.n_blocks
    mask = attention_mask(mode, tiny_cfg.tokens_per_view)
    for w in probe:
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
        assert np.all(w[..., ~mask] == 0.0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16), view=st.integers(0, 3), data=st.data())
def test_single_image_views_are_independent(seed, view, data):
    tiny_cfg = TINY
    model = shifted_model(tiny_cfg, seed=seed % 97)
    plan = data.draw(st.lists(st.sampled_from([R, S]), min_size=tiny_cfg.n_blocks,
                              max_size=tiny_cfg.n_blocks))
    x, c = grid_batch(tiny_cfg, 1, seed=seed)
    side = tiny_cfg.image_side
    r0, c0 = divmod(view, 2)
    rows, cols = slice(r0 * side, (r0 + 1) * side), slice(c0 * side, (c0 + 1) * side)
    x2, c2 = x.copy(), c.copy()
    rng = np.random.default_rng(seed)
    x2[:, :, rows, cols] += rng.normal(size=x2[:, :, rows, cols].shape).astype(np.float32)
    c2[:, :, rows, cols] = rng.uniform(size=c2[:, :, rows, cols].shape)
    kw = dict(mode=AttentionMode.SINGLE_IMAGE, plan=plan)
    a = grid_to_views(model(x, 321, [4], c, **kw).data)
    b = grid_to_views(model(x2, 321, [4], c2, **kw).data)
    others = [v for v in range(4) if v != view]
    np.testing.assert_array_equal(a[:, others], b[:, others])
    assert not np.array_equal(a[:, view], b[:, view])


def test_grid_mode_couples_views(tiny_cfg):
    model = shifted_model(tiny_cfg)
    x, c = grid_batch(tiny_cfg, 1)
    x2 = x.copy()
    x2[:, :, :tiny_cfg.image_side, :tiny_cfg.image_side] += 1.0
    a = grid_to_views(model(x, 100, [0], c).data)
    b = grid_to_views(model(x2, 100, [0], c).data)
    assert not np.array_equal(a[:, 3], b[:, 3])


def test_zeroed_shifters_make_plan_irrelevant(tiny_cfg):
    model = shifted_model(tiny_cfg)
    x, c = grid_batch(tiny_cfg, 2)
    n = tiny_cfg.n_blocks
    assert not np.array_equal(model(x, 50, [0, 1], c, plan=[R] * n).data,
                              model(x, 50, [0, 1], c, plan=[S] * n).data)
    A.zero_shifters(model)
    ref = model(x, 50, [0, 1], c).data
    for plan in ([R] * n, [S] * n, [S, R] * (n // 2)):
        np.testing.assert_array_equal(model(x, 50, [0, 1], c, plan=plan).data, ref)


def test_capture_is_non_intrusive(tiny_cfg):
    model = shifted_model(tiny_cfg)
    x, c = grid_batch(tiny_cfg, 2)
    plan = [S, S, R, R]
    seen = {}
    ref = model(x, 700, [0, 1], c, plan=plan).data
    out = model(x, 700, [0, 1], c, plan=plan, capture=lambda i, h: seen.setdefault(i, h.data.copy())).data
    np.testing.assert_array_equal(out, ref)
    assert sorted(seen) == list(range(tiny_cfg.n_blocks))
    assert seen[0].shape == (2, tiny_cfg.n_tokens, tiny_cfg.d_model)


def test_param_groups_partition(tiny_cfg):
    model = Backbone(tiny_cfg)
    A.attach(model, AdapterKind.SHIFTER, np.random.default_rng(0))
    A.attach(model, AdapterKind.LORA, np.random.default_rng(1))
    every = model.param_groups(Selector.all())
    sh = model.param_groups(Selector.shifters_only())
    core = model.param_groups(Selector.backbone_only())
    lora = model.param_groups(Selector.adapter_kind("lora"))
    assert set(sh) | set(core) | set(lora) == set(every)
    assert not (set(sh) & set(core)) and not (set(lora) & set(core)) and not (set(sh) & set(lora))
    assert len(every) == len({id(p) for p in every.values()})
    assert all(".adapters.shifter." in n for n in sh)
    for hi in range(tiny_cfg.n_blocks):
        sel = model.param_groups(Selector.blocks_in_range(0, hi))
        assert {int(n.split(".")[1]) for n in sel} == set(range(hi + 1))
        assert set(sel) <= set(core)
    with pytest.raises(ContractError):
        model.param_groups(Selector.adapter_kind("spatial"))
    with pytest.raises(ContractError):
        model.param_groups(Selector.blocks_in_range(3, 1))


def test_state_dict_roundtrip(tiny_cfg):
    a = shifted_model(tiny_cfg, seed=3)
    b = Backbone(tiny_cfg, seed=9)
    A.attach(b, AdapterKind.SHIFTER, np.random.default_rng(0), rank=4)
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    x, c = grid_batch(tiny_cfg, 1)
    np.testing.assert_array_equal(a(x, 9, [0], c, plan=[R] * 4).data, b(x, 9, [0], c, plan=[R] * 4).data)


def shallow_cfg():
    return BackboneConfig(image_side=4, patch_size=2, d_model=8, n_heads=2, n_blocks=2,
                          n_prompts=2, mlp_ratio=2, allow_shallow=True)


def _backbone_loss(model, x, c, eps, plan, mode):
    return lambda: mse_loss(model(x, [17, 640], [0, 2], c, mode=mode, plan=plan), eps)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-4), (np.float32, 1e-3)])
def test_two_block_backbone_grads_vs_fd(dtype, tol):
    cfg = shallow_cfg()
    with precision(dtype):
        model = shifted_model(cfg, seed=0, rank=2)
        A.attach(model, AdapterKind.LORA, np.random.default_rng(0), rank=2)
        jitter(model, seed=50, std=0.1)
        x, c = grid_batch(cfg, 2, seed=0)
        x, c = x.astype(dtype), c.astype(dtype)
        eps = Tensor(np.random.default_rng(0).normal(size=x.shape).astype(dtype))
        f = _backbone_loss(model, x, c, eps, [S, R], AttentionMode.SINGLE_IMAGE)
        assert finite_diff_check(f, model.parameters(), h=1e-5) < tol
