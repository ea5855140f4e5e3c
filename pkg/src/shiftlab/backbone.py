"""Tiny diffusion transformer over a 2x2 grid of views.

Tokens are ordered view-major: all patches of view 0 (row-major), then
view 1, and so on, with views laid out as top-left, top-right, bottom-left,
bottom-right.  Every operation outside attention acts per token, which is
what makes single-image mode exactly view-independent.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from typing import Callable, Sequence

import numpy as np

from .adapters import AdapterKind, DomainId, DomainShifter, plan_is_valid, shift
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Module, normal
from .numerics import (
    Tensor,
    add,
    as_tensor,
    concat,
    embedding,
    gelu,
    matmul,
    parameter,
    patchify,
    reshape,
    scale,
    silu,
    slice_,
    softmax_lastdim,
    transpose,
    unpatchify,
)

VIEWS = 4
GRID = 2


@dataclasses.dataclass(frozen=True)
class BackboneConfig:
    image_side: int = 32
    patch_size: int = 4
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 12
    channels_image: int = 3
    channels_control: int = 3
    n_prompts: int = 8
    mlp_ratio: int = 4
    T: int = 1000
    # shallow models exist only for gradient verification
    allow_shallow: bool = False

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ContractError("image_side must be divisible by patch_size")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.n_blocks < (1 if self.allow_shallow else 4):
            raise ContractError(f"need at least 4 blocks, got {self.n_blocks}")

    @property
    def grid_side(self) -> int:
        return GRID * self.image_side

    @property
    def tokens_per_view(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return VIEWS * self.tokens_per_view

    @property
    def null_prompt(self) -> int:
        return self.n_prompts


class AttentionMode(enum.Enum):
    GRID_FULL = "grid_full"
    SINGLE_IMAGE = "single_image"


def attention_mask(mode: AttentionMode, tokens_per_view: int) -> np.ndarray:
    n = VIEWS * tokens_per_view
    if mode is AttentionMode.GRID_FULL:
        return np.ones((n, n), dtype=bool)
    view = np.repeat(np.arange(VIEWS), tokens_per_view)
    return view[:, None] == view[None, :]


def sincos_2d(d: int, side: int) -> np.ndarray:
    """Fixed 2D sin-cos table for a ``side x side`` token lattice, row-major."""
    quarter = d // 4
    omega = 1.0 / (10000 ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * omega[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    table = np.concatenate(parts, axis=1)
    if table.shape[1] < d:
        table = np.pad(table, ((0, 0), (0, d - table.shape[1])))
    return table


def timestep_features(t: np.ndarray, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


def grid_to_views(x: np.ndarray) -> np.ndarray:
    """(B, C, 2S, 2S) -> (B, 4, C, S, S)."""
    b, c, h, w = x.shape
    s = h // GRID
    return x.reshape(b, c, GRID, s, GRID, s).transpose(0, 2, 4, 1, 3, 5).reshape(b, VIEWS, c, s, s)


def views_to_grid(v: np.ndarray) -> np.ndarray:
    b, _, c, s, _ = v.shape
    return v.reshape(b, GRID, GRID, c, s, s).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, GRID * s, GRID * s)


class Attention(Module):
    def __init__(self, rng, d: int, n_heads: int):
        self.wq = Linear(rng, d, d, bias=False)
        self.wk = Linear(rng, d, d, bias=False)
        self.wv = Linear(rng, d, d, bias=False)
        self.wo = Linear(rng, d, d)
        self._heads = n_heads

    def __call__(self, x: Tensor, mask: np.ndarray | None, loras: Sequence, probe: list | None) -> Tensor:
        b, n, d = x.shape
        h = self._heads
        dh = d // h
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        for lora in loras:
            q, k, v = add(q, lora.q(x)), add(k, lora.k(x)), add(v, lora.v(x))
        q = transpose(reshape(q, (b, n, h, dh)), (0, 2, 1, 3))
        kt = transpose(reshape(k, (b, n, h, dh)), (0, 2, 3, 1))
        v = transpose(reshape(v, (b, n, h, dh)), (0, 2, 1, 3))
        weights = softmax_lastdim(scale(matmul(q, kt), 1.0 / math.sqrt(dh)), mask=mask)
        if probe is not None:
            probe.append(weights.data)
        out = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
        y = self.wo(out)
        for lora in loras:
            y = add(y, lora.o(out))
        return y


class DiTBlock(Module):
    def __init__(self, rng, cfg: BackboneConfig):
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.attn = Attention(rng, d, cfg.n_heads)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(rng, d, cfg.mlp_ratio * d)
        self.fc2 = Linear(rng, cfg.mlp_ratio * d, d)
        # conditioning -> (attention bias, mlp bias)
        self.cond = Linear(rng, d, 2 * d, zero=True)
        self.adapters: dict[str, Module] = {}

    def _active(self, slot: str):
        mod = self.adapters.get(slot)
        return mod if mod is not None and mod.enabled else None

    def __call__(self, h: Tensor, cond_bias: Tensor, mask, domain: DomainId | None,
                 probe: list | None) -> Tensor:
        d = h.shape[-1]
        shifter = self._active("shifter")
        if domain is not None and shifter is not None:
            h = shift(h, shifter, domain)
        lin = self._active("linear")
        if lin is not None:
            h = lin(h)
        b = cond_bias.shape[0]
        bias = reshape(cond_bias, (b, 1, 2 * d))
        loras = [m for m in (self._active("lora"), self._active("domain")) if m is not None]
        a = add(self.ln1(h), slice_(bias, (slice(None), slice(None), slice(0, d))))
        h = add(h, self.attn(a, mask, loras, probe))
        m = add(self.ln2(h), slice_(bias, (slice(None), slice(None), slice(d, 2 * d))))
        h = add(h, self.fc2(gelu(self.fc1(m))))
        spatial = self._active("spatial")
        if spatial is not None:
            h = spatial(h)
        return h


class _TimeEmbed(Module):
    def __init__(self, rng, d: int):
        self.fc1 = Linear(rng, d, d)
        self.fc2 = Linear(rng, d, d)
        self._d = d

    def __call__(self, t: np.ndarray, dtype) -> Tensor:
        feats = Tensor(timestep_features(t, self._d).astype(dtype))
        return self.fc2(silu(self.fc1(feats)))


class _FinalLayer(Module):
    def __init__(self, rng, cfg: BackboneConfig):
        d = cfg.d_model
        self.ln = LayerNorm(d)
        self.cond = Linear(rng, d, d, zero=True)
        self.out = Linear(rng, d, cfg.channels_image * cfg.patch_size ** 2, zero=True)


class Backbone(Module):
    """epsilon-predictor with Domain Shifter insertion points on every block."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        d, p = cfg.d_model, cfg.patch_size
        self.patch_embed = Linear(rng, cfg.channels_image * p * p, d)
        # the control half of the concatenated patch vector gets its own
        # zero-initialized map, so a fresh model ignores control maps
        self.control_embed = Linear(rng, cfg.channels_control * p * p, d, bias=False, zero=True)
        self.t_embed = _TimeEmbed(rng, d)
        self.prompt_table = parameter(normal(rng, (cfg.n_prompts + 1, d), 0.02))
        self.blocks = [DiTBlock(rng, cfg) for _ in range(cfg.n_blocks)]
        self.final = _FinalLayer(rng, cfg)
        self.switcher = None
        side = cfg.image_side // p
        per_view = sincos_2d(d, GRID * side).reshape(GRID, side, GRID, side, d)
        self._pos = per_view.transpose(0, 2, 1, 3, 4).reshape(cfg.n_tokens, d)

    # -- conditioning ----------------------------------------------------
    def conditioning(self, t, prompt_ids, switch_domain: DomainId | None = None) -> Tensor:
        """Timestep + prompt embedding, with the switcher vector appended when active."""
        t = np.atleast_1d(np.asarray(t))
        ids = np.atleast_1d(np.asarray(prompt_ids))
        dtype = self.patch_embed.weight.dtype
        c = add(self.t_embed(t, dtype), embedding(self.prompt_table, ids))
        sw = self.switcher
        if sw is not None and sw.enabled:
            if switch_domain is None:
                raise ContractError("domain switcher is active; pass switch_domain")
            vec = reshape(sw.vector(DomainId.parse(switch_domain)), (1, sw.dim))
            ones = Tensor(np.ones((c.shape[0], 1), dtype=dtype))
            c = concat([c, matmul(ones, vec)], axis=1)
        return c

    def _cond_bias(self, cond_act: Tensor, layer: Linear, extra) -> Tensor:
        d = self.config.d_model
        base = slice_(cond_act, (slice(None), slice(0, d))) if cond_act.shape[1] > d else cond_act
        out = layer(base)
        if extra is not None:
            out = add(out, matmul(slice_(cond_act, (slice(None), slice(d, None))), extra.weight))
        return out

    # -- forward ---------------------------------------------------------
    def forward(
        self,
        x_t,
        t,
        prompt_ids,
        control=None,
        mode: AttentionMode = AttentionMode.GRID_FULL,
        plan: Sequence[DomainId] | None = None,
        switch_domain: DomainId | None = None,
        capture: Callable[[int, Tensor], None] | None = None,
        attn_probe: list | None = None,
    ) -> Tensor:
        cfg = self.config
        x_t = as_tensor(x_t)
        b = x_t.shape[0]
        side = cfg.grid_side
        if x_t.shape != (b, cfg.channels_image, side, side):
            raise DimensionError(f"x_t shape {x_t.shape} != (B, {cfg.channels_image}, {side}, {side})")
        ids = np.atleast_1d(np.asarray(prompt_ids))
        if ids.shape != (b,):
            raise DimensionError(f"prompt ids shape {ids.shape} != ({b},)")
        t = np.broadcast_to(np.asarray(t), (b,))
        if np.any(t < 0) or np.any(t >= cfg.T):
            raise ContractError(f"timesteps must lie in [0, {cfg.T})")
        if plan is not None:
            plan_is_valid(plan, cfg.n_blocks)
            plan = [DomainId.parse(p) for p in plan]
            if not any(isinstance(blk.adapters.get("shifter"), DomainShifter) for blk in self.blocks):
                raise ContractError("a domain plan needs attached Domain Shifters")
        if control is None:
            control = np.zeros((b, cfg.channels_control, side, side), dtype=x_t.dtype)
        control = np.asarray(control.data if isinstance(control, Tensor) else control, dtype=x_t.dtype)
        if control.shape != (b, cfg.channels_control, side, side):
            raise DimensionError(f"control shape {control.shape} mismatches the grid")

        tokens = self.tokenize(x_t, Tensor(control))
        split = cfg.channels_image * cfg.patch_size ** 2
        h = add(self.patch_embed(slice_(tokens, (Ellipsis, slice(0, split)))),
                self.control_embed(slice_(tokens, (Ellipsis, slice(split, None)))))
        h = add(h, Tensor(self._pos.astype(x_t.dtype)))
        cond_act = silu(self.conditioning(t, ids, switch_domain))
        sw = self.switcher if (self.switcher is not None and self.switcher.enabled) else None
        mask = attention_mask(mode, cfg.tokens_per_view)
        mask = None if mode is AttentionMode.GRID_FULL else mask
        for i, block in enumerate(self.blocks):
            if capture is not None:
                capture(i, h)
            extra = sw.block_proj[i] if sw is not None else None
            cond_bias = self._cond_bias(cond_act, block.cond, extra)
            h = block(h, cond_bias, mask, plan[i] if plan is not None else None, attn_probe)
        fin = self.final
        fb = self._cond_bias(cond_act, fin.cond, sw.final_proj if sw is not None else None)
        h = add(fin.ln(h), reshape(fb, (b, 1, cfg.d_model)))
        return self.detokenize(fin.out(h))

    __call__ = forward

    def tokenize(self, x_t: Tensor, control: Tensor) -> Tensor:
        cfg = self.config
        b = x_t.shape[0]
        s, c = cfg.image_side, cfg.channels_image + cfg.channels_control
        x = concat([x_t, control], axis=1)
        v = reshape(x, (b, c, GRID, s, GRID, s))
        v = reshape(transpose(v, (0, 2, 4, 1, 3, 5)), (b * VIEWS, c, s, s))
        return reshape(patchify(v, cfg.patch_size), (b, cfg.n_tokens, c * cfg.patch_size ** 2))

    def detokenize(self, tokens: Tensor) -> Tensor:
        cfg = self.config
        b = tokens.shape[0]
        s, c, p = cfg.image_side, cfg.channels_image, cfg.patch_size
        per_view = reshape(tokens, (b * VIEWS, cfg.tokens_per_view, c * p * p))
        img = reshape(unpatchify(per_view, p, c, s, s), (b, GRID, GRID, c, s, s))
        return reshape(transpose(img, (0, 3, 1, 4, 2, 5)), (b, c, GRID * s, GRID * s))

    # -- parameter bookkeeping --------------------------------------------
    def param_groups(self, selector: "Selector") -> dict[str, Tensor]:
        return select(self, selector)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns names that were loaded."""
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        loaded = []
        for name, arr in state.items():
            if name in own:
                if own[name].shape != tuple(arr.shape):
                    raise DimensionError(f"{name}: shape {arr.shape} != {own[name].shape}")
                own[name].data = np.array(arr, dtype=own[name].dtype, copy=True)
                loaded.append(name)
        return loaded

    def astype(self, dtype) -> "Backbone":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


# -- parameter selectors -------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Selector:
    kind: str
    lo: int | None = None
    hi: int | None = None
    adapter: str | None = None
    parts: tuple["Selector", ...] = ()

    @staticmethod
    def all() -> "Selector":
        return Selector("all")

    @staticmethod
    def shifters_only() -> "Selector":
        return Selector("shifters")

    @staticmethod
    def backbone_only() -> "Selector":
        return Selector("backbone")

    @staticmethod
    def blocks_in_range(lo: int, hi: int) -> "Selector":
        return Selector("blocks", lo=lo, hi=hi)

    @staticmethod
    def adapter_kind(kind: AdapterKind | str) -> "Selector":
        return Selector("adapter", adapter=AdapterKind(kind).value)

    @staticmethod
    def control_input() -> "Selector":
        return Selector("control")

    @staticmethod
    def union(*parts: "Selector") -> "Selector":
        return Selector("union", parts=tuple(parts))


def adapter_of(name: str) -> str | None:
    """Adapter slot a parameter belongs to, or None for core backbone weights."""
    parts = name.split(".")
    if parts[0] == "switcher":
        return "switcher"
    if parts[0] == "blocks" and len(parts) > 3 and parts[2] == "adapters":
        return parts[3]
    return None


def block_of(name: str) -> int | None:
    parts = name.split(".")
    return int(parts[1]) if parts[0] == "blocks" else None


def select(model: Backbone, selector: Selector) -> dict[str, Tensor]:
    named = list(model.named_parameters())
    if selector.kind == "all":
        out = dict(named)
    elif selector.kind == "shifters":
        out = {n: p for n, p in named if adapter_of(n) == "shifter"}
    elif selector.kind == "backbone":
        out = {n: p for n, p in named if adapter_of(n) is None}
    elif selector.kind == "blocks":
        lo, hi = selector.lo, selector.hi
        if lo is None or hi is None or lo > hi:
            raise ContractError(f"bad block range ({lo}, {hi})")
        out = {n: p for n, p in named
               if adapter_of(n) is None and block_of(n) is not None and lo <= block_of(n) <= hi}
    elif selector.kind == "adapter":
        out = {n: p for n, p in named if adapter_of(n) == selector.adapter}
    elif selector.kind == "control":
        out = {n: p for n, p in named if n.startswith("control_embed.")}
    elif selector.kind == "union":
        out = {}
        for part in selector.parts:
            out.update(select(model, part))
        out = {n: p for n, p in named if n in out}
    else:
        raise ContractError(f"unknown selector {selector.kind}")
    if not out:
        raise ContractError(f"selector {selector} matched no parameters")
    return out
