"""Domain Shifters and the baseline adapter mechanisms.

All adapters share one lifecycle: ``attach`` adds the module to a backbone
with a zero-output initialization, ``set_enabled`` toggles it, and
``detach`` removes it.  A disabled or detached adapter is skipped entirely
in the forward pass, so the unadapted computation is reproduced bit for bit.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Module, normal
from .numerics import Tensor, add, matmul, parameter, reshape


class DomainId(enum.Enum):
    REAL = "real"
    SYN = "syn"

    @classmethod
    def parse(cls, value: "DomainId | str") -> "DomainId":
        if isinstance(value, DomainId):
            return value
        return cls(str(value).lower())


class AdapterKind(str, enum.Enum):
    SHIFTER = "shifter"
    LORA = "lora"
    DOMAIN = "domain"  # LoRA-style domain adapter, trained then dropped at inference
    LINEAR = "linear"
    SPATIAL = "spatial"
    SWITCHER = "switcher"


class DomainShifter(Module):
    """Two domain embeddings mapped through a shared rank-``r`` product."""

    def __init__(self, rng: np.random.Generator, d: int, rank: int = 8, std: float = 0.02):
        if rank > d // 4:
            raise ContractError(f"shifter rank {rank} must satisfy r <= d/4 (d={d})")
        self.e_syn = parameter(normal(rng, d, std))
        self.e_real = parameter(normal(rng, d, std))
        self.w_left = parameter(normal(rng, (d, rank), std))
        self.w_right = parameter(np.zeros((rank, d)))
        self.enabled = True

    @property
    def width(self) -> int:
        return self.e_syn.shape[0]

    @property
    def rank(self) -> int:
        return self.w_left.shape[1]

    def embedding(self, domain: DomainId) -> Tensor:
        return self.e_syn if domain is DomainId.SYN else self.e_real

    def residual(self, domain: DomainId) -> Tensor:
        d = self.width
        e = reshape(self.embedding(domain), (d, 1))
        return reshape(matmul(self.w_left, matmul(self.w_right, e)), (d,))

    def matrix(self) -> np.ndarray:
        return self.w_left.data @ self.w_right.data


def shift(x: Tensor, shifter: DomainShifter, domain: DomainId | str) -> Tensor:
    """Add the shifter's domain residual to every token of ``x`` (..., n, d)."""
    if x.shape[-1] != shifter.width:
        raise DimensionError(f"token width {x.shape[-1]} != shifter width {shifter.width}")
    return add(x, shifter.residual(DomainId.parse(domain)))


def resolve_plan(base: DomainId | str, reassigned_prefix: int | None, n_blocks: int) -> list[DomainId]:
    """Per-block domains: blocks ``0..prefix`` forced to SYN, the rest ``base``."""
    base = DomainId.parse(base)
    if reassigned_prefix is None:
        return [base] * n_blocks
    if not 0 <= reassigned_prefix < n_blocks:
        raise ContractError(f"reassignment prefix {reassigned_prefix} outside [0, {n_blocks})")
    return [DomainId.SYN if b <= reassigned_prefix else base for b in range(n_blocks)]


class LowRank(Module):
    """x -> x @ down @ up, with ``up`` zero so the output path starts at 0."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, rank: int):
        self.down = parameter(normal(rng, (d_in, rank), 1.0 / np.sqrt(d_in)))
        self.up = parameter(np.zeros((rank, d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(matmul(x, self.down), self.up)


class LoRA(Module):
    """Low-rank deltas on the q, k, v and output projections of one attention layer."""

    def __init__(self, rng: np.random.Generator, d: int, rank: int):
        self.q = LowRank(rng, d, d, rank)
        self.k = LowRank(rng, d, d, rank)
        self.v = LowRank(rng, d, d, rank)
        self.o = LowRank(rng, d, d, rank)
        self.enabled = True


class TokenAdapter(Module):
    """Low-rank residual map on a block's token stream (linear / spatial adapters)."""

    def __init__(self, rng: np.random.Generator, d: int, rank: int):
        self.map = LowRank(rng, d, d, rank)
        self.enabled = True

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, self.map(x))


class DomainSwitcher(Module):
    """Learned domain vector concatenated to the conditioning embedding.

    Consumers of the conditioning vector see ``switch_dim`` extra inputs; the
    weights reading those inputs are zero-initialized and owned here.
    """

    def __init__(self, rng: np.random.Generator, switch_dim: int, d: int, n_blocks: int):
        self.e_syn = parameter(normal(rng, switch_dim, 1.0))
        self.e_real = parameter(normal(rng, switch_dim, 1.0))
        self.block_proj = [_Proj(switch_dim, 2 * d) for _ in range(n_blocks)]
        self.final_proj = _Proj(switch_dim, d)
        self.enabled = True

    @property
    def dim(self) -> int:
        return self.e_syn.shape[0]

    def vector(self, domain: DomainId) -> Tensor:
        return self.e_syn if domain is DomainId.SYN else self.e_real


class _Proj(Module):
    def __init__(self, d_in: int, d_out: int):
        self.weight = parameter(np.zeros((d_in, d_out)))


BLOCK_SLOTS = {
    AdapterKind.SHIFTER: "shifter",
    AdapterKind.LORA: "lora",
    AdapterKind.DOMAIN: "domain",
    AdapterKind.LINEAR: "linear",
    AdapterKind.SPATIAL: "spatial",
}


def attach(model, kind: AdapterKind | str, rng: np.random.Generator, rank: int = 8,
           switch_dim: int = 16):
    """Attach one adapter family to every block (or the model, for the switcher)."""
    kind = AdapterKind(kind)
    if is_attached(model, kind):
        raise ContractError(f"{kind.value} adapter already attached")
    d = model.config.d_model
    if kind is AdapterKind.SWITCHER:
        model.switcher = DomainSwitcher(rng, switch_dim, d, model.config.n_blocks)
        return model.switcher
    made = []
    for block in model.blocks:
        if kind is AdapterKind.SHIFTER:
            mod = DomainShifter(rng, d, rank)
        elif kind in (AdapterKind.LORA, AdapterKind.DOMAIN):
            mod = LoRA(rng, d, rank)
        else:
            mod = TokenAdapter(rng, d, rank)
        block.adapters[BLOCK_SLOTS[kind]] = mod
        made.append(mod)
    return made


def detach(model, kind: AdapterKind | str) -> None:
    kind = AdapterKind(kind)
    if not is_attached(model, kind):
        raise ContractError(f"{kind.value} adapter is not attached")
    if kind is AdapterKind.SWITCHER:
        model.switcher = None
        return
    for block in model.blocks:
        del block.adapters[BLOCK_SLOTS[kind]]


def is_attached(model, kind: AdapterKind | str) -> bool:
    kind = AdapterKind(kind)
    if kind is AdapterKind.SWITCHER:
        return model.switcher is not None
    return BLOCK_SLOTS[kind] in model.blocks[0].adapters


def set_enabled(model, kind: AdapterKind | str, enabled: bool) -> None:
    kind = AdapterKind(kind)
    if not is_attached(model, kind):
        raise ContractError(f"{kind.value} adapter is not attached")
    if kind is AdapterKind.SWITCHER:
        model.switcher.enabled = enabled
        return
    for block in model.blocks:
        block.adapters[BLOCK_SLOTS[kind]].enabled = enabled


def shifters(model) -> list[DomainShifter]:
    return [b.adapters["shifter"] for b in model.blocks if "shifter" in b.adapters]


def zero_shifters(model) -> None:
    for s in shifters(model):
        for p in (s.e_syn, s.e_real):
            p.data[...] = 0.0


def plan_is_valid(plan: Sequence[DomainId], n_blocks: int) -> None:
    if len(plan) != n_blocks:
        raise ContractError(f"domain plan has {len(plan)} entries, model has {n_blocks} blocks")
