"""Declarative training recipes and the single engine that runs them.

Every recipe optimizes the same objective, the diffusion MSE.  Recipes only
differ in which parameters move, how batches are mixed across domains, and
how each batch is presented to the model (attention mode, control map,
domain plan, per-step block freezing and reassignment).
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import os
from typing import Callable, Iterable, Mapping

import numpy as np

from .adapters import AdapterKind, DomainId, attach, detach, is_attached, resolve_plan, shifters
from .backbone import AttentionMode, Backbone, Selector, block_of, select
from .datagen import ToyDataset
from .diffusion import DEFAULT_SCHEDULE, NoiseSchedule, diffusion_loss
from .errors import ContractError, InvariantViolation, NonFiniteError
from .numerics import Tensor, backward

PROMPT_DROPOUT = 0.1


# -- recipe types ----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class BindingParams:
    """Representation Binding: LA-freezing range and reassignment probability."""

    tau_b: float = 0.4
    p_b: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.tau_b <= 1.0:
            raise ContractError(f"tau_b must lie in (0, 1], got {self.tau_b}")
        if not 0.0 <= self.p_b <= 1.0:
            raise ContractError(f"p_b must lie in [0, 1], got {self.p_b}")

    def max_index(self, n_blocks: int) -> int:
        """Largest drawable block index, floor(tau_b * n_blocks), kept below n_blocks."""
        return min(int(math.floor(round(self.tau_b * n_blocks, 9))), n_blocks - 1)


class PlanRule(str, enum.Enum):
    NONE = "none"  # no plan; shifters (if any) are bypassed
    OWN = "own"  # every block in the batch's own domain
    SYN = "syn"
    REAL = "real"


@dataclasses.dataclass(frozen=True)
class BatchPolicy:
    """How batches of one domain are fed to the model."""

    mode: AttentionMode = AttentionMode.SINGLE_IMAGE
    control: bool = False
    plan: PlanRule = PlanRule.NONE
    layer_aware: bool = False
    reassign: bool = False
    # half-open block range this domain may update; None means no restriction
    blocks: tuple[int, int] | None = None


@dataclasses.dataclass(frozen=True)
class TrainRecipe:
    name: str
    trainable: Selector
    mix: tuple[float, float]  # (REAL, SYN) batch fractions
    real: BatchPolicy | None = None
    syn: BatchPolicy | None = None
    binding: BindingParams | None = None
    warmup_steps: int = 0
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 16
    steps: int | None = None  # overrides epochs when set
    prompt_dropout: float = PROMPT_DROPOUT

    def __post_init__(self):
        if len(self.mix) != 2 or min(self.mix) < 0 or not math.isclose(sum(self.mix), 1.0, abs_tol=1e-9):
            raise ContractError(f"batch fractions must be non-negative and sum to 1, got {self.mix}")
        for frac, pol, dom in ((self.mix[0], self.real, DomainId.REAL), (self.mix[1], self.syn, DomainId.SYN)):
            if (frac > 0 or (dom is DomainId.REAL and self.warmup_steps > 0)) and pol is None:
                raise ContractError(f"recipe {self.name!r} draws {dom.value} batches but has no policy for them")
        if self.real is not None and self.real.control:
            raise ContractError("real-domain batches never carry a control map")
        for pol in (self.real, self.syn):
            if pol is not None and (pol.layer_aware or pol.reassign) and self.binding is None:
                raise ContractError("layer-aware training and reassignment need BindingParams")
        if self.batch_size < 1 or self.lr <= 0:
            raise ContractError("batch size and learning rate must be positive")

    def policy(self, domain: DomainId) -> BatchPolicy:
        pol = self.real if domain is DomainId.REAL else self.syn
        if pol is None:
            raise ContractError(f"recipe {self.name!r} has no {domain.value} policy")
        return pol

    def total_steps(self, n_examples: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * max(1, math.ceil(n_examples / self.batch_size))


# -- optimizer ---------------------------------------------------------------------

class Adam:
    """Adam with per-parameter state.  Parameters left out of a step keep their state."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = {n: 0 for n in self.params}

    def step(self, names: Iterable[str]) -> None:
        b1, b2 = self.betas
        for n in names:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            self.t[n] += 1
            k = self.t[n]
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            m_hat = self.m[n] / (1 - b1 ** k)
            v_hat = self.v[n] / (1 - b2 ** k)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


# -- engine ------------------------------------------------------------------------

def params_hash(params: Mapping[str, Tensor] | Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else arr
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclasses.dataclass
class StepInfo:
    step: int
    domain: DomainId
    loss: float
    la_i: int | None
    reassign_j: int | None
    updated: frozenset[str]
    frozen: frozenset[str]  # trainable parameters excluded from this step

    def record(self, recipe: str) -> dict:
        return {"step": self.step, "loss": self.loss, "recipe": recipe, "domain": self.domain.value,
                "la_i": self.la_i, "reassign_j": self.reassign_j}


@dataclasses.dataclass
class TrainResult:
    recipe: str
    steps: int
    losses: list[float]
    records: list[dict]


def _plan(rule: PlanRule, domain: DomainId, prefix: int | None, n_blocks: int):
    if rule is PlanRule.NONE:
        return None
    base = {PlanRule.OWN: domain, PlanRule.SYN: DomainId.SYN, PlanRule.REAL: DomainId.REAL}[rule]
    return resolve_plan(base, prefix, n_blocks)


def _in_blocks(name: str, rng_: tuple[int, int] | None) -> bool:
    if rng_ is None:
        return True
    b = block_of(name)
    return b is not None and rng_[0] <= b < rng_[1]


def train(
    model: Backbone,
    recipe: TrainRecipe,
    data: Mapping[DomainId, ToyDataset],
    seed: int = 0,
    log_path: str | os.PathLike | None = None,
    on_step: Callable[[StepInfo, Backbone], None] | None = None,
    schedule: NoiseSchedule = DEFAULT_SCHEDULE,
) -> TrainResult:
    """Run ``recipe`` on ``model`` in place.

    Per step the random draws happen in a fixed order from one generator:
    batch domain, batch indices, timesteps, noise, prompt dropout, the
    layer-aware index and the reassignment coin and index.  Parameters
    outside ``recipe.trainable`` are hashed before and after the run and
    any change raises :class:`InvariantViolation`.
    """
    cfg = model.config
    trainable = select(model, recipe.trainable)
    named = dict(model.named_parameters())
    frozen_names = {n: p for n, p in named.items() if n not in trainable}
    before = params_hash(frozen_names)
    for dom, frac in zip((DomainId.REAL, DomainId.SYN), recipe.mix):
        if (frac > 0 or (dom is DomainId.REAL and recipe.warmup_steps)) and dom not in data:
            raise ContractError(f"recipe {recipe.name!r} needs {dom.value} data")
    # an epoch is one pass over the domains this recipe actually draws
    n_examples = sum(len(data[d]) for d, frac in zip((DomainId.REAL, DomainId.SYN), recipe.mix) if frac > 0)
    total = recipe.total_steps(n_examples)
    opt = Adam(trainable, recipe.lr, recipe.betas, recipe.adam_eps)
    rng = np.random.default_rng(seed)
    null = cfg.null_prompt
    k_max = recipe.binding.max_index(cfg.n_blocks) if recipe.binding is not None else 0
    use_switch = model.switcher is not None and model.switcher.enabled
    losses, records = [], []
    log = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for step in range(total):
            if step < recipe.warmup_steps:
                dom = DomainId.REAL
            else:
                dom = DomainId.REAL if rng.random() < recipe.mix[0] else DomainId.SYN
            pol = recipe.policy(dom)
            ds = data[dom]
            idx = rng.choice(len(ds), size=min(recipe.batch_size, len(ds)), replace=False)
            batch = ds.take(np.sort(idx))
            if not pol.control:
                batch = batch.without_control()
            b = batch.images.shape[0]
            t = rng.integers(0, schedule.T, size=b)
            eps = rng.standard_normal(batch.images.shape).astype(batch.images.dtype)
            ids = batch.prompt_ids.copy()
            ids[rng.random(b) < recipe.prompt_dropout] = null
            la_i = int(rng.integers(0, k_max + 1)) if pol.layer_aware else None
            reassign_j = None
            if pol.reassign and rng.random() < recipe.binding.p_b:
                reassign_j = int(rng.integers(0, k_max + 1))

            step_set = {n for n in trainable if _in_blocks(n, pol.blocks)}
            if la_i is not None:
                step_set = {n for n in step_set if block_of(n) is None or block_of(n) > la_i}
            for n, p in named.items():
                p.requires_grad = n in step_set
                p.grad = None
            plan = _plan(pol.plan, dom, reassign_j, cfg.n_blocks)
            loss = diffusion_loss(model, batch.images, ids, batch.control, dom, plan, pol.mode,
                                  schedule=schedule, t=t, eps=eps,
                                  switch_domain=dom if use_switch else None)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"{recipe.name}: loss is {value} at step {step} ({dom.value} batch)")
            backward(loss, [named[n] for n in step_set])
            held = frozenset(n for n in trainable if n not in step_set)
            for n in held:
                named[n].grad = np.zeros_like(named[n].data)
            opt.step(sorted(step_set))
            info = StepInfo(step, dom, value, la_i, reassign_j, frozenset(step_set), held)
            if on_step is not None:
                on_step(info, model)
            rec = info.record(recipe.name)
            records.append(rec)
            losses.append(value)
            if log is not None:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        for p in named.values():
            p.requires_grad = True
            p.grad = None
        if log is not None:
            log.close()
    if params_hash(frozen_names) != before:
        raise InvariantViolation(f"{recipe.name}: parameters outside the trainable set changed")
    return TrainResult(recipe.name, total, losses, records)


# -- recipes -------------------------------------------------------------------------

SYN_GRID = BatchPolicy(AttentionMode.GRID_FULL, control=True, plan=PlanRule.NONE)
REAL_SINGLE = BatchPolicy(AttentionMode.SINGLE_IMAGE, control=False, plan=PlanRule.NONE)


def pretrain_recipe(**kw) -> TrainRecipe:
    """Realistic prior: REAL grids only, single-image attention, every parameter."""
    return TrainRecipe("pretrain", Selector.all(), (1.0, 0.0), real=REAL_SINGLE, **kw)


def stage1_recipe(**kw) -> TrainRecipe:
    """Shifters only, even REAL/SYN mix, no control, each batch in its own domain."""
    own = BatchPolicy(AttentionMode.SINGLE_IMAGE, control=False, plan=PlanRule.OWN)
    return TrainRecipe("stage1", Selector.shifters_only(), (0.5, 0.5), real=own, syn=own, **kw)


def stage2_recipe(binding: BindingParams = BindingParams(), layer_aware: bool = True,
                  reassign: bool = True, real_data: bool = True, warmup_steps: int = 100,
                  name: str = "stage2", **kw) -> TrainRecipe:
    """Backbone with shifters frozen; SYN grids with control, REAL single images."""
    syn = dataclasses.replace(SYN_GRID, plan=PlanRule.SYN)
    real = BatchPolicy(AttentionMode.SINGLE_IMAGE, plan=PlanRule.REAL,
                       layer_aware=layer_aware, reassign=reassign)
    mix = (0.5, 0.5) if real_data else (0.0, 1.0)
    return TrainRecipe(name, Selector.backbone_only(), mix, real=real if real_data else None, syn=syn,
                       binding=binding if (layer_aware or reassign) else None,
                       warmup_steps=warmup_steps if real_data else 0, **kw)


def joint_recipe(warmup_steps: int = 100, **kw) -> TrainRecipe:
    """Shifters and backbone optimized together in one stage."""
    syn = dataclasses.replace(SYN_GRID, plan=PlanRule.SYN)
    real = dataclasses.replace(REAL_SINGLE, plan=PlanRule.REAL)
    return TrainRecipe("joint", Selector.all(), (0.5, 0.5), real=real, syn=syn,
                       warmup_steps=warmup_steps, **kw)


def layer_split_recipe(n_blocks: int, **kw) -> TrainRecipe:
    """SYN batches update the first half of the blocks, REAL batches the second half."""
    half = n_blocks // 2
    syn = dataclasses.replace(SYN_GRID, blocks=(0, half))
    real = dataclasses.replace(REAL_SINGLE, blocks=(half, n_blocks))
    return TrainRecipe("layer_split", Selector.backbone_only(), (0.5, 0.5), real=real, syn=syn, **kw)


class BaselineKind(str, enum.Enum):
    SYN_ONLY_FULL = "syn_only_full"
    SYN_REAL_FULL = "syn_real_full"
    LORA = "lora"
    LINEAR_ADAPTER = "linear_adapter"
    DOMAIN_ADAPTER = "domain_adapter"
    SPATIAL_ADAPTER = "spatial_adapter"
    DOMAIN_SWITCHER_JOINT = "domain_switcher_joint"
    DOMAIN_SWITCHER_2STAGE = "domain_switcher_2stage"


_ADAPTER_OF = {
    BaselineKind.LORA: AdapterKind.LORA,
    BaselineKind.LINEAR_ADAPTER: AdapterKind.LINEAR,
    BaselineKind.SPATIAL_ADAPTER: AdapterKind.SPATIAL,
}


def baseline_recipes(kind: BaselineKind | str, warmup_steps: int = 100, **kw) -> list[TrainRecipe]:
    """The recipe sequence one baseline runs, in order."""
    kind = BaselineKind(kind)
    name = kind.value
    syn_only = (0.0, 1.0)
    if kind is BaselineKind.SYN_ONLY_FULL:
        return [TrainRecipe(name, Selector.all(), syn_only, syn=SYN_GRID, **kw)]
    if kind is BaselineKind.SYN_REAL_FULL:
        return [TrainRecipe(name, Selector.all(), (0.5, 0.5), real=REAL_SINGLE, syn=SYN_GRID,
                            warmup_steps=warmup_steps, **kw)]
    if kind in _ADAPTER_OF:
        # adapters alone cannot read the control map, so its input projection trains too
        sel = Selector.union(Selector.adapter_kind(_ADAPTER_OF[kind]), Selector.control_input())
        return [TrainRecipe(name, sel, syn_only, syn=SYN_GRID, **kw)]
    if kind is BaselineKind.DOMAIN_ADAPTER:
        # a LoRA absorbs the synthetic look first, then stays frozen while the
        # backbone learns control; it is removed before sampling
        fit = TrainRecipe(f"{name}_fit", Selector.adapter_kind(AdapterKind.DOMAIN), syn_only,
                          syn=dataclasses.replace(SYN_GRID, control=False, mode=AttentionMode.SINGLE_IMAGE), **kw)
        tune = TrainRecipe(name, Selector.backbone_only(), syn_only, syn=SYN_GRID, **kw)
        return [fit, tune]
    both = dict(real=REAL_SINGLE, syn=SYN_GRID, warmup_steps=warmup_steps)
    if kind is BaselineKind.DOMAIN_SWITCHER_JOINT:
        return [TrainRecipe(name, Selector.all(), (0.5, 0.5), **both, **kw)]
    # two-stage: the switcher learns the domains with the backbone frozen, then
    # the backbone trains with the switcher frozen
    sw_stage = TrainRecipe(f"{name}_switch", Selector.adapter_kind(AdapterKind.SWITCHER), (0.5, 0.5),
                           real=REAL_SINGLE, syn=dataclasses.replace(SYN_GRID, control=False,
                                                                    mode=AttentionMode.SINGLE_IMAGE), **kw)
    return [sw_stage, TrainRecipe(name, Selector.backbone_only(), (0.5, 0.5), **both, **kw)]


def prepare_baseline(model: Backbone, kind: BaselineKind | str, rank: int = 8, seed: int = 0) -> None:
    """Attach the adapter family a baseline trains."""
    kind = BaselineKind(kind)
    rng = np.random.default_rng([seed, 17])
    if kind in _ADAPTER_OF:
        attach(model, _ADAPTER_OF[kind], rng, rank=rank)
    elif kind is BaselineKind.DOMAIN_ADAPTER:
        attach(model, AdapterKind.DOMAIN, rng, rank=rank)
    elif kind in (BaselineKind.DOMAIN_SWITCHER_JOINT, BaselineKind.DOMAIN_SWITCHER_2STAGE):
        attach(model, AdapterKind.SWITCHER, rng)


def finish_baseline(model: Backbone, kind: BaselineKind | str) -> None:
    """Inference-time cleanup: the domain adapter is dropped after training."""
    if BaselineKind(kind) is BaselineKind.DOMAIN_ADAPTER and is_attached(model, AdapterKind.DOMAIN):
        detach(model, AdapterKind.DOMAIN)


def train_baseline(model: Backbone, kind: BaselineKind | str, data: Mapping[DomainId, ToyDataset],
                   seed: int = 0, rank: int = 8, log_dir: str | os.PathLike | None = None,
                   **kw) -> list[TrainResult]:
    kind = BaselineKind(kind)
    if shifters(model):
        raise ContractError("baselines start from a base model without Domain Shifters")
    prepare_baseline(model, kind, rank=rank, seed=seed)
    results = []
    for k, recipe in enumerate(baseline_recipes(kind, **kw)):
        log = None if log_dir is None else os.path.join(log_dir, f"{recipe.name}.jsonl")
        results.append(train(model, recipe, data, seed=seed + k, log_path=log))
    finish_baseline(model, kind)
    return results


def attach_shifters(model: Backbone, rank: int = 8, seed: int = 0) -> None:
    if is_attached(model, AdapterKind.SHIFTER):
        raise ContractError("shifters already attached")
    attach(model, AdapterKind.SHIFTER, np.random.default_rng([seed, 11]), rank=rank)


def check_pretrain_ready(model: Backbone) -> None:
    if any(block.adapters for block in model.blocks) or model.switcher is not None:
        raise ContractError("pretraining runs on a bare backbone with no adapters attached")
