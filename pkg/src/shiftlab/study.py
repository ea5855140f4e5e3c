"""End-to-end toy study: data, pretraining, both stages, baselines and evaluation.

Everything here is deterministic given the seeds it is handed.  Model
snapshots are passed around as state dicts so that one pretrained base can
seed many fine-tunes.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

from .adapters import AdapterKind, DomainId, is_attached, shifters
from .backbone import AttentionMode, Backbone, BackboneConfig
from .checkpoint import attach_from_state
from .datagen import Split, ToyDataset, load_dataset, make_split, to_unit
from .diffusion import SamplerConfig, ShiftSchedule, ShiftSearch, sample, tune_shift
from .eval import (
    FeatureEmbedder,
    MetricsReport,
    control_adherence,
    cross_view_consistency,
    domain_probe,
    frechet_distance,
    grid_views,
    kernel_distance,
)
from .training import (
    BaselineKind,
    BindingParams,
    TrainRecipe,
    TrainResult,
    attach_shifters,
    check_pretrain_ready,
    joint_recipe,
    pretrain_recipe,
    stage1_recipe,
    stage2_recipe,
    train,
    train_baseline,
)

SAMPLE_CHUNK = 16
PROBE_T = 500


@dataclasses.dataclass
class StudyData:
    real_train: ToyDataset
    syn_train: ToyDataset
    real_eval: ToyDataset
    syn_eval: ToyDataset

    @property
    def train(self) -> dict[DomainId, ToyDataset]:
        return {DomainId.REAL: self.real_train, DomainId.SYN: self.syn_train}


def datasets_from_split(split: Split, side: int, root=None) -> StudyData:
    def part(records, dom):
        return load_dataset([r for r in records if r.domain == dom.value], side, root)

    return StudyData(part(split.train, DomainId.REAL), part(split.train, DomainId.SYN),
                     part(split.eval, DomainId.REAL), part(split.eval, DomainId.SYN))


def build_data(side: int, n_train: int, n_eval: int, seed: int) -> StudyData:
    return datasets_from_split(make_split(n_train, n_eval, seed=seed), side)


def fresh_model(cfg: BackboneConfig, state: dict[str, np.ndarray] | None = None, seed: int = 0) -> Backbone:
    """A backbone initialized from ``seed``, overwritten by ``state`` when given."""
    model = Backbone(cfg, seed=seed)
    if state is not None:
        attach_from_state(model, state)
        model.load_state_dict(state, strict=True)
    return model


# -- sampling ------------------------------------------------------------------------

def sample_grids(model: Backbone, prompt_ids: np.ndarray, control: np.ndarray | None,
                 sampler: SamplerConfig, seed: int, base_domain: DomainId | None = DomainId.REAL) -> np.ndarray:
    """Chunked sampling, returned in [0, 1].  Chunk k uses seed ``[seed, k]``-derived noise."""
    switch = DomainId.REAL if model.switcher is not None and model.switcher.enabled else None
    out = []
    for k, lo in enumerate(range(0, len(prompt_ids), SAMPLE_CHUNK)):
        sl = slice(lo, lo + SAMPLE_CHUNK)
        ctl = None if control is None else control[sl]
        chunk_seed = int(np.random.default_rng([seed, k]).integers(2**31))
        x = sample(model, prompt_ids[sl], ctl, base_domain=base_domain, config=sampler,
                   seed=chunk_seed, switch_domain=switch)
        out.append(to_unit(x))
    return np.concatenate(out)


def base_sampler(sampler: SamplerConfig) -> SamplerConfig:
    """The base model was trained on single images, so its reference samples are too."""
    return dataclasses.replace(sampler, mode=AttentionMode.SINGLE_IMAGE, shift=ShiftSchedule.none())


# -- evaluation ------------------------------------------------------------------------

class Evaluator:
    """Holds the two realism references and scores sample sets against them.

    ``B`` is the base model's own unconditional output (prior preservation);
    ``I`` is held-out real data (real-world realism).
    """

    def __init__(self, data: StudyData, base: Backbone, sampler: SamplerConfig, seed: int = 0,
                 embed_seed: int = 0):
        self.data = data
        self.sampler = sampler
        self.seed = seed
        self.embedder = FeatureEmbedder(embed_seed)
        self.base_samples = sample_grids(base, data.real_eval.prompt_ids, None, base_sampler(sampler), seed)
        self.ref_B = self.features(self.base_samples)
        self.ref_I = self.features(to_unit(data.real_eval.images))

    def features(self, grids: np.ndarray) -> np.ndarray:
        return self.embedder(grid_views(grids))

    def generate(self, model: Backbone, shift: ShiftSchedule | None = None) -> np.ndarray:
        sampler = self.sampler if shift is None else dataclasses.replace(self.sampler, shift=shift)
        ev = self.data.syn_eval
        return sample_grids(model, ev.prompt_ids, ev.control, sampler, self.seed)

    def score(self, name: str, grids: np.ndarray, probe_acc: float | None = None) -> MetricsReport:
        f = self.features(grids)
        adh = control_adherence(grids, self.data.syn_eval.control)
        cons = cross_view_consistency(grids)
        return MetricsReport(
            checkpoint=name,
            fid_toy_B=frechet_distance(f, self.ref_B), kid_toy_B=kernel_distance(f, self.ref_B),
            fid_toy_I=frechet_distance(f, self.ref_I), kid_toy_I=kernel_distance(f, self.ref_I),
            psnr=cons["psnr"], ssim=cons["ssim"], iou=adh["iou"], probe_acc=probe_acc,
        )

    def probe(self, model: Backbone) -> float | None:
        if not shifters(model):
            return None
        ev = self.data.real_eval
        return domain_probe(model, ev.images, ev.prompt_ids, PROBE_T, seed=self.seed)

    def evaluate(self, name: str, model: Backbone, shift: ShiftSchedule | None = None):
        grids = self.generate(model, shift)
        return self.score(name, grids, self.probe(model)), grids


# -- pipeline stages ---------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class StudySettings:
    """Step budgets and optimizer settings shared by every run of a study.

    Fine-tuning runs share ``finetune_epochs``: an epoch is one pass over the
    data a recipe draws from, so a 50/50 REAL/SYN recipe takes twice the
    steps of a SYN-only one.  ``finetune_steps`` replaces that with one fixed
    step count for every fine-tune.
    """

    pretrain_steps: int = 1500
    stage1_steps: int = 300
    finetune_epochs: int = 10
    finetune_steps: int | None = None
    warmup_steps: int = 100
    lr: float = 5e-5
    pretrain_lr: float | None = None
    stage1_lr: float | None = None
    batch_size: int = 16
    rank: int = 8
    adapter_rank: int = 8
    binding: BindingParams = BindingParams()
    shift: ShiftSchedule = ShiftSchedule()

    def kw(self, steps: int, lr: float | None = None) -> dict:
        return {"steps": steps, "lr": self.lr if lr is None else lr, "batch_size": self.batch_size}

    def finetune_kw(self) -> dict:
        return {"steps": self.finetune_steps, "epochs": self.finetune_epochs, "lr": self.lr,
                "batch_size": self.batch_size}


def run_pretrain(cfg: BackboneConfig, data: StudyData, st: StudySettings, seed: int,
                 log_path=None) -> tuple[Backbone, TrainResult]:
    model = Backbone(cfg, seed=seed)
    check_pretrain_ready(model)
    res = train(model, pretrain_recipe(**st.kw(st.pretrain_steps, st.pretrain_lr)),
                {DomainId.REAL: data.real_train}, seed=seed, log_path=log_path)
    return model, res


def run_stage1(base_state, cfg, data: StudyData, st: StudySettings, seed: int, log_path=None):
    model = fresh_model(cfg, base_state)
    attach_shifters(model, rank=st.rank, seed=seed)
    res = train(model, stage1_recipe(**st.kw(st.stage1_steps, st.stage1_lr)), data.train, seed=seed + 1,
                log_path=log_path)
    return model, res


def run_stage2(stage1_state, cfg, data: StudyData, st: StudySettings, seed: int, layer_aware=True,
               reassign=True, real_data=True, name="stage2", log_path=None):
    model = fresh_model(cfg, stage1_state)
    recipe = stage2_recipe(st.binding, layer_aware=layer_aware, reassign=reassign, real_data=real_data,
                           warmup_steps=st.warmup_steps, name=name, **st.finetune_kw())
    res = train(model, recipe, data.train, seed=seed + 2, log_path=log_path)
    return model, res


def run_joint(base_state, cfg, data: StudyData, st: StudySettings, seed: int, log_path=None):
    model = fresh_model(cfg, base_state)
    attach_shifters(model, rank=st.rank, seed=seed)
    res = train(model, joint_recipe(warmup_steps=st.warmup_steps, **st.finetune_kw()),
                data.train, seed=seed + 2, log_path=log_path)
    return model, res


def run_baseline(base_state, cfg, data: StudyData, st: StudySettings, kind: BaselineKind | str,
                 seed: int, log_dir=None):
    model = fresh_model(cfg, base_state)
    res = train_baseline(model, kind, data.train, seed=seed + 2, rank=st.adapter_rank, log_dir=log_dir,
                         warmup_steps=st.warmup_steps, **st.finetune_kw())
    return model, res


def run_recipe(base_state, cfg, data: StudyData, recipe: TrainRecipe, seed: int, log_path=None):
    model = fresh_model(cfg, base_state)
    res = train(model, recipe, data.train, seed=seed, log_path=log_path)
    return model, res


# -- ablation ------------------------------------------------------------------------------

ABLATION_ROWS = (
    # label, training run, inference shifting
    ("joint", "joint", False),
    ("2stage_no_real", "no_real", False),
    ("2stage", "plain", False),
    ("2stage_sampling", "plain", True),
    ("2stage_reassign", "reassign", False),
    ("2stage_reassign_sampling", "reassign", True),
    ("2stage_la_reassign", "la_reassign", False),
    ("2stage_la_reassign_sampling", "la_reassign", True),
)


def ablation_models(base_state, stage1_state, cfg, data, st: StudySettings, seed: int) -> dict[str, Backbone]:
    runs = {
        "joint": lambda: run_joint(base_state, cfg, data, st, seed)[0],
        "no_real": lambda: run_stage2(stage1_state, cfg, data, st, seed, False, False, False, "no_real")[0],
        "plain": lambda: run_stage2(stage1_state, cfg, data, st, seed, False, False, True, "plain")[0],
        "reassign": lambda: run_stage2(stage1_state, cfg, data, st, seed, False, True, True, "reassign")[0],
        "la_reassign": lambda: run_stage2(stage1_state, cfg, data, st, seed, True, True, True, "la_reassign")[0],
    }
    return {k: f() for k, f in runs.items()}


def ablation_table(models: dict[str, Backbone], evaluator: Evaluator, st: StudySettings) -> list[MetricsReport]:
    rows = []
    for label, run, shifted in ABLATION_ROWS:
        shift = st.shift if shifted else ShiftSchedule.none()
        rows.append(evaluator.evaluate(label, models[run], shift)[0])
    return rows


# -- inference-shift tuning ------------------------------------------------------------------

def tune_inference_shift(model: Backbone, evaluator: Evaluator, max_realism_drop: float = 0.1,
                         n_val: int | None = None) -> ShiftSearch:
    """Grid search over (B_max, t_max) on the first ``n_val`` evaluation prompts."""
    ev = evaluator.data.syn_eval
    n = len(ev) if n_val is None else min(n_val, len(ev))
    ids, ctl = ev.prompt_ids[:n], ev.control[:n]

    def evaluate(sched: ShiftSchedule) -> tuple[float, float]:
        sampler = dataclasses.replace(evaluator.sampler, shift=sched)
        grids = sample_grids(model, ids, ctl, sampler, evaluator.seed)
        f = evaluator.features(grids)
        return kernel_distance(f, evaluator.ref_B), control_adherence(grids, ctl)["iou"]

    return tune_shift(evaluate, model.config.n_blocks, max_realism_drop)


def has_adapter(model: Backbone, kind: AdapterKind) -> bool:
    return is_attached(model, kind)


def run_all(cfg: BackboneConfig, data: StudyData, st: StudySettings, sampler: SamplerConfig, seed: int,
            progress: Callable[[str], None] | None = None) -> dict:
    """Pretrain, both stages, syn-only baseline and the ablation, all scored."""
    say = progress or (lambda _m: None)
    base, _ = run_pretrain(cfg, data, st, seed)
    base_state = base.state_dict()
    say("pretrained")
    evaluator = Evaluator(data, base, sampler, seed=seed)
    s1, _ = run_stage1(base_state, cfg, data, st, seed)
    s1_state = s1.state_dict()
    say("stage1")
    syn_only, _ = run_baseline(base_state, cfg, data, st, BaselineKind.SYN_ONLY_FULL, seed)
    say("syn_only")
    models = ablation_models(base_state, s1_state, cfg, data, st, seed)
    say("ablation models")
    return {"base": base, "stage1": s1, "syn_only": syn_only, "models": models, "evaluator": evaluator}


def summarize(reports: Sequence[MetricsReport]) -> dict[str, dict[str, float]]:
    return {r.checkpoint: {"fid_B": r.fid_toy_B, "fid_I": r.fid_toy_I, "iou": r.iou, "psnr": r.psnr}
            for r in reports}


def margin(worse: float, better: float) -> float:
    """Relative improvement of ``better`` over ``worse`` as a fraction of ``worse``."""
    return (worse - better) / worse if worse > 0 and math.isfinite(worse) else float("nan")
