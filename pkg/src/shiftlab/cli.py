"""Command-line entry points for the toy study.

Every subcommand reads the same INI config, writes its artifacts under the
output directory and echoes the effective config there.  Failures print one
JSON line on stderr and exit with a code that identifies the failure class.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import DomainId, shifters
from .backbone import AttentionMode, Backbone, BackboneConfig
from .checkpoint import load_model, save_model
from .config import StudyConfig, load_config, write_echo
from .datagen import Split, from_uint8, make_split, read_manifest, read_ppm, to_uint8, to_unit, write_dataset, write_ppm
from .diffusion import SamplerConfig, ShiftSchedule, sdedit
from .errors import (
    CheckpointError,
    ChecksumError,
    ConfigError,
    ContractError,
    DimensionError,
    InvariantViolation,
    NonFiniteError,
)
from .eval import FeatureEmbedder, MetricsReport, domain_probe, write_csv
from .probe import capture, default_blocks, write_feature_maps
from .study import (
    ABLATION_ROWS,
    Evaluator,
    StudyData,
    StudySettings,
    ablation_models,
    base_sampler,
    datasets_from_split,
    run_baseline,
    run_pretrain,
    run_stage1,
    run_stage2,
    sample_grids,
    tune_inference_shift,
)
from .training import BaselineKind, BindingParams

SUBCOMMANDS = ("gen-data", "pretrain", "stage1", "stage2", "train-baseline", "sample", "eval", "probe",
               "ablate", "tune-shift")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKSUM = 4
EXIT_CONTRACT = 5
EXIT_NONFINITE = 6

_EXIT_CODES = (  # most specific first
    (ChecksumError, EXIT_CHECKSUM),
    (CheckpointError, EXIT_MISSING),
    (ConfigError, EXIT_CONFIG),
    (NonFiniteError, EXIT_NONFINITE),
    ((ContractError, InvariantViolation, DimensionError), EXIT_CONTRACT),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -- shared plumbing -----------------------------------------------------------------------

@dataclasses.dataclass
class Context:
    cfg: StudyConfig
    out: Path

    @property
    def seed(self) -> int:
        return self.cfg.study.seed

    @property
    def backbone(self) -> BackboneConfig:
        b = self.cfg.backbone
        return BackboneConfig(image_side=self.cfg.data.image_side, patch_size=b.patch_size, d_model=b.d_model,
                              n_heads=b.n_heads, n_blocks=b.n_blocks, n_prompts=b.n_prompts, mlp_ratio=b.mlp_ratio)

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def ckpt(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.rz3d")

    def settings(self) -> StudySettings:
        t, n = self.cfg.training, self.cfg.data

        def budget(steps: int, n_examples: int) -> int:
            return steps if steps > 0 else t.epochs * max(1, math.ceil(n_examples / t.batch_size))

        nb = self.cfg.backbone.n_blocks
        s = self.cfg.sampler
        return StudySettings(
            pretrain_steps=budget(t.pretrain_steps, n.n_train),
            stage1_steps=budget(t.stage1_steps, 2 * n.n_train),
            finetune_epochs=t.epochs, finetune_steps=t.finetune_steps if t.finetune_steps > 0 else None,
            warmup_steps=t.warmup_steps, lr=t.lr, pretrain_lr=t.pretrain_lr, stage1_lr=t.stage1_lr,
            batch_size=t.batch_size,
            rank=self.cfg.adapters.shifter_rank, adapter_rank=self.cfg.adapters.adapter_rank,
            binding=BindingParams(self.cfg.binding.tau_b, self.cfg.binding.p_b),
            shift=ShiftSchedule.from_fraction(s.b_max, s.t_max, nb),
        )

    def sampler(self) -> SamplerConfig:
        s = self.cfg.sampler
        return SamplerConfig(steps=s.steps, cfg_scale=s.cfg_scale, clip=s.clip)

    def data(self) -> StudyData:
        manifest = self.out / "data" / "manifest.jsonl"
        if not manifest.exists():
            gen_data(self)
        return datasets_from_split(_split_from(read_manifest(manifest)), self.cfg.data.image_side,
                                   self.out / "data")

    def load(self, name: str) -> Backbone:
        return load_model(self.ckpt(name), self.backbone)


def _split_from(records) -> Split:
    return Split([r for r in records if r.split == "train"], [r for r in records if r.split == "eval"])


def _write_grids(directory: Path, grids: np.ndarray) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(grids):
        write_ppm(directory / f"grid_{i:04d}.ppm", to_uint8(g))


def _read_grids(directory: Path) -> np.ndarray | None:
    files = sorted(directory.glob("grid_*.ppm"))
    if not files:
        return None
    return np.stack([from_uint8(read_ppm(f)) for f in files]).astype(np.float64)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# -- subcommands ------------------------------------------------------------------------------

def gen_data(ctx: Context, args=None) -> None:
    d = ctx.cfg.data
    split = make_split(d.n_train, d.n_eval, seed=ctx.seed)
    write_dataset(ctx.out / "data", split.train + split.eval, d.image_side)


def pretrain(ctx: Context, args=None) -> None:
    data = ctx.data()
    model, _ = run_pretrain(ctx.backbone, data, ctx.settings(), ctx.seed, log_path=ctx.path("logs", "pretrain.jsonl"))
    save_model(ctx.ckpt("base"), model)


def stage1(ctx: Context, args=None) -> None:
    data = ctx.data()
    base = ctx.load("base")
    model, _ = run_stage1(base.state_dict(), ctx.backbone, data, ctx.settings(), ctx.seed,
                          log_path=ctx.path("logs", "stage1.jsonl"))
    save_model(ctx.ckpt("stage1"), model)


def stage2(ctx: Context, args=None) -> None:
    data = ctx.data()
    s1 = ctx.load("stage1")
    model, _ = run_stage2(s1.state_dict(), ctx.backbone, data, ctx.settings(), ctx.seed,
                          log_path=ctx.path("logs", "stage2.jsonl"))
    save_model(ctx.ckpt("stage2"), model)


def train_baseline_cmd(ctx: Context, args) -> None:
    data = ctx.data()
    base = ctx.load("base")
    kind = BaselineKind(args.kind)
    model, _ = run_baseline(base.state_dict(), ctx.backbone, data, ctx.settings(), kind, ctx.seed,
                            log_dir=ctx.path("logs", kind.value, "x").parent)
    save_model(ctx.ckpt(f"baseline_{kind.value}"), model)


def _shift_for(ctx: Context, model: Backbone, shifted: bool) -> ShiftSchedule:
    return ctx.settings().shift if shifted and shifters(model) else ShiftSchedule.none()


def _base_samples(ctx: Context, data: StudyData) -> np.ndarray:
    directory = ctx.out / "samples" / "base"
    grids = _read_grids(directory)
    if grids is None:
        base = ctx.load("base")
        grids = sample_grids(base, data.real_eval.prompt_ids, None, base_sampler(ctx.sampler()), ctx.seed)
        _write_grids(directory, grids)
        grids = _read_grids(directory)
    return grids


def sample_cmd(ctx: Context, args) -> None:
    data = ctx.data()
    name = args.checkpoint
    model = ctx.load(name)
    sampler = dataclasses.replace(ctx.sampler(), shift=_shift_for(ctx, model, not args.no_shift))
    ev = data.syn_eval
    grids = sample_grids(model, ev.prompt_ids, ev.control, sampler, ctx.seed)
    if args.sdedit:
        base = ctx.load("base")
        s = ctx.cfg.sampler
        x = sdedit(grids * 2.0 - 1.0, base, ev.prompt_ids, seed=ctx.seed, t_inject=s.sdedit_t,
                   steps=s.steps, cfg_scale=s.cfg_scale, clip=s.clip)
        grids = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
        name = f"{name}_sdedit"
    _write_grids(ctx.out / "samples" / name, grids)


class _FixedEvaluator(Evaluator):
    """Evaluator whose base-reference samples come from disk."""

    def __init__(self, data: StudyData, base_grids: np.ndarray, sampler: SamplerConfig, seed: int, embed_seed: int):
        self.data, self.sampler, self.seed = data, sampler, seed
        self.embedder = FeatureEmbedder(embed_seed)
        self.base_samples = base_grids
        self.ref_B = self.features(base_grids)
        self.ref_I = self.features(to_unit(data.real_eval.images))


def _evaluator(ctx: Context, data: StudyData) -> Evaluator:
    return _FixedEvaluator(data, _base_samples(ctx, data), ctx.sampler(), ctx.seed, ctx.cfg.eval.embed_seed)


def eval_cmd(ctx: Context, args) -> None:
    data = ctx.data()
    evaluator = _evaluator(ctx, data)
    reports = []
    for name in args.checkpoint:
        model = ctx.load(name.removesuffix("_sdedit"))
        grids = _read_grids(ctx.out / "samples" / name)
        if grids is None:
            raise CheckpointError(f"no samples for {name}; run `sample --checkpoint {name}` first")
        probe = None
        if shifters(model):
            ev = data.real_eval
            probe = domain_probe(model, ev.images, ev.prompt_ids, ctx.cfg.eval.probe_t, seed=ctx.seed)
        rep = evaluator.score(name, grids, probe)
        _write_json(ctx.path("metrics", f"{name}.json"), json.loads(rep.to_json()))
        reports.append(rep)
    write_csv(ctx.path("metrics", "metrics.csv"), _merge_rows(ctx.out / "metrics", reports))


def _merge_rows(directory: Path, fresh: Sequence[MetricsReport]) -> list[MetricsReport]:
    """All per-checkpoint JSON reports in the metrics directory, sorted by name."""
    rows = {r.checkpoint: r for r in fresh}
    for f in sorted(directory.glob("*.json")):
        obj = json.loads(f.read_text(encoding="utf-8"))
        if "checkpoint" in obj and obj["checkpoint"] not in rows:
            rows[obj["checkpoint"]] = MetricsReport(**obj)
    return [rows[k] for k in sorted(rows)]


def probe_cmd(ctx: Context, args) -> None:
    data = ctx.data()
    model = ctx.load(args.checkpoint)
    n = ctx.cfg.probe.n_samples
    ev = data.syn_eval
    nb = ctx.backbone.n_blocks
    taps = [(t, b) for t in ctx.cfg.probe.timesteps for b in default_blocks(nb)]
    plan = [DomainId.REAL] * nb if shifters(model) else None
    cap = capture(model, ev.images[:n], ev.prompt_ids[:n], taps, control=ev.control[:n],
                  mode=AttentionMode.GRID_FULL, plan=plan, seed=ctx.seed)
    out = ctx.out / "probe" / args.checkpoint
    for i in range(n):
        write_feature_maps(cap, out / f"sample_{i:02d}", sample_index=i)
    if shifters(model):
        acc = domain_probe(model, data.real_eval.images, data.real_eval.prompt_ids, ctx.cfg.eval.probe_t,
                           seed=ctx.seed)
        _write_json(ctx.path("probe", args.checkpoint, "domain_probe.json"), {"accuracy": acc})


def ablate(ctx: Context, args=None) -> None:
    data = ctx.data()
    st = ctx.settings()
    base, s1 = ctx.load("base"), ctx.load("stage1")
    models = ablation_models(base.state_dict(), s1.state_dict(), ctx.backbone, data, st, ctx.seed)
    for key, m in models.items():
        save_model(ctx.ckpt(f"ablation_{key}"), m)
    evaluator = _evaluator(ctx, data)
    reports = []
    for label, run, shifted in ABLATION_ROWS:
        model = models[run]
        grids = evaluator.generate(model, st.shift if shifted else ShiftSchedule.none())
        _write_grids(ctx.out / "samples" / f"ablation_{label}", grids)
        reports.append(evaluator.score(label, grids, evaluator.probe(model)))
    write_csv(ctx.path("ablation.csv"), reports)


def tune_shift_cmd(ctx: Context, args) -> None:
    data = ctx.data()
    model = ctx.load(args.checkpoint)
    if not shifters(model):
        raise ContractError("tune-shift needs a checkpoint with Domain Shifters")
    evaluator = _evaluator(ctx, data)
    res = tune_inference_shift(model, evaluator, ctx.cfg.eval.max_realism_drop, n_val=ctx.cfg.data.n_val)
    trials = [{k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in t.items()} for t in res.trials]
    _write_json(ctx.path("tune_shift.json"), {"b_max": res.b_fraction, "t_max": res.t_max,
                                             "b_cutoff": res.schedule.b_max, "trials": trials})


# -- entry point -------------------------------------------------------------------------------

HANDLERS = {
    "gen-data": gen_data,
    "pretrain": pretrain,
    "stage1": stage1,
    "stage2": stage2,
    "train-baseline": train_baseline_cmd,
    "sample": sample_cmd,
    "eval": eval_cmd,
    "probe": probe_cmd,
    "ablate": ablate,
    "tune-shift": tune_shift_cmd,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI study config")
    common.add_argument("--seed", type=int, help="global seed (overrides study.seed)")
    common.add_argument("--out", help="output directory (overrides study.out)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    parser = _Parser(prog="shiftlab", description="Toy domain-shifter diffusion study")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train-baseline":
            p.add_argument("--kind", required=True, choices=[k.value for k in BaselineKind])
        if name in ("sample", "probe", "tune-shift"):
            p.add_argument("--checkpoint", default="stage2")
        if name == "sample":
            p.add_argument("--no-shift", action="store_true", help="disable inference-time domain shifting")
            p.add_argument("--sdedit", action="store_true", help="re-noise and denoise with the base model")
        if name == "eval":
            p.add_argument("--checkpoint", nargs="+", default=["stage2"])
    return parser


def _context(args) -> Context:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.replace("study", seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace("study", out=args.out)
    out = Path(cfg.study.out)
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg, out)
    return Context(cfg, out)


def exit_code(exc: BaseException) -> int:
    for types, code in _EXIT_CODES:
        if isinstance(exc, types):
            return code
    return EXIT_FAILURE


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        HANDLERS[args.command](_context(args), args)
    except Exception as exc:  # noqa: BLE001 - reported as one machine-readable line
        code = exit_code(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(json.dumps({"error": type(exc).__name__, "code": code, "message": msg}), file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
