"""Block-input feature capture, PCA visualization and the layer-selective case study."""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import DomainId
from .backbone import AttentionMode, Backbone, BackboneConfig, block_of
from .datagen import tile, to_uint8, write_ppm
from .diffusion import DEFAULT_SCHEDULE, NoiseSchedule, q_sample
from .errors import ContractError, DimensionError
from .eval import MetricsReport
from .numerics import no_grad
from .study import fresh_model, sample_grids
from .training import BaselineKind, baseline_recipes, layer_split_recipe, train

DEFAULT_TIMESTEPS = (800, 700, 500, 200)


def default_blocks(n_blocks: int) -> tuple[int, ...]:
    return (0, n_blocks // 2, n_blocks - 1)


def default_taps(n_blocks: int) -> list[tuple[int, int]]:
    return [(t, b) for t in DEFAULT_TIMESTEPS for b in default_blocks(n_blocks)]


@dataclasses.dataclass
class FeatureCapture:
    taps: list[tuple[int, int]]
    features: dict[tuple[int, int], np.ndarray]  # (t, block) -> (B, n_tokens, d)

    def __len__(self) -> int:
        return len(self.features)


def capture(model: Backbone, images: np.ndarray, prompt_ids, taps: Sequence[tuple[int, int]] | None = None,
            control: np.ndarray | None = None, mode: AttentionMode = AttentionMode.GRID_FULL,
            plan: Sequence[DomainId] | None = None, seed: int = 0,
            schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> FeatureCapture:
    """Noise ``images`` to each tap's timestep and record block inputs.

    One noise draw is shared by every timestep so taps differ only in t.
    """
    cfg = model.config
    taps = default_taps(cfg.n_blocks) if taps is None else [(int(t), int(b)) for t, b in taps]
    for t, b in taps:
        if not (0 <= t < cfg.T and 0 <= b < cfg.n_blocks):
            raise ContractError(f"tap (t={t}, block={b}) outside [0, {cfg.T}) x [0, {cfg.n_blocks})")
    images = np.asarray(images)
    ids = np.atleast_1d(np.asarray(prompt_ids))
    eps = np.random.default_rng(seed).standard_normal(images.shape)
    dtype = model.patch_embed.weight.dtype
    out: dict[tuple[int, int], np.ndarray] = {}
    for t in sorted({t for t, _ in taps}, reverse=True):
        wanted = {b for tt, b in taps if tt == t}
        x_t = q_sample(images, np.full(len(images), t), eps, schedule).astype(dtype)

        def tap(i, h, t=t, wanted=wanted):
            if i in wanted:
                out[(t, i)] = h.data.astype(np.float64).copy()

        with no_grad():
            model(x_t, np.full(len(images), t), ids, control, mode=mode, plan=plan, capture=tap)
    return FeatureCapture(list(taps), {k: out[k] for k in taps})


# -- PCA ------------------------------------------------------------------------------------

def _pca(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigenvalues (descending), eigenvectors (columns) and the mean of ``flat`` (n, d)."""
    mu = flat.mean(axis=0)
    x = flat - mu
    cov = x.T @ x / max(len(flat), 1)
    w, v = np.linalg.eigh((cov + cov.T) / 2.0)
    order = np.argsort(w)[::-1]
    w, v = np.clip(w[order], 0.0, None), v[:, order]
    # deterministic sign: largest loading of each component positive
    flip = np.sign(v[np.abs(v).argmax(axis=0), np.arange(v.shape[1])])
    return w, v * np.where(flip == 0, 1.0, flip), mu


def _negligible(w: np.ndarray) -> np.ndarray:
    return w <= 1e-10 * w.sum() + 1e-20


def explained_variance(features: np.ndarray) -> np.ndarray:
    flat = np.asarray(features, dtype=np.float64).reshape(-1, np.shape(features)[-1])
    w, _, _ = _pca(flat)
    total = w.sum()
    return w / total if total > 0 else np.zeros_like(w)


def reconstruction_error(features: np.ndarray, k: int) -> float:
    """Mean squared error of the rank-``k`` PCA reconstruction."""
    flat = np.asarray(features, dtype=np.float64).reshape(-1, np.shape(features)[-1])
    _, v, mu = _pca(flat)
    x = flat - mu
    proj = x @ v[:, :k] @ v[:, :k].T
    return float(np.mean((x - proj) ** 2))


def pca_rgb(features: np.ndarray, views: int = 4) -> np.ndarray:
    """Top-3 principal components as R, G, B per token.

    ``features`` is (..., n_tokens, d) with tokens view-major and row-major
    inside a view.  PCA is fitted over all tokens passed in.  Each component
    is min-max scaled to [0, 1]; a component without variance is a constant
    0.5 channel.  Returns (..., views, 3, g, g).
    """
    feats = np.asarray(features, dtype=np.float64)
    n_tok, d = feats.shape[-2:]
    if n_tok * int(np.prod(feats.shape[:-2], dtype=np.int64)) < 3:
        raise ContractError("PCA visualization needs at least 3 tokens")
    per_view = n_tok // views
    g = int(round(per_view ** 0.5))
    if g * g * views != n_tok:
        raise DimensionError(f"{n_tok} tokens do not form {views} square views")
    flat = feats.reshape(-1, d)
    w, v, mu = _pca(flat)
    weak = _negligible(w)
    chans = []
    for c in range(3):
        if c >= len(w) or weak[c]:
            chans.append(np.full(len(flat), 0.5))
            continue
        p = (flat - mu) @ v[:, c]
        lo, hi = p.min(), p.max()
        chans.append((p - lo) / (hi - lo) if hi > lo else np.full(len(flat), 0.5))
    rgb = np.stack(chans, axis=-1).reshape(feats.shape[:-2] + (views, g, g, 3))
    return np.moveaxis(rgb, -1, -3)


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return img.repeat(factor, axis=-2).repeat(factor, axis=-1)


def write_feature_maps(cap: FeatureCapture, out_dir: str | os.PathLike, sample_index: int = 0,
                       scale: int = 4) -> list[Path]:
    """One PPM per tap plus one montage per timestep (blocks left to right)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    by_t: dict[int, list[np.ndarray]] = {}
    for t, b in cap.taps:
        views = pca_rgb(cap.features[(t, b)][sample_index])
        grid = _upscale(tile(list(views)), scale)
        path = out / f"feat_t{t}_b{b}.ppm"
        write_ppm(path, to_uint8(grid))
        written.append(path)
        by_t.setdefault(t, []).append(grid)
    for t, grids in by_t.items():
        gap = np.ones(grids[0].shape[:-1] + (scale,))
        row = [grids[0]]
        for gimg in grids[1:]:
            row += [gap, gimg]
        path = out / f"montage_t{t}.ppm"
        write_ppm(path, to_uint8(np.concatenate(row, axis=-1)))
        written.append(path)
    return written


# -- layer-selective case study ---------------------------------------------------------------

@dataclasses.dataclass
class CaseStudy:
    reports: dict[str, MetricsReport]
    samples: dict[str, np.ndarray]
    updated_blocks: dict[str, dict[str, set[int]]]  # run -> batch domain -> blocks


def layer_selective_case_study(base_state: dict[str, np.ndarray], cfg: BackboneConfig, data, evaluator,
                               budget: dict, seed: int = 0) -> CaseStudy:
    """Full-synthetic fine-tune against the half/half layer split, same seeds and data.

    ``budget`` holds the shared recipe settings (steps or epochs, lr, batch
    size).  Only realism is compared here, so both runs sample without control.
    """
    recipes = {
        "full_syn": baseline_recipes(BaselineKind.SYN_ONLY_FULL, **budget)[0],
        "layer_split": layer_split_recipe(cfg.n_blocks, **budget),
    }
    reports, samples, touched = {}, {}, {}
    for name, recipe in recipes.items():
        model = fresh_model(cfg, base_state)
        seen: dict[DomainId, set[int]] = {DomainId.REAL: set(), DomainId.SYN: set()}

        def note(info, _m, seen=seen):
            seen[info.domain].update(b for b in map(block_of, info.updated) if b is not None)

        train(model, recipe, data.train, seed=seed, on_step=note)
        touched[name] = {d.value: s for d, s in seen.items()}
        ev = data.real_eval
        grids = sample_grids(model, ev.prompt_ids, None, evaluator.sampler, evaluator.seed)
        samples[name] = grids
        reports[name] = evaluator.score(name, grids)
    return CaseStudy(reports, samples, touched)

