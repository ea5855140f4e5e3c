"""Realism, control-adherence, cross-view consistency and domain-probe metrics."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .adapters import DomainId
from .backbone import VIEWS, AttentionMode, Backbone
from .datagen import rotate_view, silhouette_of, untile
from .diffusion import q_sample
from .errors import ContractError, DimensionError
from .numerics import no_grad

FID_REGULARIZATION = 1e-6
PSNR_CAP = 60.0


# -- features ------------------------------------------------------------------

class FeatureEmbedder:
    """Frozen random two-layer conv net; 64 pooled features per view."""

    out_dim = 64

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng([seed, 7919])
        self.w1 = rng.normal(0, 1 / math.sqrt(27), (27, 24))
        self.b1 = rng.normal(0, 0.1, 24)
        self.w2 = rng.normal(0, 1 / math.sqrt(24 * 9), (24 * 9, 32))
        self.b2 = rng.normal(0, 0.1, 32)

    @staticmethod
    def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
        # x: (N, C, H, W) -> (N, H', W', C_out), 3x3 valid conv
        win = sliding_window_view(x, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
        n, c, h, w_, _, _ = win.shape
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, w_, c * 9)
        return np.maximum(cols @ w + b, 0.0)

    def __call__(self, views: np.ndarray) -> np.ndarray:
        """(N, 3, S, S) images in [0, 1] -> (N, 64)."""
        x = np.asarray(views, dtype=np.float64) * 2.0 - 1.0
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"embedder expects (N, 3, S, S), got {x.shape}")
        h = self._conv(x, self.w1, self.b1, 1)
        h = self._conv(h.transpose(0, 3, 1, 2), self.w2, self.b2, 2)
        flat = h.reshape(h.shape[0], -1, h.shape[-1])
        return np.concatenate([flat.mean(axis=1), flat.std(axis=1)], axis=1)


def grid_views(grids: np.ndarray) -> np.ndarray:
    """(B, C, 2S, 2S) -> (4B, C, S, S), views of each grid kept together."""
    grids = np.asarray(grids)
    return np.stack(untile(grids), axis=1).reshape((-1, grids.shape[1]) + (grids.shape[-1] // 2,) * 2)


# -- distribution distances ---------------------------------------------------

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: np.ndarray, b: np.ndarray, reg: float = FID_REGULARIZATION) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature sets must be (n, dim) with equal dim: {a.shape}, {b.shape}")
    dim = a.shape[1]
    if min(a.shape[0], b.shape[0]) < dim + 1:
        raise ContractError(f"need at least dim+1={dim + 1} samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    eye = reg * np.eye(dim)
    sa, sb = np.cov(a, rowvar=False) + eye, np.cov(b, rowvar=False) + eye
    ra = _sqrtm_psd(sa)
    cross = _sqrtm_psd(ra @ sb @ ra)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    return value


def kernel_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (x.y/dim + 1)^3."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ContractError("kernel distance needs at least 2 samples per set")
    dim = a.shape[1]
    # canonical argument order makes the result exactly symmetric in floating point
    if (b.shape, b.tobytes()) < (a.shape, a.tobytes()):
        a, b = b, a
    k = lambda x, y: (x @ y.T / dim + 1.0) ** 3
    m, n = a.shape[0], b.shape[0]
    kaa, kbb, kab = k(a, a), k(b, b), k(a, b)
    saa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    sbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(saa + sbb - 2.0 * kab.mean())


# -- image comparisons ---------------------------------------------------------

def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def box_iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    """IoU of axis-aligned boxes given as (x0, y0, x1, y1)."""
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = w * h
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    union = area(a) + area(b) - inter
    return 1.0 if union == 0 else inter / union


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at ``cap`` dB."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        diff = diff[..., np.broadcast_to(mask, a.shape[-2:])]
        if diff.size == 0:
            return cap
    mse = float(diff.mean())
    return cap if mse <= 10 ** (-cap / 10) else min(cap, 10 * math.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7) -> float:
    """Mean SSIM over channels with a uniform window, images in [0, 1]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    window = min(window, a.shape[-1], a.shape[-2])
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def local(x):
        return sliding_window_view(x, (window, window), axis=(-2, -1)).mean(axis=(-2, -1))

    mu_a, mu_b = local(a), local(b)
    va = local(a * a) - mu_a ** 2
    vb = local(b * b) - mu_b ** 2
    cov = local(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


def edge_map(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    gx = np.abs(np.diff(m, axis=-1, append=m[..., -1:]))
    gy = np.abs(np.diff(m, axis=-2, append=m[..., -1:, :]))
    return np.clip(gx + gy, 0.0, 1.0)


def control_silhouette(control: np.ndarray) -> np.ndarray:
    return np.asarray(control).max(axis=-3) > 0.0


def control_adherence(generated: np.ndarray, control: np.ndarray) -> dict[str, float]:
    """Silhouette IoU and edge-map PSNR of generated grids against their control maps."""
    generated, control = np.asarray(generated), np.asarray(control)
    if generated.ndim == 3:
        generated, control = generated[None], control[None]
    ious, ps = [], []
    for g, c in zip(generated, control):
        gs, cs = silhouette_of(g), control_silhouette(c)
        ious.append(iou(gs, cs))
        ps.append(psnr(edge_map(gs), edge_map(cs)))
    return {"iou": float(np.mean(ious)), "psnr_edges": float(np.mean(ps))}


def cross_view_consistency(generated: np.ndarray) -> dict[str, float]:
    """Compare quarter-turned view 0 with views 1..3, restricted to the foreground."""
    generated = np.asarray(generated, dtype=np.float64)
    if generated.ndim == 3:
        generated = generated[None]
    ps, ss = [], []
    for g in generated:
        views = untile(g)
        for k in range(1, 4):
            ref, got = rotate_view(views[0], k), views[k]
            fg = silhouette_of(ref) | silhouette_of(got)
            ps.append(psnr(ref, got, mask=fg))
            ss.append(ssim(np.where(fg, ref, 1.0), np.where(fg, got, 1.0)))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


# -- linear probe ------------------------------------------------------------------

def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-3, iters: int = 50) -> np.ndarray:
    """Newton-iteration logistic regression; returns weights with the bias last."""
    x = np.concatenate([np.asarray(x, dtype=np.float64), np.ones((len(x), 1))], axis=1)
    y = np.asarray(y, dtype=np.float64)
    w = np.zeros(x.shape[1])
    reg = l2 * np.eye(x.shape[1])
    reg[-1, -1] = 0.0
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-np.clip(x @ w, -30, 30)))
        grad = x.T @ (p - y) + reg @ w
        hess = (x * (p * (1 - p))[:, None]).T @ x + reg + 1e-9 * np.eye(x.shape[1])
        step = np.linalg.solve(hess, grad)
        w -= step
        if np.max(np.abs(step)) < 1e-10:
            break
    return w


def logistic_accuracy(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    x = np.concatenate([np.asarray(x, dtype=np.float64), np.ones((len(x), 1))], axis=1)
    return float(np.mean((x @ w > 0).astype(int) == np.asarray(y)))


def probe_features(model: Backbone, images: np.ndarray, prompt_ids, t, block: int | None = None,
                   seed: int = 0) -> dict:
    """Per-view mean-pooled block-input activations under all-REAL and all-SYN plans.

    ``images`` are noised to ``t`` with one seeded draw and both plans see the
    same noised inputs, so any separation comes from the shifters alone.
    Returns (B, views, d) per domain.
    """
    cfg = model.config
    block = cfg.n_blocks // 2 if block is None else block
    images = np.asarray(images)
    eps = np.random.default_rng(seed).standard_normal(images.shape)
    x_t = q_sample(images, np.full(len(images), t), eps).astype(model.patch_embed.weight.dtype)
    feats = {}
    for dom in DomainId:
        grab: dict[int, np.ndarray] = {}

        def tap(i, h):
            if i == block:
                b, n, d = h.shape
                grab["h"] = h.data.astype(np.float64).reshape(b, VIEWS, n // VIEWS, d).mean(axis=2)

        with no_grad():
            model(x_t, t, prompt_ids, None, mode=AttentionMode.SINGLE_IMAGE,
                  plan=[dom] * cfg.n_blocks, capture=tap)
        feats[dom] = grab["h"]
    return feats


def domain_probe(model: Backbone, images: np.ndarray, prompt_ids, t, seed: int = 0,
                 shuffle_labels: bool = False) -> float:
    """Train on the views of the first half of the grids, test on the rest."""
    feats = probe_features(model, images, prompt_ids, t, seed=seed)
    n = images.shape[0]
    half = n // 2
    if half < 1 or n - half < 1:
        raise ContractError("domain probe needs at least two inputs")
    xr, xs = feats[DomainId.REAL], feats[DomainId.SYN]
    d = xr.shape[-1]
    x_tr = np.concatenate([xr[:half], xs[:half]]).reshape(-1, d)
    x_te = np.concatenate([xr[half:], xs[half:]]).reshape(-1, d)
    per = xr.shape[1]
    y_tr = np.repeat([0, 1], half * per)
    y_te = np.repeat([0, 1], (n - half) * per)
    if shuffle_labels:
        y_tr = np.random.default_rng(seed).permutation(y_tr)
    mu, sd = x_tr.mean(0), x_tr.std(0) + 1e-8
    w = fit_logistic((x_tr - mu) / sd, y_tr)
    return logistic_accuracy(w, (x_te - mu) / sd, y_te)


# -- report ------------------------------------------------------------------------

CSV_COLUMNS = ("checkpoint", "fid_toy_B", "kid_toy_B", "fid_toy_I", "kid_toy_I", "psnr", "ssim", "iou", "probe_acc")


@dataclasses.dataclass
class MetricsReport:
    checkpoint: str
    fid_toy_B: float
    kid_toy_B: float
    fid_toy_I: float
    kid_toy_I: float
    psnr: float
    ssim: float
    iou: float
    probe_acc: float | None = None
    fid_regularization: float = FID_REGULARIZATION

    def __post_init__(self):
        for f in CSV_COLUMNS[1:]:
            v = getattr(self, f)
            if v is not None and not math.isfinite(v):
                raise ContractError(f"metric {f} is not finite: {v}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    def csv_row(self) -> list[str]:
        out = []
        for f in CSV_COLUMNS:
            v = getattr(self, f)
            out.append("" if v is None else v if isinstance(v, str) else f"{v:.6f}")
        return out


def write_csv(path, reports: Sequence[MetricsReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(r.csv_row())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
