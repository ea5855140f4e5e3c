"""Procedural two-domain sprite grids.

SYN grids are flat-filled sprites seen under four known planar rotations,
each with an exact control map.  REAL grids hold four independent textured,
shaded instances of the same class and no control.  Everything is a pure
function of ``(class, seed)``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adapters import DomainId
from .errors import CheckpointError, ContractError, DimensionError

CLASSES = ("circle", "square", "triangle", "star", "cross", "ring", "diamond", "crescent")
BASE_COLORS = np.array([
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.20],
    [0.15, 0.30, 0.85],
    [0.95, 0.80, 0.10],
    [0.55, 0.20, 0.70],
    [0.95, 0.50, 0.10],
    [0.10, 0.60, 0.60],
    [0.85, 0.30, 0.60],
])
VIEWS = 4
# a pixel belongs to the silhouette when its darkest channel is below this
SILHOUETTE_LEVEL = 0.8


@dataclasses.dataclass(frozen=True)
class ToyAsset:
    class_id: int
    color: tuple[float, float, float]
    radius: float  # fraction of the view side
    angle: float  # canonical orientation, radians
    offset: tuple[float, float]  # centre shift, fraction of the view side

    @property
    def name(self) -> str:
        return CLASSES[self.class_id]


def make_asset(class_id: int, rng: np.random.Generator) -> ToyAsset:
    if not 0 <= class_id < len(CLASSES):
        raise ContractError(f"unknown class id {class_id}")
    color = np.clip(BASE_COLORS[class_id] + rng.uniform(-0.06, 0.06, 3), 0.0, 1.0)
    return ToyAsset(
        class_id=class_id,
        color=tuple(float(c) for c in color),
        radius=float(rng.uniform(0.30, 0.40)),
        angle=float(rng.uniform(0.0, 2.0 * math.pi)),
        offset=(float(rng.uniform(-0.06, 0.06)), float(rng.uniform(-0.06, 0.06))),
    )


def _inside(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    if name == "circle":
        return r <= 1.0
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if name == "triangle":
        ok = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = math.pi / 2 + 2 * math.pi * k / 3 + math.pi / 3
            ok &= u * math.cos(a) + v * math.sin(a) <= 0.5
        return ok
    if name == "star":
        return r <= 0.45 + 0.55 * (0.5 + 0.5 * np.cos(5 * phi)) ** 2
    if name == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.9)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 0.9))
    if name == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if name == "diamond":
        return np.abs(u) / 0.65 + np.abs(v) <= 1.0
    if name == "crescent":
        return (r <= 1.0) & ((u - 0.45) ** 2 + v ** 2 > 0.75 ** 2)
    raise ContractError(f"unknown shape {name}")


def silhouette(asset: ToyAsset, side: int) -> np.ndarray:
    """Boolean (side, side) mask of the asset in its canonical pose."""
    c = (np.arange(side) + 0.5) / side - 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    xx = xx - asset.offset[0]
    yy = yy - asset.offset[1]
    ca, sa = math.cos(asset.angle), math.sin(asset.angle)
    u = (ca * xx + sa * yy) / asset.radius
    v = (-sa * xx + ca * yy) / asset.radius
    return _inside(asset.name, u, v)


def _blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Separable binomial blur with edge replication."""
    k = np.array([math.comb(2 * radius, i) for i in range(2 * radius + 1)], dtype=np.float64)
    k /= k.sum()
    pad = np.pad(img, radius, mode="edge")
    rows = sum(k[i] * pad[:, i:i + img.shape[1]] for i in range(k.size))
    return sum(k[i] * rows[i:i + img.shape[0], :] for i in range(k.size))


def control_map(mask: np.ndarray) -> np.ndarray:
    """Normal-map-like RGB coding of boundary orientation; zero off the sprite."""
    m = mask.astype(np.float64)
    soft = _blur(m, max(1, mask.shape[0] // 16))
    gy, gx = np.gradient(soft)
    scale = mask.shape[0] / 4.0
    nx, ny = np.clip(-gx * scale, -1, 1), np.clip(-gy * scale, -1, 1)
    nz = np.sqrt(np.clip(1.0 - nx ** 2 - ny ** 2, 0.3 ** 2, 1.0))
    rgb = np.stack([0.5 + 0.5 * nx, 0.5 + 0.5 * ny, nz])
    return rgb * m


def _flat_view(asset: ToyAsset, mask: np.ndarray) -> np.ndarray:
    img = np.ones((3,) + mask.shape)
    img[:, mask] = np.asarray(asset.color)[:, None]
    return img


def _value_noise(rng: np.random.Generator, side: int, cells: int) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1))
    pos = np.linspace(0, cells, side)
    i = np.minimum(pos.astype(int), cells - 1)
    f = pos - i
    f = f * f * (3 - 2 * f)
    top = grid[i][:, i] * (1 - f)[None, :] + grid[i][:, i + 1] * f[None, :]
    bot = grid[i + 1][:, i] * (1 - f)[None, :] + grid[i + 1][:, i + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def _textured_view(asset: ToyAsset, side: int, rng: np.random.Generator) -> np.ndarray:
    mask = silhouette(asset, side)
    noise = 0.6 * _value_noise(rng, side, 4) + 0.4 * _value_noise(rng, side, 8)
    ang = rng.uniform(0, 2 * math.pi)
    c = np.linspace(-1, 1, side)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    ramp = math.cos(ang) * xx + math.sin(ang) * yy
    shade = np.clip(0.85 + 0.25 * noise + 0.2 * ramp, 0.45, 1.15)
    img = np.ones((3, side, side))
    # soft shadow: blurred silhouette shifted down-right, kept light
    shift = max(1, side // 16)
    sh = _blur(np.roll(np.roll(mask.astype(np.float64), shift, 0), shift, 1), max(1, side // 16))
    img -= 0.1 * sh[None]
    body = np.clip(np.asarray(asset.color)[:, None, None] * shade[None], 0.0, 1.0)
    img[:, mask] = body[:, mask]
    return img


@dataclasses.dataclass
class ToyGridSample:
    image: np.ndarray  # (3, 2S, 2S) float in [0, 1]
    control: np.ndarray | None  # (3, 2S, 2S) in [0, 1] or None
    domain: DomainId
    prompt_id: int
    seed: int
    rotations: tuple[int, ...] | None  # quarter turns per view, SYN only

    @property
    def view_side(self) -> int:
        return self.image.shape[-1] // 2


def tile(views: Sequence[np.ndarray]) -> np.ndarray:
    """Four (C, S, S) views to one (C, 2S, 2S) grid: TL, TR, BL, BR."""
    top = np.concatenate([views[0], views[1]], axis=-1)
    bottom = np.concatenate([views[2], views[3]], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def untile(grid: np.ndarray) -> list[np.ndarray]:
    s = grid.shape[-1] // 2
    return [grid[..., :s, :s], grid[..., :s, s:], grid[..., s:, :s], grid[..., s:, s:]]


def rotate_view(view: np.ndarray, k: int) -> np.ndarray:
    """Quarter-turn rotation of a (C, S, S) or (S, S) array."""
    return np.rot90(view, k, axes=(-2, -1))


def render_synthetic(class_id: int, seed: int, side: int = 32) -> ToyGridSample:
    rng = np.random.default_rng([seed, class_id, 0])
    asset = make_asset(class_id, rng)
    mask0 = silhouette(asset, side)
    view0 = _flat_view(asset, mask0)
    masks = [rotate_view(mask0, k) for k in range(VIEWS)]
    image = tile([rotate_view(view0, k) for k in range(VIEWS)])
    control = tile([control_map(m) for m in masks])
    return ToyGridSample(image, control, DomainId.SYN, class_id, seed, tuple(range(VIEWS)))


def render_real(class_id: int, seed: int, side: int = 32) -> ToyGridSample:
    rng = np.random.default_rng([seed, class_id, 1])
    views = []
    for _ in range(VIEWS):
        asset = make_asset(class_id, rng)
        views.append(_textured_view(asset, side, rng))
    return ToyGridSample(tile(views), None, DomainId.REAL, class_id, seed, None)


def render(domain: DomainId, class_id: int, seed: int, side: int) -> ToyGridSample:
    fn = render_synthetic if DomainId.parse(domain) is DomainId.SYN else render_real
    return fn(class_id, seed, side)


def silhouette_of(image: np.ndarray) -> np.ndarray:
    """Foreground mask of an image in [0, 1]: any channel clearly below white."""
    return np.asarray(image).min(axis=-3) < SILHOUETTE_LEVEL


# -- dataset records --------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Record:
    id: str
    domain: str
    prompt_id: int
    seed: int
    split: str
    image: str | None = None
    control: str | None = None

    @property
    def instance(self) -> tuple[str, int, int]:
        return (self.domain, self.prompt_id, self.seed)


@dataclasses.dataclass
class Split:
    train: list[Record]
    eval: list[Record]


def _records(domain: DomainId, split: str, seeds: Sequence[int], n_classes: int) -> list[Record]:
    return [
        Record(f"{domain.value}-{split}-{i:05d}", domain.value, i % n_classes, int(s), split)
        for i, s in enumerate(seeds)
    ]


def make_split(
    n_train: int,
    n_eval: int,
    seed: int = 0,
    n_classes: int = len(CLASSES),
    train_seeds: Sequence[int] | None = None,
    eval_seeds: Sequence[int] | None = None,
) -> Split:
    """Equal-sized SYN and REAL training sets plus a held-out evaluation set.

    Instance seeds are drawn without replacement from one pool, so train and
    eval never share an instance.  Explicit seed lists may be passed instead
    and are checked for overlap.
    """
    if n_train < 1 or n_eval < 1:
        raise ContractError("split sizes must be positive")
    if train_seeds is None or eval_seeds is None:
        pool = np.random.default_rng(seed).choice(2**31 - 1, size=n_train + n_eval, replace=False)
        train_seeds, eval_seeds = pool[:n_train], pool[n_train:]
    if len(train_seeds) != n_train or len(eval_seeds) != n_eval:
        raise ContractError("seed lists do not match the requested sizes")
    overlap = set(map(int, train_seeds)) & set(map(int, eval_seeds))
    if overlap:
        raise ContractError(f"train and eval share seeds: {sorted(overlap)[:5]}")
    train, evals = [], []
    for dom in (DomainId.SYN, DomainId.REAL):
        train += _records(dom, "train", train_seeds, n_classes)
        evals += _records(dom, "eval", eval_seeds, n_classes)
    return Split(train, evals)


# -- PPM files and manifests -------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) bytes."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DimensionError(f"PPM needs (H, W, 3) bytes, got {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or fields[3] != b"255":
        raise CheckpointError(f"{path}: not an 8-bit P6 file")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).copy()


def write_manifest(path: str | os.PathLike, records: Iterable[Record]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> list[Record]:
    with open(path, encoding="utf-8") as fh:
        return [Record(**json.loads(line)) for line in fh if line.strip()]


def write_dataset(out_dir: str | os.PathLike, records: Sequence[Record], side: int) -> list[Record]:
    """Render every record to PPM files and write ``manifest.jsonl``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    written = []
    for r in records:
        s = render(DomainId(r.domain), r.prompt_id, r.seed, side)
        img = f"images/{r.id}.ppm"
        write_ppm(out / img, to_uint8(s.image))
        ctl = None
        if s.control is not None:
            ctl = f"images/{r.id}.control.ppm"
            write_ppm(out / ctl, to_uint8(s.control))
        written.append(dataclasses.replace(r, image=img, control=ctl))
    write_manifest(out / "manifest.jsonl", written)
    return written


# -- in-memory training tensors ------------------------------------------------

@dataclasses.dataclass
class ToyDataset:
    """Stacked grids in model space: images in [-1, 1], control in [0, 1]."""

    domain: DomainId
    images: np.ndarray
    control: np.ndarray | None
    prompt_ids: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, idx: np.ndarray) -> "GridBatch":
        ctl = None if self.control is None else self.control[idx]
        return GridBatch(self.images[idx], ctl, self.prompt_ids[idx], self.domain)


@dataclasses.dataclass
class GridBatch:
    images: np.ndarray
    control: np.ndarray | None
    prompt_ids: np.ndarray
    domain: DomainId

    def __post_init__(self):
        if self.domain is DomainId.REAL and self.control is not None:
            raise ContractError("real-domain batches never carry a control map")

    def without_control(self) -> "GridBatch":
        return GridBatch(self.images, None, self.prompt_ids, self.domain)


def _quantize(image: np.ndarray) -> np.ndarray:
    # round through 8 bits so in-memory data matches what the PPM files hold
    return from_uint8(to_uint8(image))


def load_dataset(records: Sequence[Record], side: int, root: str | os.PathLike | None = None) -> ToyDataset:
    """Stack records into arrays, reading PPM files under ``root`` when given."""
    domains = {r.domain for r in records}
    if len(domains) != 1:
        raise ContractError(f"a dataset holds one domain, got {sorted(domains)}")
    domain = DomainId(domains.pop())
    imgs, ctls = [], []
    for r in records:
        if root is not None and r.image is not None:
            img = from_uint8(read_ppm(Path(root) / r.image))
            ctl = from_uint8(read_ppm(Path(root) / r.control)) if r.control else None
        else:
            s = render(domain, r.prompt_id, r.seed, side)
            img, ctl = _quantize(s.image), None if s.control is None else _quantize(s.control)
        imgs.append(img)
        ctls.append(ctl)
    images = (np.stack(imgs).astype(np.float32) * 2.0 - 1.0).astype(np.float32)
    control = None if domain is DomainId.REAL else np.stack(ctls).astype(np.float32)
    ids = np.array([r.prompt_id for r in records], dtype=np.int64)
    return ToyDataset(domain, images, control, ids, [r.id for r in records])


def to_unit(images: np.ndarray) -> np.ndarray:
    """Model space [-1, 1] back to [0, 1]."""
    return np.clip((np.asarray(images, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
