"""Synthetic unpaired datasets with known content/attribute factors, folder loading and sampling.

Content is geometry (shape type and grid cell); attribute is colour (hue drawn
from a domain-specific range) and background texture. Labels live in a
``labels.json`` sidecar that only the metrics read.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .config import InvalidArgument, RngStream

SHAPES = ("circle", "square", "triangle")
TEXTURES = ("flat", "stripes", "checker")
# hue ranges in degrees; domain 0 warm, domain 1 cool, the rest pairwise disjoint
HUE_RANGES = ((5, 45), (185, 225), (95, 135), (275, 315), (50, 85), (230, 265), (140, 175), (320, 355))
MIN_SYNTH_SIZE = 16


class DatasetError(InvalidArgument):
    pass


@dataclass(frozen=True)
class SynthSpec:
    k: int = 2
    n_per_domain: int = 100
    image_size: int = 64
    seed: int = 0
    grid: int = 2

    @property
    def n_content(self) -> int:
        return len(SHAPES) * self.grid * self.grid


@dataclass
class UnpairedDataset:
    images: list  # per domain, float tensors (N_i, 3, H, W) in [-1, 1]
    names: list  # per domain, relative file names
    labels: dict | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images[0].shape[-1]

    def __len__(self):
        return sum(len(d) for d in self.images)

    def label_arrays(self, domain: int):
        """(content_id, attribute_id) arrays for one domain, read from the sidecar."""
        if self.labels is None:
            raise DatasetError("dataset has no label sidecar")
        rows = [self.labels[n] for n in self.names[domain]]
        return (np.array([r["content_id"] for r in rows]), np.array([r["attribute_id"] for r in rows]))

    def save(self, root: str | Path) -> None:
        root = Path(root)
        for d, (imgs, names) in enumerate(zip(self.images, self.names)):
            for img, name in zip(imgs, names):
                path = root / name
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(to_uint8(img)).save(path, format="PNG")
        if self.labels is not None:
            (root / "labels.json").write_text(json.dumps(self.labels, sort_keys=True, indent=1) + "\n")


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor in [-1, 1] -> (H, W, 3) uint8."""
    arr = ((img.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def _hsv(h_deg, s, v):
    return np.array(colorsys.hsv_to_rgb(h_deg / 360.0, s, v))


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "square":
        h = 0.8 * r
        return (np.abs(xx - cx) <= h) & (np.abs(yy - cy) <= h)
    # upward isosceles triangle inscribed in the radius-r box
    top, bottom = cy - r, cy + r
    t = (yy - top) / (bottom - top)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= t * r)


def render_image(size: int, shape_idx: int, cell: int, grid: int, domain: int, rng: np.random.Generator):
    """Render one image; returns (uint8 array, attribute_id)."""
    lo, hi = HUE_RANGES[domain]
    cell_size = size / grid
    cx = (cell % grid + 0.5) * cell_size + rng.uniform(-1, 1) * size / 32
    cy = (cell // grid + 0.5) * cell_size + rng.uniform(-1, 1) * size / 32
    r = 0.32 * cell_size
    bg_hue = rng.uniform(lo, hi)
    fg_hue = rng.uniform(lo, hi)
    texture = int(rng.integers(len(TEXTURES)))
    bg = _hsv(bg_hue, rng.uniform(0.55, 0.8), rng.uniform(0.35, 0.55))
    fg = _hsv(fg_hue, rng.uniform(0.7, 1.0), rng.uniform(0.85, 1.0))
    img = np.empty((size, size, 3))
    img[:] = bg
    yy, xx = np.mgrid[0:size, 0:size]
    period = max(2, size // 16)
    if texture == 1:
        dark = (yy // period) % 2 == 1
    elif texture == 2:
        dark = ((yy // period) + (xx // period)) % 2 == 1
    else:
        dark = np.zeros((size, size), bool)
    img[dark] = bg * 0.7
    img[_shape_mask(SHAPES[shape_idx], size, cx, cy, r)] = fg
    hue_bin = min(3, int(4 * (bg_hue - lo) / (hi - lo)))
    return (img * 255).round().astype(np.uint8), texture * 4 + hue_bin


def generate_synthetic(spec: SynthSpec, out_dir: str | Path | None = None) -> UnpairedDataset:
    """Render a labelled unpaired dataset; content factors are i.i.d. across domains."""
    if spec.image_size < MIN_SYNTH_SIZE:
        raise InvalidArgument(f"image_size must be >= {MIN_SYNTH_SIZE} to render shapes")
    if not 1 <= spec.k <= len(HUE_RANGES):
        raise InvalidArgument(f"k must lie in [1, {len(HUE_RANGES)}]")
    if spec.n_per_domain < 1:
        raise InvalidArgument("n_per_domain must be >= 1")
    rng = np.random.default_rng(spec.seed)
    images, names, labels = [], [], {}
    for d in range(spec.k):
        imgs, dnames = [], []
        for j in range(spec.n_per_domain):
            content_id = int(rng.integers(spec.n_content))
            shape_idx, cell = divmod(content_id, spec.grid * spec.grid)
            arr, attribute_id = render_image(spec.image_size, shape_idx, cell, spec.grid, d, rng)
            name = f"domain_{d}/{j:05d}.png"
            imgs.append(from_uint8(arr))
            dnames.append(name)
            labels[name] = {"content_id": content_id, "attribute_id": attribute_id, "domain": d,
                            "shape": SHAPES[shape_idx], "cell": cell}
        images.append(torch.stack(imgs))
        names.append(dnames)
    ds = UnpairedDataset(images, names, labels)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def make_overfit_fixture(image_size: int = 64) -> UnpairedDataset:
    """Two images per domain, two domains, distinct contents within each domain."""
    rng = np.random.default_rng(1234)
    plan = [[(0, 0), (1, 3)], [(2, 1), (0, 2)]]  # (shape, cell) per image
    images, names, labels = [], [], {}
    for d, items in enumerate(plan):
        imgs, dnames = [], []
        for j, (shape_idx, cell) in enumerate(items):
            arr, attribute_id = render_image(image_size, shape_idx, cell, 2, d, rng)
            name = f"domain_{d}/{j:05d}.png"
            imgs.append(from_uint8(arr))
            dnames.append(name)
            labels[name] = {"content_id": shape_idx * 4 + cell, "attribute_id": attribute_id, "domain": d,
                            "shape": SHAPES[shape_idx], "cell": cell}
        images.append(torch.stack(imgs))
        names.append(dnames)
    return UnpairedDataset(images, names, labels)


def load_image_folder(root: str | Path, image_size: int | None = None) -> UnpairedDataset:
    """Load ``root/domain_i/*.png`` (or ``trainA``/``trainB``), resized bilinearly."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    dirs = []
    i = 0
    while (root / f"domain_{i}").is_dir():
        dirs.append(f"domain_{i}")
        i += 1
    if not dirs and (root / "trainA").is_dir() and (root / "trainB").is_dir():
        dirs = ["trainA", "trainB"]
    if len(dirs) < 2:
        raise DatasetError(f"{root}: need at least two domain directories (domain_0, domain_1 or trainA, trainB)")
    images, names = [], []
    for dname in dirs:
        files = sorted(p for p in (root / dname).iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DatasetError(f"{root / dname}: no PNG images")
        imgs = []
        for path in files:
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB")
                    if image_size is not None and im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    imgs.append(from_uint8(np.asarray(im)))
            except (UnidentifiedImageError, OSError) as exc:
                raise DatasetError(f"{path}: cannot decode image ({exc})") from exc
        sizes = {tuple(t.shape) for t in imgs}
        if len(sizes) != 1:
            raise DatasetError(f"{root / dname}: images differ in size; pass image_size")
        images.append(torch.stack(imgs))
        names.append([f"{dname}/{p.name}" for p in files])
    labels = None
    if (root / "labels.json").is_file():
        labels = json.loads((root / "labels.json").read_text())
    return UnpairedDataset(images, names, labels)


def sample_unpaired(dataset: UnpairedDataset, rng: RngStream, multi: bool = False, batch_size: int = 1,
                    crop: int | None = None):
    """Draw ``(x, dx, y, dy)`` with images drawn independently within their domains."""
    for d, imgs in enumerate(dataset.images):
        if len(imgs) == 0:
            raise DatasetError(f"domain {d} is empty")
    if multi:
        dx = rng.integer(dataset.k)
        dy = rng.integer(dataset.k - 1)
        dy += dy >= dx
    else:
        dx, dy = 0, 1
    x = dataset.images[dx][rng.randint(len(dataset.images[dx]), (batch_size,))]
    y = dataset.images[dy][rng.randint(len(dataset.images[dy]), (batch_size,))]
    if crop is not None and crop < x.shape[-1]:
        x, y = _random_crop(x, crop, rng), _random_crop(y, crop, rng)
    return x, dx, y, dy


def _random_crop(batch, size, rng):
    limit = batch.shape[-1] - size + 1
    top, left = rng.integer(limit), rng.integer(limit)
    return batch[..., top:top + size, left:left + size]
