"""Test-time generation: random attributes, example-guided transfer, attribute interpolation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from PIL import Image

from .config import InvalidArgument, RngStream, sample_attribute_prior
from .data import to_uint8
from .networks import ModelSet, domain_index, encode_attribute, encode_content, generate


def _single(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.dim() == 3 else x


@torch.no_grad()
def translate_random(models: ModelSet, x, dx, dy, n: int, rng: RngStream) -> list[torch.Tensor]:
    """``n`` translations of ``x`` into domain ``dy`` with attributes drawn from N(0, I)."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    domain_index(dy, models.k)
    content = encode_content(models, _single(x), dx)
    out = []
    for _ in range(n):
        z = sample_attribute_prior(models.hp.attribute_dim, rng, 1).to(content.dtype)
        out.append(generate(models, content, z, dy)[0])
    return out


@torch.no_grad()
def translate_transfer(models: ModelSet, content_img, content_domain, attr_img, attr_domain) -> torch.Tensor:
    """Content of one image rendered with the (mean) attribute of another; output in ``attr_domain``."""
    content = encode_content(models, _single(content_img), content_domain)
    mean, _, _ = encode_attribute(models, _single(attr_img), attr_domain)
    return generate(models, content, mean, attr_domain)[0]


@torch.no_grad()
def interpolate_attributes(models: ModelSet, x, dx, dy, a1, a2, steps: int) -> list[torch.Tensor]:
    """Generations along the segment from ``a1`` to ``a2``; frame ``i`` uses ``t = i / (steps - 1)``."""
    if steps < 2:
        raise InvalidArgument("steps must be >= 2")
    content = encode_content(models, _single(x), dx)
    a1 = a1.reshape(1, -1).to(content.dtype)
    a2 = a2.reshape(1, -1).to(content.dtype)
    frames = []
    for i in range(steps):
        t = i / (steps - 1)
        # exact endpoints, no (1 - t) * a1 + t * a2 rounding at t in {0, 1}
        attr = a1 if i == 0 else a2 if i == steps - 1 else (1 - t) * a1 + t * a2
        frames.append(generate(models, content, attr, dy)[0])
    return frames


def interpolation_violations(frames: list[torch.Tensor]) -> int:
    """Count decreases in L1 distance to the first frame along the sequence."""
    d = [float((f - frames[0]).abs().mean()) for f in frames]
    return sum(1 for a, b in zip(d, d[1:]) if b < a)


def write_grid(images: list[torch.Tensor], ncols: int, path) -> None:
    """Tile images row-major in list order and save as PNG."""
    if not images:
        raise InvalidArgument("no images to tile")
    h, w = images[0].shape[-2:]
    nrows = -(-len(images) // ncols)
    canvas = Image.new("RGB", (ncols * w, nrows * h))
    for i, img in enumerate(images):
        r, c = divmod(i, ncols)
        canvas.paste(Image.fromarray(to_uint8(img)), (c * w, r * h))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")


@dataclass
class TranslationRequest:
    mode: str  # random | transfer | interpolate
    source: str
    source_domain: int
    target_domain: int
    seed: int = 0
    n_samples: int | None = None
    attribute_source: str | None = None
    endpoints: list | None = None
    steps: int | None = None
    extra: dict = field(default_factory=dict)

    def validate(self, k: int) -> None:
        for name in ("source_domain", "target_domain"):
            if not 0 <= getattr(self, name) < k:
                raise InvalidArgument(f"{name} outside [0, {k})")
        required = {"random": ("n_samples",), "transfer": ("attribute_source",),
                    "interpolate": ("endpoints", "steps")}
        if self.mode not in required:
            raise InvalidArgument(f"unknown mode {self.mode!r}")
        for name in required[self.mode]:
            if getattr(self, name) is None:
                raise InvalidArgument(f"mode {self.mode} requires {name}")
        for mode, names in required.items():
            if mode != self.mode:
                for name in names:
                    if name not in required[self.mode] and getattr(self, name) is not None:
                        raise InvalidArgument(f"{name} is not valid for mode {self.mode}")


def write_outputs(images: list[torch.Tensor], out_dir, request: TranslationRequest, checkpoint_hash: str,
                  ncols: int | None = None) -> dict:
    """Write per-sample PNGs, a grid and a JSON manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(images):
        name = f"sample_{i:03d}.png"
        Image.fromarray(to_uint8(img)).save(out_dir / name, format="PNG")
        entries.append({"file": name, "index": i, "seed": request.seed, "checkpoint_hash": checkpoint_hash})
    write_grid(images, ncols or len(images), out_dir / "grid.png")
    manifest = {"request": asdict(request), "checkpoint_hash": checkpoint_hash, "grid": "grid.png",
                "images": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
