"""Deterministic synthetic document corpus generator.

Pages carry non-overlapping figure/text/table regions packed into columns;
text renders as dark stroke lines (texture, not glyphs), figures as filled
color blocks with a gradient, tables as rule grids. The mask is painted
exactly from region rectangles, so mask class counts equal region areas.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

BACKGROUND, FIGURE, TEXT, TABLE = 0, 1, 2, 3
CLASS_NAMES = ("background", "figure", "text", "table")


@dataclass
class RegionBox:
    cls: int
    x: int
    y: int
    w: int
    h: int
    pitch: int = 4
    rule: int = 1
    fill_seed: int = 0


@dataclass
class LayoutSpec:
    page: tuple  # (H, W)
    regions: list


@dataclass
class CorpusConfig:
    page_size: tuple = (64, 64)
    margin: int = 3
    gutter: int = 3
    column_counts: tuple = (1, 2)
    extra_regions: tuple = (0, 3)        # inclusive range, beyond 1 per class
    region_height: tuple = (10, 22)      # inclusive sample range, clamped
    text_pitch: tuple = (3, 6)
    noise: float = 0.01
    tint: tuple = (1.0, 1.0, 1.0)
    figure_palette_shift: int = 0        # rotates the figure fill palette

    def __post_init__(self):
        if self.noise < 0 or self.noise > 1:
            raise ValueError("noise must lie in [0,1]")
        if self.extra_regions[0] > self.extra_regions[1]:
            raise ValueError("extra_regions range is empty")
        if self.region_height[0] > self.region_height[1]:
            raise ValueError("region_height range is empty")

    @classmethod
    def preset(cls, name, page_size=(64, 64)):
        if name == "shift0":
            return cls(page_size=page_size)
        if name == "shift1":
            return cls(page_size=page_size, noise=0.05,
                       tint=(0.93, 0.91, 0.82), text_pitch=(2, 4),
                       figure_palette_shift=2)
        raise ValueError(f"unknown corpus preset {name!r}")


MIN_REGION = 8


def sample_layout(rng_seed, config):
    """Deterministic column-packed layout; regions never overlap."""
    rng = np.random.default_rng(rng_seed)
    h, w = config.page_size
    m, g = config.margin, config.gutter
    ncols = int(rng.choice(config.column_counts))
    col_w = (w - 2 * m - (ncols - 1) * g) // ncols
    if col_w < MIN_REGION or h - 2 * m < MIN_REGION:
        raise ValueError(f"page {h}x{w} too small for {ncols} columns")

    n_extra = int(rng.integers(config.extra_regions[0],
                               config.extra_regions[1] + 1))
    classes = [FIGURE, TEXT, TABLE]
    rng.shuffle(classes)
    classes += list(rng.integers(1, 4, size=n_extra))

    cursors = [m] * ncols
    regions = []
    for cls in classes:
        # fullest-first would starve columns; take the emptiest
        col = int(np.argmin(cursors))
        remaining = h - m - cursors[col]
        if remaining < MIN_REGION:
            continue
        rh = int(rng.integers(config.region_height[0],
                              config.region_height[1] + 1))
        rh = max(MIN_REGION, min(rh, remaining))
        x = m + col * (col_w + g)
        regions.append(RegionBox(
            cls=int(cls), x=x, y=cursors[col], w=col_w, h=rh,
            pitch=int(rng.integers(config.text_pitch[0],
                                   config.text_pitch[1] + 1)),
            rule=1,
            fill_seed=int(rng.integers(0, 2 ** 31)),
        ))
        cursors[col] += rh + g
    return LayoutSpec(page=(h, w), regions=regions)


@dataclass
class RenderedSample:
    image: np.ndarray  # uint8 (H, W, 3)
    mask: np.ndarray   # uint8 (H, W), values 0..3

    def __post_init__(self):
        assert self.image.shape[:2] == self.mask.shape


_FIGURE_PALETTE = np.array([
    (70, 110, 180), (180, 80, 70), (90, 150, 80),
    (150, 100, 160), (200, 150, 60), (60, 150, 150),
], dtype=np.float64)


def _render_text(img, r, rng):
    shade = float(rng.integers(20, 70))
    y = r.y + 1
    while y + r.rule <= r.y + r.h - 1:
        indent = int(rng.integers(0, max(1, r.w // 4)))
        length = int(rng.integers(r.w // 2, r.w - indent + 1))
        img[y:y + r.rule, r.x + indent:r.x + indent + length] = shade
        y += r.pitch


def _render_figure(img, r, rng, palette_shift):
    idx = (int(rng.integers(0, len(_FIGURE_PALETTE))) + palette_shift) \
        % len(_FIGURE_PALETTE)
    base = _FIGURE_PALETTE[idx]
    grad = np.linspace(-25.0, 25.0, r.h)[:, None, None]
    block = np.clip(base[None, None, :] + grad, 0, 255)
    img[r.y:r.y + r.h, r.x:r.x + r.w] = block


def _render_table(img, r, rng):
    img[r.y:r.y + r.h, r.x:r.x + r.w] = 232
    shade = float(rng.integers(30, 80))
    cell_w = int(rng.integers(6, max(7, r.w // 2 + 1)))
    cell_h = int(rng.integers(4, max(5, r.h // 2 + 1)))
    for yy in range(r.y, r.y + r.h, cell_h):
        img[yy:yy + r.rule, r.x:r.x + r.w] = shade
    for xx in range(r.x, r.x + r.w, cell_w):
        img[r.y:r.y + r.h, xx:xx + r.rule] = shade
    img[r.y + r.h - r.rule:r.y + r.h, r.x:r.x + r.w] = shade
    img[r.y:r.y + r.h, r.x + r.w - r.rule:r.x + r.w] = shade


def render(layout, rng_seed, config=None):
    """Rasterize a layout; deterministic per (layout, seed, config style)."""
    config = config or CorpusConfig(page_size=layout.page)
    rng = np.random.default_rng(rng_seed)
    h, w = layout.page
    bg = np.array(config.tint) * 255.0
    img = np.broadcast_to(bg, (h, w, 3)).copy()
    mask = np.zeros((h, w), dtype=np.uint8)
    for r in layout.regions:
        sub_rng = np.random.default_rng(r.fill_seed)
        if r.cls == TEXT:
            _render_text(img, r, sub_rng)
        elif r.cls == FIGURE:
            _render_figure(img, r, sub_rng, config.figure_palette_shift)
        elif r.cls == TABLE:
            _render_table(img, r, sub_rng)
        mask[r.y:r.y + r.h, r.x:r.x + r.w] = r.cls
    if config.noise > 0:
        img = img + rng.normal(0.0, config.noise * 255.0, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return RenderedSample(image=img, mask=mask)


def class_pixel_counts(mask, k=4):
    return np.bincount(mask.reshape(-1), minlength=k)[:k].tolist()


def generate_dataset(n, base_seed, config, out_dir):
    """Write n samples plus a manifest; sample i is seeded base_seed + i."""
    os.makedirs(out_dir, exist_ok=True)
    totals = np.zeros(4, dtype=np.int64)
    samples = []
    for i in range(n):
        seed = base_seed + i
        layout = sample_layout(seed, config)
        sample = render(layout, seed, config)
        Image.fromarray(sample.image).save(
            os.path.join(out_dir, f"img_{i:06d}.png"))
        Image.fromarray(sample.mask, mode="L").save(
            os.path.join(out_dir, f"mask_{i:06d}.png"))
        counts = class_pixel_counts(sample.mask)
        totals += counts
        samples.append({"index": i, "seed": seed, "class_pixels": counts})
    manifest = {
        "n": n,
        "base_seed": base_seed,
        "config": asdict(config),
        "class_pixels": totals.tolist(),
        "samples": samples,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
