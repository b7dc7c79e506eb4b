"""Procedurally generated stand-in image domains.

Each of the seven classes is a distinct geometric glyph; each domain renders
the glyphs in a visually distinct style (contrast, background texture), so a
sequence of domains exercises forgetting without any restricted datasets.
Trees are written in the ``<root>/<class_name>/<file>.png`` layout the
loader expects.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from .data import EmotionClass

NUM_STYLES = 4


def _glyph_mask(class_id: int, size: int, cx: float, cy: float, scale: float) -> np.ndarray:
    """Boolean mask of the class glyph, centered at (cx, cy)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    r = np.sqrt(dx ** 2 + dy ** 2)
    s = size * scale
    if class_id == 0:    # filled circle
        return r <= 0.22 * s
    if class_id == 1:    # filled square
        return (np.abs(dx) <= 0.20 * s) & (np.abs(dy) <= 0.20 * s)
    if class_id == 2:    # horizontal bar
        return (np.abs(dy) <= 0.08 * s) & (np.abs(dx) <= 0.34 * s)
    if class_id == 3:    # vertical bar
        return (np.abs(dx) <= 0.08 * s) & (np.abs(dy) <= 0.34 * s)
    if class_id == 4:    # diagonal stripe
        return (np.abs(dx - dy) <= 0.11 * s) & (np.abs(dx) <= 0.34 * s) & (np.abs(dy) <= 0.34 * s)
    if class_id == 5:    # ring
        return (r >= 0.15 * s) & (r <= 0.26 * s)
    if class_id == 6:    # cross
        return ((np.abs(dx) <= 0.07 * s) | (np.abs(dy) <= 0.07 * s)) \
            & (np.abs(dx) <= 0.30 * s) & (np.abs(dy) <= 0.30 * s)
    raise ValueError(f"no glyph for class id {class_id}")


def _background(style: int, size: int) -> tuple[np.ndarray, float]:
    """(background image, glyph intensity) for one domain style."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    if style == 0:       # bright glyph on dark
        return np.full((size, size), 0.10, dtype=np.float32), 0.92
    if style == 1:       # dark glyph on bright (inverted contrast)
        return np.full((size, size), 0.90, dtype=np.float32), 0.08
    if style == 2:       # bright glyph on horizontal stripes
        stripes = np.where((yy // 4).astype(int) % 2 == 0, 0.12, 0.38).astype(np.float32)
        return stripes, 0.95
    if style == 3:       # dark glyph on a vertical gradient
        grad = (0.45 + 0.40 * xx / max(size - 1, 1)).astype(np.float32)
        return grad, 0.05
    raise ValueError(f"unknown style {style}; only {NUM_STYLES} styles exist")


def render_sample(class_id: int, style: int, size: int,
                  rng: np.random.Generator) -> np.ndarray:
    """One jittered glyph rendering as a float image in [0, 1]."""
    background, glyph_value = _background(style, size)
    jitter = size * 0.03
    cx = size / 2 + rng.uniform(-jitter, jitter)
    cy = size / 2 + rng.uniform(-jitter, jitter)
    scale = rng.uniform(0.94, 1.06)
    img = background.copy()
    img[_glyph_mask(class_id, size, cx, cy, scale)] = glyph_value
    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_toy_domain(root: str | Path, style: int, *, n_per_class: int = 100,
                    image_size: int = 32, seed: int = 0) -> Path:
    """Write one domain tree with n_per_class PNGs per emotion class."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for cls in EmotionClass:
        class_dir = root / cls.label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = render_sample(int(cls), style, image_size, rng)
            u8 = np.round(img * 255).astype(np.uint8)
            Image.fromarray(u8, mode="L").save(class_dir / f"{cls.label}_{i:04d}.png")
    return root


def make_toy_domains(root: str | Path, n_domains: int = 4, *, n_per_class: int = 100,
                     image_size: int = 32, seed: int = 0) -> list[tuple[str, Path]]:
    """Write several visually distinct domains under one root; returns (name, path)s."""
    if not (2 <= n_domains <= NUM_STYLES):
        raise ValueError(f"n_domains must be between 2 and {NUM_STYLES}")
    root = Path(root)
    out = []
    for style in range(n_domains):
        name = f"domain_{chr(ord('a') + style)}"
        make_toy_domain(root / name, style, n_per_class=n_per_class,
                        image_size=image_size, seed=seed + 1000 * style)
        out.append((name, root / name))
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate stand-in image domains")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--domains", type=int, default=4)
    parser.add_argument("--per-class", type=int, default=100)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    for name, path in make_toy_domains(args.out_dir, args.domains,
                                       n_per_class=args.per_class,
                                       image_size=args.size, seed=args.seed):
        print(f"wrote {name} -> {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
