"""Ten-class procedural shape images for pre-training the semantic backbone."""

from __future__ import annotations

import numpy as np

SHAPE_CLASSES = ("disc", "square", "triangle", "cross", "ring",
                 "h_stripes", "v_stripes", "checker", "diamond", "blobs")


def _mask(kind, rng, size):
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    r = rng.uniform(0.18, 0.32)
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy ** 2 + dx ** 2 < r ** 2
    if kind == "square":
        return (np.abs(dy) < r) & (np.abs(dx) < r)
    if kind == "triangle":
        return (dy < r) & (dy > -r) & (np.abs(dx) < (dy + r) / 2)
    if kind == "cross":
        t = r / 3
        return ((np.abs(dy) < t) & (np.abs(dx) < r)) | ((np.abs(dx) < t) & (np.abs(dy) < r))
    if kind == "ring":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d < r) & (d > 0.6 * r)
    period = rng.uniform(0.08, 0.16)
    if kind == "h_stripes":
        return np.sin(2 * np.pi * yy / period) > 0
    if kind == "v_stripes":
        return np.sin(2 * np.pi * xx / period) > 0
    if kind == "checker":
        return (np.sin(2 * np.pi * yy / period) > 0) ^ (np.sin(2 * np.pi * xx / period) > 0)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) < r
    if kind == "blobs":
        m = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(3, 6))):
            by, bx = rng.uniform(0.1, 0.9, size=2)
            m |= (yy - by) ** 2 + (xx - bx) ** 2 < rng.uniform(0.04, 0.08) ** 2
        return m
    raise ValueError(kind)


def shape_image(label, rng, size=64):
    fg, bg = rng.uniform(0, 255, size=3), rng.uniform(0, 255, size=3)
    while np.abs(fg - bg).sum() < 150:
        fg = rng.uniform(0, 255, size=3)
    m = _mask(SHAPE_CLASSES[label], rng, size)[..., None]
    img = np.where(m, fg, bg) + rng.normal(0, 6, size=(size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def shape_dataset(n, seed, size=64):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPE_CLASSES)
    images = np.stack([shape_image(int(k), rng, size) for k in labels])
    return images, labels
