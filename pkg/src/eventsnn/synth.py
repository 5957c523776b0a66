"""Synthetic Poisson-encoded shape datasets for desk-scale experiments.

Each sample is a binary shape mask scaled by a per-sample brightness and
jittered by a small spatial shift, then encoded as independent per-pixel
Poisson event trains. A faint uniform background keeps streams from being
perfectly clean. Lit pixels share one intensity, so collapsing multiple
events per tick into a binary spike acts like a per-sample gain and leaves
class geometry intact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError
from .events import EventStream, poisson_encode, save_events, save_manifest

__all__ = ["SHAPE_NAMES", "shape_mask", "shape_image", "make_dataset",
           "save_dataset"]

SHAPE_NAMES = ("square", "hbars", "vbars", "diag", "ring", "cross",
               "tee", "corners", "lcorner", "checker")


def shape_mask(name: str, width: int, height: int) -> np.ndarray:
    """Binary (H, W) mask for one of the named shape classes."""
    if width < 8 or height < 8:
        raise ValidationError("shapes need at least an 8x8 canvas")
    m = np.zeros((height, width), dtype=bool)
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    if name == "square":
        m[(np.abs(ys - cy) <= height / 4) & (np.abs(xs - cx) <= width / 4)] = True
    elif name == "hbars":
        m[(ys % 3 == 1)] = True
    elif name == "vbars":
        m[(xs % 3 == 1)] = True
    elif name == "diag":
        m[np.abs(ys - xs * height / width) <= 1] = True
        m[np.abs(ys - (width - 1 - xs) * height / width) <= 1] = True
    elif name == "ring":
        r = np.hypot(ys - cy, xs - cx)
        m[(r >= min(width, height) / 4) & (r <= min(width, height) / 2.5)] = True
    elif name == "cross":
        m[np.abs(ys - cy) <= 1] = True
        m[np.abs(xs - cx) <= 1] = True
    elif name == "tee":
        m[ys <= 1] = True
        m[np.abs(xs - cx) <= 1] = True
    elif name == "corners":
        k = max(2, width // 6)
        m[:k, :k] = m[:k, -k:] = m[-k:, :k] = m[-k:, -k:] = True
    elif name == "lcorner":
        m[:, :2] = True
        m[-2:, :] = True
    elif name == "checker":
        m[((ys // 2) + (xs // 2)) % 2 == 0] = True
    else:
        raise ValidationError(f"unknown shape {name!r}")
    return m


def shape_image(class_id: int, width: int, height: int, rng, *,
                brightness=(0.55, 1.0), max_shift: int = 2,
                noise: float = 0.02) -> np.ndarray:
    """One jittered, brightness-scaled instance of a shape class."""
    name = SHAPE_NAMES[class_id]
    mask = shape_mask(name, width, height)
    if max_shift:
        dy = int(rng.integers(-max_shift, max_shift + 1))
        dx = int(rng.integers(-max_shift, max_shift + 1))
        mask = np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
    level = float(rng.uniform(*brightness))
    image = np.where(mask, level, 0.0)
    if noise > 0:
        image = np.maximum(image, rng.uniform(0.0, noise, size=mask.shape))
    return image


def make_dataset(n_classes: int = 4, n_train: int = 160, n_test: int = 100,
                 width: int = 12, height: int = 12, duration_us: int = 200_000,
                 max_rate: float = 5500.0, seed: int = 0, *,
                 brightness=(0.55, 1.0), max_shift: int = 2,
                 noise: float = 0.02) -> tuple[list[EventStream], list[EventStream]]:
    """Balanced labelled train/test splits of Poisson-encoded shape streams."""
    if not 2 <= n_classes <= len(SHAPE_NAMES):
        raise ValidationError(f"n_classes must lie in [2, {len(SHAPE_NAMES)}]")
    if n_train < 1 or n_test < 0:
        raise ValidationError("need at least one training sample")
    children = iter(np.random.SeedSequence(seed).spawn(n_train + n_test))
    splits = []
    for count in (n_train, n_test):
        streams = []
        for i in range(count):
            label = i % n_classes
            rng = np.random.default_rng(next(children))
            image = shape_image(label, width, height, rng,
                                brightness=brightness, max_shift=max_shift,
                                noise=noise)
            stream = poisson_encode(image, max_rate, duration_us, rng)
            streams.append(stream.with_label(label))
        splits.append(streams)
    return splits[0], splits[1]


def save_dataset(directory, train: list[EventStream], test: list[EventStream],
                 fmt: str = "binary", metadata: dict | None = None) -> Path:
    """Write event files plus the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ref = (train + test)[0]
    ext = "evs" if fmt == "binary" else "csv"
    splits = {}
    for split_name, streams in (("train", train), ("test", test)):
        (directory / split_name).mkdir(exist_ok=True)
        entries = []
        for i, stream in enumerate(streams):
            if (stream.width, stream.height, stream.duration_us) != \
                    (ref.width, ref.height, ref.duration_us):
                raise ValidationError("dataset streams must share geometry")
            rel = f"{split_name}/{i:04d}_c{stream.label}.{ext}"
            save_events(stream, directory / rel, fmt)
            entries.append((rel, stream.label))
        splits[split_name] = entries
    manifest = directory / "manifest.json"
    save_manifest(manifest, width=ref.width, height=ref.height,
                  duration_us=ref.duration_us, splits=splits,
                  metadata=metadata)
    return manifest
