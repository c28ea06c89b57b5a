"""Live/spoof image datasets.

Two sources are supported: a deterministic procedural generator used for
hermetic desk-scale experiments, and a CelebA-Spoof style directory of PNG
images with a ``labels.jsonl`` index. Both produce an immutable
:class:`Dataset` holding pixels, auxiliary annotations and the 14x14 depth /
reflection targets used by the geometric heads.

Label conventions
-----------------
* ``y``: 0 = live, 1 = spoof.
* ``spoof_type``: index 0 is the reserved "live" class, 1..T-1 are spoof kinds.
* ``illum``: index 0 is the reserved "none/live" class, 1..I-1 are lighting
  conditions.
* :data:`UNLABELED` (-1) marks a missing annotation; losses skip those terms.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Protocol, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, DimensionError, ProviderError, SchemaError

logger = logging.getLogger(__name__)

UNLABELED = -1
MAP_SIZE = 14
NUM_ATTRS = 40
NUM_TYPES = 11
NUM_ILLUM = 5
LIVE_TYPE = 0
NO_ILLUM = 0

# Spoof kinds 1..10 are (pattern, border) pairs.
SPOOF_PATTERNS = ("vertical_lines", "horizontal_lines", "checker", "moire", "halftone")
_BASE_FLAGS = (
    "glasses", "hat", "smile", "beard", "big_eyes",
    "earrings", "bangs", "wide_face", "light_skin", "light_background",
)
# Brightness bucket edges for the four illumination conditions.
_ILLUM_EDGES = (0.75, 0.9, 1.05)
# Overlay amplitude = AMP_SCALE * artifact_strength * U(AMP_RANGE); sensor
# noise sigma ~ U(NOISE_RANGE) for both classes.
AMP_SCALE = 0.44
AMP_RANGE = (0.3, 1.0)
NOISE_RANGE = (0.0, 0.06)


def _derived_attr_table(n_base: int, n_total: int) -> np.ndarray:
    rng = np.random.default_rng(20221)
    rows = []
    for _ in range(n_total - n_base):
        a, b = rng.choice(n_base, size=2, replace=False)
        rows.append((a, b, rng.integers(3)))
    return np.array(rows, dtype=np.int64)


_DERIVED_ATTRS = _derived_attr_table(len(_BASE_FLAGS), NUM_ATTRS)


@dataclass(frozen=True)
class ImageSample:
    """One image with its binary label and auxiliary annotations.

    ``depth_field``/``reflection_field`` are full-resolution H x W fields the
    procedural generator knows exactly; they are ``None`` for disk data that
    was not exported by the generator.
    """

    pixels: np.ndarray
    y: int
    attrs: np.ndarray
    spoof_type: int
    illum: int
    id: str
    depth_field: Optional[np.ndarray] = None
    reflection_field: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise DimensionError(f"sample {self.id}: pixels must be CxHxW, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise SchemaError(f"sample {self.id}: pixel values outside [0, 1]")
        _check_label_pair(self.y, self.spoof_type, self.id)


@dataclass(frozen=True)
class GeometricTargets:
    depth: np.ndarray
    reflection: np.ndarray


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    image_size: int = 64
    class_balance: float = 0.5
    artifact_strength: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not isinstance(self.n_samples, (int, np.integer)) or self.n_samples < 2:
            raise ConfigurationError(f"n_samples must be an integer >= 2, got {self.n_samples!r}")
        if not isinstance(self.image_size, (int, np.integer)) or self.image_size < 16:
            raise ConfigurationError(f"image_size must be an integer >= 16, got {self.image_size!r}")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ConfigurationError(f"class_balance must lie in [0, 1], got {self.class_balance!r}")
        if not 0.0 < self.artifact_strength <= 1.0:
            raise ConfigurationError(
                f"artifact_strength must lie in (0, 1], got {self.artifact_strength!r}"
            )


@dataclass
class Batch:
    """Tensors for a batch of samples, consumed by losses, training and attacks."""

    pixels: torch.Tensor
    y: torch.Tensor
    attrs: torch.Tensor
    spoof_type: torch.Tensor
    illum: torch.Tensor
    depth: torch.Tensor
    reflection: torch.Tensor

    def to(self, device) -> "Batch":
        return Batch(**{k: v.to(device) for k, v in vars(self).items()})

    def __len__(self) -> int:
        return self.pixels.shape[0]


def _check_label_pair(y, spoof_type, sample_id) -> None:
    if y not in (0, 1):
        raise SchemaError(f"sample {sample_id}: y must be 0 or 1, got {y!r}")
    if spoof_type == UNLABELED:
        return
    if (y == 0) != (spoof_type == LIVE_TYPE):
        raise SchemaError(
            f"sample {sample_id}: y={y} inconsistent with spoof_type={spoof_type} "
            f"(y=0 iff spoof_type={LIVE_TYPE})"
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Dataset(Sequence):
    """Immutable, indexable collection of ``(ImageSample, GeometricTargets)``.

    Arrays are stored stacked and read-only so the object can be shared
    across threads.
    """

    def __init__(
        self,
        pixels: np.ndarray,
        y: np.ndarray,
        attrs: np.ndarray,
        spoof_type: np.ndarray,
        illum: np.ndarray,
        ids: Sequence[str],
        depth: np.ndarray,
        reflection: np.ndarray,
        depth_field: Optional[np.ndarray] = None,
        reflection_field: Optional[np.ndarray] = None,
        num_types: int = NUM_TYPES,
        num_illum: int = NUM_ILLUM,
    ):
        n = len(ids)
        for name, arr in (("pixels", pixels), ("y", y), ("attrs", attrs),
                          ("spoof_type", spoof_type), ("illum", illum),
                          ("depth", depth), ("reflection", reflection)):
            if arr.shape[0] != n:
                raise DimensionError(f"{name} has {arr.shape[0]} rows, expected {n}")
        self.pixels = _readonly(pixels.astype(np.float32, copy=False))
        self.y = _readonly(y.astype(np.int64, copy=False))
        self.attrs = _readonly(attrs.astype(np.int64, copy=False))
        self.spoof_type = _readonly(spoof_type.astype(np.int64, copy=False))
        self.illum = _readonly(illum.astype(np.int64, copy=False))
        self.ids = tuple(ids)
        self.depth = _readonly(depth.astype(np.float32, copy=False))
        self.reflection = _readonly(reflection.astype(np.float32, copy=False))
        self.depth_field = None if depth_field is None else _readonly(depth_field.astype(np.float32))
        self.reflection_field = (
            None if reflection_field is None else _readonly(reflection_field.astype(np.float32))
        )
        self.num_types = num_types
        self.num_illum = num_illum

    @property
    def num_attrs(self) -> int:
        return self.attrs.shape[1] if self.attrs.ndim == 2 else NUM_ATTRS

    @property
    def image_shape(self) -> tuple:
        return tuple(self.pixels.shape[1:])

    def __len__(self) -> int:
        return len(self.ids)

    def sample(self, i: int) -> ImageSample:
        return ImageSample(
            pixels=self.pixels[i],
            y=int(self.y[i]),
            attrs=self.attrs[i],
            spoof_type=int(self.spoof_type[i]),
            illum=int(self.illum[i]),
            id=self.ids[i],
            depth_field=None if self.depth_field is None else self.depth_field[i],
            reflection_field=None if self.reflection_field is None else self.reflection_field[i],
        )

    def targets(self, i: int) -> GeometricTargets:
        return GeometricTargets(depth=self.depth[i], reflection=self.reflection[i])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(range(len(self))[i])
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self.sample(i), self.targets(i)

    def __iter__(self) -> Iterator:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(list(indices), dtype=np.int64)
        return Dataset(
            self.pixels[idx], self.y[idx], self.attrs[idx], self.spoof_type[idx], self.illum[idx],
            [self.ids[j] for j in idx], self.depth[idx], self.reflection[idx],
            None if self.depth_field is None else self.depth_field[idx],
            None if self.reflection_field is None else self.reflection_field[idx],
            num_types=self.num_types, num_illum=self.num_illum,
        )

    def batch(self, indices=None, device=None) -> Batch:
        idx = slice(None) if indices is None else np.asarray(indices, dtype=np.int64)
        b = Batch(
            pixels=torch.from_numpy(np.array(self.pixels[idx])),
            y=torch.from_numpy(np.array(self.y[idx])),
            attrs=torch.from_numpy(np.array(self.attrs[idx])),
            spoof_type=torch.from_numpy(np.array(self.spoof_type[idx])),
            illum=torch.from_numpy(np.array(self.illum[idx])),
            depth=torch.from_numpy(np.array(self.depth[idx])),
            reflection=torch.from_numpy(np.array(self.reflection[idx])),
        )
        return b if device is None else b.to(device)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.pixels, self.y, self.attrs, self.spoof_type, self.illum,
                    self.depth, self.reflection):
            h.update(arr.tobytes())
        h.update("\n".join(self.ids).encode())
        return h.hexdigest()

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample], targets: Sequence[GeometricTargets],
                     image_size: Optional[int] = None, num_attrs: int = NUM_ATTRS,
                     num_types: int = NUM_TYPES, num_illum: int = NUM_ILLUM) -> "Dataset":
        if not samples:
            size = image_size or 64
            return cls(
                np.zeros((0, 3, size, size), np.float32), np.zeros(0), np.zeros((0, num_attrs)),
                np.zeros(0), np.zeros(0), [], np.zeros((0, 1, MAP_SIZE, MAP_SIZE)),
                np.zeros((0, 1, MAP_SIZE, MAP_SIZE)), num_types=num_types, num_illum=num_illum,
            )
        has_fields = all(s.depth_field is not None for s in samples)
        has_refl = all(s.reflection_field is not None for s in samples)
        return cls(
            np.stack([s.pixels for s in samples]),
            np.array([s.y for s in samples]),
            np.stack([s.attrs for s in samples]),
            np.array([s.spoof_type for s in samples]),
            np.array([s.illum for s in samples]),
            [s.id for s in samples],
            np.stack([t.depth for t in targets]),
            np.stack([t.reflection for t in targets]),
            np.stack([s.depth_field for s in samples]) if has_fields else None,
            np.stack([s.reflection_field for s in samples]) if has_refl else None,
            num_types=num_types, num_illum=num_illum,
        )


# ---------------------------------------------------------------------------
# geometric targets


def area_downsample(field: np.ndarray, out_size: int = MAP_SIZE) -> np.ndarray:
    """Exact area-average resampling of a 2-D field to ``out_size`` squared.

    Each output cell averages the input pixels it covers, weighting partially
    covered pixels by the covered fraction.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise DimensionError(f"expected a 2-D field, got shape {field.shape}")
    rows = _area_weights(field.shape[0], out_size)
    cols = _area_weights(field.shape[1], out_size)
    return rows @ field @ cols.T


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    edges_in = np.arange(n_in + 1, dtype=np.float64)
    lo = np.arange(n_out)[:, None] * scale
    hi = lo + scale
    overlap = np.minimum(hi, edges_in[None, 1:]) - np.maximum(lo, edges_in[None, :-1])
    return np.clip(overlap, 0.0, None) / scale


class DepthReflectionProvider(Protocol):
    """Supplies ground-truth maps in [0,1] at ``MAP_SIZE`` resolution.

    Stand-in for an external depth estimator (live faces) and a reflection
    estimator (spoof faces).
    """

    def live_depth(self, sample: ImageSample) -> np.ndarray: ...

    def spoof_reflection(self, sample: ImageSample) -> np.ndarray: ...


def _luminance(pixels: np.ndarray) -> np.ndarray:
    if pixels.shape[0] == 3:
        return 0.299 * pixels[0] + 0.587 * pixels[1] + 0.114 * pixels[2]
    return pixels.mean(axis=0)


def _unit_range(a: np.ndarray) -> np.ndarray:
    hi = a.max()
    return np.clip(a / hi, 0.0, 1.0) if hi > 0 else np.zeros_like(a)


class SyntheticProvider:
    """Default provider.

    Uses the generator's exact fields when a sample carries them. Otherwise
    falls back to image-derived proxies: centre-weighted luminance for depth
    and high-pass magnitude for reflection.
    """

    def __init__(self, map_size: int = MAP_SIZE):
        self.map_size = map_size

    def live_depth(self, sample: ImageSample) -> np.ndarray:
        if sample.depth_field is not None:
            return np.clip(area_downsample(sample.depth_field, self.map_size), 0.0, 1.0)
        lum = _luminance(sample.pixels)
        h, w = lum.shape
        yy, xx = np.mgrid[0:h, 0:w]
        centre = np.exp(-(((yy - h / 2) / (0.35 * h)) ** 2 + ((xx - w / 2) / (0.3 * w)) ** 2))
        return _unit_range(area_downsample(lum * centre, self.map_size))

    def spoof_reflection(self, sample: ImageSample) -> np.ndarray:
        if sample.reflection_field is not None:
            return np.clip(area_downsample(sample.reflection_field, self.map_size), 0.0, 1.0)
        lum = _luminance(sample.pixels)
        padded = np.pad(lum, 1, mode="edge")
        blur = sum(padded[1 + dy:1 + dy + lum.shape[0], 1 + dx:1 + dx + lum.shape[1]]
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
        return _unit_range(area_downsample(np.abs(lum - blur), self.map_size))


def make_geometric_targets(sample: ImageSample,
                           provider: Optional[DepthReflectionProvider] = None) -> GeometricTargets:
    """Depth for live samples, reflection for spoof samples, zeros otherwise."""
    provider = provider or SyntheticProvider()
    zeros = np.zeros((1, MAP_SIZE, MAP_SIZE), np.float32)
    try:
        if sample.y == 0:
            m = np.asarray(provider.live_depth(sample), dtype=np.float32)
        else:
            m = np.asarray(provider.spoof_reflection(sample), dtype=np.float32)
    except Exception as exc:
        raise ProviderError(sample.id, exc) from exc
    m = m.reshape(1, MAP_SIZE, MAP_SIZE) if m.size == MAP_SIZE * MAP_SIZE else m
    if m.shape != (1, MAP_SIZE, MAP_SIZE):
        raise ProviderError(sample.id, f"map has shape {m.shape}, expected (1, {MAP_SIZE}, {MAP_SIZE})")
    m = np.clip(m, 0.0, 1.0)
    if sample.y == 0:
        return GeometricTargets(depth=m, reflection=zeros)
    return GeometricTargets(depth=zeros, reflection=m)


# ---------------------------------------------------------------------------
# procedural generator


def _pattern(kind: int, xx, yy, size, rng) -> np.ndarray:
    period = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    px, py = xx * size, yy * size
    if kind == 0:
        return np.sin(2 * np.pi * px / period + phase)
    if kind == 1:
        return np.sin(2 * np.pi * py / period + phase)
    if kind == 2:
        return np.sign(np.sin(2 * np.pi * px / period + phase) * np.sin(2 * np.pi * py / period))
    if kind == 3:
        t1, t2 = rng.uniform(0, np.pi, size=2)
        a = np.sin(2 * np.pi * (px * np.cos(t1) + py * np.sin(t1)) / period + phase)
        b = np.sin(2 * np.pi * (px * np.cos(t2) + py * np.sin(t2)) / (period * 1.13))
        return a * b * 1.6
    dots = np.cos(2 * np.pi * px / period) * np.cos(2 * np.pi * py / period)
    return np.where(dots > 0.3, 1.0, -0.4)


def _render(rng: np.random.Generator, size: int, live: bool, spoof_kind: int, strength: float):
    """Draw one face image; returns (pixels, depth_field, reflection_field, flags, brightness)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    flags = rng.random(len(_BASE_FLAGS)) < 0.5
    glasses, hat, smile, beard, big_eyes, earrings, bangs = flags[:7]

    cx, cy = 0.5 + rng.uniform(-0.07, 0.07), 0.52 + rng.uniform(-0.05, 0.05)
    rx = rng.uniform(0.29, 0.34) if flags[7] else rng.uniform(0.23, 0.28)
    ry = rng.uniform(0.32, 0.40)
    skin_level = rng.uniform(0.73, 0.9) if flags[8] else rng.uniform(0.5, 0.7)
    skin = skin_level * np.array([1.0, rng.uniform(0.78, 0.88), rng.uniform(0.62, 0.75)])
    bg_level = rng.uniform(0.3, 0.45) if flags[9] else rng.uniform(0.05, 0.25)
    bg_col = bg_level * rng.uniform(0.7, 1.3, size=3)

    r2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    inside = r2 < 1.0
    dome = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    fy = cy - 0.55 * ry
    forehead = np.exp(-(((xx - cx) / (0.5 * rx)) ** 2 + ((yy - fy) / (0.22 * ry)) ** 2))
    depth = (0.7 * dome + 0.3 * forehead) * inside
    depth = depth / depth.max() if depth.max() > 0 else depth

    alpha = 1.0 / (1.0 + np.exp(-(1.0 - r2) * 14.0))
    # Prints flatten shading: spoof faces get weaker depth modulation.
    shade = 0.5 + 0.5 * depth if live else 0.7 + 0.3 * depth
    grad = (xx - 0.5) * rng.uniform(-0.15, 0.15) + (yy - 0.5) * rng.uniform(-0.15, 0.15)
    img = (bg_col[:, None, None] + grad) * (1 - alpha) + skin[:, None, None] * shade * alpha

    def blob(x0, y0, sx, sy):
        return np.exp(-(((xx - x0) / sx) ** 2 + ((yy - y0) / sy) ** 2))

    eye_r = 0.055 if big_eyes else 0.035
    ey = cy - 0.12 * ry
    eyes = blob(cx - 0.4 * rx, ey, eye_r, eye_r * 0.7) + blob(cx + 0.4 * rx, ey, eye_r, eye_r * 0.7)
    img = img * (1 - 0.8 * np.clip(eyes, 0, 1))
    my = cy + 0.5 * ry
    curve = 0.06 * ((xx - cx) / (0.5 * rx)) ** 2 if smile else 0.0
    mouth = np.exp(-((yy - my + curve) / 0.018) ** 2) * (np.abs(xx - cx) < 0.5 * rx)
    img = img * (1 - 0.6 * mouth)
    if glasses:
        band = (np.abs(yy - ey) < 0.025) & (np.abs(xx - cx) < 0.85 * rx)
        img = np.where(band, 0.08, img)
    if hat:
        hat_mask = (yy < cy - 0.82 * ry) & (np.abs(xx - cx) < 1.05 * rx) & (yy > cy - 1.25 * ry)
        hat_col = rng.uniform(0.1, 0.9, size=3)
        img = np.where(hat_mask, hat_col[:, None, None], img)
    if beard:
        jaw = inside & (yy > cy + 0.3 * ry)
        img = np.where(jaw, img * 0.45, img)
    if earrings:
        ear = blob(cx - 1.02 * rx, cy + 0.1 * ry, 0.02, 0.02) + blob(cx + 1.02 * rx, cy + 0.1 * ry, 0.02, 0.02)
        img = img + 0.6 * np.clip(ear, 0, 1)
    if bangs:
        fringe = inside & (yy < cy - 0.6 * ry)
        img = np.where(fringe, img * 0.35, img)

    brightness = rng.uniform(0.6, 1.2)
    img = img * brightness

    reflection = np.zeros((size, size))
    if not live:
        pat_kind, border = (spoof_kind - 1) % len(SPOOF_PATTERNS), (spoof_kind - 1) // len(SPOOF_PATTERNS)
        amp = AMP_SCALE * strength * rng.uniform(*AMP_RANGE)
        pattern = _pattern(pat_kind, xx, yy, size, rng)
        img = img + amp * pattern
        hx, hy = rng.uniform(0.2, 0.8, size=2)
        highlight = blob(hx, hy, 0.12, 0.12)
        img = img + 0.3 * strength * highlight
        reflection = 0.6 * np.abs(pattern) / max(np.abs(pattern).max(), 1e-8) + highlight
        if border:
            w = rng.integers(3, 7) / size
            frame = (xx < w) | (xx > 1 - w) | (yy < w) | (yy > 1 - w)
            img = np.where(frame, rng.choice([0.03, 0.95]), img)
            reflection = np.where(frame, 1.0, reflection)
        reflection = np.clip(reflection, 0.0, 1.0)

    img = img + rng.normal(0.0, rng.uniform(*NOISE_RANGE), size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), depth, reflection, flags, brightness


def _attributes(flags: np.ndarray) -> np.ndarray:
    base = flags.astype(np.int64)
    a, b, op = _DERIVED_ATTRS[:, 0], _DERIVED_ATTRS[:, 1], _DERIVED_ATTRS[:, 2]
    derived = np.select([op == 0, op == 1], [base[a] & base[b], base[a] | base[b]], base[a] ^ base[b])
    return np.concatenate([base, derived])


def generate_synthetic(config: SynthConfig,
                       provider: Optional[DepthReflectionProvider] = None) -> Dataset:
    """Deterministically generate a labelled live/spoof dataset.

    Live samples are shaded face blobs with a raised forehead in their depth
    field. Spoof samples carry one of five periodic overlays (optionally with a
    border band) plus a specular highlight; the overlay kind sets
    ``spoof_type`` and the brightness bucket sets ``illum``.
    """
    config.validate()
    n = int(config.n_samples)
    n_live = int(round(n * config.class_balance))
    root = np.random.default_rng(config.seed)
    labels = np.array([0] * n_live + [1] * (n - n_live))
    labels = labels[root.permutation(n)]
    kinds = root.integers(1, NUM_TYPES, size=n)
    child_seeds = np.random.SeedSequence(config.seed).spawn(n)

    samples, targets = [], []
    for i in range(n):
        rng = np.random.default_rng(child_seeds[i])
        live = labels[i] == 0
        kind = LIVE_TYPE if live else int(kinds[i])
        pixels, depth, refl, flags, brightness = _render(
            rng, config.image_size, live, kind, config.artifact_strength
        )
        illum = NO_ILLUM if live else 1 + int(np.searchsorted(_ILLUM_EDGES, brightness))
        sample = ImageSample(
            pixels=pixels, y=int(labels[i]), attrs=_attributes(flags), spoof_type=kind,
            illum=illum, id=f"synth-{config.seed}-{i:06d}",
            depth_field=depth.astype(np.float32), reflection_field=refl.astype(np.float32),
        )
        samples.append(sample)
        targets.append(make_geometric_targets(sample, provider))
    return Dataset.from_samples(samples, targets)


# ---------------------------------------------------------------------------
# disk layout


def _to_png8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_disk_dataset(dataset: Dataset, root, split: str) -> Path:
    """Write ``root/{split}/images/*.png`` plus ``labels.jsonl``.

    Generator fields, when present, go to ``depth/`` and ``reflection/`` as
    8-bit grayscale PNGs at image resolution.
    """
    base = Path(root) / split
    (base / "images").mkdir(parents=True, exist_ok=True)
    with_fields = dataset.depth_field is not None and dataset.reflection_field is not None
    if with_fields:
        (base / "depth").mkdir(exist_ok=True)
        (base / "reflection").mkdir(exist_ok=True)
    with open(base / "labels.jsonl", "w") as fh:
        for i, sid in enumerate(dataset.ids):
            fname = f"{sid}.png"
            img = _to_png8(dataset.pixels[i]).transpose(1, 2, 0)
            Image.fromarray(img if img.shape[2] == 3 else img[..., 0]).save(base / "images" / fname)
            if with_fields:
                Image.fromarray(_to_png8(dataset.depth_field[i]), mode="L").save(base / "depth" / fname)
                Image.fromarray(_to_png8(dataset.reflection_field[i]), mode="L").save(
                    base / "reflection" / fname)
            row = {
                "file": fname,
                "y": int(dataset.y[i]),
                "attrs": [int(v) for v in dataset.attrs[i]],
                "spoof_type": int(dataset.spoof_type[i]),
                "illum": int(dataset.illum[i]),
            }
            fh.write(json.dumps(row) + "\n")
    return base


def _read_gray(path: Path, size: int) -> Optional[np.ndarray]:
    if not path.exists():
        return None
    im = Image.open(path).convert("L")
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0


def load_disk_dataset(root, split: str = "train", image_size: Optional[int] = 64,
                      num_attrs: int = NUM_ATTRS, num_types: int = NUM_TYPES,
                      num_illum: int = NUM_ILLUM,
                      provider: Optional[DepthReflectionProvider] = None,
                      workers: int = 1) -> Dataset:
    """Load a CelebA-Spoof style split.

    Missing annotation keys become :data:`UNLABELED`. Images are resized to
    ``image_size`` (``None`` keeps the stored size, which must be uniform).
    Output order follows the index file.
    """
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(root) / split
    index = base / "labels.jsonl"
    if not index.exists():
        raise FileNotFoundError(f"label index not found: {index}")
    rows = []
    with open(index) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"{index}:{lineno}: invalid JSON ({exc})") from exc
    for lineno, row in enumerate(rows, 1):
        _validate_row(row, f"{index}:{lineno}", num_attrs, num_types, num_illum)

    def load(row):
        path = base / "images" / row["file"]
        if not path.exists():
            raise FileNotFoundError(f"image listed in {index} not found: {path}")
        im = Image.open(path).convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        pixels = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
        size = pixels.shape[1]
        attrs = np.asarray(row.get("attrs", [UNLABELED] * num_attrs), dtype=np.int64)
        return ImageSample(
            pixels=pixels,
            y=int(row["y"]),
            attrs=attrs,
            spoof_type=int(row.get("spoof_type", UNLABELED)),
            illum=int(row.get("illum", UNLABELED)),
            id=Path(row["file"]).stem,
            depth_field=_read_gray(base / "depth" / row["file"], size),
            reflection_field=_read_gray(base / "reflection" / row["file"], size),
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(load, rows))
    else:
        samples = [load(r) for r in rows]
    shapes = {s.pixels.shape for s in samples}
    if len(shapes) > 1:
        raise DimensionError(f"images in {base} have differing shapes {sorted(shapes)}")
    targets = [make_geometric_targets(s, provider) for s in samples]
    logger.info("loaded %d samples from %s", len(samples), base)
    return Dataset.from_samples(samples, targets, image_size=image_size, num_attrs=num_attrs,
                                num_types=num_types, num_illum=num_illum)


def _validate_row(row: dict, where: str, num_attrs: int, num_types: int, num_illum: int) -> None:
    if "file" not in row or "y" not in row:
        raise SchemaError(f"{where}: rows need 'file' and 'y'")
    y = row["y"]
    st = row.get("spoof_type", UNLABELED)
    il = row.get("illum", UNLABELED)
    if "attrs" in row:
        attrs = row["attrs"]
        if len(attrs) != num_attrs:
            raise SchemaError(f"{where}: {len(attrs)} attrs, expected {num_attrs}")
        if any(a not in (0, 1, UNLABELED) for a in attrs):
            raise SchemaError(f"{where}: attrs must be 0, 1 or {UNLABELED}")
    if st != UNLABELED and not 0 <= st < num_types:
        raise SchemaError(f"{where}: spoof_type {st} outside [0, {num_types})")
    if il != UNLABELED and not 0 <= il < num_illum:
        raise SchemaError(f"{where}: illum {il} outside [0, {num_illum})")
    _check_label_pair(y, st, where)
