"""Procedural multi-domain shape-detection scenes and their augmentations.

Every scene is a pure function of an integer seed, a ``SceneSpec`` and a
domain style.  The base geometry (shapes, colours, boxes) depends only on
the seed, so the same seed rendered under two styles shows the same objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import uniform_filter

SHAPE_NAMES = ("disk", "square", "triangle")


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed under the overlap cap."""


@dataclass(frozen=True)
class DomainStyle:
    domain_id: int
    intensity_gain: float = 1.0
    intensity_bias: float = 0.0
    noise_sigma: float = 0.0
    channel_permutation: tuple[int, int, int] = (0, 1, 2)
    blur_radius: int = 0
    name: str = ""

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")
        if sorted(self.channel_permutation) != [0, 1, 2]:
            raise ValueError(f"not a channel permutation: {self.channel_permutation}")

    @property
    def is_identity(self) -> bool:
        return (
            self.intensity_gain == 1.0
            and self.intensity_bias == 0.0
            and self.noise_sigma == 0.0
            and tuple(self.channel_permutation) == (0, 1, 2)
            and self.blur_radius == 0
        )


# s1 labeled, s2/s3 auxiliary, t held-out target
DEFAULT_DOMAINS: dict[str, DomainStyle] = {
    "s1": DomainStyle(0, name="s1"),
    # gain is the reciprocal of the target's 0.7
    "s2": DomainStyle(1, intensity_gain=1.0 / 0.7, channel_permutation=(2, 0, 1), name="s2"),
    "s3": DomainStyle(2, intensity_bias=0.2, noise_sigma=0.1, name="s3"),
    "t": DomainStyle(3, intensity_gain=0.7, blur_radius=1, name="t"),
}


@dataclass(frozen=True)
class SceneSpec:
    size: int = 32
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_side: int = 6
    max_side: int = 8
    max_iou: float = 0.3
    max_tries: int = 100
    distinct_classes: bool = False


@dataclass
class Scene:
    image: np.ndarray
    boxes: list[tuple[float, float, float, float]]
    classes: list[int]
    weak_label: frozenset[int]
    domain_id: int
    seed: int = -1

    def __post_init__(self):
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes differ in length")


@dataclass(frozen=True)
class AugRecord:
    h_flip: bool
    noise_seed: int


def box_iou_xyxy(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _shape_mask(shape: int, x0: int, y0: int, side: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = x0 + side / 2, y0 + side / 2
    inside = (xx >= x0) & (xx < x0 + side) & (yy >= y0) & (yy < y0 + side)
    if shape == 0:
        return inside & ((xx - cx) ** 2 + (yy - cy) ** 2 <= (side / 2) ** 2)
    if shape == 1:
        return inside
    # apex-up triangle filling the box
    return inside & (np.abs(xx - cx) <= (yy - y0) / 2)


def render_style(image: np.ndarray, style: DomainStyle, seed: int) -> np.ndarray:
    """Apply a domain style; deterministic in (image, style, seed)."""
    if style.is_identity:
        return image.copy()
    out = style.intensity_gain * image + style.intensity_bias
    out = out[..., list(style.channel_permutation)]
    if style.blur_radius > 0:
        out = uniform_filter(out, size=(2 * style.blur_radius + 1,) * 2 + (1,), mode="nearest")
    if style.noise_sigma > 0:
        rng = np.random.default_rng([seed, 1, style.domain_id])
        out = out + rng.normal(0.0, style.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_scene(seed: int, domain: DomainStyle, spec: SceneSpec = SceneSpec(),
                   n_objects: int | None = None) -> Scene:
    rng = np.random.default_rng([seed, 0])
    size = spec.size
    if n_objects is None:
        n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    if spec.distinct_classes and n_objects > spec.num_classes:
        raise PlacementError("more distinct-class objects than classes")

    background = rng.uniform(0.05, 0.35, size=3)
    image = np.broadcast_to(background, (size, size, 3)).copy()
    placed: list[tuple[int, int, int]] = []
    classes: list[int] = []
    for _ in range(n_objects):
        for _attempt in range(spec.max_tries):
            side = int(rng.integers(spec.min_side, spec.max_side + 1))
            x0 = int(rng.integers(0, size - side + 1))
            y0 = int(rng.integers(0, size - side + 1))
            cand = (x0, y0, x0 + side, y0 + side)
            if all(box_iou_xyxy(cand, (px, py, px + ps, py + ps)) <= spec.max_iou
                   for px, py, ps in placed):
                break
        else:
            raise PlacementError(
                f"could not place object {len(placed) + 1} after {spec.max_tries} tries")
        if spec.distinct_classes:
            remaining = [k for k in range(spec.num_classes) if k not in classes]
            cls = int(remaining[rng.integers(len(remaining))])
        else:
            cls = int(rng.integers(spec.num_classes))
        color = rng.uniform(0.55, 1.0, size=3)
        image[_shape_mask(cls, x0, y0, side, size)] = color
        placed.append((x0, y0, side))
        classes.append(cls)

    boxes = [((x0 + s / 2) / size, (y0 + s / 2) / size, s / size, s / size)
             for x0, y0, s in placed]
    return Scene(
        image=render_style(image, domain, seed),
        boxes=boxes,
        classes=classes,
        weak_label=frozenset(classes),
        domain_id=domain.domain_id,
        seed=seed,
    )


def flip_box(box):
    cx, cy, w, h = box
    return (1.0 - cx, cy, w, h)


def replay_weak_aug(scene: Scene, record: AugRecord, sigma: float = 0.02) -> Scene:
    image = scene.image[:, ::-1, :] if record.h_flip else scene.image
    boxes = [flip_box(b) for b in scene.boxes] if record.h_flip else list(scene.boxes)
    if sigma > 0:
        noise = np.random.default_rng(record.noise_seed).normal(0.0, sigma, size=image.shape)
        image = np.clip(image + noise, 0.0, 1.0)
    else:
        image = image.copy()
    return replace(scene, image=image, boxes=boxes)


def apply_weak_aug(scene: Scene, rng: np.random.Generator, sigma: float = 0.02,
                   p_flip: float = 0.5) -> tuple[Scene, AugRecord]:
    """Horizontal flip with probability ``p_flip`` plus clamped pixel noise."""
    record = AugRecord(h_flip=bool(rng.random() < p_flip),
                       noise_seed=int(rng.integers(0, 2**31 - 1)))
    return replay_weak_aug(scene, record, sigma), record


@dataclass(frozen=True)
class StrongAugParams:
    noise_sigma: float
    noise_seed: int
    channel_gain: tuple[float, float, float]
    cutout: tuple[int, int, int] = field(default=(0, 0, 0))  # (y0, x0, side)

    @classmethod
    def identity(cls) -> "StrongAugParams":
        return cls(0.0, 0, (1.0, 1.0, 1.0), (0, 0, 0))


def sample_strong_params(rng: np.random.Generator, shape,
                         noise_range=(0.05, 0.15), gain_range=(0.6, 1.4),
                         cutout_range=(4, 8)) -> StrongAugParams:
    h, w = shape[0], shape[1]
    sigma = float(rng.uniform(*noise_range))
    seed = int(rng.integers(0, 2**31 - 1))
    gain = tuple(float(g) for g in rng.uniform(*gain_range, size=3))
    side = int(rng.integers(cutout_range[0], cutout_range[1] + 1))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    return StrongAugParams(sigma, seed, gain, (y0, x0, side))


def strong_aug_with(image: np.ndarray, params: StrongAugParams,
                    fill: float = 0.5) -> np.ndarray:
    out = image * np.asarray(params.channel_gain)
    if params.noise_sigma > 0:
        out = out + np.random.default_rng(params.noise_seed).normal(
            0.0, params.noise_sigma, size=image.shape)
    out = np.clip(out, 0.0, 1.0)
    y0, x0, side = params.cutout
    if side > 0:
        out[y0:y0 + side, x0:x0 + side, :] = fill
    return out


def apply_strong_aug(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Photometric strong augmentation; geometry is left untouched."""
    return strong_aug_with(image, sample_strong_params(rng, image.shape))


class NoiseBank:
    """Fixed pool of standard-normal images for fast batched augmentation.

    A draw picks a pool entry and a random sign per image, so the per-step
    cost is two small integer draws instead of a full Gaussian tensor.
    """

    def __init__(self, shape, size: int = 1024, seed: int = 0):
        self.shape = tuple(shape)
        self.pool = np.random.default_rng([seed, 5]).standard_normal((size, *self.shape))

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.integers(0, len(self.pool), size=n)
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return self.pool[idx] * sign[:, None, None, None]


def _gaussian(rng, shape, bank: NoiseBank | None) -> np.ndarray:
    if bank is None:
        return rng.standard_normal(shape)
    if bank.shape != tuple(shape[1:]):
        raise ValueError(f"noise bank shape {bank.shape} does not match {tuple(shape[1:])}")
    return bank.draw(rng, shape[0])


def weak_aug_batch(images: np.ndarray, rng: np.random.Generator, sigma: float = 0.02,
                   p_flip: float = 0.5, bank: NoiseBank | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Batched weak augmentation of ``(B, H, W, C)`` images; returns views and flip flags.

    Draw order: one uniform per image for the flips, then the noise.
    """
    flips = rng.random(len(images)) < p_flip
    out = images.copy()
    out[flips] = images[flips][:, :, ::-1, :]
    if sigma > 0:
        out += sigma * _gaussian(rng, images.shape, bank)
        np.clip(out, 0.0, 1.0, out=out)
    return out, flips


def strong_aug_batch(images: np.ndarray, rng: np.random.Generator,
                     noise_range=(0.05, 0.15), gain_range=(0.6, 1.4),
                     cutout_range=(4, 8), fill: float = 0.5,
                     bank: NoiseBank | None = None) -> np.ndarray:
    """Batched strong augmentation, same transform family as ``strong_aug_with``."""
    b, h, w = images.shape[:3]
    sigma = rng.uniform(*noise_range, size=b)
    gain = rng.uniform(*gain_range, size=(b, 3))
    side = rng.integers(cutout_range[0], cutout_range[1] + 1, size=b)
    y0 = rng.integers(0, h - side + 1)
    x0 = rng.integers(0, w - side + 1)
    out = images * gain[:, None, None, :]
    out += sigma[:, None, None, None] * _gaussian(rng, images.shape, bank)
    np.clip(out, 0.0, 1.0, out=out)
    for i in range(b):
        out[i, y0[i]:y0[i] + side[i], x0[i]:x0[i] + side[i], :] = fill
    return out


@dataclass(frozen=True)
class DatasetSizes:
    labeled: int = 2000
    auxiliary: int = 800
    target_test: int = 400
    validation: int = 200
    target_train: int = 800


def generate_split(domain: DomainStyle, n: int, base_seed: int,
                   spec: SceneSpec = SceneSpec()) -> list[Scene]:
    # seeds are disjoint across (domain, split) through base_seed spacing
    return [generate_scene(base_seed + i, domain, spec) for i in range(n)]


def generate_dataset(data_seed: int = 0, sizes: DatasetSizes = DatasetSizes(),
                     spec: SceneSpec = SceneSpec(),
                     domains: dict[str, DomainStyle] | None = None) -> dict[str, list[Scene]]:
    """Build every split of the default four-domain layout.

    Keys: ``s1``, ``s2``, ``s3`` (training), ``val/s2``, ``val/s3``,
    ``t/train`` (only consumed by UDA) and ``t/test``.
    """
    domains = domains or DEFAULT_DOMAINS
    stride = 1_000_000
    base = data_seed * 100 * stride
    layout = [
        ("s1", "s1", sizes.labeled),
        ("s2", "s2", sizes.auxiliary),
        ("s3", "s3", sizes.auxiliary),
        ("val/s2", "s2", sizes.validation),
        ("val/s3", "s3", sizes.validation),
        ("t/train", "t", sizes.target_train),
        ("t/test", "t", sizes.target_test),
    ]
    return {key: generate_split(domains[dom], n, base + (i + 1) * stride, spec)
            for i, (key, dom, n) in enumerate(layout)}
