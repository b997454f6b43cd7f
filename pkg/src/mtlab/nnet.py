"""Grid-cell single-stage toy detector with hand-written backprop.

Each image is cut into ``grid x grid`` cells; one shared two-hidden-layer
tanh MLP maps each flattened cell patch to ``K+1`` class logits (the last
is background) and four box offsets ``(dx, dy, dw, dh)``:

    cx = (col + dx) / G,  cy = (row + dy) / G,  w = exp(dw) / G,  h = exp(dh) / G
"""

from __future__ import annotations

import functools
import zlib
from dataclasses import asdict, dataclass

import numpy as np


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message: str, cell: int | None = None):
        super().__init__(message)
        self.cell = cell


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 4
    patch: int = 8
    channels: int = 3
    hidden: tuple[int, int] = (32, 32)
    num_classes: int = 3

    @property
    def image_side(self) -> int:
        return self.grid * self.patch

    @property
    def cells(self) -> int:
        return self.grid * self.grid

    @property
    def input_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def output_dim(self) -> int:
        return self.num_classes + 1 + 4

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def config_hash(self) -> int:
        return _config_hash(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@functools.lru_cache(maxsize=64)
def _config_hash(config: ModelConfig) -> int:
    return zlib.crc32(repr(sorted(config.to_dict().items())).encode())


@dataclass(frozen=True, eq=False)
class ParamVec:
    values: np.ndarray
    config_hash: int

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ConfigError("ParamVec values must be 1-D")

    def __len__(self):
        return self.values.size

    def with_values(self, values: np.ndarray) -> "ParamVec":
        return ParamVec(np.asarray(values, dtype=np.float64), self.config_hash)

    def copy(self) -> "ParamVec":
        return ParamVec(self.values.copy(), self.config_hash)


@dataclass
class ForwardOutput:
    """Per-cell detector output for a batch: ``(N, R, K+1)`` and ``(N, R, 4)``."""
    class_probs: np.ndarray
    offsets: np.ndarray


@dataclass
class CellTargets:
    """Cell-aligned targets for a batch.

    ``target_dist`` is always stored as a distribution; hard targets are
    one-hot rows and ``hard`` is set.
    """
    target_dist: np.ndarray    # (N, R, K+1)
    target_offsets: np.ndarray  # (N, R, 4)
    reg_weight: np.ndarray      # (N, R)
    hard: bool = False

    @property
    def hard_classes(self) -> np.ndarray:
        return self.target_dist.argmax(axis=-1)


def check_params(params: ParamVec, config: ModelConfig) -> None:
    if params.config_hash != config.config_hash():
        raise ConfigError("parameter vector bound to a different ModelConfig")
    if params.values.size != config.param_count:
        raise ConfigError(
            f"parameter count {params.values.size} != {config.param_count}")


def unpack(values: np.ndarray, config: ModelConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``(W, b)`` views, ``W`` shaped ``(fan_in, fan_out)``."""
    layers, offset = [], 0
    for fan_in, fan_out in config.layer_shapes():
        w = values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = values[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def init_params(rng: np.random.Generator, config: ModelConfig = ModelConfig()) -> ParamVec:
    chunks = []
    for fan_in, fan_out in config.layer_shapes():
        chunks.append(rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        chunks.append(np.zeros(fan_out))
    return ParamVec(np.concatenate(chunks), config.config_hash())


def zero_params(config: ModelConfig = ModelConfig()) -> ParamVec:
    return ParamVec(np.zeros(config.param_count), config.config_hash())


def to_patches(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N * G*G, patch*patch*C)`` with cells row-major."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    side = config.image_side
    if images.shape[1:] != (side, side, config.channels):
        raise ConfigError(
            f"image shape {images.shape[1:]} does not match grid geometry "
            f"{(side, side, config.channels)}")
    n, g, p = images.shape[0], config.grid, config.patch
    x = images.reshape(n, g, p, g, p, config.channels).transpose(0, 1, 3, 2, 4, 5)
    # fixed centring: pixels in [0, 1] enter the MLP in [-1, 1]
    return 2.0 * x.reshape(n * g * g, config.input_dim) - 1.0


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(params: ParamVec, images: np.ndarray, config: ModelConfig):
    check_params(params, config)
    x = to_patches(images, config)
    (w1, b1), (w2, b2), (w3, b3) = unpack(params.values, config)
    h1 = np.tanh(x @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    out = h2 @ w3 + b3
    return x, h1, h2, out


def forward(params: ParamVec, images: np.ndarray, config: ModelConfig = ModelConfig()) -> ForwardOutput:
    _, _, _, out = _forward_cache(params, images, config)
    k1 = config.num_classes + 1
    n = out.shape[0] // config.cells
    probs = _softmax(out[:, :k1]).reshape(n, config.cells, k1)
    offs = out[:, k1:].reshape(n, config.cells, 4)
    return ForwardOutput(probs, offs)


def smooth_l1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise smooth-L1 (beta 1) and its derivative."""
    ax = np.abs(x)
    value = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    deriv = np.where(ax < 1.0, x, np.sign(x))
    return value, deriv


def _raise_nonfinite(per_cell: np.ndarray, what: str):
    bad = np.flatnonzero(~np.isfinite(per_cell.ravel()))
    if bad.size:
        raise NumericError(f"non-finite {what} at cell {int(bad[0])}", cell=int(bad[0]))


def detection_loss(params: ParamVec, images: np.ndarray, target_dist: np.ndarray,
                   target_offsets: np.ndarray, reg_weight: np.ndarray,
                   config: ModelConfig = ModelConfig(), reg_lambda: float = 1.0,
                   need_grad: bool = True, return_terms: bool = False):
    """Shared cls + weighted smooth-L1 loss, averaged over images.

    Per image: mean over cells of ``-sum_k t_k log p_k`` plus ``reg_lambda`` times
    ``sum_r w_r sl1_r / max(sum_r w_r, 1)`` (the mean over foreground cells
    when weights are 0/1).
    """
    x, h1, h2, out = _forward_cache(params, images, config)
    k1 = config.num_classes + 1
    n, r = target_dist.shape[0], config.cells
    logits = out[:, :k1]
    offs = out[:, k1:]
    z = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - log_z
    t = target_dist.reshape(n * r, k1)
    # 0 * log(0) terms are exactly zero targets; mask to avoid nan from -inf
    ce_cell = -np.where(t > 0, t * logp, 0.0).sum(axis=-1)
    diff = offs - target_offsets.reshape(n * r, 4)
    sl1, dsl1 = smooth_l1(diff)
    w = reg_weight.reshape(n, r)
    norm = np.maximum(w.sum(axis=1), 1.0)               # (n,)
    cell_w = (w / norm[:, None]).reshape(n * r)
    reg_cell = sl1.sum(axis=-1) * cell_w
    _raise_nonfinite(ce_cell + reg_cell, "loss")

    cls_term = ce_cell.sum() / (n * r)
    reg_term = reg_cell.sum() / n
    loss = float(cls_term + reg_lambda * reg_term)
    if not need_grad:
        return (loss, None, (float(cls_term), float(reg_term))) if return_terms else (loss, None)

    p = np.exp(logp)
    g_logits = (p * t.sum(axis=-1, keepdims=True) - t) / (n * r)
    g_offs = reg_lambda * dsl1 * cell_w[:, None] / n
    g_out = np.concatenate([g_logits, g_offs], axis=1)

    (w1, _), (w2, _), (w3, _) = unpack(params.values, config)
    gw3 = h2.T @ g_out
    gb3 = g_out.sum(axis=0)
    g_h2 = (g_out @ w3.T) * (1.0 - h2 * h2)
    gw2 = h1.T @ g_h2
    gb2 = g_h2.sum(axis=0)
    g_h1 = (g_h2 @ w2.T) * (1.0 - h1 * h1)
    gw1 = x.T @ g_h1
    gb1 = g_h1.sum(axis=0)
    grad = np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2, gw3.ravel(), gb3])
    grad_vec = params.with_values(grad)
    if return_terms:
        return loss, grad_vec, (float(cls_term), float(reg_term))
    return loss, grad_vec


def _batched(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images[None] if images.ndim == 3 else images


def sup_loss(params: ParamVec, images: np.ndarray, gt: CellTargets,
             config: ModelConfig = ModelConfig(), reg_lambda: float = 1.0,
             need_grad: bool = True):
    """Supervised loss against ground-truth cell targets."""
    return detection_loss(params, _batched(images), gt.target_dist, gt.target_offsets,
                          gt.reg_weight, config, reg_lambda, need_grad)


def unsup_loss(params: ParamVec, images: np.ndarray, pseudo: CellTargets,
               config: ModelConfig = ModelConfig(), reg_lambda: float = 1.0,
               need_grad: bool = True):
    """Loss against teacher pseudo targets, soft or hard."""
    return detection_loss(params, _batched(images), pseudo.target_dist, pseudo.target_offsets,
                          pseudo.reg_weight, config, reg_lambda, need_grad)


def regul_gate(raw_teacher: ForwardOutput, min_mass: float = 0.1) -> np.ndarray:
    return ((1.0 - raw_teacher.class_probs[..., -1]) > min_mass).astype(np.float64)


def regul_loss(params: ParamVec, image_weak: np.ndarray, raw_teacher: ForwardOutput,
               config: ModelConfig = ModelConfig(), reg_lambda: float = 1.0,
               min_mass: float = 0.1, need_grad: bool = True):
    """Consistency loss against the teacher's raw output on the same weak view."""
    return detection_loss(params, _batched(image_weak), raw_teacher.class_probs,
                          raw_teacher.offsets, regul_gate(raw_teacher, min_mass),
                          config, reg_lambda, need_grad)


def encode_box(box, config: ModelConfig = ModelConfig()) -> tuple[int, np.ndarray]:
    """Cell index and offsets for a normalized ``(cx, cy, w, h)`` box."""
    g = config.grid
    cx, cy, w, h = box
    col = min(int(cx * g), g - 1)
    row = min(int(cy * g), g - 1)
    offs = np.array([cx * g - col, cy * g - row, np.log(w * g), np.log(h * g)])
    return row * g + col, offs


def decode_offsets(offsets: np.ndarray, config: ModelConfig = ModelConfig()) -> np.ndarray:
    """``(..., R, 4)`` offsets -> ``(..., R, 4)`` normalized boxes ``(cx, cy, w, h)``."""
    g = config.grid
    idx = np.arange(config.cells)
    col, row = idx % g, idx // g
    cx = (col + offsets[..., 0]) / g
    cy = (row + offsets[..., 1]) / g
    w = np.exp(np.clip(offsets[..., 2], -20, 20)) / g
    h = np.exp(np.clip(offsets[..., 3], -20, 20)) / g
    return np.stack([cx, cy, w, h], axis=-1)


def gt_targets(boxes_list, classes_list, config: ModelConfig = ModelConfig()) -> CellTargets:
    """Assign each object to the cell holding its box centre.

    A collision keeps the larger box; equal areas fall back to a lexical
    order on ``(class, box)`` so the result never depends on object order.
    """
    n, r, k = len(boxes_list), config.cells, config.num_classes
    dist = np.zeros((n, r, k + 1))
    dist[..., k] = 1.0
    offs = np.zeros((n, r, 4))
    weight = np.zeros((n, r))
    for i, (boxes, classes) in enumerate(zip(boxes_list, classes_list)):
        best: dict[int, tuple] = {}
        for box, cls in zip(boxes, classes):
            cell, enc = encode_box(box, config)
            key = (box[2] * box[3], -cls, tuple(-v for v in box))
            if cell not in best or key > best[cell][0]:
                best[cell] = (key, cls, enc)
        for cell, (_, cls, enc) in best.items():
            dist[i, cell, :] = 0.0
            dist[i, cell, cls] = 1.0
            offs[i, cell] = enc
            weight[i, cell] = 1.0
    return CellTargets(dist, offs, weight, hard=True)


def scene_targets(scenes, config: ModelConfig = ModelConfig()) -> CellTargets:
    return gt_targets([s.boxes for s in scenes], [s.classes for s in scenes], config)
