"""Teacher output -> student targets: weak-label refinement, sharpening, thresholding."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nnet import CellTargets, ForwardOutput

MODES = ("ss-soft", "ss-hard", "ws-soft", "ws-hard", "raw")


class UsageError(ValueError):
    pass


class DegenerateSharpenWarning(RuntimeWarning):
    pass


@dataclass
class PseudoLabelSet:
    """Per-cell pseudo labels; ``targets`` is ready for ``unsup_loss``.

    For ``raw`` mode ``output`` is the teacher output itself, untouched.
    """
    mode: str
    targets: CellTargets
    confidence: np.ndarray
    output: ForwardOutput | None = None

    @property
    def kept(self) -> np.ndarray:
        return self.targets.reg_weight > 0


def refine_weak(probs: np.ndarray, weak_label) -> np.ndarray:
    """Zero out probabilities of classes absent from the weak label.

    The last entry (background) is never masked and nothing is renormalized.
    """
    probs = np.asarray(probs, dtype=np.float64)
    keep = np.zeros(probs.shape[-1], dtype=bool)
    keep[-1] = True
    for k in weak_label:
        keep[int(k)] = True
    return np.where(keep, probs, 0.0)


def sharpen(probs: np.ndarray, T: float = 0.5) -> np.ndarray:
    """Temperature sharpening ``p^(1/T) / sum p^(1/T)`` along the last axis.

    Rows with zero total mass come back as a point mass on background.
    """
    if T <= 0:
        raise ValueError("temperature must be positive")
    probs = np.asarray(probs, dtype=np.float64)
    # work in log space so tiny probabilities at small T do not underflow to 0/0
    with np.errstate(divide="ignore"):
        logp = np.log(probs) / T
    m = logp.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    e = np.exp(logp - m)
    total = e.sum(axis=-1, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)
    if empty.any():
        warnings.warn("sharpen got an all-zero distribution; using background",
                      DegenerateSharpenWarning, stacklevel=2)
        bg = np.zeros(probs.shape[-1])
        bg[-1] = 1.0
        out = np.where(empty, bg, out)
    return out


def hard_threshold(output: ForwardOutput, tau: float = 0.8,
                   probs: np.ndarray | None = None) -> PseudoLabelSet:
    """Keep a cell iff its best foreground probability reaches ``tau``.

    ``probs`` overrides ``output.class_probs`` (used after refinement).
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    probs = output.class_probs if probs is None else probs
    k = probs.shape[-1] - 1
    fg = probs[..., :k]
    best = fg.max(axis=-1)
    cls = fg.argmax(axis=-1)
    keep = best >= tau
    dist = np.zeros_like(probs)
    np.put_along_axis(dist, np.where(keep, cls, k)[..., None], 1.0, axis=-1)
    weight = keep.astype(np.float64)
    offsets = np.where(keep[..., None], output.offsets, 0.0)
    confidence = np.where(keep, best, 0.0)
    return PseudoLabelSet("hard", CellTargets(dist, offsets, weight, hard=True), confidence)


def _soft(output: ForwardOutput, probs: np.ndarray, T: float, mode: str) -> PseudoLabelSet:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSharpenWarning)
        dist = sharpen(probs, T)
    confidence = 1.0 - dist[..., -1]
    targets = CellTargets(dist, output.offsets.copy(), confidence.copy(), hard=False)
    return PseudoLabelSet(mode, targets, confidence)


def build_targets(output: ForwardOutput, mode: str = "ss-soft", weak_label=None,
                  tau: float = 0.8, T: float = 0.5) -> PseudoLabelSet:
    """Compose refinement (ws-* only) with the soft or hard post-processing.

    ``weak_label`` is one set per image of the batch.
    """
    if mode not in MODES:
        raise UsageError(f"unknown pseudo-label mode {mode!r}")
    if mode == "raw":
        n_cells = output.class_probs.shape[:-1]
        targets = CellTargets(output.class_probs, output.offsets, np.ones(n_cells))
        return PseudoLabelSet("raw", targets, 1.0 - output.class_probs[..., -1], output=output)

    probs = output.class_probs
    if mode.startswith("ws"):
        if weak_label is None:
            raise UsageError(f"mode {mode} needs weak labels")
        if isinstance(weak_label, (set, frozenset)):
            weak_label = [weak_label]
        if len(weak_label) != probs.shape[0]:
            raise UsageError("one weak label per image is required")
        probs = np.stack([refine_weak(p, wl) for p, wl in zip(probs, weak_label)])

    if mode.endswith("hard"):
        pls = hard_threshold(output, tau, probs=probs)
        pls.mode = mode
        return pls
    return _soft(output, probs, T, mode)
