"""Toy Vision Transformer and the three video encoding regimes.

* per-frame: one encoder pass per frame, one pooled row per frame
* concat-patch: every frame's patches in one long sequence, one pooled row
* single-grid: frames composited into one image, one pass, one pooled row
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .frames import CompositeImage, EmptyVideoError, FrameSequence, resize_bilinear
from .model import EncoderConfig, ModelWeights
from .tensor import ShapeError, Tensor


class CapacityError(ValueError):
    """Input sequence is longer than the encoder was configured for."""


class Regime(enum.Enum):
    PER_FRAME = "per-frame"
    CONCAT_PATCH = "concat-patch"
    SINGLE_GRID = "single-grid"

    @classmethod
    def parse(cls, text: str) -> "Regime":
        try:
            return cls(text.strip().lower())
        except ValueError:
            names = ", ".join(r.value for r in cls)
            raise ValueError(f"unknown regime {text!r}; expected one of {names}") from None


@dataclass
class VideoRepresentation:
    rows: Tensor  # (n, d)
    regime: Regime


def patchify(image, patch_size: int) -> Tensor:
    """Split ``(..., R, R, 3)`` into ``(..., m, 3 P^2)`` row-major patch rows."""
    image = T.as_tensor(image)
    *lead, h, w, c = image.shape
    if h != w or h % patch_size:
        raise ShapeError(f"image {h}x{w} cannot be tiled by {patch_size}x{patch_size} patches")
    g = h // patch_size
    x = image.reshape(*lead, g, patch_size, g, patch_size, c)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, g * g, patch_size * patch_size * c)


def _check_image(image: Tensor, config: EncoderConfig) -> None:
    r = config.resolution
    if image.shape[-3:] != (r, r, 3):
        raise ShapeError(f"expected {r}x{r}x3 image(s), got {image.shape}")


def _run_blocks(x: Tensor, p: dict, config: EncoderConfig) -> Tensor:
    for i in range(config.layers):
        x = nn.block(x, p, f"vision.blocks.{i}", config.heads)
    return T.layer_norm(x, p["vision.ln_f.g"], p["vision.ln_f.b"])


def encode_image(image, weights: ModelWeights) -> tuple[Tensor, Tensor]:
    """Encode one image ``(R, R, 3)`` or a batch ``(B, R, R, 3)``.

    Returns ``(pooled, patch_reps)`` with shapes ``(..., 1, d)`` and
    ``(..., m, d)``; pooled is the final class-token state. Each image in a
    batch counts as one forward pass.
    """
    config, p = weights.config, weights.params
    image = T.as_tensor(image)
    _check_image(image, config)
    lead = image.shape[:-3]
    T.count_pass(int(np.prod(lead)) if lead else 1)

    tokens = nn.linear(patchify(image, config.patch_size), p["vision.patch.w"], p["vision.patch.b"])
    cls = p["vision.cls"] + p["vision.pos"][:1]
    if lead:
        cls = T.mul(cls, np.ones((*lead, 1, 1), dtype=cls.data.dtype))
    x = T.concat([cls, tokens + p["vision.pos"][1:]], axis=-2)
    x = _run_blocks(x, p, config)
    return x[..., :1, :], x[..., 1:, :]


def resize_frames(seq: FrameSequence, resolution: int) -> np.ndarray:
    """Stack frames as ``(n, R, R, 3)``, resizing any that are not R x R."""
    if len(seq) == 0:
        raise EmptyVideoError("empty frame sequence")
    return np.stack([resize_bilinear(f, resolution, resolution) for f in seq.frames])


def _frames_array(frames, config: EncoderConfig) -> np.ndarray:
    if isinstance(frames, FrameSequence):
        return resize_frames(frames, config.resolution)
    arr = np.asarray(frames)
    if arr.ndim != 4 or len(arr) == 0:
        raise EmptyVideoError("expected a non-empty (n, R, R, 3) frame stack")
    return arr


def encode_per_frame(frames, weights: ModelWeights, batched: bool = False) -> VideoRepresentation:
    """One encoder pass per frame; row i is frame i's pooled vector.

    ``batched`` runs all frames as one batch: same passes and FLOPs, fewer
    Python round trips.
    """
    arr = _frames_array(frames, weights.config)
    if batched:
        pooled, _ = encode_image(arr, weights)
        rows = pooled.reshape(len(arr), weights.config.dim)
    else:
        rows = T.concat([encode_image(f, weights)[0] for f in arr], axis=0)
    return VideoRepresentation(rows, Regime.PER_FRAME)


def concat_patch_tokens(frames: Tensor, weights: ModelWeights) -> Tensor:
    """Token sequence ``(..., 1 + n m, d)`` for the concatenated-patch regime."""
    config, p = weights.config, weights.params
    *lead, n, _, _, _ = frames.shape
    if n > config.max_frames:
        raise CapacityError(
            f"{n} frames give sequence length {1 + n * config.patches}, "
            f"maximum is {config.max_sequence}"
        )
    tokens = nn.linear(patchify(frames, config.patch_size), p["vision.patch.w"], p["vision.patch.b"])
    # per-frame positions reused for every frame, plus a learned frame-index embedding
    tokens = tokens + p["vision.pos"][1:] + p["vision.frame"][:n].reshape(n, 1, config.dim)
    tokens = tokens.reshape(*lead, n * config.patches, config.dim)
    cls = p["vision.cls"] + p["vision.pos"][:1]
    if lead:
        cls = T.mul(cls, np.ones((*lead, 1, 1), dtype=cls.data.dtype))
    return T.concat([cls, tokens], axis=-2)


def encode_concat_patches(frames, weights: ModelWeights) -> VideoRepresentation:
    """Single pass over all frames' patches with one class token."""
    arr = T.as_tensor(_frames_array(frames, weights.config))
    _check_image(arr, weights.config)
    T.count_pass(1)
    x = _run_blocks(concat_patch_tokens(arr, weights), weights.params, weights.config)
    return VideoRepresentation(x[:1, :], Regime.CONCAT_PATCH)


def encode_single_grid(image: CompositeImage, weights: ModelWeights) -> VideoRepresentation:
    """One encoder pass over the grid composite."""
    if image.resolution != weights.config.resolution:
        raise ShapeError(
            f"composite resolution {image.resolution} != encoder resolution {weights.config.resolution}"
        )
    pooled, _ = encode_image(image.pixels, weights)
    return VideoRepresentation(pooled, Regime.SINGLE_GRID)


def encode_video_batch(pixels, regime: Regime, weights: ModelWeights) -> Tensor:
    """Batched video encoding used for training and evaluation.

    ``pixels`` is ``(B, R, R, 3)`` composites for single-grid and
    ``(B, n, R, R, 3)`` frame stacks otherwise. Returns ``(B, rows, d)``.
    """
    config = weights.config
    x = T.as_tensor(pixels)
    _check_image(x, config)
    if regime is Regime.SINGLE_GRID:
        pooled, _ = encode_image(x, weights)
        return pooled
    b, n = x.shape[:2]
    if regime is Regime.PER_FRAME:
        pooled, _ = encode_image(x.reshape(b * n, *x.shape[2:]), weights)
        return pooled.reshape(b, n, config.dim)
    T.count_pass(b)
    h = _run_blocks(concat_patch_tokens(x, weights), weights.params, config)
    return h[:, :1, :]
