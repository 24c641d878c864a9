"""Frame sampling, grid layouts and single-image compositing."""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError

IMAGE_SUFFIXES = (".png", ".ppm")


class EmptyVideoError(ValueError):
    """A video or frame sequence has no frames."""


@dataclass
class FrameSequence:
    """Ordered RGB frames, each ``(H, W, 3)`` in [0, 1], plus their source indices."""

    frames: list[np.ndarray]
    source_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.source_indices:
            self.source_indices = list(range(len(self.frames)))
        if len(self.frames) != len(self.source_indices):
            raise ShapeError("frames and source_indices differ in length")
        if any(b < a for a, b in zip(self.source_indices, self.source_indices[1:])):
            raise ValueError("source_indices must be nondecreasing")

    def __len__(self):
        return len(self.frames)


class Layout(enum.Enum):
    VERTICAL_ASCENT = "vertical-ascent"
    VERTICAL_DESCENT = "vertical-descent"
    HORIZONTAL_ASCENT = "horizontal-ascent"
    HORIZONTAL_DESCENT = "horizontal-descent"
    MATRIX_VERTICAL_ASCENT = "matrix-vertical-ascent"
    MATRIX_VERTICAL_DESCENT = "matrix-vertical-descent"
    MATRIX_HORIZONTAL_ASCENT = "matrix-horizontal-ascent"
    MATRIX_HORIZONTAL_DESCENT = "matrix-horizontal-descent"
    MATRIX_RANDOM = "matrix-random"

    @property
    def is_matrix(self) -> bool:
        return self.value.startswith("matrix")


@dataclass(frozen=True)
class ArrangementOrder:
    """How frame indices map to grid cells. ``seed`` only matters for matrix-random."""

    layout: Layout
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @classmethod
    def parse(cls, text: str) -> "ArrangementOrder":
        """Parse ``matrix-horizontal-descent`` or ``matrix-random:SEED``."""
        name, _, seed = text.strip().lower().partition(":")
        try:
            layout = Layout(name)
        except ValueError:
            names = ", ".join(m.value for m in Layout)
            raise ValueError(f"unknown arrangement order {text!r}; expected one of {names}") from None
        return cls(layout, int(seed) if seed else 0)

    def __str__(self):
        if self.layout is Layout.MATRIX_RANDOM:
            return f"{self.layout.value}:{self.seed}"
        return self.layout.value

    @property
    def is_matrix(self) -> bool:
        return self.layout.is_matrix


DEFAULT_ORDER = ArrangementOrder(Layout.MATRIX_HORIZONTAL_DESCENT)


@dataclass
class CompositeImage:
    pixels: np.ndarray  # (R, R, 3)
    layout_used: np.ndarray  # grid of frame indices

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


def sample_evenly(total_frames: int, target: int) -> list[int]:
    """``target`` indices ``floor((i + 0.5) * N / target)``; repeats allowed when N < target."""
    if total_frames < 1:
        raise EmptyVideoError("video has no frames")
    if target < 1:
        raise ValueError("target frame count must be >= 1")
    return [((2 * i + 1) * total_frames) // (2 * target) for i in range(target)]


def upsample_to_square(seq: FrameSequence) -> FrameSequence:
    """Repeat frames evenly until the count is the next perfect square."""
    c = len(seq)
    if c == 0:
        raise EmptyVideoError("cannot up-sample an empty frame sequence")
    n = math.isqrt(c)
    if n * n == c:
        return seq
    s = (n + 1) ** 2
    picks = sample_evenly(c, s)
    return FrameSequence([seq.frames[j] for j in picks], [seq.source_indices[j] for j in picks])


def grid_shape(order: ArrangementOrder, cell_count: int) -> tuple[int, int]:
    if cell_count < 1:
        raise ShapeError("cell count must be >= 1")
    layout = order.layout
    if layout.is_matrix:
        n = math.isqrt(cell_count)
        if n * n != cell_count:
            raise ShapeError(f"{layout.value} needs a perfect-square frame count, got {cell_count}")
        return n, n
    if layout in (Layout.HORIZONTAL_ASCENT, Layout.HORIZONTAL_DESCENT):
        return 1, cell_count
    return cell_count, 1


def layout_indices(order: ArrangementOrder, cell_count: int) -> np.ndarray:
    """Grid whose entry ``[row, col]`` is the frame index placed in that cell."""
    rows, cols = grid_shape(order, cell_count)
    layout = order.layout
    ascending = np.arange(cell_count)
    if layout is Layout.MATRIX_RANDOM:
        rng = np.random.default_rng(order.seed)
        return rng.permutation(cell_count).reshape(rows, cols)
    if layout in (Layout.MATRIX_VERTICAL_ASCENT, Layout.MATRIX_VERTICAL_DESCENT):
        grid = ascending.reshape(cols, rows).T.copy()
    else:
        grid = ascending.reshape(rows, cols)
    if layout.value.endswith("descent"):
        grid = cell_count - 1 - grid
    return grid


def cell_bounds(resolution: int, n: int) -> list[int]:
    """Cell boundaries ``round(k * R / n)`` for k = 0..n, halves rounded up."""
    if n < 1 or resolution < n:
        raise ShapeError(f"resolution {resolution} cannot hold {n} cells")
    return [(2 * k * resolution + n) // (2 * n) for k in range(n + 1)]


@functools.lru_cache(maxsize=256)
def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * in / out - 0.5, clamped to the edge
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    w = (src - lo).astype(np.float32)
    return lo, hi, w


def resize_bilinear(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and no antialiasing.

    Accepts ``(H, W, C)`` or a stack ``(B, H, W, C)``.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be positive")
    frame = np.asarray(frame, dtype=np.float32)
    h, w = frame.shape[-3], frame.shape[-2]
    if (h, w) == (out_h, out_w):
        return frame.copy()
    y0, y1, wy = _axis_weights(h, out_h)
    x0, x1, wx = _axis_weights(w, out_w)
    wx = wx[:, None]
    top = frame[..., y0, :, :]
    bot = frame[..., y1, :, :]
    top = top[..., x0, :] + (top[..., x1, :] - top[..., x0, :]) * wx
    bot = bot[..., x0, :] + (bot[..., x1, :] - bot[..., x0, :]) * wx
    out = top + (bot - top) * wy[:, None, None]
    return np.clip(out, 0.0, 1.0)


@functools.lru_cache(maxsize=64)
def _axis_map(resolution: int, cells: int, n_in: int):
    """Per output pixel along one axis: cell index, source taps and weight."""
    bounds = cell_bounds(resolution, cells)
    cell, lo, hi, w = [], [], [], []
    for k in range(cells):
        a, b, f = _axis_weights(n_in, bounds[k + 1] - bounds[k])
        cell.append(np.full(len(a), k, dtype=np.intp))
        lo.append(a)
        hi.append(b)
        w.append(f)
    return np.concatenate(cell), np.concatenate(lo), np.concatenate(hi), np.concatenate(w)


def _composite_same_size(frames: np.ndarray, grid: np.ndarray, resolution: int) -> np.ndarray:
    # one gather over the frame stack; same arithmetic as resize_bilinear per cell
    rows, cols = grid.shape
    h, w = frames.shape[1:3]
    ry, y0, y1, wy = _axis_map(resolution, rows, h)
    cx, x0, x1, wx = _axis_map(resolution, cols, w)
    f = grid[ry[:, None], cx[None, :]]
    y0, y1, x0, x1 = y0[:, None], y1[:, None], x0[None, :], x1[None, :]
    wx = wx[None, :, None]
    a, b = frames[f, y0, x0], frames[f, y0, x1]
    top = a + (b - a) * wx
    a, b = frames[f, y1, x0], frames[f, y1, x1]
    bot = a + (b - a) * wx
    return np.clip(top + (bot - top) * wy[:, None, None], 0.0, 1.0)


def composite(seq: FrameSequence, order: ArrangementOrder, resolution: int) -> CompositeImage:
    """Tile the frames into one ``resolution`` x ``resolution`` image."""
    s = len(seq)
    if s == 0:
        raise EmptyVideoError("cannot composite an empty frame sequence")
    grid = layout_indices(order, s)
    rows, cols = grid.shape
    ys = cell_bounds(resolution, rows)
    xs = cell_bounds(resolution, cols)
    if len({f.shape for f in seq.frames}) == 1:
        stack = np.asarray(seq.frames, dtype=np.float32)
        return CompositeImage(_composite_same_size(stack, grid, resolution), grid)

    canvas = np.empty((resolution, resolution, 3), dtype=np.float32)
    # mixed sizes: frames sharing a source size and a cell size are resized as one stack
    groups: dict[tuple, list[tuple[int, int]]] = {}
    for r in range(rows):
        for c in range(cols):
            frame = seq.frames[grid[r, c]]
            key = (frame.shape, ys[r + 1] - ys[r], xs[c + 1] - xs[c])
            groups.setdefault(key, []).append((r, c))
    for (_, ch, cw), cells in groups.items():
        stacked = np.stack([seq.frames[grid[r, c]] for r, c in cells])
        resized = resize_bilinear(stacked, ch, cw)
        for (r, c), tile in zip(cells, resized):
            canvas[ys[r] : ys[r + 1], xs[c] : xs[c + 1]] = tile
    return CompositeImage(canvas, grid)


def prepare_frames(seq: FrameSequence, count: int, order: ArrangementOrder) -> FrameSequence:
    """Sample ``count`` frames evenly, then up-sample to a square for matrix orders."""
    picks = sample_evenly(len(seq), count)
    out = FrameSequence([seq.frames[i] for i in picks], [seq.source_indices[i] for i in picks])
    return upsample_to_square(out) if order.is_matrix else out


# ---------------------------------------------------------------- image files


def read_frame(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    from PIL import Image

    data = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, "RGB").save(path)


def frame_files(directory: str | Path) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise EmptyVideoError(f"no PNG/PPM frames in {directory}")
    return files


def load_frames(source: str | Path | list) -> FrameSequence:
    """Load a directory of frames (sorted by filename) or an explicit file list."""
    if isinstance(source, (list, tuple)):
        files = [Path(p) for p in source]
        if not files:
            raise EmptyVideoError("empty frame list")
    else:
        files = frame_files(source)
    return FrameSequence([read_frame(p) for p in files])
