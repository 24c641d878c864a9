"""Analytical FLOP model and timing/memory harness for the encoding regimes.

FLOP convention: one multiply-add is 2 FLOPs. Only matmul terms enter the
exact count; softmax, layer norm and GELU are estimated separately.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .frames import ArrangementOrder, DEFAULT_ORDER, FrameSequence
from .model import EncoderConfig, init_weights
from .qa import AdamW, PreparedExample, evaluate, fit, prepare, train_step, video_pixels, predict
from .tensor import ContractError
from .text import tokenize
from .vision import Regime, encode_video_batch

COST_HEADER = [
    "regime", "frame_count", "analytic_flops", "measured_flops", "peak_activation_floats",
    "wall_clock_ms", "speedup", "memory_ratio",
]
SWEEP_HEADER = ["regime", "frame_count", "accuracy", "wall_clock_ms"]
MAX_GRID_FRAMES = 25
BENCH_QUESTION = "what happened in the video?"
BENCH_CANDIDATES = ["a car turned left", "a person crossed", "nothing moved", "it started raining"]


def flops_breakdown(config: EncoderConfig, seq_len: int, passes: int = 1) -> dict[str, int]:
    """Per-term matmul FLOPs over all passes, plus rough elementwise estimates."""
    if seq_len < 1 or passes < 1:
        raise ContractError("sequence length and passes must be >= 1")
    s, d, L = seq_len, config.dim, config.layers
    hidden = config.mlp_ratio * d
    terms = {
        "patch_projection": 2 * (s - 1) * config.patch_dim * d,
        "qkv_projection": L * 2 * s * d * 3 * d,
        "attention_scores": L * 2 * s * s * d,
        "attention_weighted_sum": L * 2 * s * s * d,
        "attention_output": L * 2 * s * d * d,
        "mlp": L * 2 * 2 * s * d * hidden,
    }
    terms = {k: passes * v for k, v in terms.items()}
    terms["matmul_total"] = sum(terms.values())
    # not matmuls: excluded from the exact check
    terms["softmax_estimate"] = passes * L * 5 * config.heads * s * s
    terms["layer_norm_estimate"] = passes * (2 * L + 1) * 5 * s * d
    terms["gelu_estimate"] = passes * L * 8 * s * hidden
    return terms


def flops_encoder(config: EncoderConfig, seq_len: int, passes: int = 1) -> int:
    """Matmul FLOPs of ``passes`` encoder passes over ``seq_len`` tokens.

    Per layer: ``8 s d^2`` (QKV and output projections) + ``4 s^2 d``
    (scores and weighted sum) + ``4 r s d^2`` (MLP, ratio r). Plus the patch
    projection ``2 (s - 1) 3P^2 d``. The class token is not projected.
    """
    return flops_breakdown(config, seq_len, passes)["matmul_total"]


def cell_count(regime: Regime, frame_count: int) -> int:
    """Frames actually encoded: grid regimes round up to the next square."""
    if regime is Regime.SINGLE_GRID:
        return (math.isqrt(frame_count - 1) + 1) ** 2
    return frame_count


def regime_shape(config: EncoderConfig, regime: Regime, frame_count: int) -> tuple[int, int]:
    """``(sequence length, passes)`` needed to encode one video."""
    m = config.patches
    if regime is Regime.PER_FRAME:
        return 1 + m, frame_count
    if regime is Regime.CONCAT_PATCH:
        return 1 + frame_count * m, 1
    return 1 + m, 1


def regime_flops(config: EncoderConfig, regime: Regime, frame_count: int) -> int:
    return flops_encoder(config, *regime_shape(config, regime, frame_count))


@dataclass
class CostReport:
    regime: Regime
    frame_count: int
    analytic_flops: int
    measured_flops: int
    peak_activation_floats: int
    wall_clock_ms: float
    speedup_vs_multiframe: float = 1.0
    memory_ratio_vs_multiframe: float = 1.0
    train_ms: float = 0.0
    infer_ms: float = 0.0
    passes: int = 0
    timings_ms: dict = field(default_factory=dict, repr=False)

    def row(self) -> list:
        return [
            self.regime.value, self.frame_count, self.analytic_flops, self.measured_flops,
            self.peak_activation_floats, f"{self.wall_clock_ms:.3f}",
            f"{self.speedup_vs_multiframe:.4f}", f"{self.memory_ratio_vs_multiframe:.4f}",
        ]


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - numpy without threadpoolctl
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def _bench_frames(config: EncoderConfig, frame_count: int, seed: int) -> FrameSequence:
    rng = np.random.default_rng(seed)
    r = config.resolution
    return FrameSequence([rng.random((r, r, 3), dtype=np.float32) for _ in range(frame_count)])


def _timed(fn, trials: int) -> list[float]:
    fn()  # warm-up, discarded
    out = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        out.append((time.perf_counter() - start) * 1e3)
    return out


def measure(regime: Regime, config: EncoderConfig, frame_count: int, trials: int = 5, seed: int = 0,
            order: ArrangementOrder = DEFAULT_ORDER, baseline: CostReport | None = None) -> CostReport:
    """Time one inference pass and one training step for a single video.

    The per-frame regime runs its frames as one batch. Ratios are taken
    against a per-frame report at the same frame count (measured here when
    ``baseline`` is not given).
    """
    if trials < 5:
        raise ContractError("measure needs at least 5 trials")
    if frame_count < 1:
        raise ContractError("frame_count must be >= 1")
    weights = init_weights(config, seed)
    frames = _bench_frames(config, frame_count, seed)
    texts = [tokenize(f"{BENCH_QUESTION} {c}") for c in BENCH_CANDIDATES]
    opt = AdamW(weights, lr=1e-6)

    def build() -> PreparedExample:
        pixels = video_pixels(frames, regime, order, frame_count, config.resolution)
        return PreparedExample("bench", pixels, texts, 0)

    def infer():
        predict([build()], weights, regime)

    def train():
        train_step([build()], weights, opt, regime)

    with _single_thread():
        item = build()
        with T.Meter() as flop_meter:
            encode_video_batch(item.pixels[None], regime, weights)
        with T.Meter() as mem_meter:
            train_step([item], weights, opt, regime)
        del item
        infer_ms = _timed(infer, trials)
        train_ms = _timed(train, trials)

    infer_med = statistics.median(infer_ms)
    train_med = statistics.median(train_ms)
    report = CostReport(
        regime=regime,
        frame_count=frame_count,
        analytic_flops=regime_flops(config, regime, frame_count),
        measured_flops=flop_meter.flops,
        peak_activation_floats=mem_meter.peak,
        wall_clock_ms=(infer_med + train_med) / 2.0,
        train_ms=train_med,
        infer_ms=infer_med,
        passes=flop_meter.passes,
        timings_ms={"infer": infer_ms, "train": train_ms},
    )
    if regime is not Regime.PER_FRAME:
        if baseline is None:
            baseline = measure(Regime.PER_FRAME, config, frame_count, trials, seed, order)
        report.speedup_vs_multiframe = baseline.wall_clock_ms / report.wall_clock_ms
        report.memory_ratio_vs_multiframe = report.peak_activation_floats / baseline.peak_activation_floats
    return report


def measure_all(config: EncoderConfig, frame_counts: list[int], trials: int = 5, seed: int = 0,
                regimes=tuple(Regime)) -> list[CostReport]:
    """Reports for every regime and frame count, sorted by (regime, frame_count)."""
    reports = []
    for n in frame_counts:
        base = measure(Regime.PER_FRAME, config, n, trials, seed)
        for regime in regimes:
            if regime is Regime.PER_FRAME:
                reports.append(base)
            elif regime is Regime.CONCAT_PATCH and n > config.max_frames:
                continue
            else:
                reports.append(measure(regime, config, n, trials, seed, baseline=base))
    return sorted(reports, key=lambda r: (r.regime.value, r.frame_count))


def cost_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COST_HEADER)
    for r in sorted(reports, key=lambda r: (r.regime.value, r.frame_count)):
        writer.writerow(r.row())
    return buf.getvalue()


def cost_table(reports: list[CostReport]) -> str:
    head = f"{'regime':<13}{'frames':>7}{'GFLOPs':>10}{'peak floats':>14}{'infer ms':>10}{'train ms':>10}{'speedup':>9}{'mem':>7}"
    lines = [head, "-" * len(head)]
    for r in sorted(reports, key=lambda r: (r.regime.value, r.frame_count)):
        lines.append(
            f"{r.regime.value:<13}{r.frame_count:>7}{r.analytic_flops / 1e9:>10.3f}{r.peak_activation_floats:>14,}"
            f"{r.infer_ms:>10.1f}{r.train_ms:>10.1f}{r.speedup_vs_multiframe:>9.2f}{r.memory_ratio_vs_multiframe:>7.2f}"
        )
    lines.append("wall_clock_ms is the unweighted mean of the median inference and training-step times")
    return "\n".join(lines)


# ---------------------------------------------------------------- frame-count sweep


@dataclass
class SweepResult:
    rows: dict[Regime, list[tuple[int, float, float]]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for regime in sorted(self.rows, key=lambda r: r.value):
            for count, acc, ms in sorted(self.rows[regime]):
                writer.writerow([regime.value, count, f"{acc:.4f}", f"{ms:.3f}"])
        return buf.getvalue()


def bench_sweep(frame_counts: list[int], regimes, train_videos: list, eval_videos: list,
                config: EncoderConfig, epochs: int = 2, batch_size: int = 16, lr: float = 1e-3,
                seed: int = 0, order: ArrangementOrder = DEFAULT_ORDER, trials: int = 5) -> SweepResult:
    """Train and evaluate each (regime, frame count) with everything else fixed.

    ``train_videos``/``eval_videos`` are ``(QAExample, FrameSequence)`` pairs.
    Wall clock is the median time to lay out and score the whole eval set,
    starting from decoded frames.
    """
    counts = sorted(set(frame_counts))
    if counts != list(frame_counts):
        raise ContractError("frame counts must be strictly increasing")
    result = SweepResult()
    for regime in regimes:
        if regime is Regime.SINGLE_GRID and counts and counts[-1] > MAX_GRID_FRAMES:
            raise ContractError(f"single-grid sweeps are limited to {MAX_GRID_FRAMES} frames")
        rows = []
        for count in counts:
            res = config.resolution

            def prep(pairs):
                return [prepare(ex, regime, order, count, res, frames=f) for ex, f in pairs]

            weights = init_weights(config, seed)
            fit(prep(train_videos), weights, regime, epochs, batch_size, lr, seed)
            with _single_thread():
                acc = evaluate(prep(eval_videos), weights, regime)
                ms = statistics.median(_timed(lambda: predict(prep(eval_videos), weights, regime), trials))
            rows.append((count, acc, ms))
        result.rows[regime] = rows
    return result
