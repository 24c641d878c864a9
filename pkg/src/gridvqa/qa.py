"""Question-video cross-attention, multi-choice scoring and training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import DataError, QAExample
from .frames import ArrangementOrder, Layout, composite, prepare_frames
from .model import TAU_RANGE, ModelWeights
from .tensor import ContractError, ShapeError, Tensor
from .text import encode_token_batch, tokenize
from .vision import Regime, VideoRepresentation, encode_video_batch, resize_frames

COSINE_EPS = 1e-12


@dataclass
class ChoiceScores:
    logits: np.ndarray
    probabilities: np.ndarray


@dataclass
class PreparedExample:
    """Model-ready pixels plus tokenised question+candidate texts."""

    id: str
    pixels: np.ndarray  # (R, R, 3) composite or (n, R, R, 3) frames
    texts: list[list[int]]
    answer_index: int


def joint_text(question: str, candidate: str) -> str:
    return f"{question} {candidate}"


def video_pixels(frames, regime: Regime, order: ArrangementOrder, count: int, resolution: int) -> np.ndarray:
    """Sample ``count`` frames and lay them out for ``regime``."""
    if regime is Regime.SINGLE_GRID:
        return composite(prepare_frames(frames, count, order), order, resolution).pixels
    picked = prepare_frames(frames, count, ArrangementOrder(Layout.HORIZONTAL_ASCENT))
    return resize_frames(picked, resolution)


def prepare(example: QAExample, regime: Regime, order: ArrangementOrder, count: int, resolution: int,
            frames=None) -> PreparedExample:
    if not 0 <= example.answer_index < len(example.candidates):
        raise DataError(f"example {example.id!r}: answer_index {example.answer_index} out of range")
    frames = frames if frames is not None else example.load_frames()
    pixels = video_pixels(frames, regime, order, count, resolution)
    texts = [tokenize(joint_text(example.question, c)) for c in example.candidates]
    return PreparedExample(example.id, pixels, texts, example.answer_index)


def cross_attention(q: Tensor, v: Tensor, weights: ModelWeights, return_weights: bool = False):
    """Multi-head attention with question rows as queries, video rows as keys and values.

    ``q`` is ``(..., K, d)`` and ``v`` is ``(..., n, d)``; the result is
    ``(..., K, d)``.
    """
    q, v = T.as_tensor(q), T.as_tensor(v)
    d, heads = weights.config.dim, weights.config.heads
    if q.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"cross_attention expects width {d}, got {q.shape} and {v.shape}")
    if v.shape[-2] < 1:
        raise ShapeError("cross_attention needs at least one key")
    p = weights.params
    qh = nn.split_heads(T.matmul(q, p["xattn.q.w"]), heads)
    kh = nn.split_heads(T.matmul(v, p["xattn.k.w"]), heads)
    vh = nn.split_heads(T.matmul(v, p["xattn.v.w"]), heads)
    out, att = nn.attention(qh, kh, vh)
    out = T.matmul(nn.merge_heads(out), p["xattn.o.w"])
    return (out, att) if return_weights else out


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis."""
    dot = T.sum(a * b, axis=-1)
    na = T.sum(a * a, axis=-1)
    nb = T.sum(b * b, axis=-1)
    return dot / T.sqrt(na * nb + COSINE_EPS)


def logits_from(video: Tensor, question: Tensor, weights: ModelWeights) -> Tensor:
    """Logits ``(..., K)``: cosine(attended video, question) / temperature."""
    attended = cross_attention(question, video, weights)
    tau = T.clamp(weights["tau"], *TAU_RANGE)
    return cosine(attended, question) / tau


def score_candidates(frames_rep: VideoRepresentation | Tensor, question: str, candidates: list[str],
                     weights: ModelWeights) -> ChoiceScores:
    """Score each candidate as ``question + " " + candidate`` against the video rows."""
    if not 2 <= len(candidates) <= 8:
        raise ContractError(f"need 2-8 candidates, got {len(candidates)}")
    rows = frames_rep.rows if isinstance(frames_rep, VideoRepresentation) else T.as_tensor(frames_rep)
    texts = [tokenize(joint_text(question, c)) for c in candidates]
    qh = encode_token_batch(texts, weights)
    logits = logits_from(rows, qh, weights).data
    return ChoiceScores(logits, T.softmax_rows(Tensor(logits)).data)


def _batch_logits(items: list[PreparedExample], weights: ModelWeights, regime: Regime) -> tuple[Tensor, np.ndarray]:
    """Logits ``(B, K_max)`` and an additive mask hiding padded candidates."""
    kmax = max(len(it.texts) for it in items)
    texts, mask = [], np.zeros((len(items), kmax), dtype=np.float32)
    for b, it in enumerate(items):
        pad = kmax - len(it.texts)
        texts.extend(it.texts + [it.texts[0]] * pad)
        if pad:
            mask[b, kmax - pad :] = nn.MASK_VALUE
    video = encode_video_batch(np.stack([it.pixels for it in items]), regime, weights)
    qh = encode_token_batch(texts, weights).reshape(len(items), kmax, weights.config.dim)
    return logits_from(video, qh, weights), mask


def batch_loss(items: list[PreparedExample], weights: ModelWeights, regime: Regime) -> Tensor:
    """Mean cross-entropy of the gold candidates."""
    for it in items:
        if not 0 <= it.answer_index < len(it.texts):
            raise DataError(f"example {it.id!r}: answer_index {it.answer_index} out of range")
    logits, mask = _batch_logits(items, weights, regime)
    logp = T.log_softmax(logits + mask)
    gold = logp[np.arange(len(items)), np.array([it.answer_index for it in items])]
    return -T.mean(gold)


class AdamW:
    """AdamW with decoupled weight decay."""

    def __init__(self, weights: ModelWeights, lr: float = 1e-6, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = weights.values()
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"t": np.array([self.t]), **{f"m{i}": a for i, a in enumerate(self.m)},
                **{f"v{i}": a for i, a in enumerate(self.v)}}


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        grads = [g * scale for g in grads]
    return grads, norm


def train_step(batch: list[PreparedExample], weights: ModelWeights, optimizer: AdamW,
               regime: Regime = Regime.SINGLE_GRID, max_grad_norm: float = 1.0) -> float:
    """One AdamW step on the batch; returns the batch mean loss before the update."""
    params = weights.values()
    with T.Tape() as tape:
        loss = batch_loss(batch, weights, regime)
    grads = tape.gradient(loss, params)
    grads, norm = clip_by_global_norm(grads, max_grad_norm)
    optimizer.last_grad_norm = norm
    optimizer.step(grads)
    return loss.item()


def predict(items: list[PreparedExample], weights: ModelWeights, regime: Regime,
            batch_size: int = 64) -> np.ndarray:
    """Candidate probabilities ``(N, K_max)``, padded candidates get 0."""
    out = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        logits, mask = _batch_logits(chunk, weights, regime)
        out.append(T.softmax_rows(Tensor(logits.data + mask)).data)
    width = max(o.shape[1] for o in out)
    return np.concatenate([np.pad(o, ((0, 0), (0, width - o.shape[1]))) for o in out])


def accuracy(probabilities: np.ndarray, gold: list[int]) -> float:
    """Fraction of rows whose argmax (first on ties) is the gold index."""
    if len(gold) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    return float(np.mean(np.argmax(probabilities, axis=1) == np.asarray(gold)))


def evaluate(items: list[PreparedExample], weights: ModelWeights, regime: Regime) -> float:
    return accuracy(predict(items, weights, regime), [it.answer_index for it in items])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def fit(items: list[PreparedExample], weights: ModelWeights, regime: Regime, epochs: int, batch_size: int,
        lr: float, seed: int = 0, weight_decay: float = 0.01, max_grad_norm: float = 1.0,
        eps: float = 1e-8, log=None) -> list[float]:
    """Train for ``epochs`` over seeded per-epoch shuffles; returns mean loss per epoch."""
    opt = AdamW(weights, lr=lr, eps=eps, weight_decay=weight_decay)
    history = []
    for epoch in range(epochs):
        order = epoch_order(len(items), seed, epoch)
        losses = []
        for start in range(0, len(items), batch_size):
            batch = [items[i] for i in order[start : start + batch_size]]
            losses.append(train_step(batch, weights, opt, regime, max_grad_norm))
        history.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, history[-1])
    return history
