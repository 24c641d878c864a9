import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gridvqa.data import DataError, Task, generate_synthetic
from gridvqa.frames import ArrangementOrder, FrameSequence, Layout
from gridvqa.model import TOY_CONFIG, EncoderConfig, init_weights
from gridvqa.qa import (
    AdamW,
    PreparedExample,
    accuracy,
    batch_loss,
    clip_by_global_norm,
    cross_attention,
    epoch_order,
    evaluate,
    fit,
    global_norm,
    prepare,
    score_candidates,
    train_step,
    video_pixels,
)
from gridvqa.tensor import ContractError, ShapeError, Tensor, grad_check
from gridvqa.text import encode_text, tokenize
from gridvqa.vision import Regime

D4 = EncoderConfig(resolution=8, patch_size=4, dim=4, layers=1, heads=1, text_layers=1)
D8 = EncoderConfig(resolution=32, patch_size=16, dim=8, layers=1, heads=2, text_layers=1)
ORDER = ArrangementOrder(Layout.MATRIX_HORIZONTAL_DESCENT)


def rows(seed, n, d):
    return np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32)


# ---------------------------------------------------------------- cross attention


def test_single_key_ignores_query():
    w = init_weights(D8, 0)
    v = rows(1, 1, 8)
    expected = v @ w["xattn.v.w"].data @ w["xattn.o.w"].data
    for seed in (2, 3):
        out = cross_attention(rows(seed, 1, 8), v, w).data
        np.testing.assert_allclose(out, expected, atol=1e-6)


def test_equal_keys_give_uniform_weights():
    w = init_weights(D8, 0)
    v = np.repeat(rows(1, 1, 8), 5, axis=0)
    _, att = cross_attention(rows(2, 1, 8), v, w, return_weights=True)
    np.testing.assert_allclose(att.data, 0.2, atol=1e-6)


def test_hand_rolled_attention_h1_d4():
    w = init_weights(D4, 9)
    q, v = rows(4, 1, 4).astype(np.float64), rows(5, 2, 4).astype(np.float64)
    g = lambda n: w[n].data.astype(np.float64)  # noqa: E731
    qq, kk, vv = q @ g("xattn.q.w"), v @ g("xattn.k.w"), v @ g("xattn.v.w")
    s = [float(qq[0] @ kk[j]) / 2.0 for j in range(2)]
    e = [math.exp(x - max(s)) for x in s]
    a = [x / sum(e) for x in e]
    expected = (a[0] * vv[0] + a[1] * vv[1]) @ g("xattn.o.w")
    out = cross_attention(q.astype(np.float32), v.astype(np.float32), w).data[0]
    np.testing.assert_allclose(out, expected, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 1000))
def test_attention_weights_are_distributions(n, seed):
    w = init_weights(D8, 1)
    _, att = cross_attention(rows(seed, 3, 8), rows(seed + 1, n, 8) * 5, w, return_weights=True)
    assert np.all(att.data >= 0)
    np.testing.assert_allclose(att.data.sum(axis=-1), 1.0, atol=1e-6)


def test_cross_attention_shape_errors():
    w = init_weights(D8, 0)
    with pytest.raises(ShapeError):
        cross_attention(rows(0, 1, 4), rows(1, 2, 8), w)
    with pytest.raises(ShapeError):
        cross_attention(rows(0, 1, 8), np.zeros((0, 8), np.float32), w)


# ---------------------------------------------------------------- scoring


def test_identical_candidates_uniform():
    w = init_weights(D8, 0)
    s = score_candidates(Tensor(rows(0, 3, 8)), "what is it?", ["a cat"] * 4, w)
    np.testing.assert_allclose(s.probabilities, 0.25, atol=1e-6)


def test_probabilities_sum_to_one():
    w = init_weights(TOY_CONFIG, 0)
    s = score_candidates(Tensor(rows(0, 9, 32)), "what color?", ["red", "green", "blue", "cyan", "black"], w)
    assert s.logits.shape == (5,)
    assert abs(s.probabilities.sum() - 1.0) <= 1e-6


def test_too_few_candidates():
    with pytest.raises(ContractError):
        score_candidates(Tensor(rows(0, 2, 8)), "q", ["only"], init_weights(D8, 0))


def test_logits_match_end_to_end_oracle():
    w = init_weights(D8, 4)
    frames = FrameSequence([np.random.default_rng(i).random((20, 24, 3), dtype=np.float32) for i in range(4)])
    pixels = video_pixels(frames, Regime.SINGLE_GRID, ORDER, 4, 32)
    video = oracles.encode_image(pixels, w)[None]
    cands = ["red", "dark blue", "green"]
    q = np.array([oracles.encode_text(tokenize(f"which color? {c}"), w) for c in cands])
    expected = oracles.logits(video, q, w)
    from gridvqa.vision import encode_image

    got = score_candidates(encode_image(pixels, w)[0], "which color?", cands, w).logits
    np.testing.assert_allclose(got, expected, atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.permutations(range(5)))
def test_scoring_is_permutation_equivariant(perm):
    w = init_weights(D8, 2)
    video = Tensor(rows(7, 3, 8))
    cands = ["red", "blue", "a tall tree", "nothing", "two cars"]
    base = score_candidates(video, "what?", cands, w).probabilities
    permuted = score_candidates(video, "what?", [cands[i] for i in perm], w).probabilities
    np.testing.assert_allclose(permuted, base[list(perm)], atol=1e-6)


def test_joint_encoding_uses_question_and_candidate():
    w = init_weights(D8, 0)
    a = encode_text(tokenize("what color was the last frame? red"), w).data
    b = encode_text(tokenize("what color was the last frame? blue"), w).data
    assert not np.allclose(a, b)


# ---------------------------------------------------------------- training


def toy_batch(config, n=4, frames=4, seed=0, regime=Regime.SINGLE_GRID):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        seq = FrameSequence([rng.random((16, 16, 3), dtype=np.float32) for _ in range(frames)])
        px = video_pixels(seq, regime, ORDER, frames, config.resolution)
        texts = [tokenize(f"what happened? {c}") for c in ["red", "green", "blue", "cyan"]]
        out.append(PreparedExample(f"v{i}", px, texts, i % 4))
    return out


def test_zero_lr_leaves_weights_bit_exact():
    w = init_weights(D8, 0)
    before = {n: t.data.copy() for n, t in w.params.items()}
    opt = AdamW(w, lr=0.0)
    for _ in range(3):
        train_step(toy_batch(D8), w, opt)
    for n, t in w.params.items():
        assert np.array_equal(t.data, before[n]), n


def test_loss_decreases_on_repeated_batch():
    w = init_weights(TOY_CONFIG, 0)
    opt = AdamW(w, lr=1e-3)
    batch = toy_batch(TOY_CONFIG)
    losses = [train_step(batch, w, opt) for _ in range(50)]
    assert losses[-1] < losses[0]


def test_clipped_gradient_norm():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(5, 4)) * 10, rng.normal(size=3) * 10]
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm > 1
    assert global_norm(clipped) <= 1 + 1e-6
    small = [g * 1e-3 for g in grads]
    same, _ = clip_by_global_norm(small, 1.0)
    assert all(np.array_equal(a, b) for a, b in zip(same, small))


def test_train_step_reports_preclip_norm():
    w = init_weights(D8, 0)
    opt = AdamW(w, lr=1e-3)
    train_step(toy_batch(D8), w, opt)
    assert opt.last_grad_norm > 0


def test_adamw_first_step_by_hand():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)

    class W:
        def values(self):
            return [p]

    opt = AdamW(W(), lr=0.1, weight_decay=0.5)
    opt.step([np.array([0.5, -0.25], dtype=np.float32)])
    # bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.5) - 0.1 * np.sign([0.5, -0.25])
    np.testing.assert_allclose(p.data, expected, rtol=1e-6)


def test_bad_gold_index_is_data_error():
    w = init_weights(D8, 0)
    batch = toy_batch(D8, n=2)
    batch[1].answer_index = 4
    with pytest.raises(DataError, match="v1"):
        batch_loss(batch, w, Regime.SINGLE_GRID)


def test_train_step_bit_reproducible():
    def run():
        w = init_weights(D8, 3)
        opt = AdamW(w, lr=1e-3)
        losses = [train_step(toy_batch(D8, seed=s), w, opt) for s in range(3)]
        return losses, [t.data.copy() for t in w.values()]

    (la, wa), (lb, wb) = run(), run()
    assert la == lb
    assert all(np.array_equal(a, b) for a, b in zip(wa, wb))


def test_mixed_candidate_counts_are_masked():
    w = init_weights(D8, 0)
    batch = toy_batch(D8, n=2)
    batch[0].texts = batch[0].texts[:2]
    batch[0].answer_index = 1
    loss = batch_loss(batch, w, Regime.SINGLE_GRID).item()
    solo = [batch_loss([b], w, Regime.SINGLE_GRID).item() for b in batch]
    assert abs(loss - np.mean(solo)) <= 1e-5


@pytest.mark.parametrize("regime", [Regime.PER_FRAME, Regime.CONCAT_PATCH], ids=lambda r: r.value)
def test_loss_gradient_other_regimes(regime):
    w = init_weights(D8, 1)
    batch = toy_batch(D8, n=2, frames=2, regime=regime)
    names = ["vision.patch.w", "vision.frame", "vision.blocks.0.attn.qkv.w", "xattn.k.w", "xattn.o.w", "tau"]
    assert grad_check(lambda: batch_loss(batch, w, regime), [w[n] for n in names]) <= 1e-3


# ---------------------------------------------------------------- evaluation


@pytest.fixture(scope="module")
def chance_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("chance")
    examples = generate_synthetic(Task.LAST_COLOR, 200, out, seed=11)
    return [prepare(ex, Regime.SINGLE_GRID, ORDER, 9, 32) for ex in examples]


def test_untrained_model_near_chance(chance_set):
    acc = evaluate(chance_set, init_weights(TOY_CONFIG, 0), Regime.SINGLE_GRID)
    assert 0.15 <= acc <= 0.35


def test_duplicated_dataset_same_accuracy(chance_set):
    w = init_weights(TOY_CONFIG, 0)
    assert evaluate(chance_set, w, Regime.SINGLE_GRID) == evaluate(chance_set + chance_set, w, Regime.SINGLE_GRID)


def test_oracle_scores_give_full_accuracy():
    gold = [0, 3, 1, 2, 2]
    probs = np.eye(4)[gold]
    assert accuracy(probs, gold) == 1.0
    assert accuracy(np.full((5, 4), 0.25), gold) == 0.2  # ties go to the first candidate
    with pytest.raises(ContractError):
        accuracy(np.zeros((0, 4)), [])


def test_epoch_order_is_seeded_permutation():
    a = epoch_order(10, 3, 0)
    assert sorted(a.tolist()) == list(range(10))
    assert np.array_equal(a, epoch_order(10, 3, 0))
    assert not np.array_equal(a, epoch_order(10, 3, 1))


def test_fit_reduces_loss_and_is_deterministic():
    def run():
        w = init_weights(D8, 0)
        return fit(toy_batch(D8, n=8), w, Regime.SINGLE_GRID, epochs=6, batch_size=4, lr=3e-3, seed=1)

    a, b = run(), run()
    assert a == b
    assert a[-1] < a[0]
