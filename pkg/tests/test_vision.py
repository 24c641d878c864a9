import numpy as np
import pytest

import oracles
from gridvqa import tensor as T
from gridvqa.frames import ArrangementOrder, FrameSequence, Layout, composite
from gridvqa.model import EncoderConfig, init_weights
from gridvqa.tensor import ShapeError, grad_check
from gridvqa.vision import (
    CapacityError,
    Regime,
    encode_concat_patches,
    encode_image,
    encode_per_frame,
    encode_single_grid,
    encode_video_batch,
    patchify,
)

TINY = EncoderConfig(resolution=32, patch_size=16, dim=8, layers=1, heads=1, text_layers=1)
SMALL = EncoderConfig(resolution=16, patch_size=8, dim=8, layers=1, heads=2, text_layers=1, max_frames=4)


def rand_image(seed, r=32):
    return np.random.default_rng(seed).random((r, r, 3), dtype=np.float32)


def test_patchify_shapes_and_tiling():
    img = rand_image(0)
    patches = patchify(img, 16).data
    assert patches.shape == (4, 768)
    back = patches.reshape(2, 2, 16, 16, 3).transpose(0, 2, 1, 3, 4).reshape(32, 32, 3)
    assert np.array_equal(back, img)
    assert patchify(np.zeros((224, 224, 3), np.float32), 16).shape == (196, 768)


def test_patchify_solid_image_rows_identical():
    patches = patchify(np.full((32, 32, 3), 0.3, np.float32), 8).data
    assert np.all(patches == patches[0])


def test_patchify_rejects_untileable():
    with pytest.raises(ShapeError):
        patchify(np.zeros((30, 30, 3)), 16)


def test_encode_image_shapes():
    cfg = EncoderConfig(resolution=224, patch_size=16, dim=64, layers=1, heads=4, text_layers=1)
    pooled, reps = encode_image(rand_image(1, 224), init_weights(cfg, 0))
    assert pooled.shape == (1, 64) and reps.shape == (196, 64)


def test_encode_image_matches_step_by_step_oracle():
    w = init_weights(TINY, 3)
    img = rand_image(2)
    pooled, _ = encode_image(img, w)
    np.testing.assert_allclose(pooled.data[0], oracles.encode_image(img, w), atol=1e-5)


def test_encode_image_multihead_matches_oracle():
    w = init_weights(SMALL, 4)
    img = rand_image(5, 16)
    np.testing.assert_allclose(encode_image(img, w)[0].data[0], oracles.encode_image(img, w), atol=1e-5)


def test_encode_image_deterministic():
    w = init_weights(TINY, 0)
    img = rand_image(3)
    a, b = encode_image(img, w)[0].data, encode_image(img.copy(), w)[0].data
    assert np.array_equal(a, b)


def test_encode_image_wrong_resolution():
    with pytest.raises(ShapeError):
        encode_image(rand_image(0, 16), init_weights(TINY, 0))


def test_encode_image_gradient_check():
    w = init_weights(TINY, 1)
    img = rand_image(4)
    names = ["vision.patch.w", "vision.cls", "vision.pos", "vision.blocks.0.attn.qkv.w", "vision.blocks.0.mlp.fc2.w",
             "vision.blocks.0.ln1.g", "vision.ln_f.b"]
    params = [w[n] for n in names]
    assert grad_check(lambda: T.sum(encode_image(img, w)[0]), params) <= 1e-4


def test_per_frame_rows_and_passes():
    w = init_weights(TINY, 0)
    frames = [rand_image(i) for i in range(3)]
    seq = FrameSequence([frames[0], frames[1], frames[0], frames[2]])
    with T.Meter() as meter:
        rep = encode_per_frame(seq, w)
    assert meter.passes == 4
    assert rep.rows.shape == (4, 8) and rep.regime is Regime.PER_FRAME
    assert np.array_equal(rep.rows.data[0], rep.rows.data[2])
    single = encode_image(frames[1], w)[0].data[0]
    np.testing.assert_allclose(rep.rows.data[1], single, atol=1e-6)
    batched = encode_per_frame(seq, w, batched=True).rows.data
    np.testing.assert_allclose(batched, rep.rows.data, atol=1e-6)


def test_per_frame_shape_d64():
    cfg = EncoderConfig(resolution=32, patch_size=16, dim=64, layers=1, heads=4, text_layers=1)
    rep = encode_per_frame(FrameSequence([rand_image(i) for i in range(9)]), init_weights(cfg, 0), batched=True)
    assert rep.rows.shape == (9, 64)


def test_regimes_agree_for_one_frame():
    w = init_weights(TINY, 2)
    frame = rand_image(7)
    seq = FrameSequence([frame])
    direct = encode_per_frame(seq, w).rows.data
    concat = encode_concat_patches(seq, w).rows.data
    grid = encode_single_grid(composite(seq, ArrangementOrder(Layout.MATRIX_HORIZONTAL_ASCENT), 32), w).rows.data
    assert np.max(np.abs(direct - concat)) <= 1e-6
    assert np.max(np.abs(direct - grid)) <= 1e-6


def test_concat_patch_sequence_length():
    w = init_weights(SMALL, 0)
    seen = []
    orig = T.softmax_rows

    def spy(a):
        seen.append(a.shape[-1])
        return orig(a)

    T.softmax_rows = spy
    try:
        encode_concat_patches(FrameSequence([rand_image(i, 16) for i in range(4)]), w)
    finally:
        T.softmax_rows = orig
    assert set(seen) == {17}


def test_concat_patch_capacity():
    w = init_weights(SMALL, 0)
    with pytest.raises(CapacityError):
        encode_concat_patches(FrameSequence([rand_image(i, 16) for i in range(5)]), w)


def test_single_grid_one_row_for_any_count():
    w = init_weights(TINY, 0)
    order = ArrangementOrder(Layout.MATRIX_HORIZONTAL_DESCENT)
    for n in (1, 4, 9, 16):
        img = composite(FrameSequence([rand_image(i) for i in range(n)]), order, 32)
        assert encode_single_grid(img, w).rows.shape == (1, 8)


def test_single_grid_resolution_mismatch():
    img = composite(FrameSequence([rand_image(0)]), ArrangementOrder(Layout.MATRIX_HORIZONTAL_ASCENT), 64)
    with pytest.raises(ShapeError):
        encode_single_grid(img, init_weights(TINY, 0))


def test_single_grid_flops_constant_and_one_pass():
    w = init_weights(TINY, 0)
    order = ArrangementOrder(Layout.MATRIX_HORIZONTAL_ASCENT)
    counts = set()
    for n in (1, 4, 9, 16, 25):
        img = composite(FrameSequence([rand_image(i) for i in range(n)]), order, 32)
        with T.Meter() as meter:
            encode_single_grid(img, w)
        assert meter.passes == 1
        counts.add(meter.flops)
    assert len(counts) == 1


@pytest.mark.parametrize("regime", list(Regime), ids=lambda r: r.value)
def test_video_batch_matches_single_video_path(regime):
    w = init_weights(SMALL, 1)
    frames = np.stack([rand_image(i, 16) for i in range(4)])
    if regime is Regime.SINGLE_GRID:
        pixels = composite(FrameSequence(list(frames)), ArrangementOrder(Layout.MATRIX_HORIZONTAL_ASCENT), 16).pixels
        ref = encode_image(pixels, w)[0].data
    elif regime is Regime.PER_FRAME:
        pixels = frames
        ref = encode_per_frame(frames, w).rows.data
    else:
        pixels = frames
        ref = encode_concat_patches(frames, w).rows.data
    out = encode_video_batch(np.stack([pixels, pixels]), regime, w).data
    np.testing.assert_allclose(out[0], ref, atol=1e-6)
    np.testing.assert_allclose(out[1], ref, atol=1e-6)
