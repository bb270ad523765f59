import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from wsivote.colorspace import (BackgroundThreshold, ColorStats, DegenerateStatsError, background_mask,
                                image_stats, lab_to_rgb, masked_stats, partial_normalize, rgb_to_lab)
from wsivote.synthetic import stained_image


def lab_oracle(rgb):
    """Scalar Reinhard transform written out longhand."""
    r, g, b = (c / 255.0 for c in rgb)
    L = 0.3811 * r + 0.5783 * g + 0.0402 * b
    M = 0.1967 * r + 0.7244 * g + 0.0782 * b
    S = 0.0241 * r + 0.1288 * g + 0.8444 * b
    L, M, S = (math.log10(max(v, 1e-6)) for v in (L, M, S))
    return ((L + M + S) / math.sqrt(3), (L + M - 2 * S) / math.sqrt(6), (L - M) / math.sqrt(2))


@pytest.mark.parametrize("rgb", [(255, 255, 255), (120, 60, 150), (1, 2, 3), (0, 0, 0), (235, 210, 235)])
def test_lab_matches_scalar_oracle(rgb):
    l, a, b = rgb_to_lab(np.array([[rgb]], np.uint8))
    assert np.allclose([l[0, 0], a[0, 0], b[0, 0]], lab_oracle(rgb), atol=1e-12)


def test_white_is_lab_origin_up_to_matrix_rounding():
    l, a, b = rgb_to_lab(np.full((1, 1, 3), 255, np.uint8))
    assert abs(a[0, 0]) < 1e-3 and abs(b[0, 0]) < 1e-3
    assert np.array_equal(lab_to_rgb(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1))),
                          np.full((1, 1, 3), 255, np.uint8))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (6, 7, 3)))
def test_round_trip_is_lossless_for_nonzero_rgb(img):
    img = np.maximum(img, 1)
    assert np.array_equal(lab_to_rgb(*rgb_to_lab(img)), img)


def test_background_mask_threshold_is_inclusive():
    img = np.array([[[235, 210, 235], [234, 255, 255], [255, 209, 255], [255, 255, 234]]], np.uint8)
    assert background_mask(img).tolist() == [[True, False, False, False]]
    assert background_mask(img, BackgroundThreshold(234, 209, 234)).all()


def test_masked_stats_population_std():
    l = np.array([[1.0, 3.0], [100.0, 5.0]])
    fg = np.array([[True, True], [False, True]])
    s = masked_stats(l, l * 2, l * 0 + 7, fg)
    assert s.mean_l == pytest.approx(3.0)
    assert s.std_l == pytest.approx(np.std([1, 3, 5]))
    assert s.std_a == pytest.approx(2 * np.std([1, 3, 5]))
    assert s.std_b == 0.0


def test_degenerate_inputs_raise():
    white = np.full((4, 4, 3), 250, np.uint8)
    with pytest.raises(DegenerateStatsError, match="degenerate"):
        image_stats(white)
    flat = white.copy()
    flat[:2] = (100, 50, 120)
    target = ColorStats(0, 0, 0, 1, 1, 1)
    with pytest.raises(DegenerateStatsError, match="degenerate source statistics"):
        partial_normalize(flat, target)


def test_block_statistics_match_whole_image():
    img = stained_image(200, 300, seed=3)
    whole = image_stats(img)
    for rows in (1, 7, 64, 1000):
        blk = image_stats(img, block_rows=rows)
        assert np.allclose(blk.means, whole.means, atol=1e-12)
        assert np.allclose(blk.stds, whole.stds, atol=1e-12)


def test_blocked_normalize_is_bit_identical():
    src = stained_image(128, 160, seed=4, tint=(20, -10, 5))
    target = image_stats(stained_image(128, 128, seed=5))
    a = partial_normalize(src, target)
    b = partial_normalize(src, target, block_rows=17)
    assert np.array_equal(a, b)


def test_normalize_identity_on_self_target():
    img = stained_image(96, 96, seed=6)
    out = partial_normalize(img, image_stats(img))
    assert np.abs(out.astype(int) - img).max() <= 1


def test_colorstats_json_round_trip():
    s = ColorStats(1.5, -0.2, 0.01, 0.3, 0.04, 0.005)
    assert ColorStats.from_json(s.to_json()) == s
    with pytest.raises(ValueError):
        ColorStats(0, 0, 0, -1, 0, 0)
