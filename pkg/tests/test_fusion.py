import itertools

import numpy as np
import pytest

from wsivote.fusion import VoteConfig, binarize, fuse, upsample_to, vote
from wsivote.pyramid import DEFAULT_LEVELS, level_shape
from wsivote.raster import RasterError


def test_binarize_is_inclusive_at_float32_threshold():
    m = np.array([0.7, np.nextafter(np.float32(0.7), np.float32(0)), 1.0], np.float32)
    assert binarize(m, 0.7).tolist() == [True, False, True]
    with pytest.raises(ValueError):
        binarize(m, 1.2)


def test_vote_config_defaults_and_validation():
    cfg = VoteConfig()
    assert (cfg.threshold_th, cfg.min_votes_n, cfg.total_votes()) == (0.7, 6, 7)
    dv = VoteConfig.double_vote()
    assert dv.total_votes() == 9 and dv.level_weights[6] == dv.level_weights[7] == 2
    with pytest.raises(ValueError):
        VoteConfig(0.5, 8)
    with pytest.raises(ValueError):
        VoteConfig(0.5, 0)
    with pytest.raises(ValueError):
        VoteConfig(0.5, 1, {0: 0})
    assert VoteConfig.from_json('{"threshold": 0.4, "min_votes": 2}') == VoteConfig(0.4, 2)
    assert VoteConfig.from_dict(dv.to_dict()) == dv


def test_vote_small_truth_table():
    masks = {n: np.array([bool(n % 2), True]) for n in DEFAULT_LEVELS}
    assert vote(masks, VoteConfig(0.5, 7)).tolist() == [False, True]
    assert vote(masks, VoteConfig(0.5, 3)).tolist() == [True, True]
    assert vote(masks, VoteConfig(0.5, 4)).tolist() == [False, True]


def test_vote_errors():
    with pytest.raises(ValueError):
        vote({}, VoteConfig())
    with pytest.raises(ValueError, match="exceeds"):
        vote({0: np.ones(3, bool)}, VoteConfig(0.5, 2))
    with pytest.raises(RasterError):
        vote({0: np.ones(3, bool), 2: np.ones(4, bool)}, VoteConfig(0.5, 1))


def test_upsample_nearest_inverts_decimation():
    rng = np.random.default_rng(0)
    w0, h0 = 203, 150
    for n in (1, 3, 5):
        w, h = level_shape(w0, h0, n)
        m = rng.random((h, w)).astype(np.float32)
        up = upsample_to(m, n, w0, h0)
        assert np.array_equal(up[::1 << n, ::1 << n], m)


def test_fuse_matches_manual_pipeline():
    rng = np.random.default_rng(1)
    w0, h0 = 130, 97
    maps = {n: rng.random(level_shape(w0, h0, n)[::-1]).astype(np.float32) for n in DEFAULT_LEVELS}
    cfg = VoteConfig(0.6, 4)
    want = vote({n: upsample_to(m, n, w0, h0) >= np.float32(0.6) for n, m in maps.items()}, cfg)
    assert np.array_equal(fuse(maps, cfg, (w0, h0)), want)
    pyr = fuse(maps, cfg, (w0, h0), upsampler="pyramid")
    assert pyr.shape == (h0, w0)


def test_fuse_checks_level_sizes():
    with pytest.raises(RasterError):
        fuse({0: np.zeros((8, 8), np.float32), 2: np.zeros((3, 3), np.float32)}, VoteConfig(0.5, 1, {0: 1, 2: 1}))


def test_double_vote_brute_force_small():
    cfg = VoteConfig.double_vote(0.5, 5)
    for bits in itertools.product([False, True], repeat=7):
        masks = {n: np.array([b]) for n, b in zip(DEFAULT_LEVELS, bits)}
        tally = sum((2 if n in (6, 7) else 1) * b for n, b in zip(DEFAULT_LEVELS, bits))
        assert vote(masks, cfg)[0] == (tally >= 5)
