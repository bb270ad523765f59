import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsivote.tiling import (MemoryAccountant, TilingError, assemble, assemble_streaming, fixed_stage_bytes,
                            make_plan, stripe_rows_for_budget, weight_map)
from wsivote.raster import crop, Region


def weight_oracle(p, i, j):
    db = min(i, j, p - 1 - i, p - 1 - j)
    if db == 0:
        return 0.0
    c = (p - 1) / 2
    return db / (db + math.hypot(i - c, j - c))


def smooth_field(w, h, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(w, h)
    f = np.zeros((h, w))
    for _ in range(4):
        a, b, ph = rng.uniform(1, 6, 3)
        f += np.sin(a * xx * 2 * np.pi + ph) * np.cos(b * yy * 2 * np.pi)
    f = (f - f.min()) / (f.max() - f.min())
    return f.astype(np.float32)


def crops_of(field, plan):
    return [[((x, y), crop(field, Region(x, y, plan.patch, plan.patch), 0.0)) for x, y in plan.origins(k)]
            for k in range(len(plan.shifts))]


@pytest.mark.parametrize("p", [2, 4, 10, 448])
def test_weight_map_matches_direct_evaluation(p):
    w = weight_map(p)
    pts = [(i, j) for i in range(0, p, max(1, p // 13)) for j in range(0, p, max(1, p // 11))]
    for i, j in pts + [(p // 2 - 1, p // 2 - 1), (1, 1)]:
        assert w[i, j] == pytest.approx(weight_oracle(p, i, j), abs=1e-12)


def test_weight_map_border_and_symmetry():
    w = weight_map(448)
    assert not w[0].any() and not w[-1].any() and not w[:, 0].any() and not w[:, -1].any()
    assert (w[1:-1, 1:-1] > 0).all()
    for t in (w.T, w[::-1], w[:, ::-1], w[::-1, ::-1], w.T[::-1], w.T[:, ::-1], w.T[::-1, ::-1]):
        assert np.array_equal(w, t)
    assert w.max() <= 1.0


def test_plan_grid_counts():
    plan = make_plan(1792, 1344, 448)
    assert plan.shifts == ((0, 0), (224, 0), (0, 224), (224, 224))
    assert plan.grid(0) == (3, 4) and plan.n_tiles(0) == 12
    assert plan.grid(3) == (4, 5)
    assert plan.origin(3, 0, 0) == (-224, -224)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.sampled_from([2, 4, 8, 16]), st.integers(0, 3))
def test_locate_inverts_origin(w, h, p, k):
    plan = make_plan(w, h, p)
    for y in range(0, h, 7):
        for x in range(0, w, 5):
            r, c, iy, ix = plan.locate(k, y, x)
            ox, oy = plan.origin(k, r, c)
            assert (ox + ix, oy + iy) == (x, y)
            assert 0 <= r < plan.grid(k)[0] and 0 <= c < plan.grid(k)[1]


def test_weight_sum_positive_everywhere_for_half_shifts():
    plan = make_plan(50, 37, 8)
    total = np.zeros((37, 50))
    w = weight_map(8)
    for k in range(4):
        for y in range(37):
            for x in range(50):
                _, _, iy, ix = plan.locate(k, y, x)
                total[y, x] += w[iy, ix]
    assert (total > 0).all()


def test_assembly_reconstructs_field():
    f = smooth_field(300, 217, seed=2)
    plan = make_plan(300, 217, 64)
    out = assemble(crops_of(f, plan), plan)
    assert np.abs(out - f).max() <= 1e-6


def test_single_group_falls_back_to_plain_mean():
    f = smooth_field(40, 40, seed=3)
    plan = make_plan(40, 40, 8, shifts=[(0, 0)])
    out = assemble(crops_of(f, plan), plan)
    assert np.abs(out - f).max() <= 1e-6


def test_group_order_and_mapping_form_do_not_matter():
    rng = np.random.default_rng(4)
    plan = make_plan(90, 70, 16)
    groups = [[(o, rng.random((16, 16), dtype=np.float32)) for o in plan.origins(k)] for k in range(4)]
    a = assemble(groups, plan)
    by_shift = {plan.shifts[k]: groups[k][::-1] for k in (3, 1, 0, 2)}
    assert np.array_equal(a, assemble(by_shift, plan))


def test_coverage_errors():
    plan = make_plan(40, 40, 16)
    f = smooth_field(40, 40)
    groups = crops_of(f, plan)
    short = [g[:] for g in groups]
    short[1] = short[1][1:]
    with pytest.raises(TilingError, match="coverage"):
        assemble(short, plan)
    dup = [g[:] for g in groups]
    dup[0] = dup[0] + dup[0][:1]
    with pytest.raises(TilingError, match="two tiles"):
        assemble(dup, plan)
    with pytest.raises(TilingError):
        assemble(groups[:3], plan)
    bad = [g[:] for g in groups]
    bad[2][0] = (bad[2][0][0], np.zeros((8, 8), np.float32))
    with pytest.raises(TilingError):
        assemble(bad, plan)


def tile_fn_for(field, p):
    def fn(k, x, y):
        noise = np.random.default_rng([k, x + 1000, y + 1000]).random((p, p), dtype=np.float32)
        return np.clip(crop(field, Region(x, y, p, p), 0.0) * 0.7 + 0.3 * noise, 0, 1)
    return fn


def collect(plan, fn, **kw):
    parts = []
    assemble_streaming(plan, fn, parts.append, **kw)
    return np.concatenate(parts)


@pytest.mark.parametrize("stripe,workers", [(None, 1), (16, 1), (32, 3), (48, 8)])
def test_streaming_is_bit_identical_to_in_memory(stripe, workers):
    f = smooth_field(123, 101, seed=5)
    plan = make_plan(123, 101, 16)
    fn = tile_fn_for(f, 16)
    groups = [[(o, fn(k, *o)) for o in plan.origins(k)] for k in range(4)]
    ref = assemble(groups, plan)
    out = collect(plan, fn, stripe_rows=stripe, workers=workers)
    assert out.dtype == np.float32 and np.array_equal(out, ref)


def test_streaming_predicts_each_tile_once():
    plan = make_plan(64, 64, 16)
    seen = []

    def fn(k, x, y):
        seen.append((k, x, y))
        return np.full((16, 16), 0.5, np.float32)

    collect(plan, fn, stripe_rows=16)
    assert len(seen) == len(set(seen)) == sum(plan.n_tiles(k) for k in range(4))


def test_stripe_must_be_patch_multiple():
    plan = make_plan(32, 32, 16)
    with pytest.raises(TilingError):
        collect(plan, lambda k, x, y: np.zeros((16, 16), np.float32), stripe_rows=20)


def test_budgeted_stripes_respect_budget():
    plan = make_plan(2000, 1500, 64)
    budget = 8 * 2**20
    rows = stripe_rows_for_budget(plan, budget, inflight=2)
    assert rows % 64 == 0 and rows < 1500
    acct = MemoryAccountant(budget)
    collect(plan, lambda k, x, y: np.full((64, 64), 0.25, np.float32), stripe_rows=rows,
            inflight=2, accountant=acct)
    assert acct.within_budget and acct.current == 0
    with pytest.raises(TilingError, match="budget"):
        stripe_rows_for_budget(plan, 2**20, inflight=2)
    assert acct.peak >= fixed_stage_bytes(plan, 2) // 2
