import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsivote.predictor import (EOSIN_RGB, HEMATOXYLIN_RGB, ExternalExitError, ExternalTimeoutError,
                               MalformedResponseError, PredictorError, PredictorSpec, ResponseDimensionError,
                               ResponseRangeError, TileRequest, constant_predictor, external_predictor,
                               oracle_predictor, predict, predict_many, spec_from_dict,
                               stain_heuristic_predictor)
from wsivote.raster import NORMAL, TUMOR, Region, crop


def req(level=0, x=0, y=0, p=8, tile=None, size=None):
    tile = np.full((p, p, 3), 200, np.uint8) if tile is None else tile
    return TileRequest(level, tile, Region(x, y, p, p), size)


def test_constant():
    out = predict(constant_predictor(0.25), req())
    assert out.dtype == np.float32 and (out == np.float32(0.25)).all()
    with pytest.raises(ValueError):
        constant_predictor(1.5)


def test_tile_request_validation():
    with pytest.raises(PredictorError):
        TileRequest(0, np.zeros((8, 6, 3), np.uint8), Region(0, 0, 8, 6))
    with pytest.raises(PredictorError):
        TileRequest(0, np.zeros((8, 8), np.uint8), Region(0, 0, 8, 8))


def test_spec_requires_params():
    with pytest.raises(ValueError, match="missing"):
        PredictorSpec("oracle", {})
    with pytest.raises(ValueError, match="unknown"):
        PredictorSpec("magic", {})


def test_oracle_zero_noise_is_exact_crop():
    gt = np.random.default_rng(0).integers(0, 3, (20, 30)).astype(np.uint8)
    spec = oracle_predictor(gt)
    out = predict(spec, req(x=25, y=-3, p=8, size=(30, 20)))
    want = (crop(gt, Region(25, -3, 8, 8), 0) == TUMOR).astype(np.float32)
    assert np.array_equal(out, want)


def test_oracle_rejects_wrong_level_size():
    gt = np.zeros((20, 30), np.uint8)
    with pytest.raises(PredictorError, match="does not match"):
        predict(oracle_predictor(gt), req(size=(15, 10)))


@settings(max_examples=20, deadline=None)
@given(st.integers(-20, 40), st.integers(-20, 40), st.integers(0, 1000))
def test_oracle_noise_is_keyed_by_tile(x, y, seed):
    gt = np.full((32, 32), TUMOR, np.uint8)
    spec = oracle_predictor(gt, noise_sigma=0.2, seed=seed)
    a = predict(spec, req(x=x, y=y))
    predict(spec, req(x=x + 8, y=y))
    b = predict(spec, req(x=x, y=y))
    assert np.array_equal(a, b)
    assert ((a >= 0) & (a <= 1)).all()


def test_oracle_noise_differs_between_seeds_and_levels():
    gt = np.full((32, 32), NORMAL, np.uint8)
    a = predict(oracle_predictor(gt, noise_sigma=0.3, seed=1), req())
    b = predict(oracle_predictor(gt, noise_sigma=0.3, seed=2), req())
    c = predict(oracle_predictor(gt, noise_sigma=0.3, seed=1), req(level=2))
    assert not np.array_equal(a, b) and not np.array_equal(a, c)


def test_oracle_blur_softens_edges():
    gt = np.zeros((16, 16), np.uint8)
    gt[:, 8:] = TUMOR
    out = predict(oracle_predictor(gt, blur_levels=1), req(p=16))
    assert 0 < out[4, 7] < 1 and out[4, 0] < 0.05 and out[4, 15] > 0.95


def test_oracle_resizes_whole_level_region():
    gt = np.zeros((4, 4), np.uint8)
    gt[:, 2:] = TUMOR
    r = TileRequest(7, np.zeros((16, 16, 3), np.uint8), Region(0, 0, 4, 4), (4, 4))
    out = predict(oracle_predictor(gt), r)
    assert out.shape == (16, 16) and out[:, :6].max() < 0.5 and out[:, 10:].min() > 0.5


def test_stain_heuristic_orders_reference_colours():
    spec = stain_heuristic_predictor()
    h = predict(spec, req(tile=np.tile(np.array(HEMATOXYLIN_RGB, np.uint8), (8, 8, 1))))
    e = predict(spec, req(tile=np.tile(np.array(EOSIN_RGB, np.uint8), (8, 8, 1))))
    assert h.min() > 0.95 and e.max() < 0.05
    with pytest.raises(ValueError):
        stain_heuristic_predictor(softness=0)


def test_spec_from_dict_variants(tmp_path):
    assert spec_from_dict({"kind": "constant", "params": {"p": 0.5}}).params["p"] == 0.5
    s = spec_from_dict({"kind": "stain-heuristic"})
    assert s.kind == "stain-heuristic" and abs(np.linalg.norm(s.params["axis"]) - 1) < 1e-12
    e = spec_from_dict({"kind": "external", "params": {"command": "echo hi", "timeout": 3}})
    assert e.params["command"] == ["echo", "hi"]
    with pytest.raises(ValueError):
        spec_from_dict({"kind": "oracle", "params": {"gt": "x.png"}})


SCRIPT = textwrap.dedent('''
    import json, pathlib, struct, sys, time
    import numpy as np
    from PIL import Image
    mode = sys.argv[1]
    root = pathlib.Path(sys.argv[2])
    dirs = [root] if (root / "tile.json").exists() else sorted(p for p in root.iterdir() if p.is_dir())
    for d in dirs:
        meta = json.loads((d / "tile.json").read_text())
        img = np.asarray(Image.open(d / "tile.png"))
        p = meta["patch"]
        val = img[..., 0].astype(np.float32) / 255.0
        if mode == "fail":
            sys.exit(4)
        if mode == "sleep":
            time.sleep(5)
        if mode == "garbage":
            (d / "tile.pmap").write_bytes(b"nope")
            continue
        if mode == "small":
            val = val[:-1]
        if mode == "range":
            val = val + 2.0
        h, w = val.shape
        (d / "tile.pmap").write_bytes(struct.pack("<4sIII", b"PMAP", w, h, 0) + val.astype("<f4").tobytes())
    ''')


@pytest.fixture
def script(tmp_path):
    path = tmp_path / "model.py"
    path.write_text(SCRIPT)
    return path


def ext(script, mode, **kw):
    return external_predictor([sys.executable, str(script), mode], **kw)


def test_external_round_trip(script):
    tile = np.random.default_rng(1).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    out = predict(ext(script, "ok"), req(tile=tile, x=16, y=8))
    assert np.allclose(out, tile[..., 0] / 255.0)


def test_external_batch_mode(script):
    rng = np.random.default_rng(2)
    reqs = [req(tile=rng.integers(0, 256, (8, 8, 3), dtype=np.uint8), x=8 * i) for i in range(3)]
    outs = predict_many(ext(script, "ok", batch=True), reqs)
    for r, o in zip(reqs, outs):
        assert np.allclose(o, r.tile[..., 0] / 255.0)


@pytest.mark.parametrize("mode,err", [("fail", ExternalExitError), ("garbage", MalformedResponseError),
                                      ("small", ResponseDimensionError), ("range", ResponseRangeError)])
def test_external_failures_are_typed(script, mode, err):
    with pytest.raises(err) as info:
        predict(ext(script, mode), req(level=3, x=40, y=24))
    assert info.value.level == 3 and info.value.origin == (40, 24)


def test_external_timeout(script):
    with pytest.raises(ExternalTimeoutError):
        predict(ext(script, "sleep", timeout=0.5), req())
