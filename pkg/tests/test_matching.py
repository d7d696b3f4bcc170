import math

import numpy as np
import pytest
from scipy import ndimage

from cfogreg import matching as M
from cfogreg.evaluation import SyntheticPairSpec, generate_pair, make_scene
from cfogreg.imagecore import GeoTransform, Image, ParameterError
from cfogreg.similarity import MatchConfig


def scene(kind="shapes", size=192, seed=0):
    return make_scene(kind, (size, size), np.random.default_rng(seed))


CFG = MatchConfig(template_size=31, search_radius=8)
MARGIN = CFG.half + CFG.search_radius


# --------------------------------------------------------------------------- Harris

def test_harris_params_validated():
    for kwargs in (dict(grid_n=0), dict(k_per_chip=0), dict(chip_size=15), dict(min_separation=-1)):
        with pytest.raises(ParameterError):
            M.HarrisParams(**kwargs)


def test_constant_image_has_no_points():
    assert M.detect_harris(np.full((200, 200), 0.5)) == []


def test_image_smaller_than_chip_has_no_points():
    assert M.detect_harris(scene(size=40)) == []


def test_checkerboard_points_sit_on_corners():
    board = make_scene("checkerboard", (160, 160), np.random.default_rng(0), cell=16)
    pts = M.detect_harris(board, M.HarrisParams(grid_n=6, k_per_chip=2))
    assert len(pts) >= 20
    for p in pts:
        # corners lie between pixels 16k-1 and 16k
        for c in (p.x, p.y):
            assert min(abs(c - (16 * k - 0.5)) for k in range(1, 10)) <= 1.0


def test_default_grid_caps_point_count():
    pts = M.detect_harris(scene("filtered-noise", 512, 1))
    assert 150 <= len(pts) <= 200


def test_points_respect_margin_response_and_separation():
    p = M.HarrisParams(grid_n=5, k_per_chip=3)
    pts = M.detect_harris(scene(seed=2), p, margin=MARGIN)
    assert pts
    for q in pts:
        assert MARGIN <= q.x <= 191 - MARGIN and MARGIN <= q.y <= 191 - MARGIN
        assert q.response >= p.min_response
    assert len({(q.x, q.y) for q in pts}) == len(pts)


def test_points_spread_over_every_grid_row_and_column():
    img = scene("filtered-noise", 256, 3)
    n = 5
    pts = M.detect_harris(img, M.HarrisParams(grid_n=n, k_per_chip=2))
    nodes = M.grid_nodes(256, n, 0)
    for axis in ("x", "y"):
        hit = {min(range(n), key=lambda i: abs(nodes[i] - getattr(q, axis))) for q in pts}
        assert hit == set(range(n))


def test_grid_nodes():
    assert M.grid_nodes(101, 3, 10) == [10, 50, 90]
    assert M.grid_nodes(101, 1, 0) == [50]
    assert M.grid_nodes(10, 3, 6) == []


# --------------------------------------------------------------------------- matching

def test_self_match_is_exact():
    # default template 101: the parabola fit's boundary asymmetry stays below 0.01 px
    img = scene(size=256, seed=4)
    cfg = MatchConfig()
    pts = M.detect_harris(img, M.HarrisParams(grid_n=4), margin=cfg.half + cfg.search_radius)
    res = M.match_points(img, img, pts, cfg)
    assert len(pts) >= 8
    assert len(res.cps) == len(pts) and res.skipped_count == 0
    for cp in res.cps:
        assert abs(cp.sen_x - cp.ref_x) <= 0.01 and abs(cp.sen_y - cp.ref_y) <= 0.01
        assert math.isnan(cp.residual)


def test_translation_recovered_by_median():
    pair = generate_pair(SyntheticPairSpec(scene="shapes", size=192, shift=(7.0, -4.0)), 5)
    pts = M.detect_harris(pair.ref, M.HarrisParams(grid_n=5), margin=MARGIN)
    res = M.match_points(pair.ref, pair.sen, pts, CFG)
    dx = np.median([cp.sen_x - cp.ref_x for cp in res.cps])
    dy = np.median([cp.sen_y - cp.ref_y for cp in res.cps])
    assert abs(dx - 7) <= 0.1 and abs(dy + 4) <= 0.1


def test_subpixel_translation_by_resampling():
    img = scene(seed=6)
    sen = ndimage.shift(img, (-1.0, 2.5), order=3, mode="nearest")  # content moves by (2.5, -1)
    pts = M.detect_harris(img, M.HarrisParams(grid_n=4), margin=MARGIN)
    res = M.match_points(img, sen, pts, CFG)
    dx = np.median([cp.sen_x - cp.ref_x for cp in res.cps])
    dy = np.median([cp.sen_y - cp.ref_y for cp in res.cps])
    assert abs(dx - 2.5) <= 0.2 and abs(dy + 1) <= 0.1


def test_gamma_plus_noise_mostly_correct():
    spec = SyntheticPairSpec(scene="shapes", size=256, radiometric="gamma", noise_var=0.0025,
                             shift=(3.0, 5.0))
    pair = generate_pair(spec, 7)
    cfg = MatchConfig(template_size=41, search_radius=8)
    pts = M.detect_harris(pair.ref, M.HarrisParams(grid_n=6), margin=cfg.half + cfg.search_radius)
    res = M.match_points(pair.ref, pair.sen, pts, cfg)
    ok = [math.hypot(cp.sen_x - cp.ref_x - 3, cp.sen_y - cp.ref_y - 5) <= 1.5 for cp in res.cps]
    assert len(ok) >= 20 and np.mean(ok) >= 0.9


def test_geo_prediction_centres_the_search():
    img = scene(seed=8)
    ref = Image(img, GeoTransform(1.0, 0.0, 0.0, 0.0, -1.0, 0.0))
    # sensed origin 20 px east: ground point at ref col x sits at sen col x - 20
    sen_arr = np.roll(img, -20, axis=1)
    sen = Image(sen_arr, GeoTransform(1.0, 0.0, 20.0, 0.0, -1.0, 0.0))
    pts = [M.FeaturePoint(96, 96, 1.0)]
    res = M.match_points(ref, sen, pts, MatchConfig(31, 3))
    cp = res.cps[0]
    assert (cp.sen_x, cp.sen_y) == pytest.approx((76.0, 96.0), abs=0.01)


def test_out_of_bounds_points_are_skipped_and_counted():
    img = scene(seed=9)
    pts = [M.FeaturePoint(5, 5, 1.0), M.FeaturePoint(96, 96, 1.0), M.FeaturePoint(190, 100, 1.0)]
    res = M.match_points(img, img, pts, CFG)
    assert len(res.cps) == 1 and res.skipped_count == 2
    assert "margin" in res.skipped[0][1]


def test_flat_template_skipped_for_ncc():
    img = scene(seed=10)
    img[60:100, 60:100] = 0.5
    res = M.match_points(img, img, [M.FeaturePoint(80, 80, 1.0)], MatchConfig(21, 3, "NCC"))
    assert res.cps == [] and res.skipped[0][1] == "degenerate template"


@pytest.mark.parametrize("measure", ["CFOG", "FHOG", "FLSS", "FSURF", "NCC", "MI"])
def test_planted_shift_every_measure(measure):
    pair = generate_pair(SyntheticPairSpec(scene="filtered-noise", size=128, shift=(-3.0, 2.0)), 11)
    res = M.match_points(pair.ref, pair.sen, [M.FeaturePoint(64, 64, 1.0)],
                         MatchConfig(41, 5, measure))
    cp = res.cps[0]
    assert (round(cp.sen_x - 64), round(cp.sen_y - 64)) == (-3, 2)


@pytest.mark.parametrize("measure", ["CFOG", "FHOG"])
def test_jobs_do_not_change_results(measure):
    pair = generate_pair(SyntheticPairSpec(scene="shapes", size=192, radiometric="inversion",
                                           shift=(2.0, -1.0)), 12)
    pts = M.detect_harris(pair.ref, M.HarrisParams(grid_n=5), margin=MARGIN)
    cfg = MatchConfig(31, 8, measure)
    a = M.match_points(pair.ref, pair.sen, pts, cfg, jobs=1).cps
    b = M.match_points(pair.ref, pair.sen, pts, cfg, jobs=4).cps
    assert a == b


@pytest.mark.parametrize("measure", ["CFOG", "FLSS"])
def test_chip_mode_equals_whole_image_mode(measure):
    pair = generate_pair(SyntheticPairSpec(scene="shapes", size=160, radiometric="gamma",
                                           shift=(1.0, 3.0)), 13)
    pts = M.detect_harris(pair.ref, M.HarrisParams(grid_n=3), margin=MARGIN)
    cfg = MatchConfig(31, 8, measure)
    whole = M.match_points(pair.ref, pair.sen, pts, cfg, chip_mode=False).cps
    chips = M.match_points(pair.ref, pair.sen, pts, cfg, chip_mode=True).cps
    assert len(whole) == len(chips) > 0
    for a, b in zip(whole, chips):
        assert (a.sen_x, a.sen_y) == pytest.approx((b.sen_x, b.sen_y), abs=1e-9)


# --------------------------------------------------------------------------- CSV

def test_csv_round_trip(tmp_path):
    cps = [M.ControlPoint(10.0, 20.0, 11.25, 19.5, -3.5),
           M.ControlPoint(1.5, 2.0, 3.0, 4.0, 0.75, residual=0.125)]
    path = tmp_path / "cps.csv"
    M.write_cps(path, cps)
    text = path.read_text().splitlines()
    assert text[0] == "ref_x,ref_y,sen_x,sen_y,score,residual"
    assert text[1].endswith(",nan")
    back = M.read_cps(path)
    assert back[1] == cps[1]
    assert back[0].sen_xy == cps[0].sen_xy and math.isnan(back[0].residual)


def test_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y\n1,2\n")
    with pytest.raises(ValueError):
        M.read_cps(path)
