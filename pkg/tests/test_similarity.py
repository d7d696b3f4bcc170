import math

import numpy as np
import pytest

from cfogreg import similarity as S
from cfogreg.descriptors import FeatureVolume, build_cfog
from cfogreg.imagecore import ParameterError

from oracles import entropy, ssd_scores_loop


def vol(shape, seed=0, name="T"):
    return FeatureVolume(np.random.default_rng(seed).random(shape), name)


# --------------------------------------------------------------------------- config and peak picking

@pytest.mark.parametrize("kwargs", [dict(template_size=8), dict(template_size=7),
                                    dict(search_radius=0), dict(mi_bins=3), dict(measure="SAD")])
def test_match_config_validated(kwargs):
    with pytest.raises(ParameterError):
        S.MatchConfig(**kwargs)


def test_match_config_upper_cases_measure():
    assert S.MatchConfig(measure="fhog").measure == "FHOG"
    assert S.MatchConfig(template_size=21).half == 10


def test_peak_tie_prefers_smallest_offset():
    scores = np.zeros((5, 5))
    scores[0, 0] = scores[2, 3] = scores[1, 2] = 1.0  # (-2,-2), (1,0), (0,-1)
    assert S.pick_peak(scores) == (0, -1)


def test_peak_tie_same_magnitude_is_row_major():
    scores = np.zeros((3, 3))
    scores[1, 2] = scores[2, 1] = 1.0  # (1,0) and (0,1)
    assert S.pick_peak(scores) == (1, 0)


def test_similarity_map_rejects_non_finite():
    with pytest.raises(ValueError):
        S.SimilarityMap(np.array([[0.0, np.nan, 0], [0, 0, 0], [0, 0, 0]]), "X")


# --------------------------------------------------------------------------- SSD

def test_fft_matches_four_loop_oracle_small():
    d1, d2 = vol((20, 20, 2), 1), vol((20, 20, 2), 2)
    cfg = S.MatchConfig(template_size=9, search_radius=2)
    ref = ssd_scores_loop(d1.data, d2.data, (10, 10), 4, 2)
    assert np.max(np.abs(S.ssd_match_fft(d1, d2, (10, 10), cfg).scores - ref)) < 1e-9
    assert np.max(np.abs(S.ssd_match_spatial(d1, d2, (10, 10), cfg).scores - ref)) < 1e-9


@pytest.mark.parametrize("dims,n,r", [(1, 9, 1), (9, 15, 4), (36, 11, 3), (2, 21, 6)])
def test_fft_matches_spatial(dims, n, r):
    d1, d2 = vol((50, 48, dims), dims), vol((50, 48, dims), dims + 100)
    cfg = S.MatchConfig(template_size=n, search_radius=r)
    a = S.ssd_match_fft(d1, d2, (24, 25), cfg, sen_center=(23, 24))
    b = S.ssd_match_spatial(d1, d2, (24, 25), cfg, sen_center=(23, 24))
    scale = np.abs(b.scores).max()
    assert np.max(np.abs(a.scores - b.scores)) <= 1e-9 * scale
    assert a.peak == b.peak


def test_known_shift_lands_on_positive_offset():
    # sensed content displaced by (+3, -2): D2(x + v) == D1(x) at v = (3, -2)
    d1 = vol((60, 60, 4), 3)
    d2 = FeatureVolume(np.roll(d1.data, shift=(-2, 3), axis=(0, 1)), "T")
    cfg = S.MatchConfig(template_size=21, search_radius=5)
    smap = S.ssd_match_fft(d1, d2, (30, 30), cfg)
    assert smap.peak == (3, -2)
    assert smap.peak_score == pytest.approx(0.0, abs=1e-9)
    assert smap.score_at(3, -2) == smap.scores.max()


def test_ssd_self_match_is_zero_offset():
    d = vol((40, 40, 3), 4)
    smap = S.ssd_match_spatial(d, d, (20, 20), S.MatchConfig(template_size=11, search_radius=4))
    assert smap.peak == (0, 0) and smap.peak_score == 0.0


def test_footprint_outside_raises_skip():
    d = vol((30, 30, 2))
    cfg = S.MatchConfig(template_size=11, search_radius=5)
    with pytest.raises(S.MatchSkipped):
        S.ssd_match_fft(d, d, (6, 15), cfg)  # template fits, search does not
    with pytest.raises(S.MatchSkipped):
        S.ssd_match_fft(d, d, (3, 15), cfg)


def test_dim_mismatch_rejected():
    with pytest.raises(ParameterError):
        S.ssd_match_fft(vol((30, 30, 2)), vol((30, 30, 3)), (15, 15), S.MatchConfig(9, 2))


def test_volumes_from_descriptors_keep_name():
    img = np.random.default_rng(5).random((40, 40))
    v = build_cfog(img)
    smap = S.ssd_match_fft(v, v, (20, 20), S.MatchConfig(9, 3))
    assert smap.measure_id == "CFOG" and smap.peak == (0, 0)


# --------------------------------------------------------------------------- NCC

def img(seed=0, shape=(40, 40)):
    return np.random.default_rng(seed).random(shape)


CFG_NCC = S.MatchConfig(template_size=11, search_radius=3, measure="NCC")


def test_ncc_identity_peak_one():
    a = img(6)
    smap = S.ncc_match(a, a, (20, 20), CFG_NCC)
    assert smap.peak == (0, 0)
    assert smap.peak_score == pytest.approx(1.0, abs=1e-12)


def test_ncc_affine_intensity_is_one():
    a = img(7)
    smap = S.ncc_match(a, 2 * a + 7, (20, 20), CFG_NCC)
    assert smap.peak_score == pytest.approx(1.0, abs=1e-12)


def test_ncc_inversion_is_minus_one():
    a = 255 * img(8)
    smap = S.ncc_match(a, 255 - a, (20, 20), CFG_NCC)
    assert smap.score_at(0, 0) == pytest.approx(-1.0, abs=1e-12)


def test_ncc_flat_template_is_degenerate():
    a = np.zeros((40, 40))
    smap = S.ncc_match(a, img(9), (20, 20), CFG_NCC)
    assert smap.degenerate and not smap.scores.any()


def test_ncc_flat_sensed_window_scores_zero():
    b = img(10)
    b[10:31, 10:31] = 0.5
    smap = S.ncc_match(img(11), b, (20, 20), CFG_NCC)
    assert smap.score_at(0, 0) == 0.0


# --------------------------------------------------------------------------- MI

def test_mi_hand_computed_two_level():
    a = np.zeros((8, 8))
    a[:, 4:] = 1.0
    b = a.copy()
    b[0, :] = 1 - b[0, :]  # flip one row: 8 of 64 pixels disagree
    # joint counts: (0,0)=28 (0,1)=4 (1,0)=4 (1,1)=28
    expect = entropy([32, 32]) * 2 - entropy([28, 4, 4, 28])
    assert S.mutual_information(a, b, bins=4) == pytest.approx(expect, abs=1e-12)


def test_mi_identical_equals_entropy():
    a = np.repeat(np.arange(4.0), 16).reshape(8, 8)
    assert S.mutual_information(a, a, bins=4) == pytest.approx(math.log(4), abs=1e-12)


def test_mi_constant_is_zero():
    assert S.mutual_information(np.full((8, 8), 3.0), img(12, (8, 8))) == 0.0


def test_mi_symmetric():
    a, b = img(13, (16, 16)), img(14, (16, 16))
    assert S.mutual_information(a, b, 8) == pytest.approx(S.mutual_information(b, a, 8), abs=1e-12)


def test_mi_match_finds_inverted_shift():
    a = img(15, (48, 48))
    b = np.roll(1 - a, shift=(1, -2), axis=(0, 1))  # content moves by (-2, +1)
    smap = S.mi_match(a, b, (24, 24), S.MatchConfig(15, 3, "MI", mi_bins=8))
    assert smap.peak == (-2, 1)


# --------------------------------------------------------------------------- sub-pixel

def test_parabola_examples():
    assert S.parabola_offset(1, 3, 1) == 0.0
    assert S.parabola_offset(1, 3, 2) == pytest.approx(1 / 6, abs=1e-12)
    assert S.parabola_offset(2, 3, 1) == pytest.approx(-1 / 6, abs=1e-12)
    assert S.parabola_offset(5, 5, 5) == 0.0


@pytest.mark.parametrize("vertex", [0.3, -0.45, 0.0])
def test_parabola_recovers_vertex(vertex):
    f = [-(t - vertex) ** 2 + 2 for t in (-1, 0, 1)]
    assert S.parabola_offset(*f) == pytest.approx(vertex, abs=1e-12)


def test_refine_on_sampled_paraboloid():
    r = 4
    vy, vx = np.mgrid[-r:r + 1, -r:r + 1]
    smap = S.SimilarityMap(-((vx - 1.3) ** 2) - 2 * (vy + 0.2) ** 2, "X")
    assert S.subpixel_refine(smap) == pytest.approx((1.3, -0.2), abs=1e-12)
    assert smap.refined


def test_border_peak_not_refined():
    scores = np.zeros((5, 5))
    scores[2, 4] = 1.0
    smap = S.SimilarityMap(scores, "X")
    assert S.subpixel_refine(smap) == (2.0, 0.0)
    assert not smap.refined


# --------------------------------------------------------------------------- export

def test_map_writers(tmp_path):
    scores = -np.arange(9.0).reshape(3, 3)
    smap = S.SimilarityMap(scores, "CFOG")
    S.write_map_text(tmp_path / "m.txt", smap)
    lines = (tmp_path / "m.txt").read_text().splitlines()
    assert lines[0].startswith("# measure=CFOG radius=1 peak=-1,-1")
    assert np.array_equal(np.loadtxt(tmp_path / "m.txt"), scores)
    S.write_map_heatmap(tmp_path / "m.pgm", smap)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n3 3\n255\n\xff")
