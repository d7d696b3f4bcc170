import math

import numpy as np
import pytest

from cfogreg import descriptors as D
from cfogreg.imagecore import GradientPair, ParameterError, compute_gradients

from oracles import cfog_loop, hog_pixel, lss_pixel, surf_pixel

MEASURES = D.DESCRIPTOR_MEASURES


def rand(shape, seed=0):
    return np.random.default_rng(seed).random(shape)


# --------------------------------------------------------------------------- oriented channels

def test_channel_at_zero_is_abs_gx():
    g = compute_gradients(rand((16, 16)))
    assert np.array_equal(D.oriented_gradient_channel(g, 0.0), np.abs(g.gx))


def test_channel_ignores_sign_of_image():
    img = rand((16, 16), 1)
    a = D.oriented_gradient_channel(compute_gradients(img), 1.1)
    b = D.oriented_gradient_channel(compute_gradients(-img), 1.1)
    assert np.array_equal(a, b)


def test_channel_quarter_pi_matches_loop():
    g = compute_gradients(rand((16, 16), 2))
    ch = D.oriented_gradient_channel(g, math.pi / 4)
    for y in range(16):
        for x in range(16):
            assert ch[y, x] == pytest.approx(abs((g.gx[y, x] + g.gy[y, x]) / math.sqrt(2)), abs=1e-15)


def test_channel_rejects_theta_outside_half_turn():
    g = compute_gradients(np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        D.oriented_gradient_channel(g, math.pi)


# --------------------------------------------------------------------------- CFOG

def test_cfog_default_channel_count():
    assert D.build_cfog(rand((20, 20))).dims == 9


def test_cfog_constant_image_is_zero():
    assert not D.build_cfog(np.full((12, 12), 0.5)).data.any()


@pytest.mark.parametrize("normalize", [True, False])
def test_cfog_matches_loop_oracle(normalize):
    img = rand((14, 13), 3)
    vol = D.build_cfog(img, D.CfogParams(m=6, sigma=0.8, normalize=normalize)).data
    ref = cfog_loop(img, m=6, sigma=0.8, normalize=normalize)
    assert np.max(np.abs(vol - ref)) < 1e-12


def test_cfog_inversion_255():
    img = 255 * rand((24, 24), 4)
    a = D.build_cfog(img).data
    b = D.build_cfog(255 - img).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_cfog_unit_norm_or_zero():
    img = rand((30, 30), 5)
    img[:10, :10] = 0.2  # flat patch yields zero vectors
    vol = D.build_cfog(img).data
    norms = np.linalg.norm(vol, axis=2)
    assert np.all((norms == 0) | (np.abs(norms - 1) <= 1e-6))
    assert (norms == 0).any()


def test_cfog_presmoothing_changes_output():
    img = rand((20, 20), 6)
    a = D.build_cfog(img).data
    b = D.build_cfog(img, D.CfogParams(presmooth_sigma=1.0)).data
    assert not np.allclose(a, b)


@pytest.mark.parametrize("kwargs", [dict(m=1), dict(sigma=0.0), dict(presmooth_sigma=-1.0)])
def test_cfog_params_validated(kwargs):
    with pytest.raises(ParameterError):
        D.CfogParams(**kwargs)


# --------------------------------------------------------------------------- HOG

def test_hog_constant_image_is_zero():
    vol = D.build_pixelwise_hog(np.full((16, 16), 0.7))
    assert vol.dims == 36 and not vol.data.any()


def test_orientation_vote_splits_between_bins():
    # 10 degrees lies halfway between the 0 and 20 degree bin centres
    t = math.radians(10)
    gx = np.zeros((3, 3))
    gy = np.zeros((3, 3))
    gx[1, 1], gy[1, 1] = 2 * math.cos(t), 2 * math.sin(t)
    chans = D.orientation_histogram_channels(GradientPair(gx, gy), 9)
    assert chans[1, 1, 0] == pytest.approx(1.0)
    assert chans[1, 1, 1] == pytest.approx(1.0)
    assert chans.sum() == pytest.approx(2.0)


def test_orientation_vote_wraps_around_pi():
    t = math.radians(170)  # between bin 8 (160) and bin 0 (180 == 0)
    chans = D.orientation_histogram_channels(
        GradientPair(np.array([[math.cos(t)]]), np.array([[math.sin(t)]])), 9)
    assert chans[0, 0, 8] == pytest.approx(0.5)
    assert chans[0, 0, 0] == pytest.approx(0.5)


@pytest.mark.parametrize("yx", [(12, 12), (5, 17), (0, 0), (23, 9)])
def test_hog_matches_histogram_oracle(yx):
    img = rand((24, 24), 7)
    vol = D.build_pixelwise_hog(img).data
    y, x = yx
    assert np.max(np.abs(vol[y, x] - hog_pixel(img, y, x))) < 1e-9


def test_hog_cell_weights_sum_to_block_coverage():
    w = D.hog_cell_weights(4)
    assert w.shape == (2, 8)
    # every block row or column gives its full weight to some cell except the outermost
    assert np.allclose(w.sum(axis=0), [0.625, 0.875, 1, 1, 1, 1, 0.875, 0.625])


def test_hog_params_validated():
    with pytest.raises(ParameterError):
        D.HogParams(cell_size=1)
    with pytest.raises(ParameterError):
        D.HogParams(bins=8)


# --------------------------------------------------------------------------- LSS

def test_lss_self_similarity_at_centre():
    surf = D.lss_correlation_surface(rand((48, 48), 8), 20, 25)
    assert surf[20, 20] == 1.0
    assert np.all(surf <= 1.0)


def test_lss_constant_image():
    img = np.full((45, 45), 0.3)
    assert np.all(D.lss_correlation_surface(img, 22, 22) == 1.0)
    assert not D.build_lss(img).data.any()


@pytest.mark.parametrize("yx", [(24, 24), (21, 30), (2, 45)])
def test_lss_matches_double_loop_oracle(yx):
    img = rand((48, 48), 9)
    vol = D.build_lss(img).data
    y, x = yx
    assert np.max(np.abs(vol[y, x] - lss_pixel(img, y, x))) < 1e-9


def test_lss_bin_layout_covers_disc():
    p = D.LssParams()
    dy, dx, b = D.lss_bin_layout(p)
    assert len(dy) == sum(1 for i in range(-20, 21) for j in range(-20, 21) if 0 < i * i + j * j <= 400)
    assert set(b.tolist()) == set(range(p.dims))


def test_lss_range_and_dims():
    vol = D.build_lss(rand((45, 50), 10))
    assert vol.dims == 24
    assert vol.data.min() >= 0 and vol.data.max() <= 1
    per_pixel_max = vol.data.max(axis=2)
    assert np.all((per_pixel_max == 1.0) | (per_pixel_max == 0.0))


def test_lss_params_validated():
    with pytest.raises(ParameterError):
        D.LssParams(patch_radius=3, region_radius=3)
    with pytest.raises(ParameterError):
        D.LssParams(var_noise=-1.0)


# --------------------------------------------------------------------------- U-SURF

def test_surf_constant_and_dims():
    vol = D.build_usurf(np.full((25, 25), 0.4))
    assert vol.dims == 32 and not vol.data.any()


@pytest.mark.parametrize("yx", [(16, 16), (3, 28), (31, 0)])
def test_surf_matches_box_sum_oracle(yx):
    img = rand((32, 32), 11)
    vol = D.build_usurf(img).data
    y, x = yx
    assert np.max(np.abs(vol[y, x] - surf_pixel(img, y, x))) < 1e-9


def test_surf_inversion_255():
    img = 255 * rand((30, 30), 12)
    assert np.max(np.abs(D.build_usurf(img).data - D.build_usurf(255 - img).data)) < 1e-9


# --------------------------------------------------------------------------- shared properties

@pytest.mark.parametrize("measure", MEASURES)
def test_too_small_image_rejected(measure):
    with pytest.raises(ParameterError):
        D.build_volume(np.zeros((2, 2)), measure)


@pytest.mark.parametrize("measure,dims", [("CFOG", 9), ("FHOG", 36), ("FLSS", 24), ("FSURF", 32)])
def test_channel_counts(measure, dims):
    vol = D.build_volume(rand((48, 48), 13), measure)
    assert vol.dims == dims
    assert np.all(np.isfinite(vol.data))
    if measure != "FSURF":
        assert vol.data.min() >= 0


@pytest.mark.parametrize("measure", MEASURES)
@pytest.mark.parametrize("c", [1.0, 3.5])
def test_inversion_invariance_any_constant(measure, c):
    img = rand((44, 44), 14)
    a = D.build_volume(img, measure).data
    b = D.build_volume(c - img, measure).data
    assert np.max(np.abs(a - b)) < 1e-9


@pytest.mark.parametrize("measure,params", [("CFOG", None), ("FHOG", None), ("FSURF", None),
                                            ("FLSS", D.LssParams(var_noise=0.0))])
def test_positive_gain_invariance(measure, params):
    img = rand((44, 44), 15)
    a = D.build_volume(img, measure, params).data
    b = D.build_volume(3.7 * img, measure, params).data
    assert np.max(np.abs(a - b)) < 1e-9


@pytest.mark.parametrize("measure", MEASURES)
def test_locality(measure):
    img = rand((64, 64), 16)
    base = D.build_volume(img, measure).data
    bumped = img.copy()
    bumped[32, 30] += 0.5
    # integral-image sums carry global roundoff, so compare beyond 1e-12
    diff = np.any(np.abs(D.build_volume(bumped, measure).data - base) > 1e-12, axis=2)
    ys, xs = np.nonzero(diff)
    rad = D.footprint_radius(measure)
    assert diff.any()
    assert np.all(np.abs(ys - 32) <= rad) and np.all(np.abs(xs - 30) <= rad)


def test_unknown_measure():
    with pytest.raises(ParameterError):
        D.build_volume(np.zeros((30, 30)), "SIFT")


def test_dump_volume_writes_one_pgm_per_channel(tmp_path):
    vol = D.build_cfog(rand((12, 12), 17), D.CfogParams(m=4))
    paths = D.dump_volume(vol, tmp_path / "dump", "cfog")
    assert [p.name for p in paths] == [f"cfog_{k:02d}.pgm" for k in range(4)]
    assert all(p.read_bytes().startswith(b"P5\n12 12\n255\n") for p in paths)


def test_feature_volume_is_read_only():
    vol = D.build_cfog(rand((10, 10), 18))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0
