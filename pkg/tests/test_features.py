"""Standardization, EDF feature extraction, and the col.std baseline."""

import numpy as np
import pytest

from edfdetect.errors import DataError
from edfdetect.features import (Patch, colstd_features, extract_edf_features,
                                q_for_frequency, read_features_csv,
                                standardize_patch, write_features_csv)
from edfdetect.synth import (CRATER, DefectSpec, GenerationConfig,
                             inject_defect, render_clean_patch)

F8_SPEC = GenerationConfig().channel_spec(8.0, np.pi)


def make_patch(pixels, f=8.0, psi=0.0, label=None, patch_id="t"):
    return Patch(pixels=np.asarray(pixels, dtype=float), frequency=f, phase=psi,
                 label=label, patch_id=patch_id)


def test_standardize_constant_patch_degenerate():
    patch = make_patch(np.full((31, 31), 5.0))
    out = standardize_patch(patch)
    assert out.degenerate
    assert np.all(out.pixels == 0.0)


def test_standardize_checkerboard():
    pixels = np.indices((31, 31)).sum(axis=0) % 2
    out = standardize_patch(make_patch(pixels))
    assert abs(out.pixels.mean()) < 1e-10
    assert abs(out.pixels.std(ddof=1) - 1.0) < 1e-10


def test_standardize_affine_invariance():
    rng = np.random.default_rng(0)
    pixels = rng.standard_normal((31, 31))
    a = standardize_patch(make_patch(pixels))
    b = standardize_patch(make_patch(3.7 * pixels + 11.0))
    np.testing.assert_allclose(a.pixels, b.pixels, atol=1e-10)


@pytest.mark.parametrize("f,q", [(8, 20), (16, 30), (32, 30), (33, 40), (64, 40),
                                 (0.5, 20), (9, 30)])
def test_q_for_frequency(f, q):
    assert q_for_frequency(f) == q


def test_q_for_frequency_rejects_nonpositive():
    with pytest.raises(DataError):
        q_for_frequency(0.0)


def test_defect_free_rows_noiseless_are_homogeneous():
    # without pixel noise every row is the same sinusoid, so tau is constant
    from dataclasses import replace
    spec = replace(F8_SPEC, noise_sigma=0.0)
    patch = render_clean_patch(spec, 91, origin_col=50, seed=0)
    fv = extract_edf_features(patch)
    assert fv.tau.max() - fv.tau.min() <= 0.05


def test_defect_free_rows_noisy_spread_within_calibrated_band():
    # noisy rows jitter through the GCV selection; bound fixed by the
    # calibration sweep in docs/calibration.md
    patch = render_clean_patch(F8_SPEC, 91, origin_col=50, seed=0)
    fv = extract_edf_features(patch)
    assert fv.tau.max() - fv.tau.min() <= 0.55
    assert fv.tau.max() == 1.0


def test_crater_rows_are_the_wiggliest():
    patch = render_clean_patch(F8_SPEC, 91, origin_col=50, seed=0)
    crater = DefectSpec(CRATER, (41.0, 45.0), radius=13.0, strength=2.75)
    fv = extract_edf_features(inject_defect(patch, F8_SPEC, crater))
    peak_row = int(np.argmax(fv.raw_edf))
    assert 41 - 13 <= peak_row <= 41 + 13  # max sits inside the crater footprint
    assert fv.tau[41] > fv.tau[:10].mean()
    assert fv.tau[41] >= 0.85


@pytest.mark.xfail(reason="ring rows adjacent to the centre tie within GCV "
                   "selection noise, so the argmax can land a few rows off "
                   "centre; the footprint-level property is asserted above",
                   strict=False)
def test_crater_centre_row_scales_to_exactly_one():
    patch = render_clean_patch(F8_SPEC, 91, origin_col=50, seed=0)
    crater = DefectSpec(CRATER, (41.0, 45.0), radius=13.0, strength=2.75)
    fv = extract_edf_features(inject_defect(patch, F8_SPEC, crater))
    assert fv.tau[41] == 1.0


def test_constant_patch_features_floor():
    fv = extract_edf_features(make_patch(np.full((31, 31), 2.5)))
    np.testing.assert_array_equal(fv.raw_edf, np.full(31, 2.0))
    np.testing.assert_array_equal(fv.tau, np.ones(31))
    assert fv.degenerate


def test_feature_vector_invariants():
    rng = np.random.default_rng(10)
    patch = make_patch(rng.standard_normal((31, 31)))
    fv = extract_edf_features(patch)
    assert fv.tau.max() == 1.0
    assert np.all(fv.tau > 0)
    np.testing.assert_allclose(fv.tau * fv.raw_edf.max(), fv.raw_edf, rtol=1e-10)
    assert fv.dim == 31


def test_feature_affine_invariance():
    rng = np.random.default_rng(11)
    pixels = rng.standard_normal((31, 31))
    fv1 = extract_edf_features(make_patch(pixels))
    fv2 = extract_edf_features(make_patch(0.25 * pixels - 4.0))
    np.testing.assert_allclose(fv1.tau, fv2.tau, atol=1e-8)


def test_row_permutation_equivariance():
    rng = np.random.default_rng(12)
    pixels = rng.standard_normal((31, 31))
    perm = rng.permutation(31)
    fv = extract_edf_features(make_patch(pixels))
    fv_perm = extract_edf_features(make_patch(pixels[perm]))
    np.testing.assert_array_equal(fv.tau[perm], fv_perm.tau)


def test_extraction_is_deterministic():
    rng = np.random.default_rng(13)
    pixels = rng.standard_normal((31, 31))
    a = extract_edf_features(make_patch(pixels))
    b = extract_edf_features(make_patch(pixels))
    assert np.array_equal(a.tau, b.tau)
    assert np.array_equal(a.raw_edf, b.raw_edf)


def test_small_patch_rejected():
    with pytest.raises(DataError):
        extract_edf_features(make_patch(np.zeros((21, 21))))


def test_colstd_constant_patch():
    fv = colstd_features(make_patch(np.full((31, 31), 1.0)))
    assert fv.degenerate
    assert np.all(fv.tau == 0.0)


def test_colstd_loud_column_scales_to_one():
    rng = np.random.default_rng(14)
    pixels = 0.1 * rng.standard_normal((31, 31))
    pixels[:, 7] = rng.standard_normal(31) * 10.0
    fv = colstd_features(make_patch(pixels))
    assert fv.tau[7] == 1.0
    assert np.all(fv.tau[np.arange(31) != 7] < 1.0)


def test_colstd_matches_two_pass_oracle():
    rng = np.random.default_rng(15)
    pixels = rng.standard_normal((31, 31))
    fv = colstd_features(make_patch(pixels))
    std = standardize_patch(make_patch(pixels)).pixels
    oracle = np.empty(31)
    for c in range(31):
        col = std[:, c]
        mean = col.sum() / 31
        oracle[c] = np.sqrt(((col - mean) ** 2).sum() / 30)
    np.testing.assert_allclose(fv.raw_edf, oracle, atol=1e-10)
    np.testing.assert_allclose(fv.tau, oracle / oracle.max(), atol=1e-10)


def test_features_csv_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    vectors = [extract_edf_features(make_patch(rng.standard_normal((31, 31)),
                                               label="dirt", patch_id=f"p{i}"))
               for i in range(3)]
    path = tmp_path / "features.csv"
    write_features_csv(vectors, path)
    loaded = read_features_csv(path)
    assert len(loaded) == 3
    for orig, back in zip(vectors, loaded):
        assert back.patch_id == orig.patch_id
        assert back.label == orig.label
        assert back.frequency == orig.frequency
        assert back.phase == orig.phase
        np.testing.assert_array_equal(back.tau, orig.tau)


def test_features_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(DataError):
        read_features_csv(path)


def test_features_csv_rejects_non_finite_tau(tmp_path):
    path = tmp_path / "naff.csv"
    path.write_text("patch_id,label,f,psi,m,tau_1,tau_2\np0,dirt,8.0,0.0,2,nan,1.0\n")
    with pytest.raises(DataError):
        read_features_csv(path)
