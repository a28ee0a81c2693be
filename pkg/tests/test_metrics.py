import numpy as np
import pytest

import voxcomp as vc
from voxcomp.errors import (
    EmptyRegion,
    ShapeMismatch,
    SingularDesign,
    TooFewSamples,
    TooSmall,
)
from voxcomp.metrics import Atlas, EvalContext, EvalReport, design_matrix
from conftest import make_phantom


def vol_of(data):
    return vc.Volume4D(np.asarray(data, dtype=np.float32))


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def test_psnr_identity_capped(phantom):
    vol, _, _, _ = phantom
    assert vc.psnr(vol, vol) == 300.0


def test_psnr_hand_arithmetic():
    a = vol_of(np.array([0.0, 1.0]).reshape(2, 1, 1, 1))
    b = vol_of(np.zeros((2, 1, 1, 1)))
    assert vc.psnr(a, b, peak=1.0) == pytest.approx(3.0103, abs=1e-3)


def test_psnr_statistical_noise_level():
    rng = np.random.default_rng(0)
    base = rng.uniform(0, 1, size=(24, 24, 12, 20))
    noisy = base + rng.normal(0, 0.01, size=base.shape)
    value = vc.psnr(vol_of(base), vol_of(noisy), peak=1.0)
    assert abs(value - 40.0) < 0.5


def test_psnr_shape_guard():
    with pytest.raises(ShapeMismatch):
        vc.psnr(vol_of(np.zeros((2, 2, 2, 2))), vol_of(np.zeros((2, 2, 2, 3))))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def test_ssim_identity():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(16, 16))
    assert vc.ssim(img, img) == pytest.approx(1.0)


def test_ssim_constant_shift_decreases():
    rng = np.random.default_rng(2)
    img = rng.uniform(1.0, 2.0, size=(20, 20))   # positive-valued image
    values = [vc.ssim(img, img + c, data_range=float(img.max() - img.min()))
              for c in (0.0, 0.5, 1.0, 2.0)]
    assert values[0] == pytest.approx(1.0)
    assert values[0] > values[1] > values[2] > values[3]


def test_ssim_checkerboard_inverse_negative():
    board = np.indices((16, 16)).sum(axis=0) % 2 * 1.0
    assert vc.ssim(board, 1.0 - board) < 0


def test_ssim_matches_skimage():
    skimage = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(3)
    a = rng.normal(size=(32, 48))
    b = a + rng.normal(0, 0.3, size=a.shape)
    ours = vc.ssim(a, b)
    theirs = skimage.structural_similarity(
        a, b, win_size=11, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, data_range=float(a.max() - a.min()),
    )
    assert abs(ours - theirs) < 1e-10


def test_ssim_guards():
    with pytest.raises(TooSmall):
        vc.ssim(np.zeros((8, 20)), np.zeros((8, 20)))
    with pytest.raises(ShapeMismatch):
        vc.ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_ssim_volume_identity(phantom):
    vol, _, _, _ = phantom
    assert vc.ssim_volume(vol, vol) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# regression maps
# ---------------------------------------------------------------------------

def test_fla_exact_fit_capped_t():
    stim = vc.StimulusSpec(1, [[2, 20]], [[3, 3]], 40)
    hrf = vc.HrfParams()
    regressor = vc.hrf_convolve(stim, hrf)[0]
    data = np.zeros((2, 1, 1, 40), dtype=np.float32)
    data[0, 0, 0] = 5.0 * regressor + 2.0
    data[1, 0, 0] = 1.0
    vol = vc.Volume4D(data)
    mask = vc.Mask3D(np.array([[[True]], [[True]]]))
    tmap = vc.fla(vol, stim, hrf, mask)
    assert tmap.scores[0, 0, 0] == 1e6
    assert abs(tmap.effects[0, 0, 0] - 5.0) < 1e-6


def test_fla_pure_noise_mean_near_zero():
    rng = np.random.default_rng(4)
    stim = vc.StimulusSpec(1, [[4, 24]], [[4, 4]], 48)
    data = rng.normal(size=(10, 10, 10, 48)).astype(np.float32)
    vol = vc.Volume4D(data)
    mask = vc.Mask3D(np.ones((10, 10, 10), dtype=bool))
    tmap = vc.fla(vol, stim, vc.HrfParams(), mask)
    scores = tmap.scores[mask.data]
    assert abs(scores.mean()) < 0.1


def test_fla_phantom_region_contrast(phantom, phantom_mask):
    vol, truth, stim, hrf = phantom
    tmap = vc.fla(vol, stim, hrf, phantom_mask, contrast=1)
    driven = np.zeros_like(truth.region_labels, dtype=bool)
    for r in range(4):
        if r % stim.n_stimuli == 1:
            driven |= truth.region_labels == r
    out = phantom_mask.data & ~driven
    in_mean = np.abs(tmap.scores[driven & phantom_mask.data]).mean()
    out_mean = np.abs(tmap.scores[out]).mean()
    assert in_mean >= 5.0 * out_mean


def test_fla_affine_invariance(phantom, phantom_mask):
    vol, _, stim, hrf = phantom
    t1 = vc.fla(vol, stim, hrf, phantom_mask)
    a = t1.scores[phantom_mask.data]
    # pure power-of-two scaling is exact in float32 storage
    scaled = vc.Volume4D(2.0 * vol.data)
    b = vc.fla(scaled, stim, hrf, phantom_mask).scores[phantom_mask.data]
    assert np.max(np.abs(a - b)) < 1e-6
    # adding an offset rounds in float32 storage; invariance holds to that
    shifted = vc.Volume4D(2.0 * vol.data + 16.0)
    c = vc.fla(shifted, stim, hrf, phantom_mask).scores[phantom_mask.data]
    assert np.max(np.abs(a - c)) < 1e-4


def test_fla_singular_design():
    stim = vc.StimulusSpec(2, [[0], [0]], [[4], [4]], 30)  # identical regressors
    vol = vc.Volume4D(np.random.default_rng(5).normal(
        size=(2, 2, 1, 30)).astype(np.float32))
    mask = vc.Mask3D(np.ones((2, 2, 1), dtype=bool))
    with pytest.raises(SingularDesign):
        vc.fla(vol, stim, vc.HrfParams(), mask)


def test_design_matrix_columns():
    stim = vc.StimulusSpec(2, [[0], [8]], [[4], [4]], 32)
    x = design_matrix(stim, vc.HrfParams())
    assert x.shape == (32, 4)
    assert np.allclose(x[:, 2], 1.0)
    assert x[0, 3] == -1.0 and x[-1, 3] == 1.0


def test_fla_residual_cases(phantom, phantom_mask):
    vol, _, stim, hrf = phantom
    tmap = vc.fla(vol, stim, hrf, phantom_mask)
    assert vc.fla_residual(tmap, tmap, phantom_mask) == (0.0, 0.0)
    shifted = vc.TMap(tmap.scores + 1.0, tmap.dof, tmap.contrast,
                      effects=tmap.effects)
    mean, std = vc.fla_residual(tmap, shifted, phantom_mask)
    assert mean == pytest.approx(1.0)
    assert std == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# connectivity
# ---------------------------------------------------------------------------

def test_fca_identical_series_unit_correlation():
    series = np.sin(np.linspace(0, 6, 20))
    data = np.zeros((2, 1, 1, 20), dtype=np.float32)
    data[0, 0, 0] = series
    data[1, 0, 0] = series
    atlas = Atlas(np.array([[[0]], [[1]]]))
    conn = vc.fca(vc.Volume4D(data), atlas)
    assert conn.matrix[0, 1] == pytest.approx(1.0)
    assert np.allclose(np.diag(conn.matrix), 1.0)


def test_fca_negated_series():
    series = np.cos(np.linspace(0, 8, 24))
    data = np.zeros((2, 1, 1, 24), dtype=np.float32)
    data[0, 0, 0] = series
    data[1, 0, 0] = -series
    conn = vc.fca(vc.Volume4D(data), Atlas(np.array([[[0]], [[1]]])))
    assert conn.matrix[0, 1] == pytest.approx(-1.0)


def test_fca_zero_variance_convention():
    data = np.zeros((2, 1, 1, 10), dtype=np.float32)
    data[0, 0, 0] = np.arange(10)
    conn = vc.fca(vc.Volume4D(data), Atlas(np.array([[[0]], [[1]]])))
    assert conn.matrix[0, 1] == 0.0
    assert conn.matrix[1, 1] == 1.0


def test_fca_phantom_independent_regions():
    # sparse design: the two stimulus responses barely overlap in time
    vol, truth, stim, _ = make_phantom(seed=9, n_stimuli=2, n_regions=2,
                                       block=4, rest=10)
    atlas = Atlas(truth.region_labels)
    conn = vc.fca(vol, atlas)
    assert abs(conn.matrix[0, 1]) < 0.3


def test_fca_empty_region():
    data = np.zeros((2, 1, 1, 10), dtype=np.float32)
    labels = np.array([[[0]], [[2]]])     # region 1 missing
    with pytest.raises(EmptyRegion):
        vc.fca(vc.Volume4D(data), Atlas(labels))


def test_fca_residual_cases():
    m1 = vc.ConnectivityMatrix(np.eye(3), np.arange(3))
    assert vc.fca_residual(m1, m1) == (0.0, 0.0)
    changed = np.eye(3)
    changed[0, 1] = changed[1, 0] = 0.5
    m2 = vc.ConnectivityMatrix(changed, np.arange(3))
    mean, std = vc.fca_residual(m1, m2)
    assert mean == pytest.approx(0.5 / 3)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def separable_volume(margin=6.0, frames_per_class=20, noise=0.3, seed=6):
    rng = np.random.default_rng(seed)
    t = 2 * frames_per_class
    data = rng.normal(0, noise, size=(6, 6, 2, t)).astype(np.float32)
    labels = np.full(t, -1)
    labels[:frames_per_class] = 0
    labels[frames_per_class:] = 1
    direction = rng.normal(size=(6, 6, 2))
    direction /= np.linalg.norm(direction)
    for f in range(t):
        sign = 1.0 if labels[f] == 1 else -1.0
        data[..., f] += (sign * margin / 2.0 * direction).astype(np.float32)
    data += 10.0
    return vc.Volume4D(np.abs(data)), np.ones((6, 6, 2), dtype=bool), labels


def test_ct_separable_features():
    vol, mask, labels = separable_volume()
    acc, auc = vc.ct(vol, vc.Mask3D(mask), labels, folds=10, seed=0)
    assert acc > 0.99
    assert auc > 0.999


def test_ct_permuted_labels_chance():
    vol, mask, labels = separable_volume(frames_per_class=30)
    rng = np.random.default_rng(7)
    shuffled = labels.copy()
    rng.shuffle(shuffled)
    acc, _ = vc.ct(vol, vc.Mask3D(mask), shuffled, folds=10, seed=0)
    assert 0.4 <= acc <= 0.6


def test_ct_scale_invariance():
    vol, mask, labels = separable_volume(margin=2.0, noise=1.0)
    acc1, auc1 = vc.ct(vol, vc.Mask3D(mask), labels, folds=5, seed=0)
    scaled = vc.Volume4D(vol.data * 37.0)
    acc2, auc2 = vc.ct(scaled, vc.Mask3D(mask), labels, folds=5, seed=0)
    assert acc1 == acc2
    assert auc1 == pytest.approx(auc2, abs=1e-9)


def test_ct_too_few_samples():
    vol, mask, labels = separable_volume(frames_per_class=4)
    with pytest.raises(TooFewSamples):
        vc.ct(vol, vc.Mask3D(mask), labels, folds=10, seed=0)


# ---------------------------------------------------------------------------
# combined report
# ---------------------------------------------------------------------------

def test_evaluate_pair_identity_is_perfect(phantom, phantom_mask):
    vol, truth, stim, hrf = phantom
    ctx = EvalContext(mask=phantom_mask, stim=stim, hrf=hrf,
                      atlas=Atlas(truth.region_labels),
                      labels=None)
    report = vc.evaluate_pair(vol, vol, ctx)
    assert report.psnr == 300.0
    assert report.ssim == pytest.approx(1.0)
    assert report.fla_residual == (0.0, 0.0)
    assert report.fca_residual == (0.0, 0.0)
    assert report.skipped == ["ct"]


def test_evaluate_pair_orders_compressors(phantom, phantom_mask):
    vol, truth, stim, hrf = phantom
    rng = np.random.default_rng(8)
    noisy = vc.Volume4D(vol.data + rng.normal(0, 0.2 * vol.data.std(),
                                              vol.dims).astype(np.float32))
    ctx = EvalContext(mask=phantom_mask, stim=stim, hrf=hrf,
                      atlas=Atlas(truth.region_labels))
    clean_report = vc.evaluate_pair(vol, vol, ctx)
    noisy_report = vc.evaluate_pair(vol, noisy, ctx)
    assert noisy_report.psnr < clean_report.psnr
    assert noisy_report.ssim < clean_report.ssim
    assert noisy_report.fla_residual[0] > clean_report.fla_residual[0]
    assert noisy_report.fca_residual[0] > clean_report.fca_residual[0]


def test_report_json_roundtrip():
    report = EvalReport(psnr=42.5, ssim=0.987, fla_residual=(0.1, 0.05),
                        fca_residual=None, ct=(0.93, 0.99), ratio=31.0,
                        skipped=["fca"])
    assert EvalReport.from_json(report.to_json()) == report


def test_evaluate_pair_skips_without_context(phantom):
    vol, _, _, _ = phantom
    report = vc.evaluate_pair(vol, vol, None)
    assert sorted(report.skipped) == ["ct", "fca", "fla"]
    assert report.fla_residual is None
