"""Fidelity metrics for (original, decompressed) volume pairs.

Covers pixel-level quality (PSNR, SSIM) and three analysis-level checks:
per-voxel regression t-score maps against a stimulus design (fla), region
correlation matrices under an atlas (fca), and cross-validated linear
decoding of frame labels (ct).  The analysis metrics are reported as
residuals between the maps/matrices computed on both volumes, which is what
actually matters to someone consuming the decompressed data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .errors import (
    DimensionMismatch,
    EmptyRegion,
    ShapeMismatch,
    SingularDesign,
    TooFewSamples,
    TooSmall,
)
from .synth import HrfParams, StimulusSpec, hrf_convolve
from .volume import Mask3D, Volume4D

PSNR_CAP = 300.0
T_CAP = 1e6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


# ---------------------------------------------------------------------------
# PSNR / SSIM
# ---------------------------------------------------------------------------

def psnr(a: Volume4D, b: Volume4D, mask: Mask3D | None = None,
         peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB over in-mask voxels and all frames.

    ``peak`` defaults to the in-mask data range of ``a``; identical inputs
    return the documented cap of 300 dB.
    """
    if a.dims != b.dims:
        raise ShapeMismatch(f"volume dims differ: {a.dims} vs {b.dims}")
    if mask is not None:
        ref, other = a.data[mask.data], b.data[mask.data]
    else:
        ref, other = a.data, b.data
    if peak is None:
        peak = float(ref.max() - ref.min())
        if peak == 0.0:
            peak = 1.0
    mse = float(np.mean((ref.astype(np.float64) - other.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    pad = window.shape[0] // 2
    out = ndimage.correlate(img, window, mode="constant")
    return out[pad:-pad, pad:-pad]


def ssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> float:
    """Structural similarity between two 2-D arrays.

    Gaussian 11x11 window (sigma 1.5), stabilizers C1=(0.01 L)^2 and
    C2=(0.03 L)^2 with L the data range of ``a`` unless given, averaged over
    all fully interior window positions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeMismatch("ssim expects 2-D arrays")
    if min(a.shape) < SSIM_WINDOW:
        raise TooSmall(f"both dims must be >= {SSIM_WINDOW}")
    if data_range is None:
        data_range = float(a.max() - a.min())
    if data_range == 0.0:
        data_range = 1.0

    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _windowed_mean(a, window)
    mu_b = _windowed_mean(b, window)
    var_a = _windowed_mean(a * a, window) - mu_a ** 2
    var_b = _windowed_mean(b * b, window) - mu_b ** 2
    cov = _windowed_mean(a * b, window) - mu_a * mu_b

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_volume(a: Volume4D, b: Volume4D, data_range: float | None = None) -> float:
    """Volume SSIM: scored per (x, y) plane and averaged over z and t.

    A single data range (from ``a`` unless given) is shared by all slices so
    quiet frames are weighted on the same intensity scale as active ones.
    """
    if a.dims != b.dims:
        raise ShapeMismatch(f"volume dims differ: {a.dims} vs {b.dims}")
    if data_range is None:
        data_range = float(a.data.max() - a.data.min())
    w, h, d, t = a.dims
    scores = [
        ssim(a.data[:, :, z, f], b.data[:, :, z, f], data_range=data_range)
        for z in range(d)
        for f in range(t)
    ]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# first-level regression map (fla)
# ---------------------------------------------------------------------------

@dataclass
class TMap:
    """Per-voxel t-scores for one contrast; NaN outside the mask.

    ``effects`` carries the raw contrast estimates so exact fits can be
    inspected even where the t-score saturates at the cap.
    """

    scores: np.ndarray
    dof: int
    contrast: int
    effects: np.ndarray | None = None


def design_matrix(stim: StimulusSpec, hrf: HrfParams) -> np.ndarray:
    """(T, n_stimuli + 2) design: responses, intercept, linear drift."""
    regressors = hrf_convolve(stim, hrf).T
    t = stim.n_frames
    intercept = np.ones((t, 1))
    drift = np.linspace(-1.0, 1.0, t)[:, None]
    return np.hstack([regressors, intercept, drift])


def fla(vol: Volume4D, stim: StimulusSpec, hrf: HrfParams, mask: Mask3D,
        contrast: int = 0) -> TMap:
    """Per-voxel least-squares fit of the stimulus design; t-score map.

    The t statistic for the chosen stimulus regressor is its estimate over
    its standard error from the residual variance; exact fits are capped at
    1e6 to keep residual metrics finite.
    """
    x = design_matrix(stim, hrf)
    t, p = x.shape
    if t < p + 2:
        raise ValueError(f"need at least {p + 2} frames, got {t}")
    if np.linalg.matrix_rank(x) < p:
        raise SingularDesign("design matrix is rank deficient")

    y = vol.data[mask.data].T.astype(np.float64)      # (T, n)
    xtx_inv = np.linalg.inv(x.T @ x)
    beta = xtx_inv @ x.T @ y                          # (p, n)
    resid = y - x @ beta
    dof = t - p
    sigma2 = (resid ** 2).sum(axis=0) / dof

    c = np.zeros(p)
    c[contrast] = 1.0
    effect = c @ beta
    se = np.sqrt(sigma2 * (c @ xtx_inv @ c))
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(se > 0, effect / np.maximum(se, 1e-300),
                          np.sign(effect) * T_CAP)
    scores = np.clip(scores, -T_CAP, T_CAP)

    full = np.full(vol.dims[:3], np.nan, dtype=np.float64)
    full[mask.data] = scores
    full_effects = np.full(vol.dims[:3], np.nan, dtype=np.float64)
    full_effects[mask.data] = effect
    return TMap(full, dof=dof, contrast=contrast, effects=full_effects)


def fla_residual(t1: TMap, t2: TMap, mask: Mask3D) -> tuple[float, float]:
    """Mean and std of |t1 - t2| over in-mask voxels."""
    if t1.scores.shape != t2.scores.shape:
        raise ShapeMismatch("t-map shapes differ")
    diff = np.abs(t1.scores[mask.data] - t2.scores[mask.data])
    return float(diff.mean()), float(diff.std())


# ---------------------------------------------------------------------------
# region connectivity (fca)
# ---------------------------------------------------------------------------

@dataclass
class Atlas:
    """Integer region labels over the spatial grid; -1 marks background."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise DimensionMismatch("atlas labels must be 3-D")

    @property
    def n_regions(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class ConnectivityMatrix:
    """Symmetric region-by-region Pearson correlation matrix."""

    matrix: np.ndarray
    region_ids: np.ndarray


def fca(vol: Volume4D, atlas: Atlas) -> ConnectivityMatrix:
    """Correlation between region-mean series for every region pair.

    Zero-variance region series correlate 0 with everything off-diagonal
    (documented convention); the diagonal is always 1.
    """
    if atlas.labels.shape != vol.dims[:3]:
        raise ShapeMismatch("atlas shape disagrees with volume")
    n_regions = atlas.n_regions
    series = np.empty((n_regions, vol.dims[3]), dtype=np.float64)
    for r in range(n_regions):
        member = atlas.labels == r
        if not member.any():
            raise EmptyRegion(f"region {r} has no voxels")
        series[r] = vol.data[member].mean(axis=0)

    centered = series - series.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    corr = (centered @ centered.T) / np.outer(safe, safe)
    corr[norms == 0, :] = 0.0
    corr[:, norms == 0] = 0.0
    np.fill_diagonal(corr, 1.0)
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    return ConnectivityMatrix(corr, np.arange(n_regions))


def fca_residual(m1: ConnectivityMatrix, m2: ConnectivityMatrix) -> tuple[float, float]:
    """Mean and std of |m1 - m2| over upper-triangle off-diagonal entries."""
    if m1.matrix.shape != m2.matrix.shape:
        raise ShapeMismatch("connectivity matrices differ in size")
    iu = np.triu_indices(m1.matrix.shape[0], k=1)
    diff = np.abs(m1.matrix[iu] - m2.matrix[iu])
    return float(diff.mean()), float(diff.std())


# ---------------------------------------------------------------------------
# frame-label decoding (ct)
# ---------------------------------------------------------------------------

def ct(vol: Volume4D, mask: Mask3D, labels: np.ndarray, folds: int = 10,
       seed: int = 0) -> tuple[float, float]:
    """Linear max-margin decoding of two frame classes, stratified k-fold.

    Features are the in-mask voxel vectors of labeled frames, standardized
    per feature on each training fold; returns mean fold accuracy and the
    AUC of the pooled decision scores.
    """
    labels = np.asarray(labels)
    keep = labels >= 0
    classes = np.unique(labels[keep])
    if len(classes) != 2:
        raise TooFewSamples(f"need exactly 2 classes, got {len(classes)}")
    for cls in classes:
        if (labels == cls).sum() < folds:
            raise TooFewSamples(f"class {cls} has fewer than {folds} frames")

    features = vol.data[mask.data][:, keep].T.astype(np.float64)
    y = labels[keep]

    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    accs, all_scores, all_true = [], [], []
    for train_idx, test_idx in skf.split(features, y):
        scaler = StandardScaler().fit(features[train_idx])
        clf = SVC(kernel="linear", C=1.0)
        clf.fit(scaler.transform(features[train_idx]), y[train_idx])
        scores = clf.decision_function(scaler.transform(features[test_idx]))
        pred = (scores > 0).astype(y.dtype) * classes[1] + \
               (scores <= 0).astype(y.dtype) * classes[0]
        accs.append(float(np.mean(pred == y[test_idx])))
        all_scores.append(scores)
        all_true.append(y[test_idx])
    auc = float(roc_auc_score(np.concatenate(all_true), np.concatenate(all_scores)))
    return float(np.mean(accs)), auc


# ---------------------------------------------------------------------------
# combined report
# ---------------------------------------------------------------------------

@dataclass
class EvalContext:
    """Side information steering which metrics run."""

    mask: Mask3D | None = None
    stim: StimulusSpec | None = None
    hrf: HrfParams | None = None
    atlas: Atlas | None = None
    labels: np.ndarray | None = None
    folds: int = 10
    seed: int = 0
    ratio: float | None = None


@dataclass
class EvalReport:
    """Metric results for one (original, decompressed) pair."""

    psnr: float
    ssim: float
    fla_residual: tuple[float, float] | None = None
    fca_residual: tuple[float, float] | None = None
    ct: tuple[float, float] | None = None
    ratio: float | None = None
    skipped: list = field(default_factory=list)

    def to_json(self) -> str:
        def pair(v, names):
            return None if v is None else dict(zip(names, v))

        payload = {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "fla_residual": pair(self.fla_residual, ("mean", "std")),
            "fca_residual": pair(self.fca_residual, ("mean", "std")),
            "ct": pair(self.ct, ("accuracy", "auc")),
            "ratio": self.ratio,
            "skipped": sorted(self.skipped),
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)

        def pair(v, names):
            return None if v is None else tuple(v[n] for n in names)

        return cls(
            psnr=d["psnr"],
            ssim=d["ssim"],
            fla_residual=pair(d["fla_residual"], ("mean", "std")),
            fca_residual=pair(d["fca_residual"], ("mean", "std")),
            ct=pair(d["ct"], ("accuracy", "auc")),
            ratio=d["ratio"],
            skipped=list(d["skipped"]),
        )


def evaluate_pair(original: Volume4D, decompressed: Volume4D,
                  ctx: EvalContext | None = None) -> EvalReport:
    """Run every metric the context provides inputs for.

    Stimulus-dependent and label-dependent metrics are marked skipped when
    their side information is absent; the decoding metric is computed on the
    decompressed volume, which is what a downstream user would consume.
    """
    ctx = ctx or EvalContext()
    if original.dims != decompressed.dims:
        raise ShapeMismatch("volume dims differ")

    report = EvalReport(
        psnr=psnr(original, decompressed, mask=ctx.mask),
        ssim=ssim_volume(original, decompressed),
        ratio=ctx.ratio,
    )

    if ctx.stim is not None and ctx.hrf is not None and ctx.mask is not None:
        t1 = fla(original, ctx.stim, ctx.hrf, ctx.mask)
        t2 = fla(decompressed, ctx.stim, ctx.hrf, ctx.mask)
        report.fla_residual = fla_residual(t1, t2, ctx.mask)
    else:
        report.skipped.append("fla")

    if ctx.atlas is not None:
        report.fca_residual = fca_residual(fca(original, ctx.atlas),
                                           fca(decompressed, ctx.atlas))
    else:
        report.skipped.append("fca")

    if ctx.labels is not None and ctx.mask is not None:
        report.ct = ct(decompressed, ctx.mask, ctx.labels,
                       folds=ctx.folds, seed=ctx.seed)
    else:
        report.skipped.append("ct")

    return report
