"""Model fitting: warm start from the blind decomposition, then joint
optimization of all parameters under a combined structural + L2 loss.

Voxel batches are contiguous lexicographic coordinate runs (neighboring
rows are spatially adjacent voxels, so the structural term measures real
structure); the run order is reshuffled every epoch from the configured
seed.  Long series can be fitted in independent temporal chunks.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import KMismatch, LengthMismatch, NonFiniteLoss, ShapeMismatch
from .ica import IcaDecomposition, fast_ica
from .model import InrModel, ModelConfig, normalize_coords
from .volume import Mask3D, MeanFrame, Volume4D, VoxelSeriesSet, apply_mask, split_mean

INIT_MODES = ("ica", "uniform", "normal")


@dataclass
class TrainConfig:
    lr: float = 8e-4
    epochs: int = 1500
    pretrain_epochs: int = 100
    batch_voxels: int = 4096
    ssim_weight: float = 0.1
    seed: int = 0
    chunk_len: int | None = None
    init: str = "ica"
    log_path: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.ssim_weight < 0:
            raise ValueError("ssim_weight must be >= 0")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")

    def digest(self) -> str:
        import hashlib

        text = json.dumps(self.__dict__, sort_keys=True, default=str)
        return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)
    final_psnr: float = float("nan")
    wall_time: float = 0.0
    converged: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _gaussian_window_torch(size: int, sigma: float, dtype, device) -> torch.Tensor:
    half = size // 2
    coords = torch.arange(size, dtype=dtype, device=device) - half
    g = torch.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim_torch(a: torch.Tensor, b: torch.Tensor,
               data_range: float | None = None) -> torch.Tensor:
    """Differentiable SSIM of two 2-D tensors treated as one image.

    Mirrors the evaluation-side implementation (Gaussian window, sigma 1.5,
    interior positions only); the window shrinks to the smaller image side
    when 11 does not fit, so small training batches remain usable.
    """
    if a.shape != b.shape or a.dim() != 2:
        raise ShapeMismatch("ssim_torch expects two equally-shaped 2-D tensors")
    win = min(11, a.shape[0], a.shape[1])
    if win % 2 == 0:
        win -= 1
    if data_range is None:
        data_range = float((a.max() - a.min()).item())
    if data_range == 0.0:
        data_range = 1.0

    kernel = _gaussian_window_torch(win, 1.5, a.dtype, a.device).reshape(1, 1, win, win)
    aa = a.reshape(1, 1, *a.shape)
    bb = b.reshape(1, 1, *b.shape)
    mu_a = F.conv2d(aa, kernel)
    mu_b = F.conv2d(bb, kernel)
    var_a = F.conv2d(aa * aa, kernel) - mu_a ** 2
    var_b = F.conv2d(bb * bb, kernel) - mu_b ** 2
    cov = F.conv2d(aa * bb, kernel) - mu_a * mu_b

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def batch_loss(gt: torch.Tensor, pred: torch.Tensor, sigma: float) -> torch.Tensor:
    """(1 - SSIM) * sigma + mean squared error over a (b, T) batch."""
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"batch shapes differ: {tuple(gt.shape)} vs "
                            f"{tuple(pred.shape)}")
    if gt.shape[0] < 2:
        raise ShapeMismatch("batch needs at least 2 rows")
    mse = torch.mean((gt - pred) ** 2)
    if sigma == 0.0:
        return mse
    return (1.0 - ssim_torch(gt, pred)) * sigma + mse


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _contiguous_batches(n: int, batch_size: int) -> list:
    """Slices covering [0, n) in runs of batch_size; no 1-row stragglers."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        del bounds[-2]
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------------------
# fitting stages
# ---------------------------------------------------------------------------

def pretrain(model: InrModel, decomp: IcaDecomposition,
             series_set: VoxelSeriesSet, cfg: TrainConfig) -> InrModel:
    """Warm start: copy patterns into the bank, fit the weight MLPs to the
    decomposition's spatial maps (bank frozen, everything else untouched)."""
    if decomp.k != model.config.k:
        raise KMismatch(f"decomposition K={decomp.k}, model K={model.config.k}")
    if decomp.n_frames != model.config.t:
        raise LengthMismatch(f"decomposition T={decomp.n_frames}, "
                             f"model T={model.config.t}")

    with torch.no_grad():
        model.bank.copy_(torch.from_numpy(decomp.patterns.astype(np.float32)))

    if cfg.pretrain_epochs <= 0:
        return model

    coords = normalize_coords(series_set.coords, series_set.dims)
    targets = torch.from_numpy(decomp.maps.astype(np.float32))
    params = [p for mlp in model.weight_mlps for p in mlp.parameters()]
    opt = torch.optim.Adamax(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    batches = _contiguous_batches(series_set.n_voxels, cfg.batch_voxels)

    for _ in range(cfg.pretrain_epochs):
        for bi in rng.permutation(len(batches)):
            sl = batches[bi]
            opt.zero_grad()
            loss = torch.mean((model.predict_weights(coords[sl]) - targets[sl]) ** 2)
            loss.backward()
            opt.step()
    return model


def train(model: InrModel, series_set: VoxelSeriesSet,
          cfg: TrainConfig) -> tuple[InrModel, TrainReport]:
    """Joint optimization of all model parameters with Adamax.

    Aborts with :class:`NonFiniteLoss` if the loss leaves the finite range.
    The report's PSNR is measured on the training series themselves (peak =
    their data range).
    """
    start = time.perf_counter()
    coords = normalize_coords(series_set.coords, series_set.dims)
    gt = torch.from_numpy(series_set.series)
    opt = torch.optim.Adamax(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    batches = _contiguous_batches(series_set.n_voxels, cfg.batch_voxels)

    log = open(cfg.log_path, "w") if cfg.log_path else None
    report = TrainReport()
    try:
        for epoch in range(cfg.epochs):
            epoch_losses = []
            for bi in rng.permutation(len(batches)):
                sl = batches[bi]
                opt.zero_grad()
                loss = batch_loss(gt[sl], model(coords[sl]), cfg.ssim_weight)
                value = float(loss.item())
                if not math.isfinite(value):
                    report.converged = {"completed": False, "non_finite": True}
                    raise NonFiniteLoss(f"loss became {value} at epoch {epoch}")
                loss.backward()
                opt.step()
                epoch_losses.append(value)
            report.loss_curve.append(float(np.mean(epoch_losses)))
            if log:
                log.write(json.dumps({
                    "epoch": epoch,
                    "loss": report.loss_curve[-1],
                    "lr": cfg.lr,
                    "wall_time": time.perf_counter() - start,
                }) + "\n")
    finally:
        if log:
            log.close()

    with torch.no_grad():
        preds = torch.cat([model(coords[sl]) for sl in batches])
        mse = float(torch.mean((gt - preds) ** 2).item())
    peak = float(gt.max().item() - gt.min().item()) or 1.0
    report.final_psnr = 300.0 if mse == 0 else min(10 * math.log10(peak ** 2 / mse), 300.0)
    report.wall_time = time.perf_counter() - start
    report.converged = {"completed": True, "non_finite": False}
    return model, report


def fit_series(series: np.ndarray, coords: np.ndarray, dims,
               model_cfg: ModelConfig, cfg: TrainConfig,
               ) -> tuple[InrModel, TrainReport, IcaDecomposition | None]:
    """One full fitting pipeline on an already-normalized series chunk."""
    torch.manual_seed(cfg.seed)
    model = InrModel(model_cfg)
    sset = VoxelSeriesSet(coords, series, dims=dims)

    decomp = None
    if cfg.init == "ica":
        decomp = fast_ica(series.astype(np.float64), model_cfg.k, seed=cfg.seed)
        pretrain(model, decomp, sset, cfg)
    else:
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.no_grad():
            if cfg.init == "uniform":
                limit = math.sqrt(3.0)
                model.bank.uniform_(-limit, limit, generator=gen)
            else:
                model.bank.normal_(0.0, 1.0, generator=gen)

    model, report = train(model, sset, cfg)
    return model, report, decomp


@dataclass
class ChunkFit:
    start: int
    stop: int
    model: InrModel
    report: TrainReport


@dataclass
class ChunkedTraining:
    """Everything the codec needs to package a fitted volume."""

    chunks: list
    mean_frame: MeanFrame
    mask: Mask3D
    norm_offset: float
    norm_scale: float


def train_chunked(vol: Volume4D, mask: Mask3D, cfg: TrainConfig,
                  model_cfg: ModelConfig) -> ChunkedTraining:
    """Mean-split, normalize, and fit one model per temporal chunk.

    ``cfg.chunk_len`` of None (or >= T) gives a single chunk.  One global
    normalization is shared by all chunks so the packed header stays simple.
    """
    mean, residual = split_mean(vol)
    sset = apply_mask(residual, mask)
    t = vol.dims[3]

    norm_offset = float(sset.series.mean())
    norm_scale = float(sset.series.std())
    if norm_scale == 0.0:
        norm_scale = 1.0
    normalized = ((sset.series - norm_offset) / norm_scale).astype(np.float32)

    chunk_len = cfg.chunk_len or t
    if chunk_len > t:
        chunk_len = t
    ranges = [(s, min(s + chunk_len, t)) for s in range(0, t, chunk_len)]

    chunks = []
    for ci, (start, stop) in enumerate(ranges):
        chunk_model_cfg = replace(model_cfg, t=stop - start)
        chunk_cfg = replace(cfg, seed=cfg.seed + ci, chunk_len=None,
                            log_path=None if cfg.log_path is None or ci > 0
                            else cfg.log_path)
        model, report, _ = fit_series(normalized[:, start:stop], sset.coords,
                                      vol.dims, chunk_model_cfg, chunk_cfg)
        chunks.append(ChunkFit(start, stop, model, report))

    return ChunkedTraining(chunks, mean, mask, norm_offset, norm_scale)
