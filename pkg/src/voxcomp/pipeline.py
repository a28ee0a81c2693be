"""End-to-end compression pipeline: mask, mean split, decomposition-seeded
training, packaging, and the inverse path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import CompressedArtifact, RatioReport, compression_ratio, decompress, pack_chunks
from .metrics import psnr
from .model import ModelConfig
from .training import ChunkedTraining, TrainConfig, train_chunked
from .volume import Mask3D, Volume4D, auto_mask


@dataclass
class CompressResult:
    artifact: CompressedArtifact
    ratio: RatioReport
    train_psnr: float
    fit: ChunkedTraining


def compress_volume(
    vol: Volume4D,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mask: Mask3D | None = None,
    mask_threshold: float = 0.1,
    bits: int = 8,
    mean_lossless: bool = True,
    mean_quality: int = 90,
) -> CompressResult:
    """Fit and package one volume.

    ``model_cfg.t`` is overridden per temporal chunk, so callers only need
    to set the architecture knobs.  The returned PSNR is measured on the
    training volume itself after a full decode of the fresh artifact.
    """
    if mask is None:
        mask = auto_mask(vol, rel_threshold=mask_threshold)

    fit = train_chunked(vol, mask, train_cfg, model_cfg)
    artifact = pack_chunks(
        [(c.start, c.stop, c.model) for c in fit.chunks],
        fit.mean_frame,
        mask,
        fit.chunks[0].model.config,
        vol.dims,
        bits=bits,
        mean_lossless=mean_lossless,
        mean_quality=mean_quality,
        norm_offset=fit.norm_offset,
        norm_scale=fit.norm_scale,
        source_dtype=vol.source_dtype,
        voxel_scale=vol.voxel_scale,
        train_digest=train_cfg.digest(),
    )
    ratio = compression_ratio(artifact, vol)
    restored = decompress(artifact)
    return CompressResult(artifact, ratio, psnr(vol, restored, mask=mask), fit)
