"""Neural-field compression for 4-D volumetric time series.

The package fits a compact coordinate-conditioned model to one volume at a
time (a learnable bank of temporal patterns, per-pattern weight fields, and
a nonlinear fusion network, warm-started from a blind decomposition of the
masked voxel series), serializes it with quantization and entropy coding,
and ships an evaluation harness covering pixel fidelity plus three
analysis-level fidelity metrics.
"""

from .codec import (
    CompressedArtifact,
    HuffmanTable,
    QuantizedTensor,
    RatioReport,
    compression_ratio,
    decode_mean_frame,
    decompress,
    dequantize_tensor,
    encode_mean_frame,
    huffman_decode,
    huffman_encode,
    pack,
    pack_chunks,
    quantize_tensor,
    unpack,
)
from .ica import IcaDecomposition, amari_index, components_for_init, fast_ica, whiten
from .metrics import (
    Atlas,
    ConnectivityMatrix,
    EvalContext,
    EvalReport,
    TMap,
    ct,
    evaluate_pair,
    fca,
    fca_residual,
    fla,
    fla_residual,
    psnr,
    ssim,
    ssim_volume,
)
from .model import InrModel, ModelConfig, channel_attention, embed_coords, normalize_coords
from .pipeline import CompressResult, compress_volume
from .synth import HrfParams, StimulusSpec, SynthGroundTruth, frame_labels, generate, hrf_convolve
from .training import TrainConfig, TrainReport, batch_loss, pretrain, train, train_chunked
from .volume import (
    Mask3D,
    MeanFrame,
    Volume4D,
    VoxelSeriesSet,
    apply_mask,
    auto_mask,
    load_volume,
    save_rawbin,
    split_mean,
)

__version__ = "0.1.0"
