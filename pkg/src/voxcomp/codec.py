"""Serialization of fitted models into a self-contained compressed artifact.

Pipeline: every parameter tensor is affine-quantized per tensor, the
quantized symbols of a chunk are entropy-coded with one shared canonical
Huffman table, the mean frame is packed as per-slice PNG/JPEG images, and
the mask is run-length encoded.  The container is little-endian with
explicit section lengths and a 64-bit checksum, so an artifact file decodes
in a fresh process with no side information.

Byte-level layout is documented in docs/format.md.
"""

from __future__ import annotations

import heapq
import io
import json
import struct
from dataclasses import dataclass, replace

import numpy as np
import torch
from PIL import Image

from .errors import (
    ChecksumMismatch,
    CorruptHeader,
    CorruptStream,
    NonFiniteInput,
    VersionUnsupported,
)
from .model import InrModel, ModelConfig, normalize_coords
from .volume import Mask3D, MeanFrame, Volume4D

ARTIFACT_MAGIC = b"ICNR"
ARTIFACT_VERSION = 1


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

@dataclass
class QuantizedTensor:
    """Per-tensor affine quantization: value ~= offset + scale * symbol."""

    symbols: np.ndarray       # uint16, flat
    scale: np.float32
    offset: np.float32
    bits: int
    shape: tuple


def quantize_tensor(values: np.ndarray, bits: int) -> QuantizedTensor:
    """Quantize a float tensor to ``bits``-wide symbols.

    The full value range maps onto [0, 2^bits); constant tensors use scale 1
    so they round-trip exactly.  The per-element error is at most scale/2.
    """
    if not 1 <= bits <= 16:
        raise ValueError("bits must lie in [1, 16]")
    values = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput("cannot quantize non-finite values")

    lo = np.float32(values.min()) if values.size else np.float32(0.0)
    hi = np.float32(values.max()) if values.size else np.float32(0.0)
    levels = (1 << bits) - 1
    if hi == lo:
        scale = np.float32(1.0)
    else:
        scale = np.float32((np.float64(hi) - np.float64(lo)) / levels)
    symbols = np.clip(
        np.rint((values.astype(np.float64) - np.float64(lo)) / np.float64(scale)),
        0, levels,
    ).astype(np.uint16)
    return QuantizedTensor(symbols.ravel(), scale, np.float32(lo), bits, values.shape)


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    """Exact float32 reconstruction of the quantized grid values."""
    values = qt.symbols.astype(np.float32) * qt.scale + qt.offset
    return values.reshape(qt.shape)


# ---------------------------------------------------------------------------
# canonical Huffman coding
# ---------------------------------------------------------------------------

@dataclass
class HuffmanTable:
    """Canonical code lengths per symbol (0 = unused)."""

    lengths: np.ndarray
    alphabet: int

    def used_symbols(self) -> np.ndarray:
        return np.flatnonzero(self.lengths)

    def to_bytes(self) -> bytes:
        syms = self.used_symbols()
        out = struct.pack("<HI", self.alphabet, len(syms))
        for s in syms:
            out += struct.pack("<HB", int(s), int(self.lengths[s]))
        return out

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["HuffmanTable", int]:
        alphabet, n_used = struct.unpack_from("<HI", data, offset)
        offset += 6
        lengths = np.zeros(max(alphabet, 1), dtype=np.uint8)
        for _ in range(n_used):
            sym, ln = struct.unpack_from("<HB", data, offset)
            offset += 3
            lengths[sym] = ln
        return cls(lengths, alphabet), offset


def _build_lengths(counts: np.ndarray) -> np.ndarray:
    """Huffman code lengths from symbol counts (deterministic tie-breaks)."""
    lengths = np.zeros(len(counts), dtype=np.uint8)
    syms = np.flatnonzero(counts)
    if len(syms) == 0:
        return lengths
    if len(syms) == 1:
        lengths[syms[0]] = 1
        return lengths
    heap = [(int(counts[s]), int(s), (int(s),)) for s in syms]
    heapq.heapify(heap)
    serial = len(counts)
    while len(heap) > 1:
        lo = heapq.heappop(heap)
        hi = heapq.heappop(heap)
        merged = lo[2] + hi[2]
        for s in merged:
            lengths[s] += 1
        heapq.heappush(heap, (lo[0] + hi[0], serial, merged))
        serial += 1
    return lengths


def _canonical_codes(lengths: np.ndarray) -> np.ndarray:
    """Assign canonical codes: symbols ordered by (length, symbol)."""
    codes = np.zeros(len(lengths), dtype=np.uint64)
    order = sorted(np.flatnonzero(lengths), key=lambda s: (lengths[s], s))
    code = 0
    prev_len = int(lengths[order[0]]) if order else 0
    for s in order:
        code <<= int(lengths[s]) - prev_len
        codes[s] = code
        code += 1
        prev_len = int(lengths[s])
    return codes


def huffman_encode(symbols: np.ndarray, alphabet: int) -> tuple[HuffmanTable, bytes, int]:
    """Entropy-code a symbol array; returns (table, payload, bit length)."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if symbols.size and symbols.max() >= alphabet:
        raise ValueError("symbol outside declared alphabet")
    counts = np.bincount(symbols, minlength=alphabet)
    table = HuffmanTable(_build_lengths(counts), alphabet)
    if symbols.size == 0:
        return table, b"", 0

    codes = _canonical_codes(table.lengths)
    lens = table.lengths[symbols].astype(np.int64)
    code_vals = codes[symbols]
    max_len = int(lens.max())
    if max_len > 63:
        raise CorruptStream("code length exceeds 63 bits")

    total = int(lens.sum())
    starts = np.cumsum(lens) - lens
    bits = np.zeros(total, dtype=np.uint8)
    for b in range(max_len):
        sel = lens > b
        shift = (lens[sel] - 1 - b).astype(np.uint64)
        bits[starts[sel] + b] = ((code_vals[sel] >> shift) & np.uint64(1)).astype(np.uint8)
    return table, np.packbits(bits).tobytes(), total


def huffman_decode(table: HuffmanTable, payload: bytes, n: int,
                   bit_len: int | None = None) -> np.ndarray:
    """Decode exactly ``n`` symbols; raises :class:`CorruptStream` on any
    prefix walk that leaves the code tree or exhausts the stream early."""
    if n == 0:
        return np.zeros(0, dtype=np.uint16)
    lengths = table.lengths
    order = sorted(np.flatnonzero(lengths), key=lambda s: (lengths[s], s))
    if not order:
        raise CorruptStream("empty table cannot decode symbols")
    max_len = int(lengths[order[-1]])

    # canonical decoding tables indexed by code length
    first_code = np.zeros(max_len + 2, dtype=np.int64)
    count = np.zeros(max_len + 2, dtype=np.int64)
    first_index = np.zeros(max_len + 2, dtype=np.int64)
    codes = _canonical_codes(lengths)
    for idx, s in enumerate(order):
        ln = int(lengths[s])
        if count[ln] == 0:
            first_code[ln] = int(codes[s])
            first_index[ln] = idx
        count[ln] += 1

    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if bit_len is not None:
        if bit_len > len(bits):
            raise CorruptStream("declared bit length exceeds payload")
        bits = bits[:bit_len]
    out = np.empty(n, dtype=np.uint16)
    pos = 0
    n_bits = len(bits)
    sym_order = np.array(order, dtype=np.int64)
    for i in range(n):
        code = 0
        ln = 0
        while True:
            if pos >= n_bits:
                raise CorruptStream("stream ended mid-symbol")
            code = (code << 1) | int(bits[pos])
            pos += 1
            ln += 1
            if ln > max_len:
                raise CorruptStream("prefix walk left the code tree")
            if count[ln] and code - first_code[ln] < count[ln]:
                if code < first_code[ln]:
                    continue
                out[i] = sym_order[first_index[ln] + code - first_code[ln]]
                break
    return out


# ---------------------------------------------------------------------------
# mean-frame image coding
# ---------------------------------------------------------------------------

def encode_mean_frame(mean: MeanFrame, quality: int = 90,
                      lossless: bool = True) -> tuple[bytes, list]:
    """Pack depth slices as 8-bit grayscale images.

    Each (x, y) slice is affinely mapped to [0, 255] (per-slice lo/hi kept
    as metadata) and stored as PNG (lossless mode) or JPEG at the given
    quality.  Returns the concatenated length-prefixed payload plus the
    per-slice mapping table.
    """
    if not lossless and not 1 <= quality <= 100:
        raise ValueError("quality must lie in [1, 100]")
    blobs, meta = [], []
    for z in range(mean.data.shape[2]):
        sl = mean.data[:, :, z].astype(np.float64)
        lo, hi = float(sl.min()), float(sl.max())
        if hi > lo:
            u8 = np.rint((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            u8 = np.zeros_like(sl, dtype=np.uint8)
        buf = io.BytesIO()
        img = Image.fromarray(u8, mode="L")
        if lossless:
            img.save(buf, format="PNG", optimize=True)
        else:
            img.save(buf, format="JPEG", quality=quality)
        blobs.append(buf.getvalue())
        meta.append((lo, hi))
    payload = b"".join(struct.pack("<I", len(b)) + b for b in blobs)
    return payload, meta


def decode_mean_frame(payload: bytes, meta: list, dims3: tuple) -> MeanFrame:
    """Inverse of :func:`encode_mean_frame`."""
    w, h, d = dims3
    out = np.zeros((w, h, d), dtype=np.float32)
    offset = 0
    for z in range(d):
        (n,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        img = Image.open(io.BytesIO(payload[offset:offset + n]))
        offset += n
        u8 = np.asarray(img, dtype=np.float64)
        lo, hi = meta[z]
        out[:, :, z] = (lo + u8 / 255.0 * (hi - lo)).astype(np.float32)
    return MeanFrame(out)


# ---------------------------------------------------------------------------
# mask RLE
# ---------------------------------------------------------------------------

def _write_varint(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        out.append(byte | (0x80 if value else 0))
        if not value:
            return bytes(out)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = shift = 0
    while True:
        if pos >= len(data):
            raise CorruptStream("varint ran past the payload")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            return value, pos


def _rle_encode(flat: np.ndarray) -> bytes:
    flat = flat.astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    runs = np.diff(bounds)
    return bytes([int(flat[0])]) + b"".join(_write_varint(int(r)) for r in runs)


def _rle_decode(data: bytes, n: int) -> np.ndarray:
    value = bool(data[0])
    out = np.empty(n, dtype=bool)
    pos, cursor = 1, 0
    while pos < len(data):
        run, pos = _read_varint(data, pos)
        if cursor + run > n:
            raise CorruptStream("mask run lengths overflow the volume")
        out[cursor:cursor + run] = value
        cursor += run
        value = not value
    if cursor != n:
        raise CorruptStream("mask run lengths do not cover the volume")
    return out


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass
class CompressedArtifact:
    """In-memory artifact: JSON-able header plus named binary sections."""

    header: dict
    sections: dict

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header, sort_keys=True).encode()
        out = ARTIFACT_MAGIC + struct.pack("<HI", ARTIFACT_VERSION, len(head)) + head
        for name, payload in self.sections.items():
            nb = name.encode()
            out += struct.pack("<H", len(nb)) + nb
            out += struct.pack("<I", len(payload)) + payload
        out += struct.pack("<Q", _checksum(out))
        return out

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedArtifact":
        if blob[:4] != ARTIFACT_MAGIC:
            raise CorruptHeader("not a compressed artifact")
        version, head_len = struct.unpack_from("<HI", blob, 4)
        if version != ARTIFACT_VERSION:
            raise VersionUnsupported(f"artifact version {version} unsupported")
        if len(blob) < 18 + head_len:
            raise CorruptHeader("artifact truncated")
        (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
        if _checksum(blob[:-8]) != stored:
            raise ChecksumMismatch("artifact payload corrupt")
        header = json.loads(blob[10:10 + head_len])
        sections = {}
        pos = 10 + head_len
        end = len(blob) - 8
        while pos < end:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode()
            pos += name_len
            (pay_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            sections[name] = blob[pos:pos + pay_len]
            pos += pay_len
        return cls(header, sections)

    def save(self, path) -> int:
        blob = self.to_bytes()
        with open(path, "wb") as f:
            f.write(blob)
        return len(blob)

    @classmethod
    def load(cls, path) -> "CompressedArtifact":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _checksum(data: bytes) -> int:
    import hashlib

    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _encode_chunk(model: InrModel, bits: int) -> bytes:
    """Quantize every state tensor and entropy-code the chunk as one stream.

    Tensor shapes are not stored: they are a pure function of the model
    configuration in the header, so only (scale, offset) per tensor plus one
    shared code table travel in the payload.
    """
    tensors = [(name, t.detach().cpu().numpy()) for name, t in model.state_dict().items()]
    quantized = [quantize_tensor(arr, bits) for _, arr in tensors]
    meta = b"".join(struct.pack("<ff", float(qt.scale), float(qt.offset))
                    for qt in quantized)
    all_symbols = (np.concatenate([qt.symbols for qt in quantized])
                   if quantized else np.zeros(0, dtype=np.uint16))
    table, stream, bit_len = huffman_encode(all_symbols, 1 << bits)
    out = struct.pack("<HB", len(tensors), bits) + meta
    out += table.to_bytes()
    out += struct.pack("<Q", bit_len) + stream
    return out


def _decode_chunk(payload: bytes, shapes: list) -> tuple[list, int]:
    """Inverse of :func:`_encode_chunk` given the architecture's tensor
    shapes; returns [(shape, float32 array)]."""
    n_tensors, bits = struct.unpack_from("<HB", payload, 0)
    pos = 3
    if n_tensors != len(shapes):
        raise CorruptStream("tensor count disagrees with architecture")
    scales = []
    for _ in range(n_tensors):
        scale, offset = struct.unpack_from("<ff", payload, pos)
        pos += 8
        scales.append((np.float32(scale), np.float32(offset)))
    table, pos = HuffmanTable.from_bytes(payload, pos)
    (bit_len,) = struct.unpack_from("<Q", payload, pos)
    pos += 8
    sizes = [int(np.prod(s)) for s in shapes]
    symbols = huffman_decode(table, payload[pos:], sum(sizes), bit_len=bit_len)

    tensors = []
    cursor = 0
    for shape, size, (scale, offset) in zip(shapes, sizes, scales):
        qt = QuantizedTensor(symbols[cursor:cursor + size], scale, offset,
                             bits, tuple(shape))
        tensors.append((tuple(shape), dequantize_tensor(qt)))
        cursor += size
    return tensors, bits


def pack_chunks(chunk_models: list, mean: MeanFrame, mask: Mask3D,
                model_cfg: ModelConfig, dims: tuple, bits: int = 8,
                mean_lossless: bool = True, mean_quality: int = 90,
                norm_offset: float = 0.0, norm_scale: float = 1.0,
                source_dtype: str = "float32",
                voxel_scale: tuple = (0.0, 1.0),
                train_digest: str = "") -> CompressedArtifact:
    """Assemble an artifact from one fitted model per temporal chunk.

    ``chunk_models`` is a list of (start, stop, InrModel).
    """
    mean_payload, slice_meta = encode_mean_frame(mean, quality=mean_quality,
                                                 lossless=mean_lossless)
    header = {
        "dims": list(dims),
        "source_dtype": source_dtype,
        "voxel_scale": list(voxel_scale),
        "model": {
            "k": model_cfg.k,
            "embed_freqs": model_cfg.embed_freqs,
            "mlp_layers": model_cfg.mlp_layers,
            "mlp_width": model_cfg.mlp_width,
            "feat_channels": model_cfg.feat_channels,
            "fusion_levels": model_cfg.fusion_levels,
            "fusion_width": model_cfg.fusion_width,
            "use_fusion": model_cfg.use_fusion,
        },
        "train_digest": train_digest,
        "norm_offset": norm_offset,
        "norm_scale": norm_scale,
        "mean_codec": {
            "id": "png" if mean_lossless else "jpeg",
            "quality": None if mean_lossless else mean_quality,
            "slices": [[lo, hi] for lo, hi in slice_meta],
        },
        "bits": bits,
        "chunks": [[start, stop] for start, stop, _ in chunk_models],
    }
    sections = {"mask": _rle_encode(mask.data.ravel(order="C")), "mean": mean_payload}
    for i, (_, _, model) in enumerate(chunk_models):
        sections[f"chunk{i}"] = _encode_chunk(model, bits)
    return CompressedArtifact(header, sections)


def pack(model: InrModel, mean: MeanFrame, mask: Mask3D,
         model_cfg: ModelConfig, dims: tuple, bits: int = 8,
         **opts) -> CompressedArtifact:
    """Single-chunk convenience wrapper around :func:`pack_chunks`."""
    return pack_chunks([(0, model_cfg.t, model)], mean, mask, model_cfg,
                       dims, bits=bits, **opts)


def unpack(artifact: CompressedArtifact) -> list:
    """Rebuild the fitted models with exact dequantized parameters.

    Returns a list of (start, stop, InrModel).
    """
    header = artifact.header
    base = header["model"]
    out = []
    for i, (start, stop) in enumerate(header["chunks"]):
        cfg = ModelConfig(t=stop - start, **base)
        model = InrModel(cfg)
        state = model.state_dict()
        shapes = [tuple(t.shape) for t in state.values()]
        tensors, _ = _decode_chunk(artifact.sections[f"chunk{i}"], shapes)
        new_state = {name: torch.from_numpy(values)
                     for name, (_, values) in zip(state, tensors)}
        model.load_state_dict(new_state)
        out.append((start, stop, model))
    return out


def decompress(artifact: CompressedArtifact, batch_voxels: int = 4096) -> Volume4D:
    """Evaluate the packed models at every in-mask coordinate.

    Out-of-mask voxels carry the decoded mean value with zero temporal
    variation; in-mask series are de-normalized and the mean frame is added
    back.
    """
    header = artifact.header
    w, h, d, t = header["dims"]
    mask_flat = _rle_decode(artifact.sections["mask"], w * h * d)
    mask = mask_flat.reshape((w, h, d))
    mean = decode_mean_frame(
        artifact.sections["mean"],
        [tuple(p) for p in header["mean_codec"]["slices"]],
        (w, h, d),
    )

    data = np.repeat(mean.data[:, :, :, None], t, axis=3).astype(np.float32)

    coords = np.argwhere(mask)
    if coords.size:
        coords_norm = normalize_coords(coords, (w, h, d))
        series = np.empty((coords.shape[0], t), dtype=np.float32)
        scale = np.float32(header["norm_scale"])
        offset = np.float32(header["norm_offset"])
        for start, stop, model in unpack(artifact):
            model.eval()
            with torch.no_grad():
                preds = torch.cat([
                    model(coords_norm[lo:lo + batch_voxels])
                    for lo in range(0, coords.shape[0], batch_voxels)
                ])
            series[:, start:stop] = preds.numpy() * scale + offset
        data[mask] += series

    return Volume4D(data, voxel_scale=tuple(header["voxel_scale"]),
                    source_dtype=header["source_dtype"])


# ---------------------------------------------------------------------------
# ratio accounting
# ---------------------------------------------------------------------------

@dataclass
class RatioReport:
    original_bytes: int
    artifact_bytes: int

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.artifact_bytes


def compression_ratio(artifact, source) -> RatioReport:
    """Original stored bytes over artifact bytes.

    ``artifact`` may be a byte count, raw bytes, a path, or an in-memory
    artifact; ``source`` a :class:`Volume4D` or a (dims, dtype_name) pair.
    The original size always uses the source dtype, never the in-memory
    float32 representation.
    """
    if isinstance(artifact, CompressedArtifact):
        artifact_bytes = len(artifact.to_bytes())
    elif isinstance(artifact, (bytes, bytearray)):
        artifact_bytes = len(artifact)
    elif isinstance(artifact, (int, np.integer)):
        artifact_bytes = int(artifact)
    else:
        import os

        artifact_bytes = os.path.getsize(artifact)

    if isinstance(source, Volume4D):
        original = source.source_bytes()
    else:
        dims, dtype_name = source
        original = int(np.prod(dims)) * np.dtype(dtype_name).itemsize
    return RatioReport(original, artifact_bytes)
