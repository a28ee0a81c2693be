"""Command-line front end: synth, compress, decompress, eval, report.

All tunables live in a YAML file with strict validation (unknown keys are
rejected, ranges checked).  Exit codes: 0 ok, 2 configuration problem,
3 training failure, 4 corrupt artifact.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import codec, metrics, pipeline, synth, volume
from .errors import (
    ChecksumMismatch,
    ConfigError,
    CorruptHeader,
    CorruptStream,
    NonFiniteLoss,
    VersionUnsupported,
    VoxcompError,
)
from .model import ModelConfig
from .training import TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_CORRUPT = 4

_SCHEMA = {
    "seed": (int, lambda v: True),
    "model": {
        "k": (int, lambda v: v >= 1),
        "embed_freqs": (int, lambda v: v >= 1),
        "mlp_layers": (int, lambda v: v >= 2),
        "mlp_width": (int, lambda v: v >= 1),
        "feat_channels": (int, lambda v: v >= 1),
        "fusion_levels": (int, lambda v: v >= 1),
        "fusion_width": (int, lambda v: v >= 1),
        "use_fusion": (bool, lambda v: True),
    },
    "train": {
        "lr": (float, lambda v: v > 0),
        "epochs": (int, lambda v: v >= 1),
        "pretrain_epochs": (int, lambda v: v >= 0),
        "batch_voxels": (int, lambda v: v >= 2),
        "ssim_weight": (float, lambda v: v >= 0),
        "chunk_len": (int, lambda v: v >= 1),
        "init": (str, lambda v: v in ("ica", "uniform", "normal")),
    },
    "codec": {
        "bits": (int, lambda v: 2 <= v <= 16),
        "mean_lossless": (bool, lambda v: True),
        "mean_quality": (int, lambda v: 1 <= v <= 100),
    },
    "mask": {
        "rel_threshold": (float, lambda v: 0 < v < 1),
    },
    "synth": {
        "dims": (list, lambda v: len(v) == 4 and all(int(x) >= 1 for x in v)),
        "n_regions": (int, lambda v: v >= 1),
        "n_stimuli": (int, lambda v: v >= 1),
        "snr_db": (float, lambda v: True),
        "amp_scale": (float, lambda v: v > 0),
        "radius_frac": (float, lambda v: 0 < v <= 0.5),
        "block_len": (int, lambda v: v >= 1),
        "rest_len": (int, lambda v: v >= 0),
        "tr": (float, lambda v: v > 0),
        "dtype": (str, lambda v: v in ("int16", "float32", "float64")),
    },
}

_DEFAULTS = {
    "seed": 0,
    "model": {"k": 4, "embed_freqs": 10, "mlp_layers": 5, "mlp_width": 64,
              "feat_channels": 8, "fusion_levels": 2, "fusion_width": 32,
              "use_fusion": True},
    "train": {"lr": 8e-4, "epochs": 1500, "pretrain_epochs": 100,
              "batch_voxels": 4096, "ssim_weight": 0.1, "chunk_len": None,
              "init": "ica"},
    "codec": {"bits": 8, "mean_lossless": True, "mean_quality": 90},
    "mask": {"rel_threshold": 0.1},
    "synth": {"dims": [16, 16, 8, 64], "n_regions": 4, "n_stimuli": 4,
              "snr_db": 20.0, "amp_scale": 1000.0, "radius_frac": 0.35,
              "block_len": 6, "rest_len": 2, "tr": 2.0, "dtype": "int16"},
}


def _check_section(name, values, schema, defaults):
    merged = dict(defaults)
    for key, value in values.items():
        if key not in schema:
            raise ConfigError(f"unknown key '{name}.{key}'" if name else
                              f"unknown key '{key}'")
        expected, valid = schema[key]
        if value is None and key == "chunk_len":
            merged[key] = None
            continue
        if expected is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, expected) or isinstance(value, bool) != (expected is bool):
            raise ConfigError(f"key '{name + '.' if name else ''}{key}' must be "
                              f"{expected.__name__}")
        if not valid(value):
            raise ConfigError(f"key '{name + '.' if name else ''}{key}' out of range")
        merged[key] = value
    return merged


def load_config(path) -> dict:
    """Parse and validate a YAML run configuration against the schema."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad YAML: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")

    cfg = {}
    for section, content in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section '{section}'")
        if section == "seed":
            cfg["seed"] = _check_section("", {"seed": content},
                                         {"seed": _SCHEMA["seed"]},
                                         {"seed": _DEFAULTS["seed"]})["seed"]
        else:
            if not isinstance(content, dict):
                raise ConfigError(f"section '{section}' must be a mapping")
            cfg[section] = _check_section(section, content, _SCHEMA[section],
                                          _DEFAULTS[section])
    for section, defaults in _DEFAULTS.items():
        cfg.setdefault(section, defaults if section == "seed" else dict(defaults))
    return cfg


def _block_stimulus(n_stimuli, n_frames, block_len, rest_len) -> synth.StimulusSpec:
    """Cycle the stimuli in fixed blocks separated by rest gaps."""
    period = n_stimuli * (block_len + rest_len)
    onsets = [[] for _ in range(n_stimuli)]
    durations = [[] for _ in range(n_stimuli)]
    for start in range(0, n_frames, period):
        for i in range(n_stimuli):
            onset = start + i * (block_len + rest_len)
            if onset + block_len <= n_frames:
                onsets[i].append(onset)
                durations[i].append(block_len)
    return synth.StimulusSpec(n_stimuli, onsets, durations, n_frames)


def _model_config(cfg, t=1) -> ModelConfig:
    return ModelConfig(t=t, **cfg["model"])


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    s = cfg["synth"]
    dims = tuple(int(x) for x in s["dims"])
    stim = _block_stimulus(s["n_stimuli"], dims[3], s["block_len"], s["rest_len"])
    hrf = synth.HrfParams(tr=s["tr"])
    vol, truth = synth.generate(dims, stim, hrf, s["n_regions"], s["snr_db"],
                                seed=cfg["seed"], amp_scale=s["amp_scale"],
                                radius_frac=s["radius_frac"])
    out = Path(args.out)
    volume.save_rawbin(vol, out, dtype=s["dtype"])
    synth.save_ground_truth(truth, out.with_suffix(out.suffix + ".truth.npz"))
    synth.save_stimulus_csv(stim, out.with_suffix(out.suffix + ".stim.csv"))
    synth.save_labels_csv(synth.frame_labels(stim),
                          out.with_suffix(out.suffix + ".labels.csv"))
    volume.save_rawbin_labels(truth.region_labels,
                              out.with_suffix(out.suffix + ".atlas"))
    print(f"wrote {out} dims={dims} regions={s['n_regions']} "
          f"snr={s['snr_db']} dB noise_sigma={truth.noise_sigma:.4g}")
    return EXIT_OK


def cmd_compress(args) -> int:
    cfg = load_config(args.config)
    vol = volume.load_volume(args.input)
    result = pipeline.compress_volume(
        vol,
        _model_config(cfg),
        _train_config(cfg),
        mask_threshold=cfg["mask"]["rel_threshold"],
        bits=cfg["codec"]["bits"],
        mean_lossless=cfg["codec"]["mean_lossless"],
        mean_quality=cfg["codec"]["mean_quality"],
    )
    n_bytes = result.artifact.save(args.out)
    ratio = codec.compression_ratio(n_bytes, vol)
    print(f"wrote {args.out}: {n_bytes} bytes, ratio {ratio.ratio:.2f}x "
          f"(source {ratio.original_bytes} bytes), "
          f"train PSNR {result.train_psnr:.2f} dB")
    return EXIT_OK


def cmd_decompress(args) -> int:
    artifact = codec.CompressedArtifact.load(args.input)
    vol = codec.decompress(artifact)
    volume.save_rawbin(vol, args.out, dtype="float32")
    print(f"wrote {args.out} dims={vol.dims}")
    return EXIT_OK


def cmd_eval(args) -> int:
    original = volume.load_volume(args.original)
    decompressed = volume.load_volume(args.decompressed)
    t = original.dims[3]

    ctx = metrics.EvalContext(
        mask=volume.auto_mask(original, rel_threshold=args.mask_threshold),
        folds=args.folds,
        seed=args.seed,
        ratio=args.ratio,
    )
    if args.stim and Path(args.stim).exists():
        ctx.stim = synth.load_stimulus_csv(args.stim, t)
        ctx.hrf = synth.HrfParams(tr=args.tr)
    if args.labels and Path(args.labels).exists():
        ctx.labels = synth.load_labels_csv(args.labels, t)
    if args.atlas and Path(args.atlas).exists():
        ctx.atlas = metrics.Atlas(volume.load_rawbin_labels(args.atlas))

    report = metrics.evaluate_pair(original, decompressed, ctx)
    Path(args.out).write_text(report.to_json())
    print(f"wrote {args.out}: psnr={report.psnr:.2f} ssim={report.ssim:.5f} "
          f"skipped={report.skipped}")
    return EXIT_OK


_PANELS = [
    ("psnr", "PSNR (dB)", lambda r: r.psnr),
    ("ssim", "SSIM", lambda r: r.ssim),
    ("fla", "FLA residual mean", lambda r: None if r.fla_residual is None
     else r.fla_residual[0]),
    ("fca", "FCA residual mean", lambda r: None if r.fca_residual is None
     else r.fca_residual[0]),
    ("ct", "CT accuracy", lambda r: None if r.ct is None else r.ct[0]),
]


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = sorted(globmod.glob(args.reports))
    if not paths:
        print("no report files match the pattern", file=sys.stderr)
        return EXIT_CONFIG
    reports = [metrics.EvalReport.from_json(Path(p).read_text()) for p in paths]
    ratios = [r.ratio if r.ratio is not None else float("nan") for r in reports]

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(_PANELS), figsize=(4 * len(_PANELS), 3.2))
    for ax, (key, label, getter) in zip(axes, _PANELS):
        values = [getter(r) for r in reports]
        pairs = [(x, v) for x, v in zip(ratios, values) if v is not None]
        if pairs:
            pairs.sort()
            ax.plot([p[0] for p in pairs], [p[1] for p in pairs], "o-")
        ax.set_xlabel("compression ratio")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    target = outdir / "rate_distortion.png"
    fig.savefig(target, dpi=120)
    plt.close(fig)
    print(f"wrote {target} from {len(reports)} report(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxcomp",
        description="Neural-field compression for 4-D volumetric time series",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom volume + ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compress", help="fit a model and write an artifact")
    p.add_argument("input")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode an artifact to a volume")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="score a decompressed volume")
    p.add_argument("original")
    p.add_argument("decompressed")
    p.add_argument("--out", required=True)
    p.add_argument("--stim", default=None, help="stimulus CSV (onset,duration,stimulus_id)")
    p.add_argument("--labels", default=None, help="labels CSV (frame_index,label)")
    p.add_argument("--atlas", default=None, help="rawbin int32 label volume")
    p.add_argument("--tr", type=float, default=2.0)
    p.add_argument("--mask-threshold", type=float, default=0.1)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratio", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="rate-distortion panels from eval reports")
    p.add_argument("reports", help="glob pattern of report JSON files")
    p.add_argument("--out", required=True, help="output directory for plots")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (CorruptHeader, CorruptStream, ChecksumMismatch, VersionUnsupported) as exc:
        print(f"corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VoxcompError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
