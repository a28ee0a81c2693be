"""Synthetic 4-D volume generator with known ground truth.

Volumes are built as a weighted superposition of stimulus-driven temporal
activation patterns: each stimulus train is convolved with a double-gamma
hemodynamic kernel, assigned to one or more spherical regions, and spread
spatially with smooth Gaussian-bump weight maps.  White Gaussian noise is
added at a requested SNR.  Because patterns, weights, labels, and noise
level are all emitted alongside the volume, every downstream claim can be
checked against exact ground truth at desk scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gamma as gamma_dist

from .errors import DimensionMismatch
from .volume import Volume4D


@dataclass
class StimulusSpec:
    """Boxcar stimulus trains: per-stimulus onset/duration lists in frames."""

    n_stimuli: int
    onsets: list
    durations: list
    n_frames: int

    def __post_init__(self):
        if len(self.onsets) != self.n_stimuli or len(self.durations) != self.n_stimuli:
            raise DimensionMismatch("onsets/durations must have one list per stimulus")
        for ons, durs in zip(self.onsets, self.durations):
            if len(ons) != len(durs):
                raise DimensionMismatch("each onset needs a matching duration")
            for o, du in zip(ons, durs):
                if not 0 <= o < self.n_frames:
                    raise ValueError(f"onset {o} outside [0, {self.n_frames})")
                if du < 1:
                    raise ValueError("durations must be >= 1 frame")

    def boxcar(self) -> np.ndarray:
        """(n_stimuli, T) 0/1 indicator trains."""
        out = np.zeros((self.n_stimuli, self.n_frames))
        for i, (ons, durs) in enumerate(zip(self.onsets, self.durations)):
            for o, du in zip(ons, durs):
                out[i, o:min(o + du, self.n_frames)] = 1.0
        return out


@dataclass
class HrfParams:
    """Double-gamma hemodynamic response parameters (seconds)."""

    peak_delay: float = 6.0
    undershoot_delay: float = 16.0
    peak_disp: float = 1.0
    undershoot_disp: float = 1.0
    ratio: float = 1.0 / 6.0
    tr: float = 2.0

    def __post_init__(self):
        for name in ("peak_delay", "undershoot_delay", "peak_disp",
                     "undershoot_disp", "ratio", "tr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.peak_delay >= self.undershoot_delay:
            raise ValueError("peak_delay must precede undershoot_delay")

    def kernel(self) -> np.ndarray:
        """Sampled impulse response, normalized to unit peak."""
        duration = max(32.0, 2.0 * self.undershoot_delay)
        t = np.arange(0.0, duration + self.tr, self.tr)
        peak = gamma_dist.pdf(t, self.peak_delay / self.peak_disp, scale=self.peak_disp)
        under = gamma_dist.pdf(
            t, self.undershoot_delay / self.undershoot_disp, scale=self.undershoot_disp
        )
        h = peak - self.ratio * under
        return h / h.max()


def hrf_convolve(stim: StimulusSpec, hrf: HrfParams) -> np.ndarray:
    """Convolve each stimulus train with the hemodynamic kernel.

    Returns an (n_stimuli, T) matrix; responses to separated onsets add
    linearly by construction.
    """
    kernel = hrf.kernel()
    box = stim.boxcar()
    out = np.empty_like(box)
    for i in range(stim.n_stimuli):
        out[i] = np.convolve(box[i], kernel)[: stim.n_frames]
    return out


@dataclass
class SynthGroundTruth:
    """Everything needed to verify a generated volume exactly."""

    patterns: np.ndarray        # (n_stimuli, T) hemodynamic responses
    weight_maps: np.ndarray     # (n_stimuli, W, H, D) spatial loadings
    region_labels: np.ndarray   # (W, H, D) int, -1 outside all regions
    noise_sigma: float
    stim: StimulusSpec = None
    hrf: HrfParams = None

    def clean_volume(self) -> np.ndarray:
        """Noise-free superposition, float64, shape (W, H, D, T)."""
        return np.einsum("kwhd,kt->whdt", self.weight_maps, self.patterns)


def _grid_boxes(dims3, n_regions):
    """Split the spatial box into >= n_regions cells, keeping cells chunky."""
    counts = [1, 1, 1]
    while counts[0] * counts[1] * counts[2] < n_regions:
        axis = int(np.argmax([dims3[a] / counts[a] for a in range(3)]))
        counts[axis] += 1
    boxes = []
    for ix in range(counts[0]):
        for iy in range(counts[1]):
            for iz in range(counts[2]):
                lo = [dims3[a] * idx / counts[a] for a, idx in enumerate((ix, iy, iz))]
                hi = [dims3[a] * (idx + 1) / counts[a]
                      for a, idx in enumerate((ix, iy, iz))]
                boxes.append((np.array(lo), np.array(hi)))
    return boxes[:n_regions]


def generate(
    dims: tuple[int, int, int, int],
    stim: StimulusSpec,
    hrf: HrfParams,
    n_regions: int,
    snr_db: float,
    seed: int,
    amp_scale: float = 1000.0,
    radius_frac: float = 0.35,
    baseline_stimulus: int | None = None,
    baseline_amp: float = 1.0,
) -> tuple[Volume4D, SynthGroundTruth]:
    """Generate a phantom volume plus its exact ground truth.

    Regions are spherical blobs on a jittered grid; region ``r`` is driven
    by one dominant stimulus through a truncated-Gaussian weight bump (peak
    ``amp_scale`` jittered per region, falling to 0.2 of the peak at the
    blob boundary so a 10% relative intensity threshold recovers blob
    membership).  If ``baseline_stimulus`` is given, that stimulus (usually
    an always-on train, playing the role of static anatomy) additionally
    loads every region at ``baseline_amp`` times the activation scale.

    Noise is i.i.d. Gaussian on the signal support (background voxels stay
    exactly zero, as in pre-masked acquisitions), with the variance set so
    that in-support signal power over noise power equals ``snr_db``; because
    the clean signal is zero off support, the whole-volume power ratio gives
    the same value.  ``snr_db = inf`` disables noise, in which case the
    volume equals the clean superposition exactly.
    """
    w, h, d, t = dims
    if min(dims) < 1 or n_regions < 1:
        raise ValueError("dims and n_regions must be positive")
    if stim.n_frames != t:
        raise DimensionMismatch("stimulus length disagrees with dims")

    rng = np.random.default_rng(seed)
    patterns = hrf_convolve(stim, hrf)

    grid = np.stack(
        np.meshgrid(np.arange(w), np.arange(h), np.arange(d), indexing="ij"), axis=-1
    ).astype(np.float64)

    weight_maps = np.zeros((stim.n_stimuli, w, h, d))
    labels = np.full((w, h, d), -1, dtype=np.int32)
    falloff = np.sqrt(2.0 * np.log(5.0))
    activation_ids = [i for i in range(stim.n_stimuli) if i != baseline_stimulus]
    for r, (lo, hi) in enumerate(_grid_boxes((w, h, d), n_regions)):
        extent = hi - lo
        center = (lo + hi) / 2.0 + rng.uniform(-extent / 8.0, extent / 8.0)
        radius = radius_frac * extent.min()
        sigma_b = radius / falloff
        dist = np.linalg.norm(grid - center, axis=-1)
        inside = dist <= radius
        amp = amp_scale * rng.uniform(0.8, 1.2)
        bump = np.exp(-(dist ** 2) / (2.0 * sigma_b ** 2))
        pattern_id = activation_ids[r % len(activation_ids)]
        weight_maps[pattern_id][inside] += amp * bump[inside]
        if baseline_stimulus is not None:
            weight_maps[baseline_stimulus][inside] += \
                baseline_amp * amp_scale * bump[inside]
        labels[inside] = r

    truth = SynthGroundTruth(patterns, weight_maps, labels,
                             noise_sigma=0.0, stim=stim, hrf=hrf)
    clean = truth.clean_volume()

    if np.isinf(snr_db):
        volume = clean.astype(np.float32)
    else:
        support = labels >= 0
        signal_power = float(np.mean(clean[support] ** 2))
        sigma = float(np.sqrt(signal_power / 10.0 ** (snr_db / 10.0)))
        truth.noise_sigma = sigma
        noise = rng.normal(0.0, sigma, size=clean.shape) * support[..., None]
        volume = (clean + noise).astype(np.float32)

    return Volume4D(volume, voxel_scale=(0.0, 1.0), source_dtype="float32"), truth


def frame_labels(stim: StimulusSpec, classes: tuple[int, int] = (0, 1)) -> np.ndarray:
    """Per-frame class labels for decoding tests.

    A frame gets class ``i`` when exactly one of the two chosen stimuli is
    active there; everything else (rest, overlap) is -1.
    """
    box = stim.boxcar()[list(classes)]
    active = box > 0
    labels = np.full(stim.n_frames, -1, dtype=np.int64)
    single = active.sum(axis=0) == 1
    labels[single & active[0]] = 0
    labels[single & active[1]] = 1
    return labels


# ---------------------------------------------------------------------------
# sidecar + CSV tables
# ---------------------------------------------------------------------------

def save_ground_truth(truth: SynthGroundTruth, path) -> None:
    """Write the ground-truth sidecar (.npz with documented keys)."""
    rows = []
    for i, (ons, durs) in enumerate(zip(truth.stim.onsets, truth.stim.durations)):
        rows.extend((o, du, i) for o, du in zip(ons, durs))
    stim_table = np.array(rows, dtype=np.int64).reshape(-1, 3)
    hrf = truth.hrf
    np.savez(
        path,
        patterns=truth.patterns,
        weight_maps=truth.weight_maps,
        region_labels=truth.region_labels,
        noise_sigma=np.float64(truth.noise_sigma),
        stim_table=stim_table,
        n_frames=np.int64(truth.stim.n_frames),
        n_stimuli=np.int64(truth.stim.n_stimuli),
        hrf_params=np.array([hrf.peak_delay, hrf.undershoot_delay, hrf.peak_disp,
                             hrf.undershoot_disp, hrf.ratio, hrf.tr]),
    )


def load_ground_truth(path) -> SynthGroundTruth:
    with np.load(path) as z:
        n_stimuli = int(z["n_stimuli"])
        n_frames = int(z["n_frames"])
        onsets = [[] for _ in range(n_stimuli)]
        durations = [[] for _ in range(n_stimuli)]
        for o, du, i in z["stim_table"]:
            onsets[int(i)].append(int(o))
            durations[int(i)].append(int(du))
        stim = StimulusSpec(n_stimuli, onsets, durations, n_frames)
        hp = z["hrf_params"]
        hrf = HrfParams(*[float(v) for v in hp])
        return SynthGroundTruth(
            patterns=z["patterns"],
            weight_maps=z["weight_maps"],
            region_labels=z["region_labels"],
            noise_sigma=float(z["noise_sigma"]),
            stim=stim,
            hrf=hrf,
        )


def save_stimulus_csv(stim: StimulusSpec, path) -> None:
    """Write the stimulus table: onset,duration,stimulus_id rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["onset", "duration", "stimulus_id"])
        for i, (ons, durs) in enumerate(zip(stim.onsets, stim.durations)):
            for o, du in zip(ons, durs):
                writer.writerow([o, du, i])


def load_stimulus_csv(path, n_frames: int) -> StimulusSpec:
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.append((int(row["onset"]), int(row["duration"]),
                         int(row["stimulus_id"])))
    n_stimuli = max(r[2] for r in rows) + 1 if rows else 0
    onsets = [[] for _ in range(n_stimuli)]
    durations = [[] for _ in range(n_stimuli)]
    for o, du, i in rows:
        onsets[i].append(o)
        durations[i].append(du)
    return StimulusSpec(n_stimuli, onsets, durations, n_frames)


def save_labels_csv(labels: np.ndarray, path) -> None:
    """Write per-frame class labels: frame_index,label rows (-1 = unlabeled)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "label"])
        for idx, lab in enumerate(labels):
            writer.writerow([idx, int(lab)])


def load_labels_csv(path, n_frames: int) -> np.ndarray:
    labels = np.full(n_frames, -1, dtype=np.int64)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            labels[int(row["frame_index"])] = int(row["label"])
    return labels
