"""Key-press detection from recordings of PIN-pad feedback beeps.

Pipeline: peak-normalise -> Butterworth band-pass around the beep frequency
-> rectify and zero everything under the gate threshold -> sliding maximum
over a 100 ms window.  Each run of the envelope above the detection level is
one key press; its timestamp is the first sample of the run's beep.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, signal
from scipy.io import wavfile

from .traces import GapSequence

DETECTION_FORMAT_VERSION = 1
# median(|x|) / MAD_TO_SIGMA estimates sigma of zero-mean Gaussian noise
MAD_TO_SIGMA = 0.6744897501960817


class NoSignalError(ValueError):
    pass


class FilterDesignError(ValueError):
    pass


class SegmentationError(ValueError):
    def __init__(self, group_sizes: Sequence[int]):
        self.group_sizes = list(group_sizes)
        super().__init__(f"expected groups of 4 key presses, got group sizes {self.group_sizes}")


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 48_000

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("AudioClip holds mono samples")
        if x.size == 0:
            raise ValueError("empty audio clip")
        if not self.sample_rate > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.samples.size / self.sample_rate


@dataclass(frozen=True)
class PipelineConfig:
    sample_rate: int = 48_000
    filter_order: int = 16
    center_freq: float = 5600.0
    bandwidth: float = 800.0
    gate_threshold: float = 0.01
    window_samples: int | None = None  # None -> sample_rate / 10
    min_separation_ms: float = 100.0
    match_tolerance_ms: float = 25.0
    # detection level, in multiples of the robust noise-floor sigma of the
    # filtered signal; the gate threshold is the floor of that level
    peak_snr: float = 6.0
    entry_gap_ms: float = 1500.0

    def __post_init__(self):
        if self.window_samples is None:
            object.__setattr__(self, "window_samples", max(1, self.sample_rate // 10))
        problems = []
        if self.sample_rate <= 0:
            problems.append("sample_rate must be positive")
        if self.filter_order < 2 or self.filter_order % 2:
            problems.append("filter_order must be an even integer >= 2")
        if not 0 < self.gate_threshold < 1:
            problems.append("gate_threshold must lie in (0, 1)")
        if self.window_samples < 1:
            problems.append("window_samples must be >= 1")
        lo, hi = self.passband
        if not (0 < lo < hi < self.sample_rate / 2):
            problems.append(f"passband {lo:g}-{hi:g} Hz must lie inside (0, {self.sample_rate / 2:g}) Hz")
        if self.min_separation_ms < 0 or self.match_tolerance_ms <= 0:
            problems.append("min_separation_ms must be >= 0 and match_tolerance_ms > 0")
        if self.peak_snr < 0:
            problems.append("peak_snr must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def passband(self) -> tuple[float, float]:
        return (self.center_freq - self.bandwidth / 2, self.center_freq + self.bandwidth / 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def normalize(clip: AudioClip) -> AudioClip:
    """Scale so the largest absolute sample is exactly 1."""
    peak = float(np.max(np.abs(clip.samples)))
    if peak == 0.0:
        raise NoSignalError("cannot normalise an all-zero clip")
    return AudioClip(clip.samples / peak, clip.sample_rate)


def design_bandpass(cfg: PipelineConfig) -> np.ndarray:
    """Second-order sections of the configured Butterworth band-pass.

    ``scipy.signal.butter`` builds the analog prototype, pre-warps the band
    edges and applies the bilinear transform; a band-pass of order N comes
    out as N/2 sections.
    """
    sos = signal.butter(
        cfg.filter_order // 2, cfg.passband, btype="bandpass", output="sos", fs=cfg.sample_rate
    )
    for i, section in enumerate(sos):
        poles = np.roots(section[3:])
        if np.any(np.abs(poles) >= 1.0):
            raise FilterDesignError(
                f"section {i} is unstable (pole radii {np.abs(poles).round(6).tolist()})"
            )
    return sos


def bandpass(clip: AudioClip, cfg: PipelineConfig) -> AudioClip:
    return AudioClip(signal.sosfilt(design_bandpass(cfg), clip.samples), clip.sample_rate)


def sliding_max(x: np.ndarray, window: int) -> np.ndarray:
    """Maximum over a centred window of ``window`` samples, zero-padded.

    ``maximum_filter1d`` uses the ascending-maxima deque, so the cost is
    linear in ``len(x)`` regardless of the window length.
    """
    return ndimage.maximum_filter1d(np.asarray(x, dtype=float), size=window, mode="constant", cval=0.0)


def gate(clip: AudioClip, cfg: PipelineConfig) -> np.ndarray:
    rectified = np.abs(clip.samples)
    return np.where(rectified < cfg.gate_threshold, 0.0, rectified)


def gate_and_envelope(clip: AudioClip, cfg: PipelineConfig) -> AudioClip:
    return AudioClip(sliding_max(gate(clip, cfg), cfg.window_samples), clip.sample_rate)


def noise_floor(x: np.ndarray) -> float:
    return float(np.median(np.abs(x))) / MAD_TO_SIGMA


@dataclass
class DetectionResult:
    timestamps_ms: list[float]
    config: PipelineConfig
    peaks: list[float] = field(default_factory=list)
    level: float = 0.0
    envelope: np.ndarray | None = field(default=None, repr=False)

    def to_record(self, **extra) -> dict:
        rec = {
            "format_version": DETECTION_FORMAT_VERSION,
            "timestamps_ms": [round(t, 4) for t in self.timestamps_ms],
            "n_detected": len(self.timestamps_ms),
            "level": round(self.level, 8),
            "config": self.config.to_dict(),
        }
        rec.update(extra)
        return rec


def detect_keystrokes(clip: AudioClip, cfg: PipelineConfig | None = None, keep_envelope: bool = False) -> DetectionResult:
    cfg = cfg or PipelineConfig(sample_rate=clip.sample_rate)
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"clip sample rate {clip.sample_rate} Hz does not match the configured {cfg.sample_rate} Hz"
        )
    try:
        norm = normalize(clip)
    except NoSignalError:
        return DetectionResult([], cfg)
    filtered = bandpass(norm, cfg)
    gated = gate(filtered, cfg)
    env = sliding_max(gated, cfg.window_samples)
    level = max(cfg.gate_threshold, cfg.peak_snr * noise_floor(filtered.samples))

    above = env >= level
    edges = np.diff(above.astype(np.int8), prepend=0, append=0)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    onsets, peaks = [], []
    for s, e in zip(starts, ends):
        hits = np.flatnonzero(gated[s:e] >= level)
        if hits.size == 0:
            continue
        onsets.append(int(s + hits[0]))
        peaks.append(float(env[s:e].max()))

    onsets, peaks = _enforce_separation(onsets, peaks, cfg.min_separation_ms * cfg.sample_rate / 1000.0)
    return DetectionResult(
        timestamps_ms=[1000.0 * i / clip.sample_rate for i in onsets],
        config=cfg,
        peaks=peaks,
        level=level,
        envelope=env if keep_envelope else None,
    )


def _enforce_separation(onsets: list[int], peaks: list[float], min_gap: float):
    """Drop the weaker of any two onsets closer than ``min_gap`` samples."""
    kept_on: list[int] = []
    kept_pk: list[float] = []
    for onset, peak in zip(onsets, peaks):
        if kept_on and onset - kept_on[-1] < min_gap:
            if peak > kept_pk[-1]:
                kept_on[-1], kept_pk[-1] = onset, peak
            continue
        kept_on.append(onset)
        kept_pk.append(peak)
    return kept_on, kept_pk


@dataclass
class MatchReport:
    n_truth: int
    n_detected: int
    matches: list[tuple[int, int, float]]  # (truth index, detection index, detected - truth ms)
    gap_errors: list[float]
    tolerance_ms: float

    @property
    def n_matched(self) -> int:
        return len(self.matches)

    @property
    def detection_rate(self) -> float:
        return self.n_matched / self.n_truth

    @property
    def misses(self) -> int:
        return self.n_truth - self.n_matched

    @property
    def false_positives(self) -> int:
        return self.n_detected - self.n_matched

    @property
    def errors(self) -> np.ndarray:
        return np.array([m[2] for m in self.matches], dtype=float)

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean()) if self.matches else math.nan

    @property
    def std_error(self) -> float:
        return float(self.errors.std()) if self.matches else math.nan

    def abs_error_percentile(self, q: float) -> float:
        return float(np.percentile(np.abs(self.errors), q)) if self.matches else math.nan

    def to_record(self) -> dict:
        def r(v):
            return None if isinstance(v, float) and math.isnan(v) else round(v, 6)

        return {
            "n_truth": self.n_truth,
            "n_detected": self.n_detected,
            "n_matched": self.n_matched,
            "detection_rate": r(self.detection_rate),
            "misses": self.misses,
            "false_positives": self.false_positives,
            "errors_ms": [round(m[2], 6) for m in self.matches],
            "matched_pairs": [[m[0], m[1]] for m in self.matches],
            "gap_errors_ms": [round(g, 6) for g in self.gap_errors],
            "mean_error_ms": r(self.mean_error),
            "std_error_ms": r(self.std_error),
            "abs_error_p75_ms": r(self.abs_error_percentile(75)),
            "abs_error_p97_ms": r(self.abs_error_percentile(97)),
            "tolerance_ms": self.tolerance_ms,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MatchReport":
        matches = [(int(t), int(d), float(e)) for (t, d), e in zip(rec["matched_pairs"], rec["errors_ms"])]
        return cls(rec["n_truth"], rec["n_detected"], matches, list(rec["gap_errors_ms"]), rec["tolerance_ms"])


def match_ground_truth(
    detected: DetectionResult | Sequence[float], truth_ms: Sequence[float], tolerance_ms: float = 25.0
) -> MatchReport:
    """Greedy one-to-one matching, closest pairs first, within ``tolerance_ms``.

    Gap errors are reported for each consecutive pair of true presses whose
    two ends were both matched.
    """
    det = list(detected.timestamps_ms if isinstance(detected, DetectionResult) else detected)
    truth = list(truth_ms)
    if not truth:
        raise ValueError("ground truth is empty")
    candidates = sorted(
        (abs(d - t), ti, di)
        for ti, t in enumerate(truth)
        for di, d in enumerate(det)
        if abs(d - t) <= tolerance_ms
    )
    used_t, used_d, pairs = set(), set(), {}
    for _, ti, di in candidates:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        pairs[ti] = di
    matches = [(ti, pairs[ti], det[pairs[ti]] - truth[ti]) for ti in sorted(pairs)]
    gap_errors = [
        (det[pairs[i + 1]] - det[pairs[i]]) - (truth[i + 1] - truth[i])
        for i in range(len(truth) - 1)
        if i in pairs and i + 1 in pairs
    ]
    return MatchReport(len(truth), len(det), matches, gap_errors, tolerance_ms)


def segment_entries(timestamps_ms: Sequence[float], entry_gap_ms: float = 1500.0) -> list[list[float]]:
    """Split a press sequence wherever consecutive presses are > entry_gap_ms apart."""
    groups: list[list[float]] = []
    for t in timestamps_ms:
        if groups and t - groups[-1][-1] <= entry_gap_ms:
            groups[-1].append(t)
        else:
            groups.append([t])
    return groups


def gaps_from_detection(
    detected: DetectionResult | Sequence[float], entry_gap_ms: float | None = None
) -> list[GapSequence]:
    """One GapSequence per 4-press entry found in the detection."""
    if isinstance(detected, DetectionResult):
        ts = detected.timestamps_ms
        if entry_gap_ms is None:
            entry_gap_ms = detected.config.entry_gap_ms
    else:
        ts = list(detected)
    groups = segment_entries(ts, 1500.0 if entry_gap_ms is None else entry_gap_ms)
    sizes = [len(g) for g in groups]
    if not groups or any(s != 4 for s in sizes):
        raise SegmentationError(sizes)
    return [GapSequence.from_timestamps(g) for g in groups]


# --- WAV files -------------------------------------------------------------

def read_wav(path: Path, expected_rate: int | None = None) -> AudioClip:
    """Read PCM-16/32, 8-bit or float WAV; stereo files keep the first channel."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except OSError:
        raise
    except Exception as exc:  # scipy raises several types on malformed chunks
        raise WavFormatError(f"{path}: unreadable WAV ({exc})") from None
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.size == 0:
        raise WavFormatError(f"{path}: no samples")
    return AudioClip(x, int(rate))


def write_wav(path: Path, clip: AudioClip, fmt: str = "pcm16") -> None:
    """Write a clip; ``pcm16`` rescales so the peak sits at 0.9 full scale."""
    x = clip.samples
    if fmt == "pcm16":
        peak = float(np.max(np.abs(x)))
        scale = 0.9 / peak if peak > 0 else 1.0
        data = np.round(x * scale * 32767.0).astype(np.int16)
    elif fmt == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(Path(path), clip.sample_rate, data)

