"""Synthetic PIN-entry traces and rendered feedback-beep recordings.

The per-class timing defaults are synthetic placeholders: for single-finger
typing the mean gap steps up by a fixed amount from each distance class to
the next longer one, while "other" typing draws every gap from one
distance-independent gamma.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import AudioClip, write_wav
from .keypad import CLASSES, DistanceClass, parse_pin, triplet_of_pin
from .timing import GammaParams
from .traces import KeystrokeTrace, check_mode, write_jsonl

MANIFEST_FORMAT_VERSION = 1

DEFAULT_SHAPE = 150.0
DEFAULT_BASE_MEAN_MS = 200.0
DEFAULT_STEP_MS = 80.0
DEFAULT_OTHER_SHAPE = 40.0
DEFAULT_OTHER_MEAN_MS = 300.0
# share of single-finger entries when typist_mode is "mixed"
DEFAULT_SINGLE_FINGER_FRACTION = 0.7
PHYSICAL_FLOOR_MS = 50.0

# RNG stream labels: SeedSequence([seed, stream, index])
_PIN_STREAM, _TIMING_STREAM, _AUDIO_STREAM = 0, 1, 2


def default_class_params(
    shape: float = DEFAULT_SHAPE,
    base_ms: float = DEFAULT_BASE_MEAN_MS,
    step_ms: float = DEFAULT_STEP_MS,
) -> dict[DistanceClass, GammaParams]:
    """Gamma per class; the i-th shortest distance class has mean ``base_ms + i * step_ms``.

    With the defaults: Z 200, U1 280, D1 360, U2 440, SD 520, D2 600,
    U3 680, LD 760 ms.
    """
    by_distance = sorted(CLASSES, key=lambda c: c.squared)
    return {c: GammaParams(shape, (base_ms + i * step_ms) / shape) for i, c in enumerate(by_distance)}


def _default_other() -> GammaParams:
    return GammaParams(DEFAULT_OTHER_SHAPE, DEFAULT_OTHER_MEAN_MS / DEFAULT_OTHER_SHAPE)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    pin_source: str = "uniform_random"
    pins: tuple[str, ...] = ()
    typist_mode: str = "single_finger"
    single_finger_fraction: float = DEFAULT_SINGLE_FINGER_FRACTION
    class_params: dict = field(default_factory=default_class_params)
    other_params: GammaParams = field(default_factory=_default_other)
    beep_freq: float = 5600.0
    beep_duration_ms: float = 40.0
    beep_amplitude: float = 0.8
    beep_ramp_ms: float = 5.0
    noise_snr_db: float | None = 0.0
    sample_rate: int = 48_000
    pad_ms: float = 500.0
    inter_entry_gap_ms: float = 3000.0
    min_gap_ms: float = PHYSICAL_FLOOR_MS
    wav_format: str = "pcm16"

    def __post_init__(self):
        object.__setattr__(self, "pins", tuple(parse_pin(p) for p in self.pins))
        check_mode(self.typist_mode)
        problems = []
        if self.pin_source not in ("uniform_random", "fixed_list"):
            problems.append(f"unknown pin_source {self.pin_source!r}")
        if self.pin_source == "fixed_list" and not self.pins:
            problems.append("fixed_list pin_source needs a non-empty pins list")
        if sorted(self.class_params, key=lambda c: c.index) != list(CLASSES):
            problems.append("class_params must cover all 8 distance classes")
        if not 0 <= self.single_finger_fraction <= 1:
            problems.append("single_finger_fraction must lie in [0, 1]")
        if not 0 < self.beep_freq < self.sample_rate / 2:
            problems.append("beep frequency must be below Nyquist")
        if not 0 < self.beep_amplitude:
            problems.append("beep amplitude must be positive")
        if not 0 <= 2 * self.beep_ramp_ms <= self.beep_duration_ms:
            problems.append("beep ramps must fit inside the beep")
        min_mean = min([p.mean for p in self.class_params.values()] + [self.other_params.mean])
        if not self.beep_duration_ms < min_mean:
            problems.append(
                f"beep duration {self.beep_duration_ms} ms must be shorter than the smallest mean gap {min_mean:.1f} ms"
            )
        if self.min_gap_ms < self.beep_duration_ms:
            problems.append("min_gap_ms must be at least the beep duration")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pins"] = list(self.pins)
        d["class_params"] = {
            c.tag: [self.class_params[c].shape, self.class_params[c].scale] for c in CLASSES
        }
        d["other_params"] = [self.other_params.shape, self.other_params.scale]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "class_params" in d and not isinstance(next(iter(d["class_params"])), DistanceClass):
            d["class_params"] = {
                DistanceClass.from_tag(tag): GammaParams(*v) for tag, v in d["class_params"].items()
            }
        if "other_params" in d and not isinstance(d["other_params"], GammaParams):
            d["other_params"] = GammaParams(*d["other_params"])
        if "pins" in d:
            d["pins"] = tuple(d["pins"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator settings {sorted(unknown)}")
        return cls(**d)


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(index)]))


def _draw_gap(params: GammaParams, floor_ms: float, rng: np.random.Generator) -> float:
    while True:
        g = float(rng.gamma(params.shape, params.scale))
        if g >= floor_ms:
            return g


def sample_trace(
    pin: str,
    cfg: GeneratorConfig,
    rng: np.random.Generator,
    trace_id: str = "t0",
    typist_mode: str | None = None,
) -> KeystrokeTrace:
    """Draw press times for one entry of ``pin``; the first press is at ``pad_ms``.

    Gaps under ``min_gap_ms`` are redrawn.
    """
    pin = parse_pin(pin)
    mode = typist_mode or cfg.typist_mode
    if mode == "mixed":
        mode = "single_finger" if rng.random() < cfg.single_finger_fraction else "other"
    check_mode(mode, ("single_finger", "other"))
    ts = [cfg.pad_ms]
    for c in triplet_of_pin(pin):
        params = cfg.class_params[c] if mode == "single_finger" else cfg.other_params
        ts.append(ts[-1] + _draw_gap(params, cfg.min_gap_ms, rng))
    return KeystrokeTrace(trace_id, tuple(ts), pin, mode)


def beep_waveform(cfg: GeneratorConfig) -> np.ndarray:
    """One feedback beep: a sine with raised-cosine attack and release."""
    n = int(round(cfg.beep_duration_ms * cfg.sample_rate / 1000.0))
    t = np.arange(n) / cfg.sample_rate
    env = np.ones(n)
    ramp = int(round(cfg.beep_ramp_ms * cfg.sample_rate / 1000.0))
    if ramp > 0:
        rise = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[:ramp] = rise
        env[n - ramp:] = rise[::-1]
    return cfg.beep_amplitude * env * np.sin(2.0 * np.pi * cfg.beep_freq * t)


def beep_rms(cfg: GeneratorConfig) -> float:
    b = beep_waveform(cfg)
    return float(np.sqrt(np.mean(b * b)))


def noise_sigma(cfg: GeneratorConfig) -> float:
    """Noise std such that 10*log10(beep_rms^2 / sigma^2) equals the SNR."""
    if cfg.noise_snr_db is None:
        return 0.0
    return beep_rms(cfg) / 10.0 ** (cfg.noise_snr_db / 20.0)


def render_beeps(timestamps_ms: Sequence[float], cfg: GeneratorConfig) -> np.ndarray:
    """Noise-free beep track; each beep starts at round(t * sr / 1000)."""
    beep = beep_waveform(cfg)
    ts = sorted(timestamps_ms)
    for a, b in zip(ts, ts[1:]):
        if b - a < cfg.beep_duration_ms:
            raise ValueError(
                f"beeps at {a:.1f} and {b:.1f} ms overlap (beep lasts {cfg.beep_duration_ms} ms)"
            )
    if ts and ts[0] < 0:
        raise ValueError("beep timestamps must be non-negative")
    last = ts[-1] if ts else 0.0
    n = int(math.ceil((last + cfg.beep_duration_ms + cfg.pad_ms) * cfg.sample_rate / 1000.0))
    out = np.zeros(n)
    for t in ts:
        i = int(round(t * cfg.sample_rate / 1000.0))
        out[i:i + beep.size] += beep
    return out


def render_audio(
    trace: KeystrokeTrace | Sequence[float], cfg: GeneratorConfig, rng: np.random.Generator
) -> AudioClip:
    timestamps = trace.timestamps_ms if isinstance(trace, KeystrokeTrace) else tuple(trace)
    track = render_beeps(timestamps, cfg)
    sigma = noise_sigma(cfg)
    if sigma > 0:
        track = track + rng.normal(0.0, sigma, size=track.size)
    return AudioClip(track, cfg.sample_rate)


def render_noise(duration_ms: float, cfg: GeneratorConfig, rng: np.random.Generator) -> AudioClip:
    """Noise-only clip at the level a beep render with the same config would get."""
    n = int(round(duration_ms * cfg.sample_rate / 1000.0))
    return AudioClip(rng.normal(0.0, noise_sigma(cfg), size=n), cfg.sample_rate)


def measured_snr_db(beeps: np.ndarray, noise: np.ndarray, n_beeps: int, cfg: GeneratorConfig) -> float:
    """SNR of a rendered beep track against a rendered noise track.

    Beep power is averaged over the ``n_beeps`` beep waveforms only, as in
    :func:`noise_sigma`; silence between beeps does not dilute it.
    """
    on = n_beeps * beep_waveform(cfg).size
    return 10.0 * math.log10((np.sum(beeps * beeps) / on) / np.mean(noise * noise))


def session_timestamps(traces: Sequence[KeystrokeTrace], cfg: GeneratorConfig) -> list[list[float]]:
    """Press times of consecutive entries laid end to end in one recording.

    Each entry starts ``inter_entry_gap_ms`` after the previous entry's last press.
    """
    out: list[list[float]] = []
    start = cfg.pad_ms
    for tr in traces:
        shift = start - tr.timestamps_ms[0]
        out.append([t + shift for t in tr.timestamps_ms])
        start = out[-1][-1] + cfg.inter_entry_gap_ms
    return out


def render_session(
    traces: Sequence[KeystrokeTrace], cfg: GeneratorConfig, rng: np.random.Generator
) -> tuple[AudioClip, list[list[float]]]:
    entries = session_timestamps(traces, cfg)
    return render_audio([t for e in entries for t in e], cfg, rng), entries


@dataclass
class DatasetManifest:
    path: Path
    data: dict

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def choose_pins(cfg: GeneratorConfig, n_pins: int) -> list[str]:
    if cfg.pin_source == "fixed_list":
        return list(cfg.pins[:n_pins]) if n_pins else list(cfg.pins)
    rng = stream_rng(cfg.seed, _PIN_STREAM)
    codes = rng.choice(10_000, size=n_pins, replace=n_pins > 10_000)
    return [parse_pin(int(c)) for c in codes]


def generate_traces(cfg: GeneratorConfig, n_pins: int, entries_per_pin: int) -> list[KeystrokeTrace]:
    traces = []
    for i, pin in enumerate(choose_pins(cfg, n_pins)):
        for j in range(entries_per_pin):
            idx = i * entries_per_pin + j
            traces.append(sample_trace(pin, cfg, stream_rng(cfg.seed, _TIMING_STREAM, idx), f"t{idx:06d}"))
    return traces


def generate_dataset(
    cfg: GeneratorConfig,
    n_pins: int,
    entries_per_pin: int,
    out_dir: Path,
    audio: bool = True,
) -> DatasetManifest:
    """Write clips/<trace_id>.wav, truth.jsonl and manifest.json under ``out_dir``.

    ``n_pins`` is ignored (all listed PINs are used) when it is 0 and the
    PIN source is a fixed list.
    """
    out_dir = Path(out_dir)
    if n_pins < 0 or entries_per_pin < 1:
        raise ValueError("n_pins must be >= 0 and entries_per_pin >= 1")
    try:
        (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc.strerror}") from exc

    traces = generate_traces(cfg, n_pins, entries_per_pin)
    entries = []
    for idx, tr in enumerate(traces):
        entry = {"trace_id": tr.trace_id, "pin": tr.pin, "typist_mode": tr.typist_mode}
        if audio:
            rel = f"clips/{tr.trace_id}.wav"
            clip = render_audio(tr, cfg, stream_rng(cfg.seed, _AUDIO_STREAM, idx))
            try:
                write_wav(out_dir / rel, clip, cfg.wav_format)
            except OSError as exc:
                raise OSError(f"cannot write {out_dir / rel}: {exc.strerror}") from exc
            entry["file"] = rel
            entry["sha256"] = _file_sha256(out_dir / rel)
        entries.append(entry)

    truth_path = out_dir / "truth.jsonl"
    write_jsonl(truth_path, (tr.to_record() for tr in traces))
    pins = list(dict.fromkeys(tr.pin for tr in traces))
    data = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "n_pins": len(pins),
        "entries_per_pin": entries_per_pin,
        "n_traces": len(traces),
        "pins": pins,
        "truth_file": "truth.jsonl",
        "truth_sha256": _file_sha256(truth_path),
        "traces": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return DatasetManifest(manifest_path, data)


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported manifest format_version {data.get('format_version')}")
    return DatasetManifest(path, data)
