"""Per-distance-class gamma models of inter-keystroke gaps.

A :class:`TimingModel` maps every distance class to a gamma density over gap
durations.  Observed gaps are scored against all candidate triplets by the
sum of per-gap log-densities; only the order of those scores matters.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import digamma, polygamma

from .keypad import (
    CLASSES,
    STANDARD_LAYOUT,
    DistanceClass,
    DistanceTriplet,
    KeypadLayout,
    triplet_from_code,
    triplet_index,
    triplet_of_pin,
)
from .traces import GapSequence, KeystrokeTrace, check_mode

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
DEFAULT_MIN_SAMPLES = 10
NEWTON_MAX_ITER = 50
# |corr(distance, gap)| below this marks a model as carrying no distance signal
FLAT_CORRELATION = 0.1


class DegenerateFitError(ValueError):
    """Raised when samples cannot support a gamma fit (e.g. zero variance)."""


@dataclass(frozen=True)
class GammaParams:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0 and math.isfinite(self.shape) and math.isfinite(self.scale)):
            raise ValueError(f"gamma parameters must be positive and finite: {self}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def mode(self) -> float:
        return max(self.shape - 1.0, 0.0) * self.scale

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        k, theta = self.shape, self.scale
        return (k - 1.0) * np.log(x) - x / theta - math.lgamma(k) - k * math.log(theta)

    def ppf(self, q: float) -> float:
        from scipy.stats import gamma

        return float(gamma.ppf(q, self.shape, scale=self.scale))


@dataclass(frozen=True)
class GammaFit:
    params: GammaParams
    n: int
    method: str  # "mle" or "moments"
    iterations: int


def fit_gamma(samples: Sequence[float], max_iter: int = NEWTON_MAX_ITER, tol: float = 1e-10) -> GammaFit:
    """Maximum-likelihood gamma fit.

    The shape starts from the method-of-moments estimate and is refined by
    Newton's method on ``log k - digamma(k) = log(mean) - mean(log x)``; the
    scale follows as ``mean / k``.  If Newton does not converge the moment
    estimate is returned instead.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise DegenerateFitError(f"need at least 2 samples, got {x.size}")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("gamma samples must be positive and finite")
    mean = float(x.mean())
    var = float(x.var())
    if var <= 0.0 or var <= (1e-12 * mean) ** 2:
        raise DegenerateFitError("samples have zero variance")
    k0 = mean * mean / var
    s = math.log(mean) - float(np.log(x).mean())
    if s <= 0:
        # only possible through rounding when the samples are near-constant
        return GammaFit(GammaParams(k0, mean / k0), x.size, "moments", 0)

    k = k0
    for it in range(1, max_iter + 1):
        f = math.log(k) - float(digamma(k)) - s
        fprime = 1.0 / k - float(polygamma(1, k))
        step = f / fprime
        k_new = k - step
        while k_new <= 0:
            step /= 2.0
            k_new = k - step
        if abs(k_new - k) <= tol * k:
            k = k_new
            return GammaFit(GammaParams(k, mean / k), x.size, "mle", it)
        k = k_new
    log.warning("gamma MLE did not converge in %d iterations; using moments", max_iter)
    return GammaFit(GammaParams(k0, mean / k0), x.size, "moments", max_iter)


@dataclass(frozen=True)
class TimingModel:
    per_class: dict[DistanceClass, GammaParams]
    sample_counts: dict[DistanceClass, int]
    global_gamma: GammaParams
    typist_mode: str = "mixed"
    fallback: frozenset[DistanceClass] = frozenset()
    min_samples: int = DEFAULT_MIN_SAMPLES
    distance_gap_corr: float = 0.0
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        check_mode(self.typist_mode)
        missing = [c.tag for c in CLASSES if c not in self.per_class]
        if missing:
            raise ValueError(f"model lacks parameters for classes {missing}")
        for c in CLASSES:
            if c not in self.fallback and self.sample_counts.get(c, 0) < self.min_samples:
                raise ValueError(
                    f"class {c.tag} has {self.sample_counts.get(c, 0)} samples "
                    f"(< {self.min_samples}) but is not marked as fallback"
                )

    @classmethod
    def uniform(cls, params: GammaParams, typist_mode: str = "mixed") -> "TimingModel":
        """A model in which every class shares one distribution."""
        return cls(
            per_class={c: params for c in CLASSES},
            sample_counts={c: 0 for c in CLASSES},
            global_gamma=params,
            typist_mode=typist_mode,
            fallback=frozenset(CLASSES),
        )

    @classmethod
    def from_params(
        cls, params: dict[DistanceClass, GammaParams], typist_mode: str = "mixed"
    ) -> "TimingModel":
        """Build a model from known parameters (no training data)."""
        missing = [c for c in CLASSES if c not in params]
        if missing:
            raise ValueError(f"missing parameters for {[c.tag for c in missing]}")
        mean = float(np.mean([params[c].mean for c in CLASSES]))
        return cls(
            per_class=dict(params),
            sample_counts={c: 0 for c in CLASSES},
            global_gamma=GammaParams(1.0, mean),
            typist_mode=typist_mode,
            fallback=frozenset(),
            min_samples=0,
        )

    @property
    def distance_flat(self) -> bool:
        return abs(self.distance_gap_corr) < FLAT_CORRELATION

    @property
    def model_id(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:12]

    def dumps(self) -> str:
        lines = [
            f"format_version={MODEL_FORMAT_VERSION}",
            f"typist_mode={self.typist_mode}",
            f"min_samples={self.min_samples}",
            f"distance_gap_corr={self.distance_gap_corr!r}",
            f"distance_flat={str(self.distance_flat).lower()}",
            f"global={self.global_gamma.shape!r} {self.global_gamma.scale!r}",
            "# class shape scale count fallback",
        ]
        for c in CLASSES:
            p = self.per_class[c]
            lines.append(
                f"{c.tag} {p.shape!r} {p.scale!r} {self.sample_counts.get(c, 0)} "
                f"{int(c in self.fallback)}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "TimingModel":
        header: dict[str, str] = {}
        per_class, counts, fallback = {}, {}, set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                if "=" in line:
                    key, value = line.split("=", 1)
                    header[key.strip()] = value.strip()
                    continue
                tag, shape, scale, count, fb = line.split()
                c = DistanceClass.from_tag(tag)
                per_class[c] = GammaParams(float(shape), float(scale))
                counts[c] = int(count)
                if int(fb):
                    fallback.add(c)
            except ValueError as exc:
                raise ValueError(f"model line {lineno}: {exc}") from None
        version = int(header.get("format_version", "-1"))
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {version}")
        g_shape, g_scale = (float(v) for v in header["global"].split())
        return cls(
            per_class=per_class,
            sample_counts=counts,
            global_gamma=GammaParams(g_shape, g_scale),
            typist_mode=header.get("typist_mode", "mixed"),
            fallback=frozenset(fallback),
            min_samples=int(header.get("min_samples", DEFAULT_MIN_SAMPLES)),
            distance_gap_corr=float(header.get("distance_gap_corr", "0.0")),
        )

    @classmethod
    def load(cls, path: Path) -> "TimingModel":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def labelled_gaps(
    traces: Iterable[KeystrokeTrace], layout: KeypadLayout = STANDARD_LAYOUT
) -> tuple[dict[DistanceClass, list[float]], list[str]]:
    """Group the gaps of ground-truth traces by the distance class they span."""
    by_class: dict[DistanceClass, list[float]] = {c: [] for c in CLASSES}
    diagnostics = []
    for tr in traces:
        if tr.pin is None:
            diagnostics.append(f"{tr.trace_id}: no ground-truth PIN")
            continue
        try:
            gaps = tr.gaps
        except ValueError as exc:
            diagnostics.append(f"{tr.trace_id}: {exc}")
            continue
        for cls_, gap in zip(triplet_of_pin(tr.pin, layout), gaps):
            by_class[cls_].append(gap)
    return by_class, diagnostics


def fit_model(
    traces: Iterable[KeystrokeTrace],
    layout: KeypadLayout = STANDARD_LAYOUT,
    mode_filter: str | None = None,
    min_samples: int = DEFAULT_MIN_SAMPLES,
) -> TimingModel:
    """Fit one gamma per distance class from labelled traces.

    Classes with fewer than ``min_samples`` gaps, or whose gaps cannot be
    fitted, reuse the gamma fitted on all gaps pooled and are listed in
    ``fallback``.  Traces with non-positive gaps are skipped and reported in
    ``diagnostics``.
    """
    traces = list(traces)
    if mode_filter is not None:
        check_mode(mode_filter)
        if mode_filter != "mixed":
            traces = [t for t in traces if t.typist_mode == mode_filter]
    if not traces:
        raise ValueError("empty training set" + (f" for mode {mode_filter!r}" if mode_filter else ""))
    by_class, diagnostics = labelled_gaps(traces, layout)
    for d in diagnostics:
        log.warning("rejected trace %s", d)
    pooled = [g for c in CLASSES for g in by_class[c]]
    if not pooled:
        raise ValueError("no usable training gaps")
    global_fit = fit_gamma(pooled).params

    per_class, fallback = {}, set()
    for c in CLASSES:
        gaps = by_class[c]
        if len(gaps) < min_samples:
            per_class[c] = global_fit
            fallback.add(c)
            continue
        try:
            per_class[c] = fit_gamma(gaps).params
        except DegenerateFitError as exc:
            diagnostics.append(f"class {c.tag}: {exc}; using pooled fit")
            per_class[c] = global_fit
            fallback.add(c)

    dist = np.concatenate([np.full(len(by_class[c]), c.distance) for c in CLASSES])
    corr = 0.0  # undefined without distance variation; treated as flat
    if np.ptp(dist) > 0:
        corr = float(np.corrcoef(dist, np.asarray(pooled))[0, 1])
    return TimingModel(
        per_class=per_class,
        sample_counts={c: len(by_class[c]) for c in CLASSES},
        global_gamma=global_fit,
        typist_mode=mode_filter or "mixed",
        fallback=frozenset(fallback),
        min_samples=min_samples,
        distance_gap_corr=round(corr, 6),
        diagnostics=tuple(diagnostics),
    )


def gap_log_likelihood(model: TimingModel, cls_: DistanceClass, gap_ms: float) -> float:
    if not gap_ms > 0:
        raise ValueError(f"gap must be positive, got {gap_ms}")
    return float(model.per_class[cls_].logpdf(gap_ms))


def class_log_likelihoods(model: TimingModel, gaps: GapSequence) -> np.ndarray:
    """8 x 3 table: log-density of each gap under each class."""
    g = np.asarray(gaps.gaps)
    return np.stack([model.per_class[c].logpdf(g) for c in CLASSES])


@dataclass(frozen=True)
class RankedTriplets:
    codes: np.ndarray  # triplet codes, best first
    scores: np.ndarray

    @property
    def entries(self) -> list[tuple[DistanceTriplet, float]]:
        return [(triplet_from_code(int(c)), float(s)) for c, s in zip(self.codes, self.scores)]

    def __len__(self):
        return len(self.codes)


def score_all_triplets(table: np.ndarray) -> np.ndarray:
    """Scores of all 512 class combinations, indexed by triplet code."""
    return (table[:, 0][:, None, None] + table[:, 1][None, :, None] + table[:, 2][None, None, :]).ravel()


def rank_triplets(
    model: TimingModel, gaps: GapSequence | Sequence[float], layout: KeypadLayout = STANDARD_LAYOUT
) -> RankedTriplets:
    """Feasible triplets sorted by decreasing joint log-likelihood.

    Equal scores keep canonical triplet order.
    """
    if not isinstance(gaps, GapSequence):
        gaps = GapSequence(tuple(gaps))
    scores = score_all_triplets(class_log_likelihoods(model, gaps))
    feasible = np.fromiter(sorted(triplet_index(layout)), dtype=np.int64)
    fs = scores[feasible]
    order = np.lexsort((feasible, -fs))
    return RankedTriplets(feasible[order], fs[order])
