"""Guessing curves, random-guess baselines and the statistics used to compare them."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import log_ndtr

from .attack import (
    KnowledgeSpec,
    PinRanking,
    attempts_to_guess,
    base_attack,
    filter_thermal,
    filter_vpk,
    select_model,
)
from .audio import MatchReport
from .keypad import (
    ALL_DIGITS,
    ALL_KEYMASKS,
    N_PINS,
    STANDARD_LAYOUT,
    THERMAL_CLASS_SIZES,
    KeypadLayout,
    keymask,
    parse_pin,
    pin_digits,
)
from .timing import TimingModel
from .traces import KeystrokeTrace

# modified statistic A2 * (1 + 0.75/n + 2.25/n^2), normal with estimated mean/variance
AD_CRITICAL_1PCT = 1.035
AD_MIN_SAMPLES = 8


def sig4(x: float | None) -> float | None:
    """Round to 4 significant digits for reports."""
    if x is None or not math.isfinite(x):
        return None
    return float(f"{x:.4g}")


@dataclass(frozen=True)
class GuessingCdf:
    """cdf[k-1] = fraction of trials recovered within k attempts."""

    counts: np.ndarray  # trials with rank <= k, for k = 1..K
    n_trials: int
    label: str = ""

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if self.n_trials <= 0:
            raise ValueError("a guessing CDF needs at least one trial")
        if np.any(np.diff(c) < 0) or (c.size and (c[0] < 0 or c[-1] > self.n_trials)):
            raise ValueError("guessing CDF counts must be non-decreasing and within [0, n_trials]")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def cdf(self) -> np.ndarray:
        return self.counts / self.n_trials

    @property
    def k_max(self) -> int:
        return int(self.counts.size)

    def at(self, k: int) -> float:
        if not 1 <= k <= self.k_max:
            raise ValueError(f"k={k} outside 1..{self.k_max}")
        return float(self.counts[k - 1]) / self.n_trials

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "fraction", "count", "n_trials"])
        for k, c in enumerate(self.counts.tolist(), 1):
            w.writerow([k, f"{c / self.n_trials:.4g}", c, self.n_trials])
        return buf.getvalue()


def guessing_cdf(ranks: Sequence[int | None], k_max: int, label: str = "") -> GuessingCdf:
    """Ranks are 1-based; None (PIN filtered out) never counts as recovered."""
    if len(ranks) == 0:
        raise ValueError("no ranks to aggregate")
    found = np.array([r for r in ranks if r is not None], dtype=np.int64)
    hist = np.bincount(np.clip(found, 1, k_max + 1), minlength=k_max + 2)
    counts = np.cumsum(hist[1:k_max + 1])
    return GuessingCdf(counts, len(ranks), label)


@dataclass(frozen=True)
class Baseline:
    kind: str  # RG, RGVPK, RGT, RGTVPK
    values: np.ndarray  # baseline CDF at k = 1..K

    def at(self, k: int) -> float:
        return float(self.values[k - 1])


def _class_size_of(pin: str) -> int:
    return THERMAL_CLASS_SIZES[len(set(pin))]


def _thermal_vpk_size(pin: str, position: int) -> int:
    digits = pin_digits(pin)
    mask = (ALL_KEYMASKS == keymask(digits)) & (ALL_DIGITS[:, position] == digits[position])
    return int(mask.sum())


def baseline(
    kind: str,
    k_max: int,
    trial_pins: Sequence[str] | None = None,
    vpk_position: int = 0,
) -> Baseline:
    """Random-guess CDF over the space left by the adversary's knowledge.

    RG guesses among all 10,000 PINs and RGVPK among the 1,000 sharing the
    known digit.  RGT and RGTVPK depend on each trial PIN's own candidate
    set, so they average min(k / set size, 1) over ``trial_pins``.
    """
    k = np.arange(1, k_max + 1, dtype=float)
    kind = kind.upper()
    if kind == "RG":
        return Baseline(kind, np.minimum(k / N_PINS, 1.0))
    if kind == "RGVPK":
        return Baseline(kind, np.minimum(k / (N_PINS // 10), 1.0))
    if kind in ("RGT", "RGTVPK"):
        if not trial_pins:
            raise ValueError(f"{kind} needs the trial PINs")
        if kind == "RGT":
            sizes = np.array([_class_size_of(parse_pin(p)) for p in trial_pins], dtype=float)
        else:
            sizes = np.array([_thermal_vpk_size(parse_pin(p), vpk_position) for p in trial_pins], dtype=float)
        return Baseline(kind, np.minimum(k[:, None] / sizes[None, :], 1.0).mean(axis=1))
    raise ValueError(f"unknown baseline {kind!r}")


def improvement_factor(cdf: GuessingCdf | float, base: Baseline | float, k: int | None = None) -> float:
    value = cdf.at(k) if isinstance(cdf, GuessingCdf) else float(cdf)
    ref = base.at(k) if isinstance(base, Baseline) else float(base)
    if ref <= 0:
        raise ValueError("baseline probability is zero; improvement factor undefined")
    return value / ref


@dataclass(frozen=True)
class P50Record:
    pin: str
    attempts: int | None  # None when the PIN is recovered in < 50% of trials
    n_trials: int
    max_probability: float

    @property
    def defined(self) -> bool:
        return self.attempts is not None


def p50(per_pin_ranks: Mapping[str, Sequence[int | None]]) -> list[P50Record]:
    """Smallest k with empirical P(rank <= k) >= 0.5, per PIN.

    Sorted by attempts (undefined last), then by PIN.
    """
    records = []
    for pin, ranks in per_pin_ranks.items():
        pin = parse_pin(pin)
        n = len(ranks)
        if n < 2:
            raise ValueError(f"PIN {pin} needs at least 2 trials, got {n}")
        found = sorted(r for r in ranks if r is not None)
        need = math.ceil(n / 2)
        attempts = found[need - 1] if len(found) >= need else None
        records.append(P50Record(pin, attempts, n, len(found) / n))
    return sorted(records, key=lambda r: (r.attempts is None, r.attempts or 0, r.pin))


def p50_table(columns: Mapping[str, Sequence[P50Record]], top: int = 5) -> str:
    """Side-by-side text table: PIN and attempts for each knowledge condition."""
    names = list(columns)
    header = "  ".join(f"{n:^16}" for n in names)
    sub = "  ".join(f"{'PIN':<8}{'Att':>8}" for _ in names)
    lines = [header, sub, "-" * len(sub)]
    for i in range(top):
        cells = []
        for n in names:
            recs = columns[n]
            if i < len(recs):
                r = recs[i]
                cells.append(f"{r.pin:<8}{(r.attempts if r.defined else '-')!s:>8}")
            else:
                cells.append(" " * 16)
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


# --- chi-square ------------------------------------------------------------

def _gamma_q(a: float, x: float, eps: float = 1e-15, max_iter: int = 10_000) -> float:
    """Regularised upper incomplete gamma Q(a, x).

    Power series for P when x < a + 1, Lentz continued fraction for Q otherwise.
    """
    if x <= 0:
        return 1.0
    log_pre = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(max_iter):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * eps:
                break
        return max(0.0, 1.0 - total * math.exp(log_pre))
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, max_iter):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return math.exp(log_pre) * h


def chi2_sf(x: float, df: int = 1) -> float:
    return _gamma_q(df / 2.0, x / 2.0)


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    p_value: float
    table: tuple[tuple[int, int], tuple[int, int]]
    low_expected: bool = False  # some expected cell count < 5


def chi_square_2x2(a_hits: int, a_n: int, b_hits: int, b_n: int, correction: bool = True) -> ChiSquareResult:
    """Hit/miss counts of two conditions; Yates-corrected by default, 1 dof."""
    table = ((a_hits, a_n - a_hits), (b_hits, b_n - b_hits))
    if min(a_hits, b_hits, a_n - a_hits, b_n - b_hits) < 0:
        raise ValueError(f"invalid counts {table}")
    rows = [sum(r) for r in table]
    cols = [table[0][j] + table[1][j] for j in range(2)]
    n = sum(rows)
    stat, low = 0.0, False
    for i in range(2):
        for j in range(2):
            expected = rows[i] * cols[j] / n if n else 0.0
            if expected < 5:
                low = True
            if expected == 0:
                continue
            dev = abs(table[i][j] - expected)
            if correction:
                dev = max(0.0, dev - 0.5)
            stat += dev * dev / expected
    return ChiSquareResult(float(stat), chi2_sf(stat, 1), table, bool(low))


def chi_square_guess_freq(a: GuessingCdf, b: GuessingCdf, k: int, correction: bool = True) -> ChiSquareResult:
    """Compare PINs guessed within k attempts under two conditions."""
    return chi_square_2x2(int(a.counts[k - 1]), a.n_trials, int(b.counts[k - 1]), b.n_trials, correction)


# --- extraction errors and residual normality -------------------------------

def extraction_error_report(matches: Sequence[MatchReport]) -> dict:
    if not matches:
        raise ValueError("no match reports to summarise")
    n_truth = sum(m.n_truth for m in matches)
    n_matched = sum(m.n_matched for m in matches)
    errors = np.concatenate([m.errors for m in matches]) if n_matched else np.zeros(0)
    gap_err = np.abs(np.concatenate([np.asarray(m.gap_errors, dtype=float) for m in matches]))

    def pct(x, q):
        return float(np.percentile(x, q)) if x.size else math.nan

    return {
        "n_clips": len(matches),
        "n_truth": n_truth,
        "n_matched": n_matched,
        "n_detected": sum(m.n_detected for m in matches),
        "misses": n_truth - n_matched,
        "false_positives": sum(m.false_positives for m in matches),
        "detection_rate": n_matched / n_truth if n_truth else math.nan,
        "mean_error_ms": float(errors.mean()) if errors.size else math.nan,
        "std_error_ms": float(errors.std()) if errors.size else math.nan,
        "n_gaps": int(gap_err.size),
        "mean_abs_gap_error_ms": float(gap_err.mean()) if gap_err.size else math.nan,
        "abs_gap_error_p75_ms": pct(gap_err, 75),
        "abs_gap_error_p97_ms": pct(gap_err, 97),
    }


@dataclass(frozen=True)
class AndersonDarlingResult:
    statistic: float  # small-sample corrected A*^2
    a2: float  # uncorrected A^2
    n: int
    critical_1pct: float = AD_CRITICAL_1PCT

    @property
    def normal_at_1pct(self) -> bool:
        return bool(self.statistic < self.critical_1pct)


def anderson_darling(residuals: Sequence[float]) -> AndersonDarlingResult:
    """A^2 against a normal with mean and variance estimated from the sample."""
    x = np.sort(np.asarray(residuals, dtype=float))
    n = x.size
    if n < AD_MIN_SAMPLES:
        raise ValueError(f"Anderson-Darling needs at least {AD_MIN_SAMPLES} samples, got {n}")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise ValueError("residuals have zero variance")
    z = (x - x.mean()) / sd
    i = np.arange(1, n + 1)
    # log(1 - Phi(z)) == log Phi(-z)
    s = np.sum((2 * i - 1) * (log_ndtr(z) + log_ndtr(-z[::-1])))
    a2 = -n - s / n
    return AndersonDarlingResult(float(a2 * (1.0 + 0.75 / n + 2.25 / n ** 2)), float(a2), n)


# --- batch attack evaluation -------------------------------------------------

@dataclass(frozen=True)
class Condition:
    """Knowledge an adversary holds about each test PIN, taken from ground truth."""

    label: str
    vpk_position: int | None = None
    thermal: bool = False
    typist_mode: str | None = None  # model to use; "truth" picks the trace's own mode


STANDARD_CONDITIONS = (
    Condition("BA"),
    Condition("VPK1", vpk_position=0),
    Condition("TA", thermal=True),
    Condition("ALL", vpk_position=0, thermal=True, typist_mode="truth"),
)


def condition_ranks(
    model_bank: Mapping[str, TimingModel] | TimingModel,
    traces: Sequence[KeystrokeTrace],
    conditions: Sequence[Condition],
    layout: KeypadLayout = STANDARD_LAYOUT,
) -> dict[str, list[int | None]]:
    """True-PIN rank of every trace under each condition.

    Gaps come from the trace timestamps; the base ranking is computed once per
    (trace, model) and filtered per condition.
    """
    if isinstance(model_bank, TimingModel):
        model_bank = {model_bank.typist_mode: model_bank}
    out: dict[str, list[int | None]] = {c.label: [] for c in conditions}
    for tr in traces:
        if tr.pin is None:
            raise ValueError(f"trace {tr.trace_id} has no ground-truth PIN")
        gaps = tr.gaps
        cache: dict[str, PinRanking] = {}
        for cond in conditions:
            mode = tr.typist_mode if cond.typist_mode == "truth" else cond.typist_mode
            model = select_model(model_bank, mode)
            if model.model_id not in cache:
                cache[model.model_id] = base_attack(model, gaps, layout)
            ranking = cache[model.model_id]
            k = KnowledgeSpec.from_truth(tr.pin, cond.vpk_position, cond.thermal)
            if k.thermal_keys is not None:
                ranking = filter_thermal(ranking, k.thermal_keys)
            if k.vpk is not None:
                ranking = filter_vpk(ranking, *k.vpk)
            out[cond.label].append(attempts_to_guess(ranking, tr.pin))
    return out


def ranks_by_pin(pins: Iterable[str], ranks: Iterable[int | None]) -> dict[str, list[int | None]]:
    out: dict[str, list[int | None]] = {}
    for p, r in zip(pins, ranks):
        out.setdefault(parse_pin(p), []).append(r)
    return out
