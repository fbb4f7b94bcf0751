"""Keystroke traces, gap sequences and their JSON-lines form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .keypad import parse_pin

TRUTH_FORMAT_VERSION = 1

TYPIST_MODES = ("single_finger", "other", "mixed")
MIN_NORMAL_GAP_MS = 100.0


def check_mode(mode: str, allowed: Sequence[str] = TYPIST_MODES) -> str:
    if mode not in allowed:
        raise ValueError(f"typist mode must be one of {', '.join(allowed)}; got {mode!r}")
    return mode


@dataclass(frozen=True)
class GapSequence:
    """The three inter-keystroke gaps (ms) of one 4-digit entry."""

    gaps: tuple[float, float, float]

    def __post_init__(self):
        gaps = tuple(float(g) for g in self.gaps)
        if len(gaps) != 3:
            raise ValueError(f"a PIN entry has 3 gaps, got {len(gaps)}")
        if any(not g > 0 for g in gaps):
            raise ValueError(f"gaps must be positive, got {gaps}")
        object.__setattr__(self, "gaps", gaps)

    @property
    def short(self) -> bool:
        """True when a gap is below the 100 ms floor seen in real typing."""
        return any(g < MIN_NORMAL_GAP_MS for g in self.gaps)

    @classmethod
    def from_timestamps(cls, timestamps_ms: Sequence[float]) -> "GapSequence":
        if len(timestamps_ms) != 4:
            raise ValueError(f"need 4 timestamps, got {len(timestamps_ms)}")
        return cls(tuple(b - a for a, b in zip(timestamps_ms, timestamps_ms[1:])))

    def __iter__(self):
        return iter(self.gaps)

    def __getitem__(self, i):
        return self.gaps[i]


@dataclass(frozen=True)
class KeystrokeTrace:
    trace_id: str
    timestamps_ms: tuple[float, ...]
    pin: str | None = None
    typist_mode: str | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timestamps_ms)
        object.__setattr__(self, "timestamps_ms", ts)
        if self.pin is not None:
            object.__setattr__(self, "pin", parse_pin(self.pin))
        if self.typist_mode is not None:
            check_mode(self.typist_mode)

    @property
    def gaps(self) -> GapSequence:
        return GapSequence.from_timestamps(self.timestamps_ms)

    def to_record(self) -> dict:
        rec = {
            "format_version": TRUTH_FORMAT_VERSION,
            "trace_id": self.trace_id,
            "pin": self.pin,
            "timestamps_ms": list(self.timestamps_ms),
            "typist_mode": self.typist_mode,
        }
        rec.update(self.extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "KeystrokeTrace":
        known = {"format_version", "trace_id", "pin", "timestamps_ms", "typist_mode"}
        return cls(
            trace_id=str(rec["trace_id"]),
            timestamps_ms=tuple(rec["timestamps_ms"]),
            pin=rec.get("pin"),
            typist_mode=rec.get("typist_mode"),
            extra={k: v for k, v in rec.items() if k not in known},
        )


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> Iterator[dict]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def load_traces(path: Path) -> list[KeystrokeTrace]:
    return [KeystrokeTrace.from_record(r) for r in read_jsonl(path)]
