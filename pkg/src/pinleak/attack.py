"""Timing-driven PIN ranking and its combination with side knowledge.

The base attack lists every PIN, grouped by distance triplet in order of
decreasing triplet likelihood; PINs sharing a triplet share its score and
appear in ascending numeric order.  Known-digit (VPK) and thermal key-set
knowledge are order-preserving filters over that list.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .keypad import (
    ALL_DIGITS,
    ALL_KEYMASKS,
    PIN_LENGTH,
    STANDARD_LAYOUT,
    KeypadLayout,
    keymask,
    parse_pin,
    pin_digits,
    triplet_index,
)
from .timing import TimingModel, rank_triplets
from .traces import GapSequence, check_mode

RANKING_FORMAT_VERSION = 1


class KnowledgeError(ValueError):
    pass


class MissingModelError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True)
class KnowledgeSpec:
    vpk: tuple[int, int] | None = None  # (position 0-3, digit)
    thermal_keys: frozenset[int] | None = None
    typist_mode: str | None = None

    def __post_init__(self):
        if self.vpk is not None:
            pos, digit = (int(v) for v in self.vpk)
            if not (0 <= pos < PIN_LENGTH and 0 <= digit <= 9):
                raise KnowledgeError(f"VPK needs position 0-3 and digit 0-9, got {self.vpk}")
            object.__setattr__(self, "vpk", (pos, digit))
        if self.thermal_keys is not None:
            keys = frozenset(int(k) for k in self.thermal_keys)
            if not 1 <= len(keys) <= PIN_LENGTH or not all(0 <= k <= 9 for k in keys):
                raise KnowledgeError(f"thermal key set must hold 1-4 digits, got {sorted(keys)}")
            object.__setattr__(self, "thermal_keys", keys)
        if self.vpk is not None and self.thermal_keys is not None and self.vpk[1] not in self.thermal_keys:
            raise KnowledgeError(
                f"known digit {self.vpk[1]} is not among the thermal keys {sorted(self.thermal_keys)}"
            )
        if self.typist_mode is not None:
            check_mode(self.typist_mode, ("single_finger", "other", "mixed"))

    @classmethod
    def from_truth(
        cls,
        pin: str,
        vpk_position: int | None = None,
        thermal: bool = False,
        typist_mode: str | None = None,
    ) -> "KnowledgeSpec":
        """Knowledge an adversary would hold about ``pin`` (for simulations)."""
        digits = pin_digits(pin)
        return cls(
            vpk=None if vpk_position is None else (vpk_position, digits[vpk_position]),
            thermal_keys=frozenset(digits) if thermal else None,
            typist_mode=typist_mode,
        )

    def consistent_with(self, pin: str) -> bool:
        digits = pin_digits(pin)
        if self.vpk is not None and digits[self.vpk[0]] != self.vpk[1]:
            return False
        if self.thermal_keys is not None and set(digits) != self.thermal_keys:
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "vpk": list(self.vpk) if self.vpk is not None else None,
            "thermal_keys": sorted(self.thermal_keys) if self.thermal_keys is not None else None,
            "typist_mode": self.typist_mode,
        }

    @property
    def label(self) -> str:
        parts = []
        if self.typist_mode == "single_finger":
            parts.append("SFP")
        elif self.typist_mode == "other":
            parts.append("OP")
        if self.vpk is not None:
            parts.append(f"VPK{self.vpk[0] + 1}")
        if self.thermal_keys is not None:
            parts.append("T")
        return "+".join(["BA"] + parts)


@dataclass(frozen=True)
class PinRanking:
    codes: np.ndarray  # PIN codes, best first
    scores: np.ndarray
    knowledge: KnowledgeSpec = field(default_factory=KnowledgeSpec)
    model_id: str = ""

    def __post_init__(self):
        if self.codes.shape != self.scores.shape:
            raise ValueError("codes and scores must align")

    def __len__(self):
        return int(self.codes.size)

    @property
    def pins(self) -> list[str]:
        return [f"{c:04d}" for c in self.codes.tolist()]

    @property
    def candidates(self) -> list[tuple[str, float]]:
        return list(zip(self.pins, self.scores.tolist()))

    def _masked(self, mask: np.ndarray, knowledge: KnowledgeSpec) -> "PinRanking":
        return PinRanking(self.codes[mask], self.scores[mask], knowledge, self.model_id)

    def to_record(self, trace_id: str, top_n: int | None = 20, true_pin: str | None = None) -> dict:
        n = len(self) if top_n is None else min(top_n, len(self))
        rec = {
            "format_version": RANKING_FORMAT_VERSION,
            "trace_id": trace_id,
            "model_id": self.model_id,
            "knowledge": self.knowledge.to_dict(),
            "n_candidates": len(self),
            "candidates": [[p, round(s, 6)] for p, s in self.candidates[:n]],
        }
        if true_pin is not None:
            rec["true_pin"] = parse_pin(true_pin)
            rec["true_rank"] = attempts_to_guess(self, true_pin)
        return rec


def base_attack(
    model: TimingModel, gaps: GapSequence | Sequence[float], layout: KeypadLayout = STANDARD_LAYOUT
) -> PinRanking:
    ranked = rank_triplets(model, gaps, layout)
    index = triplet_index(layout)
    groups = [index[int(c)] for c in ranked.codes]
    codes = np.concatenate(groups)
    scores = np.repeat(ranked.scores, [g.size for g in groups])
    return PinRanking(codes, scores, KnowledgeSpec(), model.model_id)


def filter_vpk(ranking: PinRanking, position: int, digit: int) -> PinRanking:
    """Keep candidates with ``digit`` at ``position``; order is preserved."""
    k = replace(ranking.knowledge, vpk=(position, digit))
    return ranking._masked(ALL_DIGITS[ranking.codes, position] == digit, k)


def filter_thermal(ranking: PinRanking, keys: Iterable[int]) -> PinRanking:
    """Keep candidates whose distinct digits are exactly ``keys``."""
    k = replace(ranking.knowledge, thermal_keys=frozenset(keys))
    return ranking._masked(ALL_KEYMASKS[ranking.codes] == keymask(k.thermal_keys), k)


def select_model(model_bank: Mapping[str, TimingModel], typist_mode: str | None) -> TimingModel:
    """Mode-matched model, else the mixed one; a single-model bank serves any request."""
    if typist_mode is not None and typist_mode in model_bank:
        return model_bank[typist_mode]
    if "mixed" in model_bank:
        return model_bank["mixed"]
    if typist_mode is None and len(model_bank) == 1:
        return next(iter(model_bank.values()))
    wanted = typist_mode or "mixed"
    raise MissingModelError(
        f"no timing model for typist mode {wanted!r} (available: {sorted(model_bank) or 'none'})"
    )


def run_attack(
    model_bank: Mapping[str, TimingModel] | TimingModel,
    gaps: GapSequence | Sequence[float],
    knowledge: KnowledgeSpec = KnowledgeSpec(),
    layout: KeypadLayout = STANDARD_LAYOUT,
) -> PinRanking:
    if isinstance(model_bank, TimingModel):
        model_bank = {model_bank.typist_mode: model_bank}
    model = select_model(model_bank, knowledge.typist_mode)
    ranking = base_attack(model, gaps, layout)
    if knowledge.thermal_keys is not None:
        ranking = filter_thermal(ranking, knowledge.thermal_keys)
    if knowledge.vpk is not None:
        ranking = filter_vpk(ranking, *knowledge.vpk)
    return replace(ranking, knowledge=knowledge)


def attempts_to_guess(ranking: PinRanking, true_pin: str) -> int | None:
    """1-based position of ``true_pin``; None when it was filtered out."""
    code = int(parse_pin(true_pin))
    hits = np.flatnonzero(ranking.codes == code)
    return int(hits[0]) + 1 if hits.size else None
