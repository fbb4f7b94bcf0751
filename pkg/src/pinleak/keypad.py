"""PIN-pad geometry, distance classes and the PIN <-> triplet mappings.

Distances are compared as exact squared integers, so the eight classes
(0, 1, 2, 3, sqrt2, 2*sqrt2, sqrt5, sqrt10) never collide through rounding.
PINs are handled as 4-character digit strings ("0022"); the vectorised
helpers work on integer codes 0..9999 whose decimal digits are the PIN.
"""
from __future__ import annotations

import enum
import functools
import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

PIN_LENGTH = 4
N_PINS = 10 ** PIN_LENGTH

# Number of PINs compatible with a thermal key set of size 1..4.
THERMAL_CLASS_SIZES = {1: 1, 2: 14, 3: 36, 4: 24}


class DistanceClass(enum.Enum):
    """Euclidean distance between two keys, keyed by its squared value."""

    Z = 0
    U1 = 1
    U2 = 4
    U3 = 9
    D1 = 2
    D2 = 8
    SD = 5
    LD = 10

    @property
    def tag(self) -> str:
        return self.name

    @property
    def squared(self) -> int:
        return self.value

    @property
    def distance(self) -> float:
        return float(np.sqrt(self.value))

    @property
    def index(self) -> int:
        """Position in the canonical class order (declaration order)."""
        return _CLASS_INDEX[self]

    @classmethod
    def from_squared(cls, squared: int) -> "DistanceClass":
        try:
            return cls(squared)
        except ValueError:
            raise ValueError(f"{squared} is not a squared keypad distance") from None

    @classmethod
    def from_tag(cls, tag: str) -> "DistanceClass":
        try:
            return cls[tag.upper()]
        except KeyError:
            raise ValueError(f"unknown distance class tag {tag!r}") from None


CLASSES: tuple[DistanceClass, ...] = tuple(DistanceClass)
_CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}

DistanceTriplet = tuple[DistanceClass, DistanceClass, DistanceClass]


class InvalidPinError(ValueError):
    pass


@dataclass(frozen=True)
class KeypadLayout:
    """Grid coordinates (row, col) of keys 0..9, indexed by digit."""

    positions: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.positions) != 10:
            raise ValueError("a keypad layout needs exactly 10 keys")
        if len(set(self.positions)) != 10:
            raise ValueError("key coordinates must be distinct")
        allowed = {c.squared for c in CLASSES}
        for a, b in itertools.combinations(range(10), 2):
            if self.squared_distance(a, b) not in allowed:
                raise ValueError(
                    f"keys {a} and {b} are at squared distance "
                    f"{self.squared_distance(a, b)}, outside the 8 known classes"
                )

    @classmethod
    def from_mapping(cls, key_positions: Mapping[int, tuple[int, int]]) -> "KeypadLayout":
        if sorted(key_positions) != list(range(10)):
            raise ValueError("layout must define digits 0..9")
        return cls(tuple(tuple(map(int, key_positions[d])) for d in range(10)))

    def squared_distance(self, a: int, b: int) -> int:
        (ra, ca), (rb, cb) = self.positions[a], self.positions[b]
        return (ra - rb) ** 2 + (ca - cb) ** 2


STANDARD_LAYOUT = KeypadLayout.from_mapping(
    {
        1: (0, 0), 2: (0, 1), 3: (0, 2),
        4: (1, 0), 5: (1, 1), 6: (1, 2),
        7: (2, 0), 8: (2, 1), 9: (2, 2),
        0: (3, 1),
    }
)


def parse_pin(pin: str | int | Iterable[int]) -> str:
    """Normalise a PIN given as "0022", 22 or [0, 0, 2, 2] to "0022"."""
    if isinstance(pin, (int, np.integer)):
        if not 0 <= pin < N_PINS:
            raise InvalidPinError(f"PIN code {pin} outside 0..{N_PINS - 1}")
        return f"{int(pin):0{PIN_LENGTH}d}"
    if isinstance(pin, str):
        s = pin.strip()
    else:
        digits = list(pin)
        if not all(isinstance(d, (int, np.integer)) and 0 <= d <= 9 for d in digits):
            raise InvalidPinError(f"invalid PIN digits {digits!r}")
        s = "".join(str(int(d)) for d in digits)
    if len(s) != PIN_LENGTH or not s.isdigit() or not s.isascii():
        raise InvalidPinError(f"PIN must be exactly {PIN_LENGTH} digits, got {pin!r}")
    return s


def pin_digits(pin: str) -> tuple[int, ...]:
    return tuple(int(ch) for ch in parse_pin(pin))


def distance_class(a: int, b: int, layout: KeypadLayout = STANDARD_LAYOUT) -> DistanceClass:
    if not (0 <= a <= 9 and 0 <= b <= 9):
        raise ValueError(f"invalid digits ({a}, {b})")
    return DistanceClass.from_squared(layout.squared_distance(a, b))


def triplet_of_pin(pin: str, layout: KeypadLayout = STANDARD_LAYOUT) -> DistanceTriplet:
    d = pin_digits(pin)
    return tuple(distance_class(d[i], d[i + 1], layout) for i in range(PIN_LENGTH - 1))


def parse_triplet(spec: str | Iterable) -> DistanceTriplet:
    """Accept ("Z", "U3", "Z"), "Z,U3,Z" or DistanceClass members."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out = []
    for item in items:
        if isinstance(item, DistanceClass):
            out.append(item)
        else:
            out.append(DistanceClass.from_tag(str(item).strip()))
    if len(out) != PIN_LENGTH - 1:
        raise ValueError(f"a triplet has {PIN_LENGTH - 1} classes, got {len(out)}")
    return tuple(out)


def triplet_code(t: DistanceTriplet) -> int:
    """Integer in 0..511 encoding the triplet in canonical order."""
    return (t[0].index * 8 + t[1].index) * 8 + t[2].index


def triplet_from_code(code: int) -> DistanceTriplet:
    return (CLASSES[code // 64], CLASSES[(code // 8) % 8], CLASSES[code % 8])


# --- vectorised tables ---------------------------------------------------

ALL_CODES = np.arange(N_PINS)
# ALL_DIGITS[code] -> the four digits of the PIN with that code
ALL_DIGITS = np.stack([(ALL_CODES // 10 ** (3 - i)) % 10 for i in range(PIN_LENGTH)], axis=1)
# bitmask of the distinct digits of each PIN
ALL_KEYMASKS = np.bitwise_or.reduce(1 << ALL_DIGITS, axis=1)


def keymask(keys: Iterable[int]) -> int:
    m = 0
    for k in keys:
        m |= 1 << int(k)
    return m


@functools.lru_cache(maxsize=8)
def _pair_class_index(layout: KeypadLayout) -> np.ndarray:
    table = np.empty((10, 10), dtype=np.int64)
    for a in range(10):
        for b in range(10):
            table[a, b] = distance_class(a, b, layout).index
    return table


@functools.lru_cache(maxsize=8)
def triplet_codes(layout: KeypadLayout = STANDARD_LAYOUT) -> np.ndarray:
    """Triplet code of every PIN, indexed by PIN code."""
    idx = _pair_class_index(layout)
    c = [idx[ALL_DIGITS[:, i], ALL_DIGITS[:, i + 1]] for i in range(PIN_LENGTH - 1)]
    codes = (c[0] * 8 + c[1]) * 8 + c[2]
    codes.setflags(write=False)
    return codes


@functools.lru_cache(maxsize=8)
def triplet_index(layout: KeypadLayout = STANDARD_LAYOUT) -> dict[int, np.ndarray]:
    """Triplet code -> ascending array of PIN codes, feasible triplets only."""
    codes = triplet_codes(layout)
    order = np.argsort(codes, kind="stable")
    bounds = np.flatnonzero(np.diff(codes[order])) + 1
    index = {}
    for group in np.split(order, bounds):
        group = np.sort(group)
        group.setflags(write=False)
        index[int(codes[group[0]])] = group
    return index


def feasible_triplets(layout: KeypadLayout = STANDARD_LAYOUT) -> list[DistanceTriplet]:
    return [triplet_from_code(c) for c in sorted(triplet_index(layout))]


def pins_of_triplet(t: DistanceTriplet, layout: KeypadLayout = STANDARD_LAYOUT) -> list[str]:
    """All PINs producing triplet ``t``, ascending; empty when infeasible."""
    t = parse_triplet(t)
    codes = triplet_index(layout).get(triplet_code(t))
    if codes is None:
        return []
    return [parse_pin(int(c)) for c in codes]


@dataclass(frozen=True)
class ThermalClass:
    class_id: int
    key_set: frozenset[int]


def thermal_class_of(pin: str) -> ThermalClass:
    keys = frozenset(pin_digits(pin))
    return ThermalClass(len(keys), keys)


def _check_key_set(key_set: Iterable[int]) -> frozenset[int]:
    keys = frozenset(int(k) for k in key_set)
    if not 1 <= len(keys) <= PIN_LENGTH:
        raise ValueError(f"thermal key set must hold 1..{PIN_LENGTH} digits, got {sorted(keys)}")
    if not all(0 <= k <= 9 for k in keys):
        raise ValueError(f"thermal key set has invalid digits {sorted(keys)}")
    return keys


def thermal_candidate_codes(key_set: Iterable[int]) -> np.ndarray:
    keys = _check_key_set(key_set)
    return np.flatnonzero(ALL_KEYMASKS == keymask(keys))


def thermal_candidates(key_set: Iterable[int]) -> list[str]:
    """PINs whose set of distinct digits is exactly ``key_set``."""
    return [parse_pin(int(c)) for c in thermal_candidate_codes(key_set)]
