import itertools
from collections import defaultdict

import pytest
from hypothesis import given, strategies as st

from pinleak.keypad import (
    CLASSES,
    STANDARD_LAYOUT,
    DistanceClass as C,
    KeypadLayout,
    distance_class,
    feasible_triplets,
    parse_pin,
    pins_of_triplet,
    thermal_candidates,
    thermal_class_of,
    triplet_of_pin,
)

GRID = {1: (0, 0), 2: (0, 1), 3: (0, 2), 4: (1, 0), 5: (1, 1), 6: (1, 2),
        7: (2, 0), 8: (2, 1), 9: (2, 2), 0: (3, 1)}
SQUARED_TO_TAG = {0: "Z", 1: "U1", 4: "U2", 9: "U3", 2: "D1", 8: "D2", 5: "SD", 10: "LD"}


def brute_triplet(pin):
    """Plain-loop oracle, independent of the vectorised tables."""
    tags = []
    for a, b in zip(pin, pin[1:]):
        (ra, ca), (rb, cb) = GRID[int(a)], GRID[int(b)]
        tags.append(SQUARED_TO_TAG[(ra - rb) ** 2 + (ca - cb) ** 2])
    return tuple(tags)


@pytest.fixture(scope="module")
def brute_groups():
    groups = defaultdict(list)
    for digits in itertools.product("0123456789", repeat=4):
        pin = "".join(digits)
        groups[brute_triplet(pin)].append(pin)
    return groups


@pytest.mark.parametrize("a,b,expected", [(5, 5, C.Z), (1, 0, C.LD), (2, 0, C.U3)])
def test_distance_class_examples(a, b, expected):
    assert distance_class(a, b) is expected


def test_distance_class_symmetric_and_closed():
    for a in range(10):
        for b in range(10):
            c = distance_class(a, b)
            assert c in CLASSES
            assert c is distance_class(b, a)


def test_one_zero_is_the_largest_distance():
    longest = max(distance_class(a, b).squared for a in range(10) for b in range(10))
    assert distance_class(1, 0).squared == longest


@pytest.mark.parametrize(
    "pin,expected",
    [
        ("5566", (C.Z, C.U1, C.Z)),
        ("5555", (C.Z, C.Z, C.Z)),
        ("4569", (C.U1, C.U1, C.U1)),
        # 2 -> 0 spans three rows on the standard grid
        ("8520", (C.U1, C.U1, C.U3)),
    ],
)
def test_triplet_of_pin(pin, expected):
    assert triplet_of_pin(pin) == expected


def test_pins_of_triplet_examples():
    assert pins_of_triplet((C.Z, C.U3, C.Z)) == ["0022", "2200"]
    assert len(pins_of_triplet((C.Z, C.Z, C.Z))) == 10
    assert len(pins_of_triplet((C.U1, C.U1, C.U1))) == 216
    assert pins_of_triplet("U3,Z,D1") == ["0224", "0226", "2007", "2009"]
    # the four PINs quoted alongside that triplet actually share (Z, Z, D1)
    assert {triplet_of_pin(p) for p in ["0007", "0009", "2224", "2226"]} == {(C.Z, C.Z, C.D1)}


def test_infeasible_triplet_is_empty():
    infeasible = [t for t in itertools.product(CLASSES, repeat=3) if t not in set(feasible_triplets())]
    assert infeasible
    assert all(pins_of_triplet(t) == [] for t in infeasible)


def test_matches_brute_force_partition(brute_groups):
    seen = []
    for t in itertools.product(CLASSES, repeat=3):
        pins = pins_of_triplet(t)
        assert pins == sorted(brute_groups.get(tuple(c.tag for c in t), []))
        seen.extend(pins)
    assert len(seen) == 10_000
    assert len(set(seen)) == 10_000
    assert len(feasible_triplets()) == len(brute_groups)


@given(st.integers(0, 9999))
def test_pin_belongs_to_its_triplet(code):
    pin = parse_pin(code)
    assert pin in pins_of_triplet(triplet_of_pin(pin))


@pytest.mark.parametrize(
    "pin,cid,keys",
    [("5555", 1, {5}), ("0022", 2, {0, 2}), ("0258", 4, {0, 2, 5, 8})],
)
def test_thermal_class_of(pin, cid, keys):
    tc = thermal_class_of(pin)
    assert tc.class_id == cid and tc.key_set == keys


def test_thermal_candidates_examples():
    assert thermal_candidates({5}) == ["5555"]
    two = thermal_candidates({0, 2})
    assert len(two) == 14
    assert {"0022", "0202", "0002"} <= set(two)
    assert "0000" not in two and "2222" not in two
    assert len(thermal_candidates({0, 2, 5})) == 36
    assert len(thermal_candidates({0, 2, 5, 8})) == 24


@pytest.mark.parametrize("bad", [set(), {1, 2, 3, 4, 5}])
def test_thermal_candidates_rejects_bad_sets(bad):
    with pytest.raises(ValueError):
        thermal_candidates(bad)


def test_thermal_partition():
    total = 0
    for size in range(1, 5):
        for keys in itertools.combinations(range(10), size):
            total += len(thermal_candidates(keys))
    assert total == 10 * 1 + 45 * 14 + 120 * 36 + 210 * 24 == 10_000


@pytest.mark.parametrize("bad", ["123", "12345", "12a4", -1, 10_000])
def test_parse_pin_rejects(bad):
    with pytest.raises(ValueError):
        parse_pin(bad)


def test_parse_pin_forms():
    assert parse_pin(22) == "0022"
    assert parse_pin([0, 0, 2, 2]) == "0022"


def test_layout_validation():
    with pytest.raises(ValueError):
        KeypadLayout(STANDARD_LAYOUT.positions[:9])
    dup = list(STANDARD_LAYOUT.positions)
    dup[0] = dup[1]
    with pytest.raises(ValueError):
        KeypadLayout(tuple(dup))
    far = list(STANDARD_LAYOUT.positions)
    far[0] = (5, 5)
    with pytest.raises(ValueError):
        KeypadLayout(tuple(far))
