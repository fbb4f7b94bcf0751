import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinleak.attack import (
    KnowledgeError,
    KnowledgeSpec,
    MissingModelError,
    PinRanking,
    attempts_to_guess,
    base_attack,
    filter_thermal,
    filter_vpk,
    run_attack,
    select_model,
)
from pinleak.keypad import CLASSES, DistanceClass as C, parse_triplet, pins_of_triplet, triplet_of_pin
from pinleak.synth import default_class_params
from pinleak.timing import GammaParams, TimingModel

pins = st.integers(0, 9999).map(lambda n: f"{n:04d}")


def separated_model(mode="single_finger"):
    return TimingModel.from_params(
        {c: GammaParams(20.0, (150 + 45 * c.squared) / 20.0) for c in CLASSES}, typist_mode=mode
    )


def flat_model(mode="mixed"):
    return TimingModel.uniform(GammaParams(8.0, 40.0), typist_mode=mode)


def brute_force_consistent(k: KnowledgeSpec):
    out = []
    for n in range(10_000):
        p = f"{n:04d}"
        d = [int(ch) for ch in p]
        if k.vpk is not None and d[k.vpk[0]] != k.vpk[1]:
            continue
        if k.thermal_keys is not None and set(d) != set(k.thermal_keys):
            continue
        out.append(p)
    return out


# --- base attack -----------------------------------------------------------

def test_ranking_covers_all_pins_with_nonincreasing_scores():
    r = base_attack(separated_model(), (300, 250, 410))
    assert len(r) == 10_000 and len(set(r.codes.tolist())) == 10_000
    assert np.all(np.diff(r.scores) <= 0)


def test_class_z_gaps_put_5555_in_first_ten():
    model = TimingModel.from_params(default_class_params())
    z = default_class_params()[C.Z].mean
    r = base_attack(model, (z, z, z))
    assert attempts_to_guess(r, "5555") <= 10
    assert sorted(r.pins[:10]) == pins_of_triplet(parse_triplet("Z,Z,Z"))


def test_long_short_long_gaps():
    r = base_attack(separated_model(), (600, 150, 600))
    first = pins_of_triplet(parse_triplet("LD,Z,LD"))
    assert r.pins[: len(first)] == first
    assert all(triplet_of_pin(p) == (C.LD, C.Z, C.LD) for p in r.pins[: len(first)])


def test_uninformative_model_gives_canonical_order():
    r = base_attack(flat_model(), (123, 456, 789))
    expected = []
    from pinleak.keypad import feasible_triplets

    for t in feasible_triplets():
        expected += pins_of_triplet(t)
    assert r.pins == expected


def test_pins_within_triplet_ascending():
    r = base_attack(separated_model(), (200, 300, 400))
    for a, b in zip(r.codes[:-1], r.codes[1:]):
        if triplet_of_pin(f"{a:04d}") == triplet_of_pin(f"{b:04d}"):
            assert a < b


def test_uninformative_expected_rank():
    rng = np.random.default_rng(2024)
    r = base_attack(flat_model(), (200, 200, 200))
    truth = rng.integers(0, 10_000, 10_000)
    ranks = [attempts_to_guess(r, f"{p:04d}") for p in truth]
    assert np.mean(ranks) == pytest.approx(5000.5, rel=0.02)


# --- filters ---------------------------------------------------------------

def test_vpk_example():
    codes = np.array([2007, 2009, 224, 226])
    r = PinRanking(codes, np.zeros(4))
    assert filter_vpk(r, 0, 2).pins == ["2007", "2009"]
    # these four really do share one triplet
    assert {"2007", "2009", "0224", "0226"} <= set(pins_of_triplet(parse_triplet("U3,Z,D1")))


def test_vpk_idempotent_and_disjoint():
    r = base_attack(separated_model(), (300, 300, 300))
    once = filter_vpk(r, 0, 2)
    assert np.array_equal(filter_vpk(once, 0, 2).codes, once.codes)
    assert len(filter_vpk(once, 0, 9)) == 0


def test_vpk_on_full_space_keeps_1000():
    r = base_attack(separated_model(), (300, 300, 300))
    assert len(filter_vpk(r, 3, 7)) == 1000


def test_thermal_examples():
    r = base_attack(separated_model(), (300, 300, 300))
    assert filter_thermal(r, {5}).pins == ["5555"]
    assert len(filter_thermal(r, {0, 2, 5, 8})) == 24
    assert len(filter_thermal(filter_thermal(r, {0, 2}), [0])) == 0


def test_thermal_then_vpk_gives_seven():
    r = base_attack(separated_model(), (300, 300, 300))
    out = filter_vpk(filter_thermal(r, {0, 2}), 0, 0)
    assert len(out) == 7
    assert set(out.pins) == {p for p in brute_force_consistent(KnowledgeSpec((0, 0), {0, 2}))}


@settings(max_examples=60, deadline=None)
@given(
    pins,
    st.integers(0, 3),
    st.floats(60, 900),
    st.floats(60, 900),
    st.floats(60, 900),
)
def test_filters_commute_and_are_sound(pin, pos, g1, g2, g3):
    r = base_attack(separated_model(), (g1, g2, g3))
    digits = [int(ch) for ch in pin]
    keys = set(digits)
    a = filter_vpk(filter_thermal(r, keys), pos, digits[pos])
    b = filter_thermal(filter_vpk(r, pos, digits[pos]), keys)
    assert np.array_equal(a.codes, b.codes)
    assert attempts_to_guess(a, pin) is not None
    assert len(filter_thermal(r, keys)) <= {1: 1, 2: 14, 3: 36, 4: 24}[len(keys)]
    # exactly the brute-force consistent set, in base order
    assert sorted(a.pins) == brute_force_consistent(KnowledgeSpec((pos, digits[pos]), keys))
    order = {c: i for i, c in enumerate(r.codes.tolist())}
    assert all(order[x] < order[y] for x, y in zip(a.codes[:-1].tolist(), a.codes[1:].tolist()))


# --- knowledge and model selection -----------------------------------------

def test_knowledge_validation():
    with pytest.raises(KnowledgeError, match="not among"):
        KnowledgeSpec(vpk=(0, 3), thermal_keys={0, 2})
    with pytest.raises(KnowledgeError):
        KnowledgeSpec(vpk=(4, 1))
    with pytest.raises(KnowledgeError):
        KnowledgeSpec(thermal_keys=set())
    with pytest.raises(KnowledgeError):
        KnowledgeSpec(thermal_keys={1, 2, 3, 4, 5})
    with pytest.raises(ValueError):
        KnowledgeSpec(typist_mode="two_thumbs")


def test_knowledge_label():
    assert KnowledgeSpec().label == "BA"
    assert KnowledgeSpec((0, 2), {0, 2}, "single_finger").label == "BA+SFP+VPK1+T"


def test_run_attack_no_knowledge_equals_base():
    m = separated_model()
    a = run_attack(m, (250, 400, 300))
    b = base_attack(m, (250, 400, 300))
    assert np.array_equal(a.codes, b.codes) and np.array_equal(a.scores, b.scores)


@pytest.mark.parametrize("gaps", [(100, 100, 100), (900, 120, 700)])
def test_run_attack_thermal_singleton(gaps):
    r = run_attack(separated_model(), gaps, KnowledgeSpec(thermal_keys={5}))
    assert r.pins == ["5555"] and attempts_to_guess(r, "5555") == 1


def test_run_attack_vpk_and_thermal():
    r = run_attack(separated_model(), (300, 200, 350), KnowledgeSpec((0, 2), {0, 2}))
    assert set(r.pins) <= {"2200", "2020", "2002", "2220", "2202", "2022", "2000"}
    assert len(r) == 7
    assert r.knowledge == KnowledgeSpec((0, 2), {0, 2})


def test_model_selection():
    sf, other, mixed = separated_model("single_finger"), flat_model("other"), flat_model("mixed")
    bank = {"single_finger": sf, "other": other, "mixed": mixed}
    assert select_model(bank, "single_finger") is sf
    assert select_model(bank, None) is mixed
    assert select_model({"single_finger": sf, "mixed": mixed}, "other") is mixed
    assert select_model({"single_finger": sf}, None) is sf
    with pytest.raises(MissingModelError, match="other"):
        select_model({"single_finger": sf}, "other")


def test_attempts_not_found():
    r = run_attack(separated_model(), (300, 300, 300), KnowledgeSpec(vpk=(0, 1)))
    assert attempts_to_guess(r, "2222") is None
    r = base_attack(separated_model(), (150, 150, 150))
    assert attempts_to_guess(r, r.pins[0]) == 1


def test_ranking_record():
    r = run_attack(separated_model(), (300, 300, 300), KnowledgeSpec(vpk=(0, 1)))
    rec = r.to_record("t1", top_n=5, true_pin="1234")
    assert rec["format_version"] == 1 and len(rec["candidates"]) == 5
    assert rec["n_candidates"] == 1000 and rec["true_rank"] == attempts_to_guess(r, "1234")
    assert rec["knowledge"] == {"vpk": [0, 1], "thermal_keys": None, "typist_mode": None}
