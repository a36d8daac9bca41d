import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from qcount.prompts import (
    NUM_ID,
    OOV_ID,
    DeltaPolicy,
    Vocabulary,
    counterfactual_counts,
    generate_prompt_set,
    render,
    select_delta,
    strip_numeral,
    tokenize,
)


@pytest.mark.parametrize(
    "count, delta",
    [(5, 1), (14, 2), (1500, 50), (9, 1), (10, 2), (999, 35), (1000, 50),
     (1, 1), (30, 3), (70, 5), (150, 10), (300, 20), (700, 35)],
)
def test_select_delta_table(count, delta):
    assert select_delta(count) == delta


def test_select_delta_rejects_zero():
    with pytest.raises(ValueError):
        select_delta(0)


def test_policy_validation():
    with pytest.raises(ValueError):
        DeltaPolicy(bins=((0, 10, 1), (11, math.inf, 2)))  # gap
    with pytest.raises(ValueError):
        DeltaPolicy(bins=((0, 10, 3), (10, math.inf, 2)))  # decreasing
    with pytest.raises(ValueError):
        DeltaPolicy(bins=((0, 10, 1),))  # does not reach infinity
    assert select_delta(123, DeltaPolicy.fixed(5)) == 5


def test_kiwis_example():
    ps = generate_prompt_set("kiwis", 14, 4)
    assert set(ps.counterfactual_counts) == {10, 12, 16, 18}
    assert ps.counterfactual_counts == (10, 12, 18, 16)
    assert ps.texts[0] == "a photo of 14 kiwis"
    assert ps.delta == 2


def test_reflection_for_small_counts():
    ps = generate_prompt_set("birds", 1, 2)
    assert ps.counterfactual_counts == (3, 2)


def test_cars_ordering_by_enumeration():
    n, count = 8, 100
    delta = select_delta(count)
    lower = [count - k * delta for k in range(1, n // 2 + 1)]
    upper = [count + k * delta for k in range(1, n // 2 + 1)]
    expected = sorted(lower, key=lambda c: -abs(c - count)) + sorted(upper, key=lambda c: -abs(c - count))
    assert expected == [60, 70, 80, 90, 140, 130, 120, 110]
    assert list(generate_prompt_set("cars", 100, 8).counterfactual_counts) == expected


@pytest.mark.parametrize("n", [0, 3, 7, -2])
def test_rejects_bad_n(n):
    with pytest.raises(ValueError):
        generate_prompt_set("cars", 10, n)


@given(count=st.integers(1, 3000), half=st.integers(1, 6))
def test_counterfactual_invariants(count, half):
    n = 2 * half
    ps = generate_prompt_set("x", count, n)
    cf = ps.counterfactual_counts
    assert len(cf) == n == len(set(cf))
    assert count not in cf
    assert all(c >= 1 for c in cf)
    for part in (cf[:half], cf[half:]):
        dist = [abs(c - count) for c in part]
        assert all(a > b for a, b in zip(dist, dist[1:]))


@given(a=st.integers(1, 5000), b=st.integers(1, 5000))
def test_select_delta_monotone(a, b):
    lo, hi = sorted((a, b))
    assert select_delta(lo) <= select_delta(hi)


def test_tokenize_template():
    vocab = Vocabulary(["kiwis", "birds"])
    seq = tokenize("a photo of 14 kiwis", vocab)
    assert len(seq) == 5
    assert seq.num_position == 3
    assert seq.ids[3] == NUM_ID and seq.values[3] == 14
    assert seq.class_positions == [4]

    cat = tokenize("a photo of birds", vocab)
    assert len(cat) == 4 and cat.num_position is None

    stripped = strip_numeral(seq)
    assert stripped.ids == [seq.ids[i] for i in (0, 1, 2, 4)]
    assert stripped.num_position is None
    assert stripped.ids == tokenize("a photo of kiwis", vocab).ids


def test_tokenize_oov_and_empty():
    vocab = Vocabulary(["kiwis"])
    assert tokenize("a photo of 3 zebras", vocab).ids[-1] == OOV_ID
    with pytest.raises(ValueError):
        tokenize("   ", vocab)


@given(count=st.integers(1, 4000))
def test_render_tokenize_roundtrip(count):
    vocab = Vocabulary(["cars"])
    seq = tokenize(render(count, "cars"), vocab)
    assert seq.values[seq.num_position] == count


def test_vocab_json_roundtrip():
    vocab = Vocabulary(["sea shells", "kiwis"])
    assert Vocabulary.from_json(vocab.to_json()) == vocab
    assert "shells" in vocab.words
