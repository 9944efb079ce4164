import json
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from breezekit.codec import Decision, FunctionCall, FunctionDescription
from breezekit.data_synth import (
    FCExample,
    InsufficientPool,
    NoRemainingFunctions,
    NotAFunctionCallExample,
    apportion,
    balanced_quotas,
    balanced_sample,
    derive_non_function_call,
    mix_by_ratio,
)
from oracles import waterfill


def fn(name):
    return FunctionDescription(name, f"does {name}")


def example(offered, called, **kw):
    return FCExample(
        functions=tuple(fn(n) for n in offered),
        query="please help",
        decision=Decision.USE_TOOL,
        calls=tuple(FunctionCall(n, {"x": 1}) for n in called),
        **kw,
    )


def test_derive_drops_called_function():
    ex = example("ABC", "A", id="e1", function_type="math")
    nf = derive_non_function_call(ex)
    assert [f.name for f in nf.functions] == ["B", "C"]
    assert nf.decision is Decision.ANSWER and nf.calls == ()
    assert nf.query == ex.query
    assert nf.meta == {"derived": "non_function_call", "removed_functions": ["A"], "source_id": "e1"}
    assert nf.id == "e1-nf" and nf.function_type == "math"


def test_derive_drops_every_called_function():
    nf = derive_non_function_call(example("ABCD", "CAC"))
    assert [f.name for f in nf.functions] == ["B", "D"]


def test_derive_nothing_left():
    with pytest.raises(NoRemainingFunctions):
        derive_non_function_call(example("A", "A"))


def test_derive_needs_tool_example():
    ex = FCExample((fn("A"),), "q", Decision.ANSWER, answer="hi")
    with pytest.raises(NotAFunctionCallExample):
        derive_non_function_call(ex)


def test_example_round_trip():
    ex = example("AB", "B", id="x", language="zh-tw", meta={"k": 1})
    assert FCExample.from_dict(json.loads(json.dumps(ex.to_dict()))) == ex
    nf = derive_non_function_call(ex)
    assert FCExample.from_dict(nf.to_dict()) == nf


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_derived_example_properties(data):
    offered = data.draw(st.lists(st.sampled_from("ABCDEFG"), min_size=2, max_size=7, unique=True))
    called = data.draw(st.lists(st.sampled_from(offered), min_size=1, max_size=4))
    ex = example(offered, called)
    if set(called) == set(offered):
        with pytest.raises(NoRemainingFunctions):
            derive_non_function_call(ex)
        return
    nf = derive_non_function_call(ex)
    names = [f.name for f in nf.functions]
    assert not set(names) & set(called)
    assert names == [n for n in offered if n not in called]
    assert nf.decision is Decision.ANSWER and not nf.calls


def pool(sizes, language="en"):
    out = []
    for t, n in sizes.items():
        for i in range(n):
            out.append(example("AB", "A", id=f"{language}-{t}-{i}", function_type=t, language=language))
    return out


def test_balanced_equal_split():
    picked = balanced_sample(pool({"a": 10, "b": 10, "c": 10}), 9, seed=0)
    assert Counter(p.function_type for p in picked) == {"a": 3, "b": 3, "c": 3}
    assert len({p.id for p in picked}) == 9


def test_balanced_scarce_type():
    picked = balanced_sample(pool({"a": 1, "b": 10, "c": 10}), 9, seed=3)
    assert Counter(p.function_type for p in picked) == {"a": 1, "b": 4, "c": 4}


@settings(max_examples=300, deadline=None)
@given(st.dictionaries(st.sampled_from("abcdef"), st.integers(0, 12), min_size=1), st.integers(0, 40), st.randoms())
def test_quotas_match_waterfill(supply, k, rnd):
    order = sorted(supply)
    rnd.shuffle(order)
    if k > sum(supply.values()):
        with pytest.raises(InsufficientPool):
            balanced_quotas(supply, k, order)
        return
    assert balanced_quotas(supply, k, order) == waterfill(supply, k, order)


def test_balanced_deterministic():
    p = pool({"a": 5, "b": 7, "c": 2})
    assert balanced_sample(p, 8, 42) == balanced_sample(p, 8, 42)
    assert balanced_sample(p, 8, 42) != balanced_sample(p, 8, 43)


def test_balanced_insufficient():
    with pytest.raises(InsufficientPool):
        balanced_sample(pool({"a": 2}), 3, 0)


@pytest.mark.parametrize(
    "k, weights, expected",
    [
        (10, {"en": 9, "zh-tw": 1}, {"en": 9, "zh-tw": 1}),
        (7, {"en": 9, "zh-tw": 1}, {"en": 6, "zh-tw": 1}),
        (3, {"a": 1, "b": 1, "c": 1}, {"a": 1, "b": 1, "c": 1}),
        (1, {"a": 1, "b": 1}, {"a": 1, "b": 0}),
        (5, {"a": 0.1, "b": 0.2, "c": 0.7}, {"a": 0, "b": 1, "c": 4}),
    ],
)
def test_apportion(k, weights, expected):
    assert apportion(k, weights) == expected


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from(["en", "zh-tw", "ja"]), st.integers(1, 20), min_size=1), st.integers(0, 100))
def test_apportion_quota_property(weights, k):
    counts = apportion(k, weights)
    assert sum(counts.values()) == k
    total = sum(weights.values())
    for lang, w in weights.items():
        share = k * w / total
        assert share - 1 < counts[lang] < share + 1


def test_mix_by_ratio_counts_and_determinism():
    pools = {"en": pool({"a": 10, "b": 10}, "en"), "zh-tw": pool({"a": 3, "b": 3}, "zh-tw")}
    mixed = mix_by_ratio(pools, {"en": 9, "zh-tw": 1}, 10, seed=1)
    assert Counter(e.language for e in mixed) == {"en": 9, "zh-tw": 1}
    assert mixed == mix_by_ratio(pools, {"en": 9, "zh-tw": 1}, 10, seed=1)


def test_mix_by_ratio_insufficient_names_language():
    pools = {"en": pool({"a": 10}, "en"), "zh-tw": pool({"a": 1}, "zh-tw")}
    with pytest.raises(InsufficientPool) as err:
        mix_by_ratio(pools, {"en": 1, "zh-tw": 1}, 10, seed=0)
    assert err.value.language == "zh-tw"


def test_sampling_is_seed_stable_across_pool_order():
    p = pool({"a": 4, "b": 4})
    rng = random.Random(0)
    shuffled = p[:]
    rng.shuffle(shuffled)
    # the drawn type counts depend only on supply and seed
    a = Counter(e.function_type for e in balanced_sample(p, 5, 9))
    b = Counter(e.function_type for e in balanced_sample(shuffled, 5, 9))
    assert a == b
