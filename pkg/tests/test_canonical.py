import json
import math

import pytest
from hypothesis import given, strategies as st

from skipforge.canonical import canonical_dumps, canonical_hash


def test_sorted_keys_and_separators():
    assert canonical_dumps({"b": 1, "a": {"d": 2, "c": 3}}) == '{"a":{"c":3,"d":2},"b":1}'


def test_integral_floats_become_ints():
    assert canonical_dumps({"g": 1.0, "e": 0.0, "c": 7.5}) == '{"c":7.5,"e":0,"g":1}'


def test_bools_survive():
    assert canonical_dumps({"x": True, "y": False}) == '{"x":true,"y":false}'


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        canonical_dumps({"x": float("nan")})
    with pytest.raises(ValueError):
        canonical_dumps({"x": math.inf})


def test_hash_stable():
    a = canonical_hash({"k": [1, 2.0, "s"]})
    b = canonical_hash({"k": [1, 2, "s"]})
    assert a == b and len(a) == 64


json_scalars = st.one_of(
    st.integers(min_value=-(10**9), max_value=10**9),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    st.text(max_size=12),
    st.booleans(),
    st.none(),
)


@given(st.dictionaries(st.text(max_size=8), st.lists(json_scalars, max_size=4), max_size=6))
def test_roundtrip_parses_and_is_stable(d):
    s = canonical_dumps(d)
    parsed = json.loads(s)
    assert canonical_dumps(parsed) == s
