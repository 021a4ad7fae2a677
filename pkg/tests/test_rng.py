import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rmfg.rng import derive_key, stream


def test_same_triple_same_stream():
    a = stream(5, "tag", 3).standard_normal(8)
    b = stream(5, "tag", 3).standard_normal(8)
    assert np.array_equal(a, b)


@given(st.integers(0, 2**64 - 1), st.text(max_size=12), st.integers(0, 10**6))
def test_key_is_128_bit(seed, tag, index):
    k = derive_key(seed, tag, index)
    assert 0 <= k < 2**128


def test_neighbouring_indices_differ():
    keys = {derive_key(1, "x", i) for i in range(1000)}
    assert len(keys) == 1000


def test_seed_range_enforced():
    with pytest.raises(ValueError):
        derive_key(-1, "x")
    with pytest.raises(ValueError):
        derive_key(2**64, "x")
