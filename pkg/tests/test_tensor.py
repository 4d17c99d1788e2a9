import numpy as np
import pytest
from hypothesis import given, strategies as st

from tac.tensor import (BitTensor, as_tensor, from_bits, pack, tensor_from_bytes,
                        tensor_to_bytes, unpack)


def test_pack_all_ones():
    b = pack([1.0, 1.0, 1.0, 1.0])
    assert b.logical_len == 4
    assert int(b.words[0]) == 0b1111


def test_pack_all_minus_ones_has_clear_padding():
    b = pack([-1.0, -1.0, -1.0])
    assert b.words.tolist() == [0]


def test_pack_65_alternating():
    x = np.where(np.arange(65) % 2 == 0, 1.0, -1.0)
    b = pack(x)
    assert b.words.size == 2
    assert int(b.words[1]) == 1  # element 64 is +1, nothing else live
    np.testing.assert_array_equal(unpack(b), x)


def test_unpack_two_bits():
    b = BitTensor((2,), np.array([0b01], dtype=np.uint64))
    np.testing.assert_array_equal(unpack(b), [1.0, -1.0])


def test_unpack_empty():
    b = pack(np.zeros((0,)))
    assert b.words.size == 0
    assert unpack(b).shape == (0,)


def test_random_roundtrip_1000(rng):
    x = np.where(rng.random(1000) < 0.5, -1.0, 1.0)
    b = pack(x)
    np.testing.assert_array_equal(unpack(b), x)
    assert pack(unpack(b)) == b


def test_pack_rejects_non_pm1_with_index():
    with pytest.raises(ValueError, match="element 2"):
        pack([1.0, -1.0, 0.0, 1.0])


def test_padding_bits_rejected():
    with pytest.raises(ValueError, match="padding"):
        BitTensor((3,), np.array([0b1000], dtype=np.uint64))


def test_word_count_checked():
    with pytest.raises(ValueError):
        BitTensor((65,), np.zeros(1, dtype=np.uint64))


def test_as_tensor_rejects_nan_inf():
    with pytest.raises(ValueError, match="non-finite"):
        as_tensor([1.0, np.nan])
    with pytest.raises(ValueError, match="non-finite"):
        as_tensor([np.inf])


def test_bittensor_immutable():
    b = pack([1.0, -1.0])
    with pytest.raises(ValueError):
        b.words[0] = 3


def test_bittensor_blob_layout():
    b = pack(np.ones((2, 3)))
    blob = b.to_bytes()
    # ndim, dims, one word
    assert blob[:12] == (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert blob[12:] == (0b111111).to_bytes(8, "little")
    assert BitTensor.from_bytes(blob) == b
    with pytest.raises(ValueError):
        BitTensor.from_bytes(blob[:-1])


def test_tensor_blob_roundtrip(rng):
    t = rng.normal(size=(3, 4, 5))
    np.testing.assert_array_equal(tensor_from_bytes(tensor_to_bytes(t)), t)


@given(st.lists(st.booleans(), max_size=300))
def test_roundtrip_property(bits):
    x = np.where(np.array(bits, dtype=bool), 1.0, -1.0)
    b = pack(x)
    np.testing.assert_array_equal(unpack(b), x)
    assert b.count_ones() == sum(bits)
    tail = len(bits) % 64
    if tail:
        assert int(b.words[-1]) >> tail == 0


@given(st.lists(st.booleans(), min_size=1, max_size=200), st.integers(1, 5))
def test_reshape_keeps_bits(bits, rows):
    n = len(bits) - len(bits) % rows or rows
    arr = np.array((bits * rows)[:n], dtype=bool)
    b = from_bits(arr).reshape((rows, n // rows))
    np.testing.assert_array_equal(b.bits().ravel(), arr)
