import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorgrid import errors
from tensorgrid.tensors import (
    Dataset,
    DType,
    MetaField,
    MetaKind,
    dataset_add_tensor,
    deserialize_dataset,
    deserialize_tensor,
    make_tensor,
    serialize_dataset,
    serialize_tensor,
    tensor_from_array,
)


class TestMakeTensor:
    def test_f32_scalar_one(self):
        t = make_tensor(DType.f32, [1], bytes.fromhex("0000803F"))
        assert t.to_numpy()[0] == 1.0

    def test_f64_2x3(self):
        t = make_tensor(DType.f64, [2, 3], b"\x00" * 48)
        assert t.numel() == 6

    def test_length_mismatch(self):
        with pytest.raises(errors.ShapeMismatch):
            make_tensor(DType.i32, [2], b"\x00" * 4)

    def test_zero_dim_forbidden(self):
        with pytest.raises(errors.BadShape):
            make_tensor(DType.f32, [], b"")

    def test_nonpositive_dim(self):
        with pytest.raises(errors.BadShape):
            make_tensor(DType.f32, [2, 0], b"")

    def test_too_many_dims(self):
        with pytest.raises(errors.BadShape):
            make_tensor(DType.u8, [1] * 9, b"\x00")


class TestSerialization:
    def test_f32_scalar_layout(self):
        t = make_tensor(DType.f32, [1], bytes.fromhex("0000803F"))
        assert serialize_tensor(t) == bytes.fromhex("0101010000000000803F")

    def test_u8_layout(self):
        t = make_tensor(DType.u8, [3], bytes([0, 1, 2]))
        assert serialize_tensor(t) == bytes.fromhex("050103000000000102")

    def test_size_formula(self):
        t = make_tensor(DType.i64, [2, 2, 2], b"\x00" * 64)
        assert len(serialize_tensor(t)) == 2 + 4 * 3 + 64

    def test_inverse_of_example(self):
        t = deserialize_tensor(bytes.fromhex("0101010000000000803F"))
        assert t.dtype == DType.f32
        assert t.shape == (1,)
        assert t.to_numpy()[0] == 1.0

    def test_empty_bytes(self):
        with pytest.raises(errors.Truncated):
            deserialize_tensor(b"")

    def test_bad_dtype_code(self):
        with pytest.raises(errors.BadDType):
            deserialize_tensor(bytes([9, 1, 1, 0, 0, 0, 0]))

    def test_truncated_payload(self):
        good = serialize_tensor(make_tensor(DType.f64, [4], b"\x11" * 32))
        with pytest.raises(errors.Truncated):
            deserialize_tensor(good[:-1])

    def test_trailing_garbage(self):
        good = serialize_tensor(make_tensor(DType.u8, [1], b"\x00"))
        with pytest.raises(errors.Truncated):
            deserialize_tensor(good + b"\x00")


_dtypes = st.sampled_from(list(DType))


@st.composite
def tensors_strategy(draw):
    dtype = draw(_dtypes)
    shape = tuple(draw(st.lists(st.integers(1, 5), min_size=1, max_size=4)))
    n = 1
    for d in shape:
        n *= d
    data = draw(st.binary(min_size=n * dtype.width, max_size=n * dtype.width))
    return make_tensor(dtype, shape, data)


@given(tensors_strategy())
@settings(max_examples=200, deadline=None)
def test_roundtrip_bit_identical(t):
    back = deserialize_tensor(serialize_tensor(t))
    assert back == t  # dataclass equality covers dtype, shape, and raw bytes


@given(tensors_strategy())
@settings(max_examples=50, deadline=None)
def test_serialized_size(t):
    assert len(serialize_tensor(t)) == 2 + 4 * len(t.shape) + len(t.data)


def test_numpy_bridge_roundtrip():
    arr = np.arange(12, dtype=np.int32).reshape(3, 4)
    t = tensor_from_array(arr)
    assert t.dtype == DType.i32
    np.testing.assert_array_equal(t.to_numpy(), arr)


def test_numpy_bridge_rejects_unsupported():
    with pytest.raises(errors.BadDType):
        tensor_from_array(np.zeros(3, dtype=np.float16))


class TestDataset:
    def _tensor(self, fill=7):
        return make_tensor(DType.u8, [4], bytes([fill] * 4))

    def test_add_and_get(self):
        ds = Dataset("d")
        ds2 = dataset_add_tensor(ds, "a", self._tensor())
        assert not ds.tensors  # original untouched
        assert ds2.tensors["a"] == self._tensor()

    def test_duplicate_name(self):
        ds = Dataset("d").add_tensor("a", self._tensor())
        with pytest.raises(errors.DuplicateName):
            ds.add_tensor("a", self._tensor(1))

    def test_roundtrip_preserves_everything(self):
        ds = Dataset("d")
        ds = ds.add_tensor("a", self._tensor(1))
        ds = ds.add_tensor("b", make_tensor(DType.f64, [2], struct.pack("<2d", 0.5, -1.5)))
        ds = ds.add_meta(MetaField("dims", MetaKind.string_list, ("x", "y", "t")))
        ds = ds.add_meta(MetaField("dt", MetaKind.scalar_f64, (0.25,)))
        ds = ds.add_meta(MetaField("steps", MetaKind.scalar_i64, (10, 20)))
        back = deserialize_dataset("d", serialize_dataset(ds))
        assert back.tensors == ds.tensors
        assert back.meta == ds.meta

    def test_string_list_order_preserved(self):
        ds = Dataset("d").add_meta(MetaField("names", MetaKind.string_list, ("b", "a", "c")))
        back = deserialize_dataset("d", serialize_dataset(ds))
        assert back.meta["names"].values == ("b", "a", "c")

    def test_truncated_blob(self):
        blob = serialize_dataset(Dataset("d").add_tensor("a", self._tensor()))
        with pytest.raises(errors.Truncated):
            deserialize_dataset("d", blob[:-2])
