"""
Unit tests for ParamSet structure and the binary checkpoint format
"""

import numpy as np
import pytest

from engine.python.errors import CongruenceError, ContractError, SerializationError
from engine.python.params import MAGIC, ParamEntry, ParamSet
from engine.python.tensor import Tensor
from tests.conftest import make_paramset


@pytest.fixture
def three_layers():
    return make_paramset([
        [[1.0, 2.0], [[0.5, -0.5], [1.5, 2.5]]],
        [[3.0]],
        [[4.0, 5.0, 6.0]],
    ])


class TestStructure:
    """Layer grouping and congruence"""

    def test_layer_indices_and_counts(self, three_layers):
        assert three_layers.layer_indices == [1, 2, 3]
        assert three_layers.layer_count == 3
        assert three_layers.num_parameters == 2 + 4 + 1 + 3

    def test_rejects_gap_in_layers(self):
        with pytest.raises(ContractError):
            ParamSet([
                ParamEntry(1, "a", Tensor([1.0])),
                ParamEntry(3, "b", Tensor([1.0])),
            ])

    def test_rejects_unordered_or_duplicate(self):
        with pytest.raises(ContractError):
            ParamSet([ParamEntry(2, "a", Tensor([1.0])), ParamEntry(1, "b", Tensor([1.0]))])
        with pytest.raises(ContractError):
            ParamSet([ParamEntry(1, "a", Tensor([1.0])), ParamEntry(1, "a", Tensor([2.0]))])

    def test_congruence(self, three_layers):
        assert three_layers.is_congruent(three_layers.zeros_like())
        other = make_paramset([[[1.0, 2.0], [[0.0, 0.0], [0.0, 0.0]]], [[3.0]], [[4.0, 5.0]]])
        assert not three_layers.is_congruent(other)
        with pytest.raises(CongruenceError):
            three_layers.require_congruent(other)

    def test_top_layers_keep_indices(self, three_layers):
        top = three_layers.top_layers(2)
        assert top.layer_indices == [2, 3]
        assert [e.name for e in top] == ["layer2.p0", "layer3.p0"]

    def test_top_layers_bounds(self, three_layers):
        with pytest.raises(ContractError):
            three_layers.top_layer_indices(0)
        with pytest.raises(ContractError):
            three_layers.top_layer_indices(4)

    def test_with_arrays_copies(self, three_layers):
        arrays = [a * 2.0 for a in three_layers.arrays()]
        doubled = three_layers.with_arrays(arrays)
        arrays[0][0] = 99.0
        assert doubled.arrays()[0][0] == 2.0

    def test_with_arrays_shape_mismatch(self, three_layers):
        arrays = three_layers.arrays()
        arrays[-1] = np.zeros(4)
        with pytest.raises(CongruenceError):
            three_layers.with_arrays(arrays)

    def test_clone_is_independent(self, three_layers):
        copy = three_layers.clone(requires_grad=True)
        copy.arrays()[0][0] = -1.0
        assert three_layers.arrays()[0][0] == 1.0
        assert all(t.requires_grad for t in copy.tensors())


class TestSerialization:
    """FPAW binary format"""

    def test_round_trip_is_bitwise(self, three_layers, tmp_path):
        path = tmp_path / "model.fpaw"
        size = three_layers.save(path)
        loaded = ParamSet.load(path)
        assert size == path.stat().st_size
        assert loaded.bitwise_equal(three_layers)
        assert loaded.signature() == three_layers.signature()

    def test_header_layout(self, three_layers):
        blob = three_layers.to_bytes()
        assert blob[:4] == MAGIC
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == len(three_layers)

    def test_bad_magic(self, three_layers):
        blob = b"NOPE" + three_layers.to_bytes()[4:]
        with pytest.raises(SerializationError):
            ParamSet.from_bytes(blob)

    def test_truncated(self, three_layers):
        with pytest.raises(SerializationError):
            ParamSet.from_bytes(three_layers.to_bytes()[:-3])

    def test_trailing_bytes(self, three_layers):
        with pytest.raises(SerializationError):
            ParamSet.from_bytes(three_layers.to_bytes() + b"\x00")

    def test_unsupported_version(self, three_layers):
        blob = bytearray(three_layers.to_bytes())
        blob[4:8] = (7).to_bytes(4, "little")
        with pytest.raises(SerializationError):
            ParamSet.from_bytes(bytes(blob))
