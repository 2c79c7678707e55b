import math

import numpy as np
import pytest

from stsun import tensor as T
from stsun.metadata import (EmbeddingRegistry, InputMetadata, OutputSpec, OutputTemporalEncoder,
                            PositionalEncoding, ScalarTokenizer, SpatialMetaEncoder, Task, ValidationError,
                            encode_output_temporal_meta, encode_spatial_meta, output_length, tokenize_scalars,
                            within_patch_positions)
from stsun.tensor import ParameterStore


def test_single_value_token_is_affine():
    store = ParameterStore(0)
    tok = ScalarTokenizer(store, "t", 4)
    tok.bias.data = np.arange(4.0)
    out = tokenize_scalars([2.5], tok).data
    np.testing.assert_allclose(out, 2.5 * tok.weight.data + tok.bias.data, atol=0)


def test_wavelength_tokens_shape_and_equal_values():
    tok = ScalarTokenizer(ParameterStore(0), "t", 8)
    meta = InputMetadata([450, 550, 650], [0], 0.3)
    assert tok(meta.normalized_wavelengths()).shape == (3, 8)
    out = tok([0.5, 0.5]).data
    np.testing.assert_array_equal(out[0], out[1])


def test_tokenizer_affine_property():
    tok = ScalarTokenizer(ParameterStore(0), "t", 6)
    tok.bias.data = np.random.default_rng(0).standard_normal(6)
    v, alpha = 0.75, 4.0
    zero = tok([0.0]).data
    lhs = tok([alpha * v]).data - zero
    rhs = alpha * (tok([v]).data - zero)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-15, atol=1e-15)


def test_empty_and_nonfinite_values_rejected():
    tok = ScalarTokenizer(ParameterStore(0), "t", 4)
    with pytest.raises(ValidationError):
        tok([])
    with pytest.raises(ValidationError):
        tok([float("nan")])


def test_spatial_meta_tokens():
    enc = SpatialMetaEncoder(ParameterStore(0), "s", 4)
    one = encode_spatial_meta(enc, 1, 1, 0.5).data
    expected = enc.row([0.0]).data + enc.col([0.0]).data + enc.res([math.log10(0.5)]).data
    np.testing.assert_allclose(one, expected, atol=1e-15)
    assert encode_spatial_meta(enc, 2, 2, 0.3).shape == (4, 4)
    # changing resolution shifts every token by the same vector
    delta = encode_spatial_meta(enc, 2, 2, 0.6).data - encode_spatial_meta(enc, 2, 2, 0.3).data
    np.testing.assert_allclose(delta, np.broadcast_to(delta[0], delta.shape), atol=1e-15)


def test_within_patch_positions_normalised():
    rows, cols = within_patch_positions(2, 3)
    np.testing.assert_array_equal(rows, [0, 0, 0, 1, 1, 1])
    np.testing.assert_array_equal(cols, [0, 0.5, 1, 0, 0.5, 1])


def test_output_temporal_tokens():
    store = ParameterStore(0)
    reg = EmbeddingRegistry(store, ["change", "a"], 4)
    enc = OutputTemporalEncoder(store, "o", 4)
    assert encode_output_temporal_meta(enc, 1, "SS", reg).shape == (1, 4)
    bcd = encode_output_temporal_meta(enc, 3, "BCD", reg).data
    steps = enc.step(np.arange(3) / 3).data
    np.testing.assert_allclose(bcd - steps, np.tile(reg.task_embedding("BCD").data, (3, 1)), atol=1e-15)
    scd = encode_output_temporal_meta(enc, 3, "SCD", reg).data
    diff = reg.task_embedding("SCD").data - reg.task_embedding("BCD").data
    np.testing.assert_allclose(scd - bcd, np.tile(diff, (3, 1)), atol=1e-15)
    with pytest.raises(ValidationError):
        encode_output_temporal_meta(enc, 2, "XYZ", reg)


@pytest.mark.parametrize("task,t1,t2,ok", [
    ("SS", 1, 1, True), ("SS", 2, 2, False), ("SS", 1, 2, False),
    ("BCD", 2, 1, True), ("BCD", 4, 3, True), ("BCD", 1, 0, False), ("BCD", 3, 3, False), ("BCD", 3, 1, False),
    ("SCD", 2, 2, True), ("SCD", 8, 8, True), ("SCD", 3, 2, False), ("SCD", 1, 2, False),
])
def test_task_length_rules(task, t1, t2, ok):
    if ok:
        OutputSpec(task, t2, [0]).validate(t1)
        assert output_length(task, t1) == t2
    else:
        with pytest.raises(ValidationError):
            OutputSpec(task, max(t2, 1), [0]).validate(t1) if t2 >= 1 else OutputSpec(task, t2, [0])


def test_bcd_forces_change_category():
    reg = EmbeddingRegistry(ParameterStore(0), ["change", "water"], 4)
    OutputSpec("BCD", 1, [0]).validate(2, reg)
    with pytest.raises(ValidationError):
        OutputSpec("BCD", 1, [1]).validate(2, reg)
    with pytest.raises(ValidationError):
        OutputSpec("SS", 1, [5]).validate(1, reg)
    with pytest.raises(ValidationError):
        OutputSpec("SS", 1, [1, 1])


def test_input_metadata_invariants():
    with pytest.raises(ValidationError):
        InputMetadata([0.0], [0], 1.0)
    with pytest.raises(ValidationError):
        InputMetadata([500], [3, 1], 1.0)
    with pytest.raises(ValidationError):
        InputMetadata([500], [0], 0.0)
    meta = InputMetadata([500, 1000], [10, 10, 40], 3.0)
    np.testing.assert_allclose(meta.normalized_wavelengths(), [0.5, 1.0])
    np.testing.assert_allclose(meta.normalized_timestamps(), [0.0, 0.0, 1.0])
    assert InputMetadata([500], [7], 1.0).normalized_timestamps().tolist() == [0.0]


def test_task_parse():
    assert Task.parse("bcd") is Task.BCD
    assert Task.parse(Task.SCD) is Task.SCD
    with pytest.raises(ValidationError):
        Task.parse("nope")


def test_positional_encoding_deterministic():
    a, b = PositionalEncoding(6)(5), PositionalEncoding(6)(5)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0], [0, 1, 0, 1, 0, 1])


def test_registry_embeddings_receive_gradients():
    reg = EmbeddingRegistry(ParameterStore(0), ["change", "a", "b"], 4)
    T.sum_(reg.category_tokens([2, 0])).backward()
    g = reg.category_table.grad
    np.testing.assert_array_equal(g, [[1] * 4, [0] * 4, [1] * 4])
