from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hwnas.errors import ParseError
from hwnas.graph import (CompactNet, MixedStage, OperatorSpec, OpKind, SuperNet,
                         Task, TensorShape, canonical_key, deserialize,
                         output_shape, serialize, validate)


# ---------------------------------------------------------------------------
# output_shape
# ---------------------------------------------------------------------------

def test_identity_preserves_shape():
    s = TensorShape(16, 32, 32)
    assert output_shape(OperatorSpec(OpKind.Identity, 16, 16), s) == s


def test_strided_conv_halves_spatial():
    s = TensorShape(16, 32, 32)
    op = OperatorSpec(OpKind.Conv, 16, 32, kernel=3, stride=2)
    assert output_shape(op, s) == TensorShape(32, 16, 16)


def test_upsample_nearest_doubles_spatial():
    s = TensorShape(3, 8, 8)
    op = OperatorSpec(OpKind.UpsampleNearest, 3, 3, scale_factor=2)
    assert output_shape(op, s) == TensorShape(3, 16, 16)


def test_depth_to_space_trades_channels_for_space():
    s = TensorShape(16, 8, 8)
    op = OperatorSpec(OpKind.DepthToSpace, 16, 4, scale_factor=2)
    assert output_shape(op, s) == TensorShape(4, 16, 16)


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def test_validate_well_formed_supernet(toy_supernet):
    report = validate(toy_supernet)
    assert report.ok
    assert report.findings == ()


def test_validate_flags_candidate_channel_mismatch(toy_supernet):
    bad_stage = MixedStage(
        (OperatorSpec(OpKind.Conv, 16, 32, kernel=3),),
        TensorShape(16, 8, 8), TensorShape(64, 8, 8))
    net = SuperNet(task=toy_supernet.task, input_shape=toy_supernet.input_shape,
                   stem=toy_supernet.stem,
                   stages=toy_supernet.stages[:2] + (bad_stage,),
                   head=toy_supernet.head, num_classes=4)
    report = validate(net)
    assert not report.ok
    assert len(report.findings) >= 1


def test_identity_channel_mismatch_is_invariant_finding(toy_supernet):
    bad_stage = MixedStage(
        (OperatorSpec(OpKind.Identity, 16, 32),),
        TensorShape(16, 8, 8), TensorShape(16, 8, 8))
    net = SuperNet(task=toy_supernet.task, input_shape=toy_supernet.input_shape,
                   stem=toy_supernet.stem,
                   stages=toy_supernet.stages[:2] + (bad_stage,),
                   head=toy_supernet.head, num_classes=4)
    report = validate(net)
    assert len(report.findings) == 1
    assert "in_channels" in report.findings[0].message


# ---------------------------------------------------------------------------
# canonical_key
# ---------------------------------------------------------------------------

def test_canonical_key_conv_example():
    op = OperatorSpec(OpKind.Conv, 16, 32, kernel=3)
    assert canonical_key(op, TensorShape(16, 32, 32)) == "Conv:k3:s1:e1:i16x32x32:o32"


def test_canonical_key_mbconv_example():
    op = OperatorSpec(OpKind.MBConv, 160, 160, kernel=5, expand_ratio=Fraction(6))
    assert canonical_key(op, TensorShape(160, 7, 7)) == "MBConv:k5:s1:e6:i160x7x7:o160"


def _random_op(rng):
    kind = rng.choice(list(OpKind))
    c = int(rng.integers(1, 64))
    k = int(rng.choice([1, 3, 5, 7]))
    s = int(rng.choice([1, 2]))
    if kind in (OpKind.Identity, OpKind.ReLU):
        return OperatorSpec(kind, c, c)
    if kind is OpKind.LeakyReLU:
        return OperatorSpec(kind, c, c,
                            activation_slope=float(rng.choice([0.0, 0.1, 0.2])))
    if kind is OpKind.Linear:
        return OperatorSpec(kind, c, int(rng.integers(1, 64)))
    if kind is OpKind.PointwiseConv:
        return OperatorSpec(kind, c, int(rng.integers(1, 64)), stride=s)
    if kind is OpKind.DWConv:
        return OperatorSpec(kind, c, c, kernel=k, stride=s)
    if kind in (OpKind.AvgPool, OpKind.MaxPool):
        return OperatorSpec(kind, c, c, kernel=k, stride=s)
    if kind is OpKind.MBConv:
        return OperatorSpec(kind, c, int(rng.integers(1, 64)), kernel=k, stride=s,
                            expand_ratio=Fraction(int(rng.integers(1, 7))))
    if kind in (OpKind.UpsampleNearest, OpKind.UpsampleBilinear):
        return OperatorSpec(kind, c, int(rng.integers(1, 64)), scale_factor=2)
    if kind is OpKind.DepthToSpace:
        return OperatorSpec(kind, 4 * c, c, scale_factor=2)
    return OperatorSpec(OpKind.Conv, c, int(rng.integers(1, 64)), kernel=k, stride=s)


def test_canonical_key_injective_over_random_pairs():
    import numpy as np
    rng = np.random.default_rng(123)
    seen = {}
    for _ in range(10_000):
        op = _random_op(rng)
        shape = TensorShape(op.in_channels, int(rng.choice([4, 8, 16])),
                            int(rng.choice([4, 8, 16])))
        key = canonical_key(op, shape)
        if key in seen:
            prev_op, prev_shape = seen[key]
            assert (prev_op, prev_shape) == (op, shape), key
        seen[key] = (op, shape)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_supernet_round_trip(toy_supernet):
    assert deserialize(serialize(toy_supernet)) == toy_supernet


def test_compactnet_round_trip():
    net = CompactNet(
        task=Task.Classification, input_shape=TensorShape(3, 8, 8),
        layers=(OperatorSpec(OpKind.Conv, 3, 16, kernel=3),
                OperatorSpec(OpKind.MBConv, 16, 16, kernel=3,
                             expand_ratio=Fraction(3, 2)),
                OperatorSpec(OpKind.Linear, 16 * 8 * 8, 4)),
        num_classes=4, chosen_indices=(0,), tie_stages=(0,))
    assert deserialize(serialize(net)) == net


@settings(max_examples=30, deadline=None)
@given(n_stages=st.integers(1, 4), n_cands=st.integers(1, 3),
       channels=st.sampled_from([8, 16, 24]))
def test_supernet_round_trip_property(n_stages, n_cands, channels):
    shape = TensorShape(channels, 8, 8)
    cands = tuple(
        [OperatorSpec(OpKind.Conv, channels, channels, kernel=3),
         OperatorSpec(OpKind.DWConv, channels, channels, kernel=3),
         OperatorSpec(OpKind.Identity, channels, channels)][:n_cands])
    net = SuperNet(
        task=Task.Classification, input_shape=TensorShape(3, 8, 8),
        stem=(OperatorSpec(OpKind.Conv, 3, channels, kernel=3),),
        stages=tuple(MixedStage(cands, shape, shape) for _ in range(n_stages)),
        head=(OperatorSpec(OpKind.Linear, channels * 64, 4),),
        num_classes=4)
    assert deserialize(serialize(net)) == net


def test_negative_kernel_is_parse_error(toy_supernet):
    text = serialize(toy_supernet).replace('"kernel": 3', '"kernel": -3')
    with pytest.raises(ParseError):
        deserialize(text)


def test_missing_stages_is_parse_error(toy_supernet):
    import json
    doc = json.loads(serialize(toy_supernet))
    del doc["stages"]
    with pytest.raises(ParseError):
        deserialize(json.dumps(doc))


def test_unknown_field_is_parse_error(toy_supernet):
    import json
    doc = json.loads(serialize(toy_supernet))
    doc["surprise"] = 1
    with pytest.raises(ParseError):
        deserialize(json.dumps(doc))
