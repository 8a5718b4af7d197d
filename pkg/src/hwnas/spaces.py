"""Built-in desk-scale search spaces used by the CLI, demos, and tests."""

from __future__ import annotations

from .graph import MixedStage, OperatorSpec, OpKind, SuperNet, Task, TensorShape


def toy_classification_supernet() -> SuperNet:
    """3 stages x 3 candidates on 3x8x8 inputs, 4 classes.

    Candidates trade accuracy for latency: a full conv, a cheaper depthwise
    conv, and a free identity.
    """
    shape = TensorShape(16, 8, 8)
    candidates = (
        OperatorSpec(OpKind.Conv, 16, 16, kernel=3),
        OperatorSpec(OpKind.DWConv, 16, 16, kernel=3),
        OperatorSpec(OpKind.Identity, 16, 16),
    )
    return SuperNet(
        task=Task.Classification,
        input_shape=TensorShape(3, 8, 8),
        stem=(OperatorSpec(OpKind.Conv, 3, 16, kernel=3),),
        stages=tuple(MixedStage(candidates, shape, shape) for _ in range(3)),
        head=(OperatorSpec(OpKind.Linear, 16 * 8 * 8, 4),),
        num_classes=4)


def toy_sr_supernet() -> SuperNet:
    """Kernel-size x activation x upsampling-method space, 3x32x32 -> 3x64x64.

    The upsample stage pits a DSP-free nearest resampler against bilinear
    interpolation and depth-to-space (both DSP-bound on the simulated device).
    Nearest/bilinear candidates carry a learned pointwise projection so all
    three candidates share the 4x64x64 stage output.
    """
    s32 = TensorShape(16, 32, 32)
    s_up = TensorShape(4, 64, 64)
    kernel_stage = MixedStage((
        OperatorSpec(OpKind.PointwiseConv, 16, 16),
        OperatorSpec(OpKind.Conv, 16, 16, kernel=3),
        OperatorSpec(OpKind.Conv, 16, 16, kernel=5),
    ), s32, s32)
    act_stage = MixedStage((
        OperatorSpec(OpKind.ReLU, 16, 16),
        OperatorSpec(OpKind.LeakyReLU, 16, 16, activation_slope=0.1),
    ), s32, s32)
    up_stage = MixedStage((
        OperatorSpec(OpKind.UpsampleNearest, 16, 4, scale_factor=2),
        OperatorSpec(OpKind.UpsampleBilinear, 16, 4, scale_factor=2),
        OperatorSpec(OpKind.DepthToSpace, 16, 4, scale_factor=2),
    ), s32, s_up)
    return SuperNet(
        task=Task.SuperResolution,
        input_shape=TensorShape(3, 32, 32),
        stem=(OperatorSpec(OpKind.Conv, 3, 16, kernel=3),),
        stages=(kernel_stage, act_stage, up_stage),
        head=(OperatorSpec(OpKind.Conv, 4, 3, kernel=3),),
        sr_scale=2)


def calibration_supernet() -> SuperNet:
    """Wide-channel space whose per-layer costs dwarf the graph overhead.

    Used for predicted-vs-measured calibration where the overhead/N profiling
    bias must stay small relative to whole-network latency.
    """
    shape = TensorShape(128, 32, 32)
    candidates = (
        OperatorSpec(OpKind.Conv, 128, 128, kernel=3),
        OperatorSpec(OpKind.Conv, 128, 128, kernel=5),
        OperatorSpec(OpKind.MBConv, 128, 128, kernel=3, expand_ratio=4),
    )
    return SuperNet(
        task=Task.Classification,
        input_shape=TensorShape(3, 32, 32),
        stem=(OperatorSpec(OpKind.Conv, 3, 128, kernel=3),),
        stages=tuple(MixedStage(candidates, shape, shape) for _ in range(4)),
        head=(OperatorSpec(OpKind.Linear, 128 * 32 * 32, 10),),
        num_classes=10)


BUILTIN_SPACES = {
    "toy-classification": toy_classification_supernet,
    "toy-sr": toy_sr_supernet,
    "calibration": calibration_supernet,
}
