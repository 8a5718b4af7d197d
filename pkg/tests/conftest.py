import numpy as np
import pytest

from hwnas.graph import MixedStage, OperatorSpec, OpKind, SuperNet, Task, TensorShape


@pytest.fixture
def toy_supernet():
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


@pytest.fixture
def rng():
    return np.random.default_rng(0)
