"""Learned latency predictor: workload features -> cycle cost.

A small two-hidden-layer MLP regresses log(cycles) with MSE, which
approximates relative error and matches the MAPE evaluation metric. Tables
produced from the model are interchangeable with measured tables everywhere
downstream; cycles convert to milliseconds through a configured clock rate.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySet, InsufficientData, NonFiniteLoss, ParseError
from .graph import OperatorSpec, OpKind, SuperNet, TensorShape, output_shape
from .latency import DEFAULT_CLOCK_GHZ, LatencyTable
from .profiler import enumerate_search_space

MODEL_VERSION = 1

_KIND_ORDER = list(OpKind)
FEATURE_DIM = len(_KIND_ORDER) + 8 + 1  # one-hot kind + scalar features + slope flag


@dataclass(frozen=True)
class ProfileRecord:
    op: OperatorSpec
    input_shape: TensorShape
    measured_cycles: float

    def __post_init__(self):
        if not math.isfinite(self.measured_cycles) or self.measured_cycles <= 0:
            raise ValueError(f"measured_cycles must be finite and > 0, "
                             f"got {self.measured_cycles}")


def encode_features(op: OperatorSpec, input_shape: TensorShape) -> np.ndarray:
    """Deterministic fixed-length encoding of one workload."""
    op.validate_fields()
    vec = np.zeros(FEATURE_DIM)
    vec[_KIND_ORDER.index(op.kind)] = 1.0
    scalars = [op.in_channels, op.out_channels, input_shape.height, input_shape.width,
               op.kernel, op.stride, op.expand_ratio.numerator, op.scale_factor]
    off = len(_KIND_ORDER)
    for i, v in enumerate(scalars):
        vec[off + i] = math.log2(1 + v)
    vec[off + 8] = 1.0 if op.activation_slope != 0 else 0.0
    return vec


@dataclass
class CostModelConfig:
    epochs: int = 3000
    lr: float = 5e-3
    hidden: tuple = (64, 64)
    val_fraction: float = 0.2
    seed: int = 0
    restarts: int = 5
    val_every: int = 25


@dataclass
class CostModel:
    """MLP over normalized features predicting log(cycles)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: float
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def _forward(self, feats: np.ndarray):
        xn = (feats - self.feat_mean) / self.feat_std
        a1 = xn @ self.w1.T + self.b1
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ self.w2.T + self.b2
        h2 = np.maximum(a2, 0.0)
        y = h2 @ self.w3 + self.b3
        return y, (xn, a1, h1, a2, h2)

    def predict_log_cycles(self, feats: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(feats))[0]


def predict(model: CostModel, op: OperatorSpec, input_shape: TensorShape) -> float:
    """Predicted cycle cost; always positive."""
    y = model.predict_log_cycles(encode_features(op, input_shape))
    return float(np.exp(y[0]))


@dataclass
class TrainingReport:
    train_losses: list
    val_losses: list
    final_train_mape: float
    final_val_mape: float


def _mape_from_log(pred_log, true_log) -> float:
    pred = np.exp(pred_log)
    true = np.exp(true_log)
    return float(np.mean(np.abs(pred - true) / true) * 100.0)


def _fit_once(rng, cfg, x_tr, t_tr, x_va, t_va, mean, std):
    """One Adam run with cosine lr decay; returns the best-validation snapshot."""
    h1, h2 = cfg.hidden
    d = x_tr.shape[1]
    model = CostModel(
        w1=rng.normal(0, math.sqrt(2.0 / d), (h1, d)), b1=np.zeros(h1),
        w2=rng.normal(0, math.sqrt(2.0 / h1), (h2, h1)), b2=np.zeros(h2),
        w3=rng.normal(0, math.sqrt(2.0 / h2), h2), b3=float(t_tr.mean()),
        feat_mean=mean, feat_std=std)

    params = ["w1", "b1", "w2", "b2", "w3", "b3"]
    m = {p: np.zeros_like(np.asarray(getattr(model, p), dtype=float)) for p in params}
    v = {p: np.zeros_like(np.asarray(getattr(model, p), dtype=float)) for p in params}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    train_losses, val_losses = [], []
    best, best_val = None, np.inf

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        y, (xn, a1, hh1, a2, hh2) = model._forward(x_tr)
        diff = y - t_tr
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"cost-model loss diverged at epoch {epoch}")
        n = len(t_tr)
        dy = 2.0 * diff / n
        grads = {
            "b3": float(dy.sum()),
            "w3": hh2.T @ dy,
        }
        dh2 = np.outer(dy, model.w3) * (a2 > 0)
        grads["w2"] = dh2.T @ hh1
        grads["b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ model.w2) * (a1 > 0)
        grads["w1"] = dh1.T @ xn
        grads["b1"] = dh1.sum(axis=0)

        for p in params:
            g = np.asarray(grads[p], dtype=float)
            m[p] = beta1 * m[p] + (1 - beta1) * g
            v[p] = beta2 * v[p] + (1 - beta2) * g ** 2
            mh = m[p] / (1 - beta1 ** epoch)
            vh = v[p] / (1 - beta2 ** epoch)
            update = lr * mh / (np.sqrt(vh) + eps)
            if p == "b3":
                model.b3 -= float(update)
            else:
                setattr(model, p, getattr(model, p) - update)

        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            train_losses.append(loss)
            yv = model.predict_log_cycles(x_va)
            val_loss = float(np.mean((yv - t_va) ** 2))
            val_losses.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best = copy.deepcopy(model)

    return best, best_val, train_losses, val_losses


def train_cost_model(records, config: CostModelConfig = None):
    """Fit the MLP on profile records; returns (CostModel, TrainingReport).

    Runs cfg.restarts independent initializations (shared train/val split) and
    keeps the snapshot with the lowest validation loss seen at any checkpoint:
    with a few hundred records the loss surface is rough enough that single
    runs land in noticeably different minima. Deterministic given config.seed;
    raises InsufficientData below 50 records.
    """
    cfg = config or CostModelConfig()
    records = list(records)
    if len(records) < 50:
        raise InsufficientData(f"need >= 50 records, got {len(records)}")
    feats = np.stack([encode_features(r.op, r.input_shape) for r in records])
    targets = np.log(np.array([r.measured_cycles for r in records]))

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(records))
    n_val = max(1, int(len(records) * cfg.val_fraction))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    x_tr, t_tr = feats[tr_idx], targets[tr_idx]
    x_va, t_va = feats[val_idx], targets[val_idx]

    mean = x_tr.mean(axis=0)
    std = np.maximum(x_tr.std(axis=0), 1e-8)

    best = None
    best_val = np.inf
    best_curves = ([], [])
    for _ in range(max(1, cfg.restarts)):
        model, val_loss, tr_losses, va_losses = _fit_once(
            rng, cfg, x_tr, t_tr, x_va, t_va, mean, std)
        if val_loss < best_val:
            best, best_val = model, val_loss
            best_curves = (tr_losses, va_losses)

    report = TrainingReport(
        train_losses=best_curves[0], val_losses=best_curves[1],
        final_train_mape=_mape_from_log(best.predict_log_cycles(x_tr), t_tr),
        final_val_mape=_mape_from_log(best.predict_log_cycles(x_va), t_va))
    return best, report


def evaluate_mape(model: CostModel, records) -> float:
    """Mean absolute percentage error of predictions over the records."""
    records = list(records)
    if not records:
        raise EmptySet("no records to evaluate")
    errs = []
    for r in records:
        pred = predict(model, r.op, r.input_shape)
        errs.append(abs(pred - r.measured_cycles) / r.measured_cycles)
    return float(np.mean(errs) * 100.0)


def lut_from_model(model: CostModel, supernet: SuperNet,
                   clock_ghz: float = DEFAULT_CLOCK_GHZ) -> LatencyTable:
    """Predict every unique search-space key; cycles -> ms via the clock."""
    entries = {}
    for key, op, shape in enumerate_search_space(supernet):
        if op.kind is OpKind.Identity:
            # identities compile away; they never appear in profile records
            entries[key] = 0.0
        else:
            entries[key] = predict(model, op, shape) / (clock_ghz * 1e6)
    return LatencyTable(entries=entries, source="CostModel",
                        device=f"costmodel@{clock_ghz}GHz")


# ---------------------------------------------------------------------------
# Record and model file I/O
# ---------------------------------------------------------------------------

def save_records(records, path) -> None:
    from .graph import _op_to_json
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"op": _op_to_json(r.op),
                                 "input_shape": r.input_shape.as_list(),
                                 "measured_cycles": r.measured_cycles}) + "\n")


def load_records(path) -> list:
    from .graph import _op_from_json, _shape_from_json
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e}", f"{path}:{lineno}")
            where = f"{path}:{lineno}"
            if set(doc) != {"op", "input_shape", "measured_cycles"}:
                raise ParseError("record needs op/input_shape/measured_cycles", where)
            op = _op_from_json(doc["op"], where)
            shape = _shape_from_json(doc["input_shape"], where)
            cycles = doc["measured_cycles"]
            if not isinstance(cycles, (int, float)) or isinstance(cycles, bool) \
                    or not math.isfinite(cycles) or cycles <= 0:
                raise ParseError(f"bad measured_cycles {cycles!r}", where)
            records.append(ProfileRecord(op, shape, float(cycles)))
    return records


def save_model(model: CostModel, path) -> None:
    doc = {"version": MODEL_VERSION}
    for name in ("w1", "b1", "w2", "b2", "w3", "feat_mean", "feat_std"):
        arr = getattr(model, name)
        doc[name] = {"dims": list(arr.shape), "data": arr.reshape(-1).tolist()}
    doc["b3"] = model.b3
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> CostModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != MODEL_VERSION:
        raise ParseError(f"unsupported model version {doc.get('version')!r}", str(path))
    kw = {}
    for name in ("w1", "b1", "w2", "b2", "w3", "feat_mean", "feat_std"):
        entry = doc[name]
        kw[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["dims"])
    return CostModel(b3=float(doc["b3"]), **kw)


# ---------------------------------------------------------------------------
# Desk-scale training data from the simulated device
# ---------------------------------------------------------------------------

_CHANNELS = [3, 4, 8, 12, 16, 24, 32, 48, 64, 96, 128]
_SIZES = [4, 7, 8, 14, 16, 28, 32, 56, 64]

# Kind weights for workload sampling. The convolution family spans several
# orders of magnitude of cost over a multi-dimensional parameter grid, so it
# needs denser coverage than the cheap fixed-shape kinds to regress well.
_KIND_WEIGHTS = ([OpKind.Conv] * 4 + [OpKind.MBConv] * 3 + [OpKind.DWConv] * 2
                 + [OpKind.PointwiseConv] * 2
                 + [OpKind.AvgPool, OpKind.MaxPool, OpKind.ReLU,
                    OpKind.LeakyReLU, OpKind.UpsampleNearest,
                    OpKind.UpsampleBilinear, OpKind.DepthToSpace, OpKind.Linear])


def sample_workload(rng: np.random.Generator) -> tuple:
    """Random valid (op, input shape); Identity excluded (zero-cost)."""
    kinds = _KIND_WEIGHTS
    while True:
        kind = kinds[int(rng.integers(len(kinds)))]
        c = int(rng.choice(_CHANNELS))
        h = int(rng.choice(_SIZES))
        w = h
        shape = TensorShape(c, h, w)
        kernel = int(rng.choice([1, 3, 5, 7]))
        stride = int(rng.choice([1, 2]))
        try:
            if kind in (OpKind.Conv, OpKind.MBConv):
                out_c = int(rng.choice(_CHANNELS))
                expand = int(rng.choice([1, 2, 4, 6])) if kind is OpKind.MBConv else 1
                op = OperatorSpec(kind, c, out_c, kernel=max(kernel, 3) if kernel == 1 else kernel,
                                  stride=stride, expand_ratio=expand)
            elif kind in (OpKind.DWConv, OpKind.AvgPool, OpKind.MaxPool):
                op = OperatorSpec(kind, c, c, kernel=3 if kernel == 1 else kernel,
                                  stride=stride)
            elif kind is OpKind.PointwiseConv:
                op = OperatorSpec(kind, c, int(rng.choice(_CHANNELS)), stride=stride)
            elif kind is OpKind.ReLU:
                op = OperatorSpec(kind, c, c)
            elif kind is OpKind.LeakyReLU:
                op = OperatorSpec(kind, c, c, activation_slope=0.1)
            elif kind is OpKind.UpsampleNearest or kind is OpKind.UpsampleBilinear:
                op = OperatorSpec(kind, c, c, scale_factor=2)
            elif kind is OpKind.DepthToSpace:
                if c % 4 != 0:
                    continue
                op = OperatorSpec(kind, c, c // 4, scale_factor=2)
            elif kind is OpKind.Linear:
                op = OperatorSpec(kind, shape.numel, int(rng.choice([4, 10, 16, 32, 64])))
            else:  # pragma: no cover
                continue
            op.validate_fields()
            output_shape(op, shape)
        except Exception:
            continue
        return op, shape


def simulate_records(device, num: int, seed: int = 0,
                     clock_ghz: float = DEFAULT_CLOCK_GHZ) -> list:
    """Profile records from the simulated device's closed-form per-op cost."""
    rng = np.random.default_rng(seed)
    records = []
    while len(records) < num:
        op, shape = sample_workload(rng)
        ms = device.op_cost_ms(op, shape)
        if ms <= 0:
            continue
        records.append(ProfileRecord(op, shape, ms * clock_ghz * 1e6))
    return records
