"""Latency-regularized differentiable architecture search.

One over-parameterized network, per-stage architecture logits whose softmax
gives path probabilities, and stochastic one-hot gates so each batch trains a
single path. Weight updates (training split) alternate with architecture
updates (validation split); the architecture gradient combines the sampled
path's gate gradient through the softmax Jacobian with the exact gradient of
the expected-latency regularizer.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import LengthMismatch, NonFiniteLoss, NotNormalized, ParseError
from .graph import CompactNet, OperatorSpec, SuperNet, Task
from .latency import (LatencyTable, expected_network_latency, fixed_latency,
                      latency_alpha_grad, stage_latency_vectors)
from .nncore import ModuleInstance, loss_ce, loss_mse, sgd_step


def path_probs(alpha) -> np.ndarray:
    """Stable softmax of one stage's architecture logits."""
    a = np.asarray(alpha, dtype=np.float64)
    z = np.exp(a - a.max())
    return z / z.sum()


def sample_gate(p, rng: np.random.Generator) -> np.ndarray:
    """One-hot sample from the categorical distribution p."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise NotNormalized(f"p sums to {p.sum()!r}")
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    idx = min(idx, len(p) - 1)
    gate = np.zeros(len(p))
    gate[idx] = 1.0
    return gate


def arch_grad(dl_dg, p) -> np.ndarray:
    """Gate-loss gradient pushed through the softmax Jacobian.

    dL/da_i = sum_j dL/dg_j * p_j * (delta_ij - p_i) = p_i*(dL/dg_i - p.dL/dg).
    """
    dl_dg = np.asarray(dl_dg, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if dl_dg.shape != p.shape:
        raise LengthMismatch(f"dl_dg {dl_dg.shape} vs p {p.shape}")
    return p * (dl_dg - float(p @ dl_dg))


def total_loss(ce: float, params, e_latency: float, cfg) -> float:
    """ce + lambda1*||w||^2 + lambda2*E[latency], recomputed for logging.

    The lambda1 term is applied during optimization through SGD weight decay;
    this recomputes it explicitly so reported losses are comparable.
    """
    l2 = sum(float(np.sum(p.value ** 2)) for p in params)
    return ce + cfg.lambda1 * l2 + cfg.lambda2 * e_latency


@dataclass(frozen=True)
class ArchParams:
    """Per-stage architecture logit vectors."""

    vectors: tuple

    def __post_init__(self):
        object.__setattr__(self, "vectors", tuple(np.asarray(v, dtype=np.float64)
                                                  for v in self.vectors))

    @staticmethod
    def uniform(supernet: SuperNet) -> "ArchParams":
        return ArchParams(tuple(np.zeros(len(s.candidates)) for s in supernet.stages))

    def probs(self) -> list:
        return [path_probs(v) for v in self.vectors]


@dataclass
class SearchConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    lr_weights: float = 0.02
    lr_arch: float = 0.2
    weight_steps_per_round: int = 8
    arch_steps_per_round: int = 4
    rounds: int = 30
    batch_size: int = 16
    seed: int = 0
    latency_source: str = ""

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1/lambda2 must be non-negative")
        if self.lr_weights <= 0 or self.lr_arch <= 0 or self.batch_size < 1:
            raise ValueError("learning rates and batch size must be positive")
        if self.weight_steps_per_round < 1 or self.arch_steps_per_round < 1:
            raise ValueError("steps per round must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")

    @staticmethod
    def load(path) -> "SearchConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e}", str(path))
        known = {f for f in SearchConfig.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ParseError(f"unknown fields {sorted(unknown)}", str(path))
        return SearchConfig(**doc)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    train_loss: float
    val_loss: float
    e_latency_ms: float
    probs: tuple          # per-stage tuples of p values
    chosen: tuple         # argmax candidate index per stage

@dataclass
class SearchHistory:
    records: list = field(default_factory=list)

    def append(self, rec: RoundRecord):
        if self.records and rec.round <= self.records[-1].round:
            raise ValueError("round indices must be monotone")
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if not self.records:
            return ""
        header = ["round", "train_loss", "val_loss", "e_latency_ms"]
        for i, ps in enumerate(self.records[0].probs):
            header += [f"stage{i}_cand{j}" for j in range(len(ps))]
        buf.write(",".join(header) + "\n")
        for r in self.records:
            row = [str(r.round), repr(r.train_loss), repr(r.val_loss), repr(r.e_latency_ms)]
            for ps in r.probs:
                row += [repr(float(p)) for p in ps]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Trainable network containers
# ---------------------------------------------------------------------------

class CompactNetModel:
    """A compact network instantiated with parameters, trainable end to end."""

    def __init__(self, net: CompactNet, seed: int = 0):
        self.net = net
        rng = np.random.default_rng(seed)
        self.instances = [ModuleInstance(op, rng) for op in net.layers]

    def named_parameters(self) -> dict:
        out = {}
        for i, inst in enumerate(self.instances):
            for name, p in inst.params.items():
                out[f"layers.{i}.{name}"] = p
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        for inst in self.instances:
            x = inst.forward(x)
        if self.net.task is Task.Classification:
            return x[:, :, 0, 0]
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self.net.task is Task.Classification:
            g = g[:, :, None, None]
        for inst in reversed(self.instances):
            g = inst.backward(g)
        return g


class SuperNetModel:
    """Supernet with per-candidate weights (no sharing across candidates)."""

    def __init__(self, supernet: SuperNet, seed: int = 0):
        self.supernet = supernet
        rng = np.random.default_rng(seed)
        self.stem = [ModuleInstance(op, rng) for op in supernet.stem]
        self.stages = [[ModuleInstance(c, rng) for c in st.candidates]
                       for st in supernet.stages]
        self.head = [ModuleInstance(op, rng) for op in supernet.head]

    def named_parameters(self) -> dict:
        out = {}
        for i, inst in enumerate(self.stem):
            for n, p in inst.params.items():
                out[f"stem.{i}.{n}"] = p
        for i, cands in enumerate(self.stages):
            for j, inst in enumerate(cands):
                for n, p in inst.params.items():
                    out[f"stages.{i}.{j}.{n}"] = p
        for i, inst in enumerate(self.head):
            for n, p in inst.params.items():
                out[f"head.{i}.{n}"] = p
        return out

    def active_path(self, gate_indices) -> list:
        path = list(self.stem)
        path += [self.stages[i][j] for i, j in enumerate(gate_indices)]
        path += list(self.head)
        return path

    def forward_path(self, x, gate_indices, record_stage_outputs=False):
        """Forward through one sampled path; optionally keep stage outputs."""
        stage_outputs = []
        for inst in self.stem:
            x = inst.forward(x)
        for i, j in enumerate(gate_indices):
            x = self.stages[i][j].forward(x)
            if record_stage_outputs:
                stage_outputs.append(x)
        for inst in self.head:
            x = inst.forward(x)
        if self.supernet.task is Task.Classification:
            x = x[:, :, 0, 0]
        return (x, stage_outputs) if record_stage_outputs else x


def _task_loss(task: Task, output, target):
    if task is Task.Classification:
        return loss_ce(output, target)
    return loss_mse(output, target)


def _sample_batch(x, y, batch_size, rng):
    idx = rng.integers(0, x.shape[0], size=batch_size)
    return x[idx], y[idx]


@dataclass
class SearchState:
    model: SuperNetModel
    arch: ArchParams


def train_search(supernet: SuperNet, train_data, val_data, cfg: SearchConfig,
                 lut: LatencyTable):
    """Alternating weight/architecture optimization; returns (state, history).

    train_data/val_data are (inputs, targets) array pairs. Fully deterministic
    given cfg.seed. The LUT must cover every stem/stage/head key.
    """
    f_vectors = stage_latency_vectors(supernet, lut)       # raises MissingEntry early
    fixed_ms = fixed_latency(supernet, lut)
    model = SuperNetModel(supernet, seed=cfg.seed)
    alphas = [np.zeros(len(st.candidates)) for st in supernet.stages]
    history = SearchHistory()
    rng = np.random.default_rng(cfg.seed)
    task = supernet.task
    x_tr, y_tr = train_data
    x_va, y_va = val_data

    def check_finite(loss, ctx):
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss during {ctx}",
                                snapshot={"alphas": [a.tolist() for a in alphas],
                                          "context": ctx, "loss": loss})

    for rnd in range(cfg.rounds):
        probs = [path_probs(a) for a in alphas]

        # -- weight updates on the training split: sampled single path only --
        train_losses = []
        for _ in range(cfg.weight_steps_per_round):
            probs = [path_probs(a) for a in alphas]
            gates = [int(np.argmax(sample_gate(p, rng))) for p in probs]
            xb, yb = _sample_batch(x_tr, y_tr, cfg.batch_size, rng)
            out = model.forward_path(xb, gates)
            ce, g = _task_loss(task, out, yb)
            check_finite(ce, "weight step")
            train_losses.append(ce)
            if task is Task.Classification:
                g = g[:, :, None, None]
            for inst in reversed(model.active_path(gates)):
                g = inst.backward(g)
            active_params = [p for inst in model.active_path(gates)
                             for p in inst.params.values()]
            sgd_step(active_params, cfg.lr_weights, weight_decay=cfg.lambda1)

        # -- architecture updates on the validation split: weights frozen --
        val_losses = []
        for _ in range(cfg.arch_steps_per_round):
            probs = [path_probs(a) for a in alphas]
            gates = [int(np.argmax(sample_gate(p, rng))) for p in probs]
            xb, yb = _sample_batch(x_va, y_va, cfg.batch_size, rng)
            out, stage_outputs = model.forward_path(xb, gates, record_stage_outputs=True)
            ce, g = _task_loss(task, out, yb)
            check_finite(ce, "arch step")
            e_lat = expected_network_latency(list(zip(probs, f_vectors)), fixed_ms)
            val_losses.append(total_loss(ce, model.named_parameters().values(),
                                         e_lat, cfg))
            if task is Task.Classification:
                g = g[:, :, None, None]
            # Backprop to each stage output to obtain the sampled gate gradient.
            gate_scalars = [0.0] * len(gates)
            for inst in reversed(model.head):
                g = inst.backward(g)
            for i in range(len(gates) - 1, -1, -1):
                gate_scalars[i] = float(np.sum(g * stage_outputs[i]))
                g = model.stages[i][gates[i]].backward(g)
            # Weights stay frozen: discard accumulated gradients.
            for p in model.named_parameters().values():
                p.zero_grad()
            for i, (p, a) in enumerate(zip(probs, alphas)):
                dl_dg = np.zeros(len(p))
                dl_dg[gates[i]] = gate_scalars[i]
                da = arch_grad(dl_dg, p) + cfg.lambda2 * latency_alpha_grad(p, f_vectors[i])
                alphas[i] = a - cfg.lr_arch * da

        probs = [path_probs(a) for a in alphas]
        e_lat = expected_network_latency(list(zip(probs, f_vectors)), fixed_ms)
        history.append(RoundRecord(
            round=rnd,
            train_loss=float(np.mean(train_losses)),
            val_loss=float(np.mean(val_losses)),
            e_latency_ms=e_lat,
            probs=tuple(tuple(float(v) for v in p) for p in probs),
            chosen=tuple(int(np.argmax(a)) for a in alphas)))

    return SearchState(model=model, arch=ArchParams(tuple(alphas))), history


def derive_compact(supernet: SuperNet, arch: ArchParams) -> CompactNet:
    """Keep the highest-weight candidate per stage; ties break to lowest index."""
    if len(arch.vectors) != len(supernet.stages):
        raise LengthMismatch(
            f"{len(arch.vectors)} arch vectors for {len(supernet.stages)} stages")
    chosen, ties = [], []
    for i, (stage, a) in enumerate(zip(supernet.stages, arch.vectors)):
        if len(a) != len(stage.candidates):
            raise LengthMismatch(f"stage {i}: {len(a)} logits for "
                                 f"{len(stage.candidates)} candidates")
        j = int(np.argmax(a))
        if np.sum(a == a[j]) > 1:
            ties.append(i)
        chosen.append(j)
    layers = (tuple(supernet.stem)
              + tuple(st.candidates[j] for st, j in zip(supernet.stages, chosen))
              + tuple(supernet.head))
    return CompactNet(task=supernet.task, input_shape=supernet.input_shape,
                      layers=layers, num_classes=supernet.num_classes,
                      sr_scale=supernet.sr_scale, chosen_indices=tuple(chosen),
                      tie_stages=tuple(ties))


# ---------------------------------------------------------------------------
# Compact-net training (retraining from scratch; no weight inheritance)
# ---------------------------------------------------------------------------

def train_compact(net: CompactNet, train_data, steps: int, batch_size: int = 16,
                  lr: float = 0.05, weight_decay: float = 0.0,
                  seed: int = 0) -> CompactNetModel:
    model = CompactNetModel(net, seed=seed)
    rng = np.random.default_rng(seed)
    x_tr, y_tr = train_data
    params = list(model.named_parameters().values())
    for _ in range(steps):
        xb, yb = _sample_batch(x_tr, y_tr, batch_size, rng)
        out = model.forward(xb)
        loss, g = _task_loss(net.task, out, yb)
        if not np.isfinite(loss):
            raise NonFiniteLoss("non-finite loss while training compact net")
        model.backward(g)
        sgd_step(params, lr, weight_decay)
    return model


def accuracy(model: CompactNetModel, data) -> float:
    """Classification accuracy over (inputs, int labels)."""
    x, y = data
    preds = []
    for start in range(0, x.shape[0], 64):
        logits = model.forward(x[start:start + 64])
        preds.append(np.argmax(logits, axis=1))
    return float(np.mean(np.concatenate(preds) == y))
