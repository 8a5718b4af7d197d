"""Latency lookup table and the differentiable expected-latency math.

Expected latency of a mixed stage is the probability-weighted sum of its
candidates' table latencies; the network total adds stages and fixed
(stem/head) layers. Latency additivity assumes sequential layer-by-layer
execution — a documented modeling limitation. Everything here is pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthMismatch, MissingEntry, NotNormalized, ParseError
from .graph import (CompactNet, OperatorSpec, SuperNet, TensorShape,
                    canonical_key, output_shape)

DEFAULT_CLOCK_GHZ = 0.7  # cycles <-> ms conversion when a table comes from a cost model

LUT_SOURCES = ("MeasuredDevice", "CostModel", "Manual")


@dataclass(frozen=True)
class LatencyTable:
    """Immutable map canonical op key -> latency in milliseconds."""

    entries: dict
    source: str = "Manual"
    device: str = ""
    created: str = ""
    incomplete: bool = False

    def __post_init__(self):
        if self.source not in LUT_SOURCES:
            raise ValueError(f"unknown LUT source {self.source!r}")
        for key, v in self.entries.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"latency for {key!r} must be finite and >= 0, got {v}")

    def __contains__(self, key):
        return key in self.entries


def lookup(lut: LatencyTable, op: OperatorSpec, input_shape: TensorShape) -> float:
    key = canonical_key(op, input_shape)
    try:
        return lut.entries[key]
    except KeyError:
        raise MissingEntry(key)


def _check_stage(p, f):
    p = np.asarray(p, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if p.shape != f.shape or p.ndim != 1:
        raise LengthMismatch(f"p has shape {p.shape}, f has shape {f.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise NotNormalized(f"p sums to {p.sum()!r}")
    return p, f


def expected_stage_latency(p, f) -> float:
    """Probability-weighted latency of one mixed stage: sum_j p_j * f_j."""
    p, f = _check_stage(p, f)
    return float(p @ f)


def expected_network_latency(stages: Sequence, fixed_ms: float = 0.0) -> float:
    """Sum of per-stage expected latencies plus fixed stem/head latency."""
    total = float(fixed_ms)
    for p, f in stages:
        total += expected_stage_latency(p, f)
    return total


def latency_alpha_grad(p, f) -> np.ndarray:
    """Exact gradient of sum_j softmax(a)_j * f_j w.r.t. the stage logits a.

    g_k = sum_j f_j * p_j * (delta_jk - p_k) = p_k * (f_k - E[f]).
    Components sum to zero (softmax shift invariance).
    """
    p, f = _check_stage(p, f)
    return p * (f - float(p @ f))


def relative_latency_spread(f) -> float:
    """Largest relative deviation of a candidate latency from the uniform mean.

    max_j |f_j - mean(f)| / mean(f); quantifies how much the table actually
    distinguishes the candidates of a stage.
    """
    f = np.asarray(f, dtype=np.float64)
    mean = float(f.mean())
    if mean == 0:
        return 0.0
    return float(np.max(np.abs(f - mean)) / mean)


# ---------------------------------------------------------------------------
# Search-space views
# ---------------------------------------------------------------------------

def stage_latency_vectors(supernet: SuperNet, lut: LatencyTable) -> list:
    """Per-stage candidate latency vectors, in candidate order."""
    vectors = []
    for stage in supernet.stages:
        vectors.append(np.array([lookup(lut, c, stage.input_shape)
                                 for c in stage.candidates]))
    return vectors


def fixed_latency(supernet: SuperNet, lut: LatencyTable) -> float:
    """Total LUT latency of the stem and head layers (selected with prob. 1)."""
    total = 0.0
    cur = supernet.input_shape
    for op in supernet.stem:
        total += lookup(lut, op, cur)
        cur = output_shape(op, cur)
    cur = supernet.stages[-1].output_shape if supernet.stages else cur
    for op in supernet.head:
        total += lookup(lut, op, cur)
        cur = output_shape(op, cur)
    return total


def compact_latency(net: CompactNet, lut: LatencyTable) -> float:
    """Summed LUT latency of a compact network's layers."""
    total = 0.0
    cur = net.input_shape
    for op in net.layers:
        total += lookup(lut, op, cur)
        cur = output_shape(op, cur)
    return total


# ---------------------------------------------------------------------------
# LUT file I/O: {"metadata": {...}, "entries": {key: ms}}
# ---------------------------------------------------------------------------

def save_lut(lut: LatencyTable, path) -> None:
    doc = {
        "metadata": {"source": lut.source, "device": lut.device,
                     "created": lut.created, "incomplete": lut.incomplete},
        "entries": dict(sorted(lut.entries.items())),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_lut(path) -> LatencyTable:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e}", str(path))
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ParseError("LUT file must contain 'entries'", str(path))
    meta = doc.get("metadata", {})
    entries = {}
    for key, v in doc["entries"].items():
        if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
            raise ParseError(f"bad latency for {key!r}: {v!r}", str(path))
        entries[key] = float(v)
    try:
        return LatencyTable(entries=entries, source=meta.get("source", "Manual"),
                            device=meta.get("device", ""), created=meta.get("created", ""),
                            incomplete=bool(meta.get("incomplete", False)))
    except ValueError as e:
        raise ParseError(str(e), str(path))
