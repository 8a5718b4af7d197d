"""Minimal reverse-mode compute core over float64 numpy arrays.

Covers forward/backward for every OperatorSpec kind, cross-entropy and MSE
losses, a plain SGD step with L2 weight decay, and a central finite-difference
gradient checker. Desk-scale only: clarity and exact gradients over speed.
"""

from __future__ import annotations

import json
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParseError, ShapeMismatch, StaleState
from .graph import OperatorSpec, OpKind, TensorShape, output_shape

CHECKPOINT_VERSION = 1


class Parameter:
    """A learnable array with an accumulated gradient of identical shape."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def _kaiming_uniform(shape, fan_in, rng):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# im2col helpers shared by conv / depthwise / pooling
# ---------------------------------------------------------------------------

def _windows(x, k, stride, pad):
    """[B,C,H,W] -> sliding windows [B,C,Ho,Wo,k,k] over zero-padded input."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win, xp.shape


def _scatter_windows(t, padded_shape, k, stride, pad):
    """Adjoint of _windows: scatter [B,C,Ho,Wo,k,k] back to [B,C,H,W]."""
    dxp = np.zeros(padded_shape)
    ho, wo = t.shape[2], t.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + (ho - 1) * stride + 1:stride,
                j:j + (wo - 1) * stride + 1:stride] += t[..., i, j]
    if pad:
        return dxp[:, :, pad:padded_shape[2] - pad, pad:padded_shape[3] - pad]
    return dxp


def _bilinear_matrix(out_size, in_size, scale):
    """Dense interpolation matrix for half-pixel bilinear resampling."""
    m = np.zeros((out_size, in_size))
    for o in range(out_size):
        src = (o + 0.5) / scale - 0.5
        i0 = int(math.floor(src))
        w1 = src - i0
        i0c = min(max(i0, 0), in_size - 1)
        i1c = min(max(i0 + 1, 0), in_size - 1)
        m[o, i0c] += 1.0 - w1
        m[o, i1c] += w1
    return m


# ---------------------------------------------------------------------------
# Primitive forward/backward pairs
# ---------------------------------------------------------------------------

def _conv_forward(x, w, b, stride, pad):
    win, padded = _windows(x, w.shape[-1], stride, pad)
    out = np.einsum("bchwij,ocij->bohw", win, w, optimize=True) + b[None, :, None, None]
    return out, (win, padded)

def _conv_backward(g, w, cache, stride, pad):
    win, padded = cache
    dw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
    db = g.sum(axis=(0, 2, 3))
    t = np.einsum("bohw,ocij->bchwij", g, w, optimize=True)
    dx = _scatter_windows(t, padded, w.shape[-1], stride, pad)
    return dx, dw, db


def _dwconv_forward(x, w, b, stride, pad):
    win, padded = _windows(x, w.shape[-1], stride, pad)
    out = np.einsum("bchwij,cij->bchw", win, w, optimize=True) + b[None, :, None, None]
    return out, (win, padded)

def _dwconv_backward(g, w, cache, stride, pad):
    win, padded = cache
    dw = np.einsum("bchwij,bchw->cij", win, g, optimize=True)
    db = g.sum(axis=(0, 2, 3))
    t = np.einsum("bchw,cij->bchwij", g, w, optimize=True)
    dx = _scatter_windows(t, padded, w.shape[-1], stride, pad)
    return dx, dw, db


def _relu_forward(x, slope):
    mask = x > 0
    return np.where(mask, x, slope * x), mask

def _relu_backward(g, mask, slope):
    return np.where(mask, g, slope * g)


class ModuleInstance:
    """One operator with its parameters and retained forward activations.

    Single-threaded during forward/backward; distinct instances are
    independent. Gradients accumulate into Parameter.grad until zeroed.
    """

    def __init__(self, spec: OperatorSpec, rng: np.random.Generator):
        spec.validate_fields()
        self.spec = spec
        self.params: dict = {}
        self._cache = None
        self._children: dict = {}
        self._init_params(rng)

    # -- parameter construction ------------------------------------------------

    def _init_params(self, rng):
        s = self.spec
        k = s.kind
        if k is OpKind.Conv:
            fan = s.in_channels * s.kernel * s.kernel
            self.params["weight"] = Parameter(
                _kaiming_uniform((s.out_channels, s.in_channels, s.kernel, s.kernel), fan, rng))
            self.params["bias"] = Parameter(np.zeros(s.out_channels))
        elif k is OpKind.DWConv:
            fan = s.kernel * s.kernel
            self.params["weight"] = Parameter(
                _kaiming_uniform((s.in_channels, s.kernel, s.kernel), fan, rng))
            self.params["bias"] = Parameter(np.zeros(s.in_channels))
        elif k is OpKind.PointwiseConv:
            self.params["weight"] = Parameter(
                _kaiming_uniform((s.out_channels, s.in_channels, 1, 1), s.in_channels, rng))
            self.params["bias"] = Parameter(np.zeros(s.out_channels))
        elif k is OpKind.Linear:
            self.params["weight"] = Parameter(
                _kaiming_uniform((s.out_channels, s.in_channels), s.in_channels, rng))
            self.params["bias"] = Parameter(np.zeros(s.out_channels))
        elif k is OpKind.MBConv:
            h = s.hidden_channels
            self._children["expand"] = ModuleInstance(
                OperatorSpec(OpKind.PointwiseConv, s.in_channels, h), rng)
            self._children["dw"] = ModuleInstance(
                OperatorSpec(OpKind.DWConv, h, h, kernel=s.kernel, stride=s.stride), rng)
            self._children["project"] = ModuleInstance(
                OperatorSpec(OpKind.PointwiseConv, h, s.out_channels), rng)
            for cname, child in self._children.items():
                for pname, p in child.params.items():
                    self.params[f"{cname}.{pname}"] = p
        elif k in (OpKind.UpsampleNearest, OpKind.UpsampleBilinear):
            if s.out_channels != s.in_channels:
                # learned pointwise projection after resampling
                self.params["weight"] = Parameter(
                    _kaiming_uniform((s.out_channels, s.in_channels), s.in_channels, rng))
                self.params["bias"] = Parameter(np.zeros(s.out_channels))
        # Identity / ReLU / LeakyReLU / pools / DepthToSpace carry no parameters.

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward ----------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ShapeMismatch(f"expected [B,C,H,W] input, got ndim={x.ndim}")
        in_shape = TensorShape(x.shape[1], x.shape[2], x.shape[3])
        expect = output_shape(s, in_shape)  # raises on channel mismatch
        k = s.kind

        if k is OpKind.Identity:
            out, self._cache = x, ()
        elif k in (OpKind.ReLU, OpKind.LeakyReLU):
            out, mask = _relu_forward(x, s.activation_slope)
            self._cache = (mask,)
        elif k in (OpKind.Conv, OpKind.PointwiseConv):
            out, c = _conv_forward(x, self.params["weight"].value,
                                   self.params["bias"].value, s.stride, s.padding)
            self._cache = (c,)
        elif k is OpKind.DWConv:
            out, c = _dwconv_forward(x, self.params["weight"].value,
                                     self.params["bias"].value, s.stride, s.padding)
            self._cache = (c,)
        elif k is OpKind.MBConv:
            out = self._mbconv_forward(x)
        elif k is OpKind.AvgPool:
            win, padded = _windows(x, s.kernel, s.stride, s.padding)
            out = win.mean(axis=(-1, -2))
            self._cache = (padded,)
        elif k is OpKind.MaxPool:
            win, padded = _windows(x, s.kernel, s.stride, s.padding)
            flat = win.reshape(win.shape[:4] + (s.kernel * s.kernel,))
            idx = flat.argmax(axis=-1)
            out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
            self._cache = (padded, idx)
        elif k is OpKind.UpsampleNearest:
            r = s.scale_factor
            up = x.repeat(r, axis=2).repeat(r, axis=3)
            out = self._project(up)
        elif k is OpKind.UpsampleBilinear:
            r = s.scale_factor
            mh = _bilinear_matrix(x.shape[2] * r, x.shape[2], r)
            mw = _bilinear_matrix(x.shape[3] * r, x.shape[3], r)
            up = np.einsum("hH,bcHW,wW->bchw", mh, x, mw, optimize=True)
            out = self._project(up, extra=(mh, mw))
        elif k is OpKind.DepthToSpace:
            r = s.scale_factor
            b, c, hh, ww = x.shape
            co = c // (r * r)
            out = (x.reshape(b, co, r, r, hh, ww)
                    .transpose(0, 1, 4, 2, 5, 3)
                    .reshape(b, co, hh * r, ww * r))
            self._cache = (x.shape,)
        elif k is OpKind.Linear:
            flat = x.reshape(x.shape[0], -1)
            out = (flat @ self.params["weight"].value.T
                   + self.params["bias"].value)[:, :, None, None]
            self._cache = (flat, x.shape)
        else:  # pragma: no cover
            raise ShapeMismatch(f"unhandled kind {k}")

        if out.shape[1:] != (expect.channels, expect.height, expect.width):
            raise ShapeMismatch(
                f"{k.value}: produced {out.shape[1:]}, expected {expect}")
        return out

    def _project(self, up, extra=()):
        """Optional channel projection for upsample kinds; caches for backward."""
        if "weight" in self.params:
            out = np.einsum("oc,bchw->bohw", self.params["weight"].value[:, :], up, optimize=True) \
                + self.params["bias"].value[None, :, None, None]
            self._cache = (up.shape, up) + extra
        else:
            out = up
            self._cache = (up.shape,) + extra
        return out

    def _mbconv_forward(self, x):
        s = self.spec
        exp = self._children["expand"].forward(x)
        act1, m1 = _relu_forward(exp, 0.0)
        dw = self._children["dw"].forward(act1)
        act2, m2 = _relu_forward(dw, 0.0)
        out = self._children["project"].forward(act2)
        residual = s.in_channels == s.out_channels and s.stride == 1
        if residual:
            out = out + x
        self._cache = (m1, m2, residual)
        return out

    # -- backward ---------------------------------------------------------------

    def backward(self, g: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads; return the gradient w.r.t. the input."""
        if self._cache is None:
            raise StaleState(f"{self.spec.kind.value}: backward without retained forward")
        s, k, cache = self.spec, self.spec.kind, self._cache
        self._cache = None
        g = np.asarray(g, dtype=np.float64)

        if k is OpKind.Identity:
            return g
        if k in (OpKind.ReLU, OpKind.LeakyReLU):
            return _relu_backward(g, cache[0], s.activation_slope)
        if k in (OpKind.Conv, OpKind.PointwiseConv):
            dx, dw, db = _conv_backward(g, self.params["weight"].value, cache[0],
                                        s.stride, s.padding)
            self.params["weight"].grad += dw
            self.params["bias"].grad += db
            return dx
        if k is OpKind.DWConv:
            dx, dw, db = _dwconv_backward(g, self.params["weight"].value, cache[0],
                                          s.stride, s.padding)
            self.params["weight"].grad += dw
            self.params["bias"].grad += db
            return dx
        if k is OpKind.MBConv:
            m1, m2, residual = cache
            d = self._children["project"].backward(g)
            d = _relu_backward(d, m2, 0.0)
            d = self._children["dw"].backward(d)
            d = _relu_backward(d, m1, 0.0)
            d = self._children["expand"].backward(d)
            return d + g if residual else d
        if k is OpKind.AvgPool:
            padded = cache[0]
            kk = s.kernel * s.kernel
            t = np.broadcast_to((g / kk)[..., None, None],
                                g.shape + (s.kernel, s.kernel))
            return _scatter_windows(t, padded, s.kernel, s.stride, s.padding)
        if k is OpKind.MaxPool:
            padded, idx = cache
            t = np.zeros(g.shape + (s.kernel * s.kernel,))
            np.put_along_axis(t, idx[..., None], g[..., None], axis=-1)
            t = t.reshape(g.shape + (s.kernel, s.kernel))
            return _scatter_windows(t, padded, s.kernel, s.stride, s.padding)
        if k is OpKind.UpsampleNearest:
            r = s.scale_factor
            dup = self._unproject(g, cache)
            b, c, hh, ww = dup.shape
            return dup.reshape(b, c, hh // r, r, ww // r, r).sum(axis=(3, 5))
        if k is OpKind.UpsampleBilinear:
            dup = self._unproject(g, cache)
            mh, mw = cache[-2], cache[-1]
            return np.einsum("hH,bchw,wW->bcHW", mh, dup, mw, optimize=True)
        if k is OpKind.DepthToSpace:
            r = s.scale_factor
            b, c, hh, ww = cache[0]
            co = c // (r * r)
            return (g.reshape(b, co, hh, r, ww, r)
                     .transpose(0, 1, 3, 5, 2, 4)
                     .reshape(b, c, hh, ww))
        if k is OpKind.Linear:
            flat, xshape = cache
            g2 = g[:, :, 0, 0]
            self.params["weight"].grad += g2.T @ flat
            self.params["bias"].grad += g2.sum(axis=0)
            return (g2 @ self.params["weight"].value).reshape(xshape)
        raise ShapeMismatch(f"unhandled kind {k}")  # pragma: no cover

    def _unproject(self, g, cache):
        if "weight" in self.params:
            up = cache[1]
            self.params["weight"].grad += np.einsum("bohw,bchw->oc", g, up, optimize=True)
            self.params["bias"].grad += g.sum(axis=(0, 2, 3))
            return np.einsum("oc,bohw->bchw", self.params["weight"].value, g, optimize=True)
        return g


def parameter_count(spec: OperatorSpec) -> int:
    """Number of learnable scalars an instance of `spec` carries."""
    s, k = spec, spec.kind
    if k is OpKind.Conv:
        return s.out_channels * s.in_channels * s.kernel ** 2 + s.out_channels
    if k is OpKind.DWConv:
        return s.in_channels * s.kernel ** 2 + s.in_channels
    if k is OpKind.PointwiseConv:
        return s.out_channels * s.in_channels + s.out_channels
    if k is OpKind.Linear:
        return s.out_channels * s.in_channels + s.out_channels
    if k is OpKind.MBConv:
        h = s.hidden_channels
        return (s.in_channels * h + h) + (h * s.kernel ** 2 + h) \
            + (h * s.out_channels + s.out_channels)
    if k in (OpKind.UpsampleNearest, OpKind.UpsampleBilinear) \
            and s.out_channels != s.in_channels:
        return s.out_channels * s.in_channels + s.out_channels
    return 0


# ---------------------------------------------------------------------------
# Losses and optimizer
# ---------------------------------------------------------------------------

def loss_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, dloss/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(b), labels]))
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    grad = probs
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def loss_mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements; returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def sgd_step(params, lr: float, weight_decay: float = 0.0) -> None:
    """value <- value - lr*(grad + 2*weight_decay*value); grads zeroed."""
    for p in params:
        p.value -= lr * (p.grad + 2.0 * weight_decay * p.value)
        p.zero_grad()


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(instance: ModuleInstance, input_shape: TensorShape,
               batch: int = 2, step: float = 1e-3, seed: int = 0) -> dict:
    """Compare analytic grads against central finite differences.

    The scalar objective is a fixed random projection of the output. All
    parameters are jittered to a generic point first: zero-initialized biases
    would otherwise park ReLU pre-activations exactly on the kink, where
    finite differences are meaningless. Returns {"max_rel_err", "per_param",
    "input_rel_err"}.
    """
    rng = np.random.default_rng(seed)
    for p in instance.params.values():
        p.value += 0.2 * rng.standard_normal(p.value.shape)
    x = rng.standard_normal((batch, input_shape.channels,
                             input_shape.height, input_shape.width))
    out = instance.forward(x)
    proj = rng.standard_normal(out.shape)

    instance.zero_grad()
    instance.forward(x)
    dx = instance.backward(proj)

    def objective():
        return float(np.sum(instance.forward(x) * proj))

    def rel(a, f):
        return abs(a - f) / max(abs(a), abs(f), 1e-6)

    report = {"per_param": {}, "input_rel_err": 0.0}
    worst = 0.0
    for name, p in instance.params.items():
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = objective()
            flat[i] = orig - step
            lo = objective()
            flat[i] = orig
            err = max(err, rel(analytic.reshape(-1)[i], (hi - lo) / (2 * step)))
        report["per_param"][name] = err
        worst = max(worst, err)

    xflat = x.reshape(-1)
    dxflat = dx.reshape(-1)
    ierr = 0.0
    for i in range(xflat.size):
        orig = xflat[i]
        xflat[i] = orig + step
        hi = objective()
        xflat[i] = orig - step
        lo = objective()
        xflat[i] = orig
        ierr = max(ierr, rel(dxflat[i], (hi - lo) / (2 * step)))
    report["input_rel_err"] = ierr
    report["max_rel_err"] = max(worst, ierr)
    instance.zero_grad()
    instance._cache = None
    return report


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(named_params: dict, path) -> None:
    doc = {"version": CHECKPOINT_VERSION,
           "params": {name: {"dims": list(p.value.shape),
                             "data": p.value.reshape(-1).tolist()}
                      for name, p in named_params.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(named_params: dict, path) -> None:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')!r}", str(path))
    stored = doc["params"]
    if set(stored) != set(named_params):
        raise ParseError("checkpoint parameter names do not match model", str(path))
    for name, p in named_params.items():
        arr = np.asarray(stored[name]["data"], dtype=np.float64)
        dims = tuple(stored[name]["dims"])
        if tuple(p.value.shape) != dims:
            raise ParseError(f"shape mismatch for {name}", str(path))
        p.value[...] = arr.reshape(dims)
