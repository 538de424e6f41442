"""Minimal dense-network substrate: affine layers, SiLU, inverted dropout,
exact reverse-mode gradients, and AdamW.

Everything is float64 and pure: forward/backward are functions of
(params, input, masks) only, which keeps finite-difference tests tight
and training bit-reproducible.
"""

from dataclasses import dataclass

import numpy as np

from .validation import NumericError


@dataclass
class LayerParams:
    weights: np.ndarray   # (out, in)
    biases: np.ndarray    # (out,)


@dataclass(frozen=True)
class DropoutMask:
    """Inverted dropout: kept units are scaled by 1/(1-p) at apply time,
    so mask-free evaluation needs no rescaling."""

    keep_flags: np.ndarray        # (width,) or (n, width), values in {0, 1}
    keep_probability: float

    def apply(self, x):
        return x * (self.keep_flags / self.keep_probability)


def _sigmoid(x):
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * _sigmoid(x)


def silu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def init_layers(sizes, rng):
    """He-style initialization for a chain of affine layers."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        layers.append(LayerParams(
            weights=rng.normal(0.0, scale, size=(fan_out, fan_in)),
            biases=np.zeros(fan_out),
        ))
    return layers


def draw_dropout_masks(layer_sizes, p, rng, n_rows=None):
    """Independent Bernoulli(1-p) keep flags for each layer width.

    With ``n_rows`` the flags are drawn per sample, (n_rows, width); the
    default is one shared flag vector per layer.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = 1.0 - p
    masks = []
    for width in layer_sizes:
        shape = (width,) if n_rows is None else (n_rows, width)
        flags = (rng.random(shape) < keep).astype(np.float64)
        masks.append(DropoutMask(keep_flags=flags, keep_probability=keep))
    return masks


@dataclass
class ForwardTrace:
    """Activations retained for the backward pass."""

    inputs: list          # input to each affine layer
    preacts: list         # affine outputs for activated layers (None otherwise)
    dropped: list         # post-SiLU activations before dropout (None otherwise)
    masks: list           # DropoutMask or None per layer
    params: list          # the LayerParams the trace was computed with
    squeeze: bool         # input arrived as a single vector


def _activated_layers(n_layers, activate_final):
    return n_layers if activate_final else n_layers - 1


def mlp_forward(params, x, masks=None, activate_final=False):
    """Run the chain: affine -> SiLU -> dropout per hidden layer, final
    layer affine only (unless ``activate_final``).

    ``masks`` must hold one DropoutMask per activated layer when given.
    Accepts a single vector or an (n, d) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x

    n_act = _activated_layers(len(params), activate_final)
    if masks is not None and len(masks) != n_act:
        raise ValueError(f"expected {n_act} dropout masks, got {len(masks)}")

    inputs, preacts, dropped, used_masks = [], [], [], []
    for i, layer in enumerate(params):
        if h.shape[1] != layer.weights.shape[1]:
            raise ValueError(
                f"layer {i}: input width {h.shape[1]} does not match "
                f"weight shape {layer.weights.shape}"
            )
        inputs.append(h)
        z = h @ layer.weights.T + layer.biases
        if i < n_act:
            a = silu(z)
            mask = masks[i] if masks is not None else None
            h = mask.apply(a) if mask is not None else a
            preacts.append(z)
            dropped.append(a)
            used_masks.append(mask)
        else:
            h = z
            preacts.append(None)
            dropped.append(None)
            used_masks.append(None)

    trace = ForwardTrace(inputs=inputs, preacts=preacts, dropped=dropped,
                         masks=used_masks, params=list(params), squeeze=squeeze)
    return (h[0] if squeeze else h), trace


def mlp_backward(trace, grad_output):
    """Exact gradients of the traced forward computation.

    Returns (parameter gradients as (dW, db) pairs, gradient w.r.t. the
    input). Dropout masks are treated as constants.
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if trace.squeeze:
        if g.ndim != 1:
            raise ValueError("trace was computed on a vector; grad_output must be 1-D")
        g = g[None, :]
    if g.shape[0] != trace.inputs[0].shape[0]:
        raise ValueError("grad_output batch size does not match the trace")

    param_grads = [None] * len(trace.params)
    for i in range(len(trace.params) - 1, -1, -1):
        layer = trace.params[i]
        if g.shape[1] != layer.weights.shape[0]:
            raise ValueError(f"layer {i}: stale or mismatched trace")
        if trace.preacts[i] is not None:
            mask = trace.masks[i]
            if mask is not None:
                g = g * (mask.keep_flags / mask.keep_probability)
            g = g * silu_grad(trace.preacts[i])
        dW = g.T @ trace.inputs[i]
        db = g.sum(axis=0)
        param_grads[i] = (dW, db)
        g = g @ layer.weights

    return param_grads, (g[0] if trace.squeeze else g)


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments.

    Operates in place on a flat list of parameter arrays; moment shapes
    mirror the parameters and the step counter is shared.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("betas must be in [0, 1)")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = None
        self.v = None
        self.t = 0

    def step(self, arrays, grads):
        """One update. Rejects non-finite gradients before touching state."""
        if len(arrays) != len(grads):
            raise ValueError("parameter and gradient lists differ in length")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {i}")
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay != 0.0:
                a *= 1.0 - self.lr * self.weight_decay
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# --- parameter serialization -------------------------------------------------

PARAMS_FORMAT_VERSION = 1


def params_to_json(layers):
    return {
        "format_version": PARAMS_FORMAT_VERSION,
        "layers": [
            {"weights": layer.weights.tolist(), "biases": layer.biases.tolist()}
            for layer in layers
        ],
    }


def params_from_json(doc):
    if doc.get("format_version") != PARAMS_FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format: {doc.get('format_version')}")
    return [
        LayerParams(
            weights=np.array(rec["weights"], dtype=np.float64),
            biases=np.array(rec["biases"], dtype=np.float64),
        )
        for rec in doc["layers"]
    ]
