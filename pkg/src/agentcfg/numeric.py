"""Minimal dense numerics for the lightweight policies.

Feed-forward nets are affine layers with tanh hidden activations and a
linear output; gradients are hand-derived for this fixed architecture.
Masked categoricals implement invalid-action pruning by adding log(mask)
to logits before the softmax, so masked entries carry exactly zero mass.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidActionError, InvalidMaskError, ShapeError

# ---------------------------------------------------------------------------
# Dense networks
# ---------------------------------------------------------------------------

DEFAULT_HIDDEN = (128, 128)


class DenseNet:
    """Affine chain input -> hidden... -> output, tanh on hidden layers.

    Parameters are stored as a flat list [W0, b0, W1, b1, ...] with W of
    shape (out, in). Only `adam_step` mutates parameters; a frozen net is
    safe to share across readers.
    """

    def __init__(self, sizes, rng=None, init_scale=None):
        if len(sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.params: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            scale = init_scale if init_scale is not None else 1.0 / np.sqrt(n_in)
            self.params.append(rng.normal(0.0, scale, size=(n_out, n_in)))
            self.params.append(np.zeros(n_out))

    @property
    def input_size(self) -> int:
        return self.sizes[0]

    @property
    def output_size(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._forward_cached(x)[0]

    def _forward_cached(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_size,):
            raise ShapeError(f"expected input shape ({self.input_size},), got {x.shape}")
        activations = [x]
        h = x
        for layer in range(self.n_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            z = W @ h + b
            h = np.tanh(z) if layer < self.n_layers - 1 else z
            activations.append(h)
        return h, activations

    def backward(self, x: np.ndarray, upstream_grad: np.ndarray):
        """Gradients of (upstream_grad . forward(x)) w.r.t. params and input."""
        upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
        if upstream_grad.shape != (self.output_size,):
            raise ShapeError(
                f"expected upstream shape ({self.output_size},), got {upstream_grad.shape}"
            )
        _, acts = self._forward_cached(x)
        grads = [np.zeros_like(p) for p in self.params]
        delta = upstream_grad
        for layer in reversed(range(self.n_layers)):
            W = self.params[2 * layer]
            h_in, h_out = acts[layer], acts[layer + 1]
            if layer < self.n_layers - 1:
                delta = delta * (1.0 - h_out * h_out)  # tanh'
            grads[2 * layer] = np.outer(delta, h_in)
            grads[2 * layer + 1] = delta.copy()
            delta = W.T @ delta
        return grads, delta

    # -- parameter plumbing -------------------------------------------------

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} params, got {flat.shape}")
        offset = 0
        for p in self.params:
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)


PARAM_FORMAT_VERSION = 1


def save_net(net: DenseNet, path) -> None:
    """Write a JSON header plus a flat little-endian float64 parameter blob."""
    header = json.dumps(
        {
            "format_version": PARAM_FORMAT_VERSION,
            "layer_sizes": list(net.sizes),
            "activation": "tanh",
        }
    ).encode("utf-8")
    blob = net.get_flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(blob)


def load_net(path) -> DenseNet:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    if header.get("format_version") != PARAM_FORMAT_VERSION:
        raise ShapeError(f"unsupported parameter format: {header}")
    net = DenseNet(header["layer_sizes"])
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    net.set_flat(flat)
    return net


# ---------------------------------------------------------------------------
# Masked categorical distributions
# ---------------------------------------------------------------------------


@dataclass
class MaskedCategorical:
    logits: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.logits.shape != self.mask.shape or self.logits.ndim != 1:
            raise ShapeError("logits and mask must be 1-d vectors of equal length")
        if not np.any(self.mask > 0):
            raise InvalidMaskError("mask leaves no valid entry")


def masked_softmax(d: MaskedCategorical) -> np.ndarray:
    """Probabilities with masked entries exactly 0; max-subtraction over the
    unmasked support for stability."""
    valid = d.mask > 0
    z = d.logits[valid]
    z = z - np.max(z)
    e = np.exp(z)
    probs = np.zeros_like(d.logits)
    probs[valid] = e / np.sum(e)
    return probs


def log_prob(d: MaskedCategorical, index: int) -> float:
    if not d.mask[index] > 0:
        raise InvalidActionError(f"action {index} is masked")
    valid = d.mask > 0
    z = d.logits[valid]
    m = np.max(z)
    lse = m + np.log(np.sum(np.exp(z - m)))
    return float(d.logits[index] - lse)


def sample(d: MaskedCategorical, rng: np.random.Generator):
    """Draw an index from the masked distribution; returns (index, log_prob)."""
    probs = masked_softmax(d)
    # Never draw a masked index: sample over the valid support only.
    valid = np.flatnonzero(d.mask > 0)
    idx = int(valid[rng.choice(len(valid), p=probs[valid] / probs[valid].sum())])
    return idx, log_prob(d, idx)


def entropy(d: MaskedCategorical) -> float:
    """Shannon entropy in nats over the unmasked support."""
    probs = masked_softmax(d)
    nz = probs > 0
    return float(-np.sum(probs[nz] * np.log(probs[nz])))


def log_prob_grad_logits(d: MaskedCategorical, index: int) -> np.ndarray:
    """d log p(index) / d logits = onehot(index) - probs (zero on masked)."""
    g = -masked_softmax(d)
    g[index] += 1.0
    return g


def entropy_grad_logits(d: MaskedCategorical) -> np.ndarray:
    """dH/dz_j = -p_j (log p_j + H); zero on masked entries."""
    probs = masked_softmax(d)
    H = entropy(d)
    g = np.zeros_like(probs)
    nz = probs > 0
    g[nz] = -probs[nz] * (np.log(probs[nz]) + H)
    return g


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(params, grads, state: AdamState, lr: float):
    """Standard Adam update with bias correction; mutates params/state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params/grads/state length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param/grad shape mismatch at {i}: {p.shape} vs {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**state.t)
        v_hat = state.v[i] / (1 - b2**state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def clip_grad_norm(grads, max_norm: float):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm and total > 0:
        scale = max_norm / total
        return [g * scale for g in grads]
    return grads
