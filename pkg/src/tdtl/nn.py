"""Feed-forward network with hand-written backprop.

Layers are described by :class:`LayerSpec`; only ``dense`` layers own
parameters. Every dense layer belongs to a learning-rate group, either
``"backbone"`` or ``"transfer"``, so the feature extractor and the transfer
head can be stepped with different rates.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .linalg import ContractError, ShapeError

LAYER_KINDS = ("dense", "relu", "tanh", "softmax", "dropout")
GROUPS = ("backbone", "transfer")
INIT_STD = 0.01

CHECKPOINT_MAGIC = b"TDTL"
CHECKPOINT_VERSION = 1


def make_rng(seed):
    """Counter-based generator; every random draw in the package goes through one of these."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    drop_rate: float = 0.0
    group: str = "backbone"


@dataclass
class NetworkParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    groups: List[str]

    def copy(self):
        return NetworkParams([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], list(self.groups))

    def zeros_like(self):
        return NetworkParams([np.zeros_like(w) for w in self.weights],
                             [np.zeros_like(b) for b in self.biases], list(self.groups))

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


@dataclass
class ActivationTape:
    inputs: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)
    masks: List[Optional[np.ndarray]] = field(default_factory=list)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate_backbone: float = 0.01
    learning_rate_transfer: float = 0.005
    learning_rate_labels: float = 0.25
    seed: int = 42

    def __post_init__(self):
        if min(self.learning_rate_backbone, self.learning_rate_transfer,
               self.learning_rate_labels) <= 0:
            raise ContractError("learning rates must be positive")

    def rate(self, group):
        return self.learning_rate_transfer if group == "transfer" else self.learning_rate_backbone


def default_architecture(in_dim, n_classes, hidden=(64, 32), drop_rate=0.5):
    """Dense ReLU backbone followed by the transfer head: dense -> tanh -> softmax."""
    layers = []
    prev = in_dim
    for h in hidden:
        layers.append(LayerSpec("dense", prev, h))
        layers.append(LayerSpec("relu", h, h))
        if drop_rate > 0:
            layers.append(LayerSpec("dropout", h, h, drop_rate))
        prev = h
    layers.append(LayerSpec("dense", prev, n_classes, group="transfer"))
    layers.append(LayerSpec("tanh", n_classes, n_classes, group="transfer"))
    layers.append(LayerSpec("softmax", n_classes, n_classes, group="transfer"))
    return layers


def validate_spec(spec):
    if not spec:
        raise ContractError("empty layer spec")
    for i, layer in enumerate(spec):
        if layer.kind not in LAYER_KINDS:
            raise ContractError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.group not in GROUPS:
            raise ContractError(f"layer {i}: unknown group {layer.group!r}")
        if layer.in_dim < 1 or layer.out_dim < 1:
            raise ContractError(f"layer {i}: dimensions must be positive")
        if layer.kind != "dense" and layer.in_dim != layer.out_dim:
            raise ContractError(f"layer {i}: {layer.kind} must keep its width")
        if layer.kind == "dropout" and not 0.0 <= layer.drop_rate < 1.0:
            raise ContractError(f"layer {i}: drop rate must lie in [0, 1)")
        if layer.kind == "softmax" and i != len(spec) - 1:
            raise ContractError("softmax may only be the final layer")
        if i and spec[i - 1].out_dim != layer.in_dim:
            raise ContractError(f"layer {i}: expects {layer.in_dim} inputs, "
                                f"previous layer gives {spec[i - 1].out_dim}")


def init_network(spec, seed):
    validate_spec(spec)
    rng = make_rng(seed)
    weights, biases, groups = [], [], []
    for layer in spec:
        if layer.kind == "dense":
            weights.append(rng.normal(0.0, INIT_STD, size=(layer.in_dim, layer.out_dim)))
            biases.append(np.zeros(layer.out_dim))
            groups.append(layer.group)
    return NetworkParams(weights, biases, groups)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params, spec, x, train_mode=False, rng=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec[0].in_dim:
        raise ShapeError(f"input of shape {x.shape} does not fit a network "
                         f"expecting {spec[0].in_dim} features")
    tape = ActivationTape()
    h = x
    k = 0
    for layer in spec:
        tape.inputs.append(h)
        mask = None
        if layer.kind == "dense":
            out = h @ params.weights[k] + params.biases[k]
            k += 1
        elif layer.kind == "relu":
            out = np.maximum(h, 0.0)
        elif layer.kind == "tanh":
            out = np.tanh(h)
        elif layer.kind == "softmax":
            out = softmax(h)
        else:  # dropout
            if train_mode and layer.drop_rate > 0:
                if rng is None:
                    raise ContractError("training-mode dropout needs an rng")
                keep = 1.0 - layer.drop_rate
                mask = (rng.random(h.shape) < keep) / keep
                out = h * mask
            else:
                out = h
        tape.outputs.append(out)
        tape.masks.append(mask)
        h = out
    return h, tape


def backward(params, spec, tape, grad_output, from_logits=False):
    """Gradients of a scalar loss given its gradient w.r.t. the network output.

    With ``from_logits=True`` ``grad_output`` is taken w.r.t. the input of a
    final softmax layer, which is then skipped.
    """
    if len(tape.inputs) != len(spec):
        raise ContractError("tape does not match the layer spec")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != tape.outputs[-1].shape:
        raise ShapeError(f"output gradient {g.shape} vs output {tape.outputs[-1].shape}")
    grads = params.zeros_like()
    k = len(params.weights)
    last = len(spec) - 1
    if from_logits:
        if spec[-1].kind != "softmax":
            raise ContractError("from_logits needs a final softmax layer")
        last -= 1
    for i in range(last, -1, -1):
        layer = spec[i]
        x_in = tape.inputs[i]
        y = tape.outputs[i]
        if layer.kind == "dense":
            k -= 1
            grads.weights[k] = x_in.T @ g
            grads.biases[k] = g.sum(axis=0)
            g = g @ params.weights[k].T
        elif layer.kind == "relu":
            g = g * (x_in > 0)
        elif layer.kind == "tanh":
            g = g * (1.0 - y * y)
        elif layer.kind == "softmax":
            g = y * (g - np.sum(g * y, axis=1, keepdims=True))
        elif tape.masks[i] is not None:
            g = g * tape.masks[i]
    return grads


def sgd_step(params, gradients, config, layer_group=None):
    """Plain gradient step; ``layer_group`` restricts it to one group."""
    out = params.copy()
    for k, group in enumerate(params.groups):
        if layer_group is not None and group != layer_group:
            continue
        lr = config.rate(group)
        out.weights[k] = params.weights[k] - lr * gradients.weights[k]
        out.biases[k] = params.biases[k] - lr * gradients.biases[k]
    return out


def predict_classes(params, spec, x):
    out, _ = forward(params, spec, x, train_mode=False)
    return np.argmax(out, axis=1)


# ---------------------------------------------------------------------------
# checkpoint files


def checkpoint_bytes(params):
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(blob):
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a TDTL checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    weights, biases = [], []
    for _ in range(count):
        n_in, n_out = struct.unpack_from("<II", blob, pos)
        pos += 8
        w = np.frombuffer(blob, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_in, n_out)
        pos += 8 * n_in * n_out
        b = np.frombuffer(blob, dtype="<f8", count=n_out, offset=pos)
        pos += 8 * n_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    groups = ["backbone"] * (count - 1) + ["transfer"] if count else []
    return NetworkParams(weights, biases, groups)


def save_checkpoint(path, params):
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path):
    return params_from_bytes(Path(path).read_bytes())
