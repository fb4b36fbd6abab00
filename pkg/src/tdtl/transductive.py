"""Transductive transfer training: a network plus a learnable target label matrix.

Two losses share one network. The supervised loss is summed cross-entropy on
labelled source rows. The transductive loss pulls each target row of the
label matrix ``P`` towards the network's softmax output and penalises
``alpha * |P|_1``. Training alternates between them batch by batch. The
smooth part of the transductive loss is backpropagated into the network and
into ``P``; the l1 part is applied to ``P`` as a soft-threshold (proximal)
step, which leaves exact zeros behind.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .linalg import ContractError, ShapeError, soft_threshold

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6


class TrainingError(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TargetLabelMatrix:
    values: np.ndarray
    target_sample_ids: List[str]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.target_sample_ids):
            raise ShapeError("label matrix rows must match the target ids")

    def zero_fraction(self):
        return float(np.mean(self.values == 0.0)) if self.values.size else 0.0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")


@dataclass(frozen=True)
class TrainSchedule:
    epochs_max: int = 200
    batch_size: int = 64
    source_fraction: float = 0.5
    alternation: Tuple[Tuple[float, float], ...] = ((1.0, 0.0), (0.0, 1.0))
    convergence_rel_tol: float = 1e-4
    convergence_window: int = 5

    def __post_init__(self):
        if not 0.0 < self.source_fraction < 1.0:
            raise ContractError("source_fraction must lie in (0, 1)")
        b_s, b_t = self.split()
        if b_s < 1 or b_t < 1:
            raise ContractError(f"batch of {self.batch_size} cannot hold both domains "
                                f"at fraction {self.source_fraction}")
        if not self.alternation:
            raise ContractError("alternation pattern is empty")
        if self.epochs_max < 0 or self.convergence_window < 1:
            raise ContractError("bad epoch settings")

    def split(self):
        b_s = int(round(self.batch_size * self.source_fraction))
        return b_s, self.batch_size - b_s


@dataclass
class TrainedModel:
    params: nn.NetworkParams
    labels: TargetLabelMatrix
    loss_history: List[float] = field(default_factory=list)
    step_weights: List[Tuple[float, float]] = field(default_factory=list)
    step_epochs: List[int] = field(default_factory=list)
    epochs_run: int = 0


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError("labels outside [0, c)")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy_loss(predictions, labels):
    """Summed cross-entropy of softmax rows against one-hot rows.

    Returns the loss and its gradient w.r.t. the pre-softmax logits,
    ``predictions - labels``.
    """
    y = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if y.shape != t.shape:
        raise ShapeError(f"predictions {y.shape} vs labels {t.shape}")
    if y.size and np.max(np.abs(y.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
        raise ContractError("prediction rows must sum to 1")
    with np.errstate(divide="ignore"):
        logs = np.where(t > 0, np.log(np.where(t > 0, y, 1.0)), 0.0)
    return float(-np.sum(t * logs)), y - t


def cross_entropy_from_logits(logits, labels):
    """Same loss as :func:`cross_entropy_loss`, evaluated with log-sum-exp."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-np.sum(labels * (z - lse)))
    return loss, nn.softmax(logits) - labels


def transductive_loss(label_rows, outputs, alpha):
    """``sum |p - f|^2 + alpha * sum |p|_1`` with gradients of the smooth part."""
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    p = np.asarray(label_rows, dtype=np.float64)
    f = np.asarray(outputs, dtype=np.float64)
    if p.shape != f.shape:
        raise ShapeError(f"label rows {p.shape} vs outputs {f.shape}")
    r = p - f
    loss = float(np.sum(r * r) + alpha * np.sum(np.abs(p)))
    return loss, -2.0 * r, 2.0 * r


def total_loss(l1, l2, w):
    return w.lambda1 * l1 + w.lambda2 * l2


def prox_label_update(rows, grad_smooth, eta, alpha):
    if eta <= 0 or alpha < 0:
        raise ContractError("need eta > 0 and alpha >= 0")
    return soft_threshold(np.asarray(rows) - eta * np.asarray(grad_smooth), eta * alpha)


def _stream(n, length, rng):
    # concatenated permutations: every id once before any repeats
    reps = -(-length // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]


def compose_batches(source_ids, target_ids, schedule, rng):
    """One epoch of mixed batches as ``(source_slice, target_slice)`` pairs.

    Each batch holds ``round(batch_size * source_fraction)`` source ids and the
    remainder target ids. The number of batches is set by the domain that
    needs the most of them; the other domain is recycled (fresh permutation
    on each pass) to keep the proportion.
    """
    source_ids = np.asarray(source_ids)
    target_ids = np.asarray(target_ids)
    if source_ids.size == 0 or target_ids.size == 0:
        raise ContractError("both domains need at least one sample")
    b_s, b_t = schedule.split()
    n_batches = max(-(-source_ids.size // b_s), -(-target_ids.size // b_t))
    s = source_ids[_stream(source_ids.size, n_batches * b_s, rng)]
    t = target_ids[_stream(target_ids.size, n_batches * b_t, rng)]
    return [(s[i * b_s:(i + 1) * b_s], t[i * b_t:(i + 1) * b_t]) for i in range(n_batches)]


def center_domains(xs, xt):
    """Subtract each domain's own feature mean; applied to network inputs of both domains."""
    xs = np.asarray(xs, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    return xs - xs.mean(axis=0), xt - xt.mean(axis=0)


def _converged(epoch_means, tol, window):
    if len(epoch_means) <= window:
        return False
    for prev, cur in zip(epoch_means[-window - 1:-1], epoch_means[-window:]):
        if abs(cur - prev) >= tol * max(abs(prev), 1e-300):
            return False
    return True


def _accumulate(acc, grads, scale):
    for k in range(len(acc.weights)):
        acc.weights[k] += scale * grads.weights[k]
        acc.biases[k] += scale * grads.biases[k]


def train(xs, ys, xt, spec, schedule=None, weights=None, optimizer=None,
          n_classes=None, target_ids=None, on_epoch=None):
    """Jointly fit the network and the target label matrix.

    ``xs``/``ys`` are source features and integer labels, ``xt`` the target
    features. All randomness derives from ``optimizer.seed``.
    """
    schedule = schedule or TrainSchedule()
    weights = weights or LossWeights()
    optimizer = optimizer or nn.OptimizerConfig()
    xs = np.asarray(xs, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    if n_classes is None:
        n_classes = spec[-1].out_dim
    if n_classes < 2:
        raise ContractError("need at least two classes")
    if xs.shape[1] != xt.shape[1] or xs.shape[1] != spec[0].in_dim:
        raise ShapeError(f"source {xs.shape}, target {xt.shape} and network input "
                         f"{spec[0].in_dim} disagree")
    if spec[-1].out_dim != n_classes:
        raise ShapeError("network output width must equal the class count")
    if ys.shape[0] != xs.shape[0]:
        raise ShapeError("one label per source row required")
    if target_ids is None:
        target_ids = [str(i) for i in range(xt.shape[0])]

    seeds = np.random.SeedSequence(optimizer.seed).spawn(2)
    params = nn.init_network(spec, optimizer.seed)
    rng = np.random.Generator(np.random.Philox(seeds[0]))
    labels_rng = np.random.Generator(np.random.Philox(seeds[1]))
    p = labels_rng.uniform(0.0, 1.0, size=(xt.shape[0], n_classes))
    onehot = one_hot(ys, n_classes)
    eta_p = optimizer.learning_rate_labels
    pattern = schedule.alternation

    model = TrainedModel(params, TargetLabelMatrix(p, list(target_ids)))
    epoch_means = []
    step = 0
    for epoch in range(schedule.epochs_max):
        batches = compose_batches(np.arange(xs.shape[0]), np.arange(xt.shape[0]), schedule, rng)
        epoch_losses = []
        for src, tgt in batches:
            lam1, lam2 = pattern[step % len(pattern)]
            grads = params.zeros_like()
            loss = 0.0
            if lam1:
                _, tape = nn.forward(params, spec, xs[src], train_mode=True, rng=rng)
                l1, g_logits = cross_entropy_from_logits(tape.inputs[-1], onehot[src])
                _accumulate(grads, nn.backward(params, spec, tape, g_logits, from_logits=True), lam1)
                loss += lam1 * l1
            if lam2:
                out, tape = nn.forward(params, spec, xt[tgt], train_mode=True, rng=rng)
                l2, g_out, g_rows = transductive_loss(p[tgt], out, weights.alpha)
                _accumulate(grads, nn.backward(params, spec, tape, g_out), lam2)
                loss += lam2 * l2
                # duplicate ids inside one batch add their gradients, like any shared parameter
                uniq, inv = np.unique(tgt, return_inverse=True)
                g_p = np.zeros((uniq.size, n_classes))
                np.add.at(g_p, inv, g_rows)
                p[uniq] = prox_label_update(p[uniq], lam2 * g_p, eta_p, lam2 * weights.alpha)
            if not math.isfinite(loss):
                raise TrainingError(step, f"loss became {loss}")
            params = nn.sgd_step(params, grads, optimizer)
            model.loss_history.append(loss)
            model.step_weights.append((lam1, lam2))
            model.step_epochs.append(epoch)
            epoch_losses.append(loss)
            step += 1
        for w in params.weights:
            if not np.all(np.isfinite(w)):
                raise TrainingError(step - 1, "network weights became non-finite")
        epoch_means.append(float(np.mean(epoch_losses)))
        model.epochs_run = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, epoch_means[-1])
        if _converged(epoch_means, schedule.convergence_rel_tol, schedule.convergence_window):
            log.info("converged after %d epochs", epoch + 1)
            break
    model.params = params
    model.labels = TargetLabelMatrix(p, list(target_ids))
    return model


def predict_labels(labels):
    """Row-wise argmax of the label matrix; ties go to the lowest class index."""
    values = labels.values if isinstance(labels, TargetLabelMatrix) else np.asarray(labels)
    return np.argmax(values, axis=1)
