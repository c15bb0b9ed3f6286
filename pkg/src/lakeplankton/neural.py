"""Feed-forward MLP classifier trained with Adam, written directly on numpy.

Everything runs in float64. Weight matrices are stored ``(n_in, n_out)`` so a
batch ``x`` of shape ``(B, n_in)`` maps to ``x @ W + b``.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .confidence import ConfidenceMatrix

HIDDEN_UNITS = (128, 80, 80)
HIDDEN_ACTIVATIONS = ("relu", "tanh", "softplus")
HIDDEN_DROPOUT = 0.3
LOG_FLOOR = 1e-12


class ShapeMismatch(ValueError):
    pass


class EmptySplit(ValueError):
    pass


class EmptyVal(EmptySplit):
    pass


class GradCheckFailed(AssertionError):
    pass


# --- activations ----------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


_ACT = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, a: _sigmoid(z)),
}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# --- model ----------------------------------------------------------------

@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    dropout_rates: list[float]

    def __post_init__(self):
        n_layers = len(self.layer_dims) - 1
        if n_layers < 1:
            raise ValueError("need at least input and output dims")
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError("one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} parameter shapes do not match dims")
        if len(self.activations) != n_layers - 1 or len(self.dropout_rates) != n_layers - 1:
            raise ValueError("one activation and dropout rate per hidden layer")
        for a in self.activations:
            if a not in _ACT:
                raise ValueError(f"unknown activation {a!r}")
        if any(not 0 <= r < 1 for r in self.dropout_rates):
            raise ValueError("dropout rates must be in [0, 1)")

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list: W0, b0, W1, b1, ..."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "dropout_rates": list(self.dropout_rates),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpModel":
        return cls(
            list(doc["layer_dims"]),
            [np.array(w, dtype=np.float64).reshape(doc["layer_dims"][i], doc["layer_dims"][i + 1])
             for i, w in enumerate(doc["weights"])],
            [np.array(b, dtype=np.float64) for b in doc["biases"]],
            list(doc["activations"]),
            [float(r) for r in doc["dropout_rates"]],
        )


def glorot_limit(n_in: int, n_out: int) -> float:
    return math.sqrt(6.0 / (n_in + n_out))


def init_glorot(dims: Sequence[int], seed: int, activations: Sequence[str] | None = None,
                dropout_rates: Sequence[float] | None = None) -> MlpModel:
    """Glorot-uniform weights in ``[-a, a]``, ``a = sqrt(6 / (n_in + n_out))``;
    zero biases.

    With three hidden layers and no explicit activations, the tuned
    relu/tanh/softplus stack is used; other depths default to relu.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"invalid layer dims {dims}")
    n_hidden = len(dims) - 2
    if activations is None:
        activations = HIDDEN_ACTIVATIONS if n_hidden == 3 else ("relu",) * n_hidden
    if dropout_rates is None:
        dropout_rates = (HIDDEN_DROPOUT,) * n_hidden
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        a = glorot_limit(n_in, n_out)
        weights.append(rng.uniform(-a, a, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpModel(dims, weights, biases, list(activations), [float(r) for r in dropout_rates])


def tuned_architecture(n_inputs: int, n_classes: int, seed: int) -> MlpModel:
    return init_glorot([n_inputs, *HIDDEN_UNITS, n_classes], seed)


# --- forward / backward ---------------------------------------------------

def _check_input(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise ShapeMismatch(f"model expects {model.n_inputs} features, got array of shape {x.shape}")
    return x


def _forward(model: MlpModel, x: np.ndarray, rng: np.random.Generator | None):
    """Returns logits and the per-layer cache needed by backprop."""
    cache = []
    h = x
    n_hidden = len(model.activations)
    for i in range(n_hidden):
        z = h @ model.weights[i] + model.biases[i]
        fn, _ = _ACT[model.activations[i]]
        a = fn(z)
        mask = None
        rate = model.dropout_rates[i]
        if rng is not None and rate > 0:
            # inverted dropout: eval mode needs no rescaling
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
            out = a * mask
        else:
            out = a
        cache.append((h, z, a, mask))
        h = out
    logits = h @ model.weights[-1] + model.biases[-1]
    cache.append((h, None, None, None))
    return logits, cache


def forward(model: MlpModel, x, train: bool = False, dropout_seed: int | None = None,
            rng: np.random.Generator | None = None):
    """Returns ``(logits, probabilities)``.

    Dropout is only active with ``train=True``; masks come from ``rng`` or a
    generator seeded with ``dropout_seed``.
    """
    x = _check_input(model, x)
    if train and rng is None:
        rng = np.random.default_rng(dropout_seed)
    logits, _ = _forward(model, x, rng if train else None)
    return logits, softmax(logits)


def _as_index_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        return np.argmax(y, axis=1)
    return y.astype(np.int64)


def loss_ce(probs, labels, weights=None) -> float:
    """Mean over the batch of ``-w[label] * log p[label]`` (``p`` floored at 1e-12).

    ``labels`` may be class indices or one-hot rows.
    """
    probs = np.asarray(probs, dtype=np.float64)
    idx = _as_index_labels(labels, probs.shape[1])
    p = np.maximum(probs[np.arange(len(idx)), idx], LOG_FLOOR)
    w = np.ones(len(idx)) if weights is None else np.asarray(weights, dtype=np.float64)[idx]
    return float(np.mean(-w * np.log(p)))


def loss_and_grads(model: MlpModel, x, y, class_weights=None, rng=None):
    """Weighted cross-entropy of one batch and its gradient for every
    parameter, ordered as ``model.params()``."""
    x = _check_input(model, x)
    idx = _as_index_labels(y, model.n_classes)
    n = len(idx)
    logits, cache = _forward(model, x, rng)
    logp = log_softmax(logits)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[idx]
    loss = float(np.mean(-w * logp[np.arange(n), idx]))

    delta = np.exp(logp)
    delta[np.arange(n), idx] -= 1.0
    delta *= (w / n)[:, None]

    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    h_last = cache[-1][0]
    grads_w[-1] = h_last.T @ delta
    grads_b[-1] = delta.sum(axis=0)
    upstream = delta @ model.weights[-1].T
    for i in range(len(model.activations) - 1, -1, -1):
        h_in, z, a, mask = cache[i]
        if mask is not None:
            upstream = upstream * mask
        _, dfn = _ACT[model.activations[i]]
        dz = upstream * dfn(z, a)
        grads_w[i] = h_in.T @ dz
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            upstream = dz @ model.weights[i].T
    grads = [g for pair in zip(grads_w, grads_b) for g in pair]
    return loss, grads, softmax(logits)


def class_weights(counts) -> np.ndarray:
    """Balanced weights ``N / (C * N_c)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) == 0 or np.any(counts < 1):
        raise ValueError("every class count must be >= 1")
    return counts.sum() / (len(counts) * counts)


# --- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# --- training -------------------------------------------------------------

@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 200
    patience: int = 50
    batch_size: int = 64
    seed: int = 0
    class_weighting: bool = False
    finetune_epochs: int = 400
    finetune_lr: float = 1e-7
    hidden_units: tuple[int, ...] = HIDDEN_UNITS
    activations: tuple[str, ...] = HIDDEN_ACTIVATIONS
    dropout: float = HIDDEN_DROPOUT

    def __post_init__(self):
        self.hidden_units = tuple(int(u) for u in self.hidden_units)
        self.activations = tuple(self.activations)
        if self.learning_rate <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.patience > self.epochs:
            raise ValueError("patience cannot exceed epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.activations) != len(self.hidden_units):
            raise ValueError("one activation per hidden layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_units"] = list(self.hidden_units)
        d["activations"] = list(self.activations)
        return d


class EarlyStopping:
    """Tracks the best validation loss and its parameter snapshot.

    ``update`` returns True once ``patience`` epochs have passed without a
    strict improvement.
    """

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state = None

    def update(self, epoch: int, val_loss: float, state=None) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = copy.deepcopy(state)
        return self.patience is not None and epoch - self.best_epoch >= self.patience


def _accuracy(probs: np.ndarray, idx: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == idx))


def _run_phase(model, x_tr, y_tr, x_val, y_val, weights, lr, epochs, patience, cfg, rng,
               phase, history, stopper):
    params = model.params()
    state = AdamState.zeros_like(params)
    n = len(y_tr)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        tot_loss, tot_hit = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads, probs = loss_and_grads(model, x_tr[b], y_tr[b], weights, rng)
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
            tot_loss += loss * len(b)
            tot_hit += int(np.sum(np.argmax(probs, axis=1) == y_tr[b]))
        _, val_probs = forward(model, x_val)
        val_loss = loss_ce(val_probs, y_val)
        history.append({
            "phase": phase,
            "epoch": epoch,
            "train_loss": tot_loss / n,
            "train_accuracy": tot_hit / n,
            "val_loss": val_loss,
            "val_accuracy": _accuracy(val_probs, y_val),
        })
        if stopper.update(epoch, val_loss, model) and patience is not None:
            break


def train(model: MlpModel, x_train, y_train, x_val, y_val, config: TrainingConfig = TrainingConfig(),
          class_counts=None):
    """Two-phase training; returns ``(best_model, history)``.

    Phase 1 runs up to ``config.epochs`` epochs with early stopping on
    validation loss (patience ``config.patience``) and keeps the
    lowest-validation-loss parameters. Phase 2 restarts Adam at
    ``config.finetune_lr`` from those parameters for ``config.finetune_epochs``
    epochs, again keeping the best validation snapshot (the phase 1 winner
    counts as a candidate). ``y`` are integer class indices.

    With ``config.class_weighting`` the training loss uses balanced class
    weights from ``class_counts`` (default: counts in ``y_train``); the
    validation loss is always unweighted.
    """
    x_train = _check_input(model, x_train)
    x_val = _check_input(model, x_val)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if len(y_train) == 0:
        raise EmptySplit("training split is empty")
    if len(y_val) == 0:
        raise EmptyVal("validation split is empty")
    weights = None
    if config.class_weighting:
        if class_counts is None:
            class_counts = np.bincount(y_train, minlength=model.n_classes)
        weights = class_weights(np.maximum(class_counts, 1))

    rng = np.random.default_rng([config.seed, 1])
    model = model.copy()
    history: list[dict] = []

    stopper = EarlyStopping(config.patience)
    _run_phase(model, x_train, y_train, x_val, y_val, weights, config.learning_rate,
               config.epochs, config.patience, config, rng, 1, history, stopper)
    best = stopper.best_state if stopper.best_state is not None else model

    if config.finetune_epochs > 0:
        tuner = EarlyStopping(None)
        tuner.update(0, stopper.best_loss, best)
        model = best.copy()
        _run_phase(model, x_train, y_train, x_val, y_val, weights, config.finetune_lr,
                   config.finetune_epochs, None, config, rng, 2, history, tuner)
        best = tuner.best_state
    return best, history


def grid_search(x_train, y_train, x_val, y_val, n_classes: int,
                hidden_options: Sequence[Sequence[int]] = ((128, 80, 80), (256, 128), (64,)),
                lr_options: Sequence[float] = (1e-3, 3e-4),
                base: TrainingConfig = TrainingConfig()):
    """Exhaustive search over hidden layouts and learning rates, scored by best
    validation loss. Returns a list of ``(val_loss, hidden_units, lr)`` sorted
    best first; enumeration order breaks ties."""
    x_train = np.asarray(x_train, dtype=np.float64)
    results = []
    for hidden, lr in itertools.product(hidden_options, lr_options):
        hidden = tuple(hidden)
        acts = HIDDEN_ACTIVATIONS if len(hidden) == 3 else ("relu",) * len(hidden)
        cfg = TrainingConfig(**{**base.to_dict(), "hidden_units": hidden, "activations": acts,
                                "learning_rate": lr})
        model = init_glorot([x_train.shape[1], *hidden, n_classes], cfg.seed, acts,
                            [cfg.dropout] * len(hidden))
        _, hist = train(model, x_train, y_train, x_val, y_val, cfg)
        results.append((min(h["val_loss"] for h in hist), hidden, lr))
    return sorted(results, key=lambda r: r[0])


def predict(model: MlpModel, x, ids: Sequence[str], classes: Sequence[str],
            labels: Sequence[str] | None = None, split: str | None = None) -> ConfidenceMatrix:
    """Eval-mode class probabilities (no dropout)."""
    _, probs = forward(model, x)
    if len(classes) != model.n_classes:
        raise ShapeMismatch(f"{len(classes)} class names for a {model.n_classes}-way model")
    return ConfidenceMatrix(tuple(ids), tuple(classes), probs,
                            None if labels is None else tuple(labels), split)


# --- gradient verification ------------------------------------------------

def sampled_parameters(model: MlpModel, max_params: int = 200, seed: int = 0):
    """Deterministic sample of ``(param_index, flat_index)`` positions."""
    params = model.params()
    positions = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(positions) <= max_params:
        return positions
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(positions), size=max_params, replace=False))
    return [positions[k] for k in pick]


def grad_check(model: MlpModel, x, y, tolerance: float = 1e-4, max_params: int = 200,
               seed: int = 0, h: float = 1e-5, class_weights=None, grads=None) -> float:
    """Compare backprop gradients against central finite differences.

    Dropout is disabled. ``grads`` overrides the analytic gradients (used to
    check that a corrupted gradient is caught). Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``. Returns the maximum; raises
    :class:`GradCheckFailed` above ``tolerance``.
    """
    model = model.copy()
    x = _check_input(model, x)
    if grads is None:
        _, grads, _ = loss_and_grads(model, x, y, class_weights)
    params = model.params()
    worst = 0.0
    for pi, flat in sampled_parameters(model, max_params, seed):
        p = params[pi].reshape(-1)
        orig = p[flat]
        p[flat] = orig + h
        up = loss_and_grads(model, x, y, class_weights)[0]
        p[flat] = orig - h
        down = loss_and_grads(model, x, y, class_weights)[0]
        p[flat] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(np.asarray(grads[pi]).reshape(-1)[flat])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    if worst > tolerance:
        raise GradCheckFailed(f"max relative gradient error {worst:.3e} exceeds {tolerance:.1e}")
    return worst


# --- persistence ----------------------------------------------------------

def save_model(path, model: MlpModel, *, seed: int, config: TrainingConfig | None = None,
               classes: Sequence[str] = (), feature_names: Sequence[str] = (),
               standardizer: dict | None = None, provenance: dict | None = None) -> str:
    """Serialize ``model`` plus its provenance as JSON; writes to ``path``
    unless it is None and returns the text."""
    doc = model.to_dict()
    doc["seed"] = seed
    doc["config"] = config.to_dict() if config else None
    doc["classes"] = list(classes)
    doc["feature_names"] = list(feature_names)
    doc["standardizer"] = standardizer
    if provenance:
        doc["provenance"] = provenance
    text = json.dumps(doc, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_model(path) -> tuple[MlpModel, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return MlpModel.from_dict(doc), doc
