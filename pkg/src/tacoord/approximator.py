"""Feedforward approximator of the total action from measured features.

The network maps r = [standardized y01 | standardized y02 | gamma] to a
single scalar through rectified hidden layers and a linear output neuron.
Training is plain mini-batch stochastic gradient descent with exact
backpropagated gradients of the mean-square error; everything is seeded so
identical inputs give identical weight files.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset, Standardizer, fit_standardizer, make_folds
from .errors import TrainingDivergedError


@dataclass
class MlpConfig:
    layer_sizes: list[int]
    learning_rate: float = 1e-3
    epochs: int = 2000
    batch_size: int = 32
    seed: int = 0
    patience: int = 50
    momentum: float = 0.0

    def validate(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output layers")
        if self.layer_sizes[-1] != 1:
            raise ValueError("output layer must have exactly one neuron")
        if any(n <= 0 for n in self.layer_sizes):
            raise ValueError("layer sizes must be positive")

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "patience": self.patience,
            "momentum": self.momentum,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(layer_sizes=[int(n) for n in d["layer_sizes"]],
                   learning_rate=float(d.get("learning_rate", 1e-3)),
                   epochs=int(d.get("epochs", 2000)),
                   batch_size=int(d.get("batch_size", 32)),
                   seed=int(d.get("seed", 0)),
                   patience=int(d.get("patience", 50)),
                   momentum=float(d.get("momentum", 0.0)))

    def content_hash(self):
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MlpModel:
    weights: list[np.ndarray]   # W_l, shape (n_out, n_in)
    biases: list[np.ndarray]    # b_l, shape (n_out,)
    config: MlpConfig
    standardizer: Standardizer | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_inputs(self):
        return self.weights[0].shape[1]


def init_model(config: MlpConfig) -> MlpModel:
    """Seeded scaled-normal weights (variance 2/fan-in), zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    sizes = config.layer_sizes
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpModel(weights=weights, biases=biases, config=config)


def _forward_batch(model: MlpModel, x):
    """Batched forward pass; returns (predictions, pre-activations, activations)."""
    zs, acts = [], [x]
    a = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        zs.append(z)
        a = z if l == last else np.maximum(z, 0.0)
        acts.append(a)
    return a[:, 0], zs, acts


def forward(model: MlpModel, r) -> float:
    """Scalar prediction from one already-standardized feature vector."""
    r = np.asarray(r, dtype=float)
    if r.shape != (model.n_inputs,):
        raise ValueError(
            f"feature vector has dimension {r.shape}, model expects ({model.n_inputs},)")
    a = r
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = w @ a + b
        a = z if l == last else np.maximum(z, 0.0)
    return float(a[0])


def loss(model: MlpModel, x, y) -> float:
    """Mean-square error over a sample set."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty sample set")
    pred, _, _ = _forward_batch(model, x)
    return float(np.mean((pred - y) ** 2))


def gradient(model: MlpModel, x, y):
    """Exact gradients of the batch MSE for every weight matrix and bias."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    pred, zs, acts = _forward_batch(model, x)
    n_layers = len(model.weights)
    d_ws = [None] * n_layers
    d_bs = [None] * n_layers
    delta = (2.0 / n) * (pred - y)[:, None]
    for l in range(n_layers - 1, -1, -1):
        d_ws[l] = delta.T @ acts[l]
        d_bs[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * (zs[l - 1] > 0.0)
    return d_ws, d_bs


def train(config: MlpConfig, x_train, y_train, x_val=None, y_val=None) -> MlpModel:
    """Mini-batch SGD with early stopping on the validation loss.

    Inputs must already be standardized. Returns the weights of the best
    validation epoch (training loss if no validation set is given), with the
    per-epoch loss history in the metadata.
    """
    config.validate()
    x_train = np.asarray(x_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    has_val = x_val is not None and len(x_val) > 0
    model = init_model(config)
    rng = np.random.default_rng(config.seed)
    velocity_w = [np.zeros_like(w) for w in model.weights]
    velocity_b = [np.zeros_like(b) for b in model.biases]

    n = len(y_train)
    history = []
    best_score = np.inf
    best_weights = None
    best_epoch = -1
    since_best = 0
    epochs_run = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            d_ws, d_bs = gradient(model, x_train[idx], y_train[idx])
            for l in range(len(model.weights)):
                velocity_w[l] = config.momentum * velocity_w[l] - config.learning_rate * d_ws[l]
                velocity_b[l] = config.momentum * velocity_b[l] - config.learning_rate * d_bs[l]
                model.weights[l] = model.weights[l] + velocity_w[l]
                model.biases[l] = model.biases[l] + velocity_b[l]
        train_loss = loss(model, x_train, y_train)
        val_loss = loss(model, x_val, y_val) if has_val else None
        if not np.isfinite(train_loss) or (has_val and not np.isfinite(val_loss)):
            raise TrainingDivergedError(
                f"loss became non-finite at epoch {epoch}", last_finite_epoch=epoch - 1)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        epochs_run = epoch + 1
        score = val_loss if has_val else train_loss
        if score < best_score:
            best_score = score
            best_epoch = epoch
            best_weights = ([w.copy() for w in model.weights],
                            [b.copy() for b in model.biases])
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break
    if best_weights is not None:
        model.weights, model.biases = best_weights
    model.metadata = {
        "epochs_run": epochs_run,
        "best_epoch": best_epoch,
        "best_score": best_score,
        "final_train_loss": loss(model, x_train, y_train),
        "final_val_loss": loss(model, x_val, y_val) if has_val else None,
        "history": history,
        "seed": config.seed,
        "config_hash": config.content_hash(),
    }
    return model


def fit_on_dataset(config: MlpConfig, dataset: Dataset, train_idx, val_idx) -> MlpModel:
    """Standardize on the training split, train, and attach the standardizer."""
    std = fit_standardizer(dataset, train_idx)
    x_train = std.apply(dataset.features(train_idx))
    y_train = dataset.targets(train_idx)
    x_val = std.apply(dataset.features(val_idx)) if len(val_idx) else None
    y_val = dataset.targets(val_idx) if len(val_idx) else None
    model = train(config, x_train, y_train, x_val, y_val)
    model.standardizer = std
    return model


def cross_validate(configs, dataset: Dataset, n_folds: int, n_validation: int,
                   seed: int = 0):
    """Average validation MSE over all fold rotations for each config.

    A config whose training fails on any rotation is disqualified. Returns
    (best_config, score_table); ties keep the earlier config.
    """
    if len(configs) < 1:
        raise ValueError("need at least one config")
    table = []
    for ci, config in enumerate(configs):
        scores = []
        failed = None
        for rotation in range(n_folds):
            train_idx, val_idx = make_folds(dataset, n_folds, n_validation,
                                            rotation, seed=seed)
            try:
                model = fit_on_dataset(config, dataset, train_idx, val_idx)
            except TrainingDivergedError as exc:
                failed = f"rotation {rotation}: {exc}"
                break
            scores.append(model.metadata["final_val_loss"])
        entry = {
            "config_index": ci,
            "config": config.to_dict(),
            "mean_val_mse": float(np.mean(scores)) if failed is None else None,
            "rotation_mse": scores if failed is None else None,
            "failure": failed,
        }
        table.append(entry)
    valid = [e for e in table if e["failure"] is None]
    if not valid:
        raise TrainingDivergedError("every candidate config failed cross-validation")
    best = min(valid, key=lambda e: e["mean_val_mse"])
    return configs[best["config_index"]], table


def all_combinations(n_controllers: int):
    """Switching vectors ordered by binary encoding, first controller = MSB."""
    return [tuple((k >> (n_controllers - 1 - l)) & 1 for l in range(n_controllers))
            for k in range(2 ** n_controllers)]


def predict_batch(model: MlpModel, y0, n_controllers: int | None = None) -> np.ndarray:
    """Predictions for every switching combination given raw measurements y0.

    y0 is the unstandardized [y01 | y02] vector; the model's own standardizer
    is applied. Output order follows the binary encoding of the combinations,
    and each entry equals the corresponding single forward call exactly.
    """
    if model.standardizer is None:
        raise ValueError("model has no attached standardizer")
    y0 = np.asarray(y0, dtype=float)
    if n_controllers is None:
        n_controllers = model.n_inputs - y0.shape[0]
    if y0.shape[0] + n_controllers != model.n_inputs:
        raise ValueError(
            f"measurement dimension {y0.shape[0]} + {n_controllers} controllers "
            f"does not match model input {model.n_inputs}")
    combos = all_combinations(n_controllers)
    out = np.empty(len(combos))
    for k, gamma in enumerate(combos):
        r = model.standardizer.apply(np.concatenate([y0, np.array(gamma, dtype=float)]))
        out[k] = forward(model, r)
    return out


def save_model(model: MlpModel, path):
    """Versioned JSON weight file; floats round-trip exactly."""
    doc = {
        "schema_version": 1,
        "config": model.config.to_dict(),
        "standardizer": None if model.standardizer is None else model.standardizer.to_dict(),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "metadata": {k: v for k, v in model.metadata.items() if k != "history"},
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_model(path) -> MlpModel:
    with open(path) as f:
        doc = json.load(f)
    return MlpModel(
        weights=[np.array(w, dtype=float) for w in doc["weights"]],
        biases=[np.array(b, dtype=float) for b in doc["biases"]],
        config=MlpConfig.from_dict(doc["config"]),
        standardizer=None if doc["standardizer"] is None
        else Standardizer.from_dict(doc["standardizer"]),
        metadata=doc.get("metadata", {}),
    )
