"""From-scratch dense-network training on frozen embeddings.

Two architectures cover the evaluation protocol: a single-hidden-layer
classifier head per modality, and the two-branch fusion network (one
ReLU dense layer of width 4096 per modality, concatenated into a softmax
output layer). Training is mini-batch AdamW with an exponential
learning-rate decay schedule; the encoders that produced the embeddings
are never touched. Everything runs in float64 so fixed seeds reproduce
parameters bitwise.
"""

from __future__ import annotations

import base64
import csv
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateLabels, TrainingDiverged
from .evalcore import macro_metrics, sample_std

FUSION_HIDDEN = 4096
HEAD_HIDDEN = 100
CHECKPOINT_FORMAT = "cellsense-mlp/1"


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    gamma: float = 0.95
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("lr0, epochs, and batch_size must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def sort_key(self):
        return (self.lr0, self.epochs, self.batch_size, self.gamma)


@dataclass
class GridSpec:
    lr0_values: list[float] = field(default_factory=lambda: [1e-4, 3e-4, 1e-3])
    epochs_values: list[int] = field(default_factory=lambda: [10, 20, 40])
    batch_values: list[int] = field(default_factory=lambda: [32, 128])
    gamma_values: list[float] = field(default_factory=lambda: [0.9, 0.95])
    validation_fraction: float = 0.1

    def __post_init__(self):
        for name in ("lr0_values", "epochs_values", "batch_values", "gamma_values"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")

    def points(self, base: TrainConfig | None = None):
        base = base or TrainConfig()
        for lr0, epochs, batch, gamma in itertools.product(
            self.lr0_values, self.epochs_values, self.batch_values, self.gamma_values
        ):
            yield replace(base, lr0=lr0, epochs=epochs, batch_size=batch, gamma=gamma)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    no_decay: frozenset = frozenset()

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], no_decay) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            no_decay=frozenset(no_decay),
        )


def lr_schedule(lr0: float, gamma: float, epoch: int) -> float:
    """Exponentially decayed learning rate, lr0 * gamma**epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * gamma**epoch


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
    lr_t: float,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam update, in place.

    m and v are the usual exponential moment accumulators with bias
    correction; weight decay is added to the update separately from the
    gradient and skipped for parameters in ``state.no_decay`` (biases).
    """
    if lr_t <= 0:
        raise ValueError("lr_t must be positive")
    state.step += 1
    t = state.step
    for name, theta in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(t, f"non-finite gradient for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1 - config.beta1) * g
        v *= config.beta2
        v += (1 - config.beta2) * np.square(g)
        m_hat = m / (1 - config.beta1**t)
        v_hat = v / (1 - config.beta2**t)
        update = m_hat / (np.sqrt(v_hat) + config.epsilon)
        if name not in state.no_decay:
            update = update + config.weight_decay * theta
        theta -= lr_t * update
    return params, state


def _he_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = math.sqrt(6.0 / shape[1])
    return rng.uniform(-limit, limit, size=shape)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def _check_labels(labels) -> list[str]:
    order = sorted(set(labels))
    if len(order) < 2:
        raise DegenerateLabels(f"need >= 2 classes, got {order}")
    return order


class HeadModel:
    """One ReLU hidden layer over a single modality, softmax output."""

    def __init__(self, dim: int, label_order: list[str], hidden: int = HEAD_HIDDEN, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.label_order = list(label_order)
        self.hidden = hidden
        self.params = {
            "w1": _he_uniform(rng, (hidden, dim)),
            "b1": np.zeros(hidden),
            "w2": _he_uniform(rng, (len(label_order), hidden)),
            "b2": np.zeros(len(label_order)),
        }
        self.loss_trace: list[tuple[int, float, float]] = []

    bias_names = frozenset({"b1", "b2"})

    def _forward(self, X: np.ndarray):
        z1 = X @ self.params["w1"].T + self.params["b1"]
        h = np.maximum(z1, 0.0)
        z2 = h @ self.params["w2"].T + self.params["b2"]
        return z1, h, z2

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        _, _, z2 = self._forward(np.asarray(X, dtype=np.float64))
        return softmax(z2)

    def predict(self, X: np.ndarray) -> list[str]:
        probs = self.predict_proba(X)
        return [self.label_order[i] for i in probs.argmax(axis=1)]

    def loss_and_grads(self, X: np.ndarray, y_idx: np.ndarray):
        n = X.shape[0]
        z1, h, z2 = self._forward(X)
        log_p = _log_softmax(z2)
        loss = float(-log_p[np.arange(n), y_idx].mean())
        dz2 = np.exp(log_p)
        dz2[np.arange(n), y_idx] -= 1.0
        dz2 /= n
        dh = dz2 @ self.params["w2"]
        dz1 = dh * (z1 > 0.0)
        grads = {
            "w2": dz2.T @ h,
            "b2": dz2.sum(axis=0),
            "w1": dz1.T @ X,
            "b1": dz1.sum(axis=0),
        }
        return loss, grads


class FusionModel:
    """Two ReLU branches (one per frozen encoder) concatenated into softmax."""

    def __init__(
        self,
        dim_a: int,
        dim_b: int,
        label_order: list[str],
        hidden: int = FUSION_HIDDEN,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.label_order = list(label_order)
        self.hidden = hidden
        self.params = {
            "wa": _he_uniform(rng, (hidden, dim_a)),
            "ba": np.zeros(hidden),
            "wb": _he_uniform(rng, (hidden, dim_b)),
            "bb": np.zeros(hidden),
            "wo": _he_uniform(rng, (len(label_order), 2 * hidden)),
            "bo": np.zeros(len(label_order)),
        }
        self.loss_trace: list[tuple[int, float, float]] = []

    bias_names = frozenset({"ba", "bb", "bo"})

    def _forward(self, Xa: np.ndarray, Xb: np.ndarray):
        za = Xa @ self.params["wa"].T + self.params["ba"]
        zb = Xb @ self.params["wb"].T + self.params["bb"]
        ha = np.maximum(za, 0.0)
        hb = np.maximum(zb, 0.0)
        concat = np.concatenate([ha, hb], axis=1)
        zo = concat @ self.params["wo"].T + self.params["bo"]
        return za, zb, ha, hb, concat, zo

    def predict_proba(self, Xa: np.ndarray, Xb: np.ndarray) -> np.ndarray:
        *_, zo = self._forward(
            np.asarray(Xa, dtype=np.float64), np.asarray(Xb, dtype=np.float64)
        )
        return softmax(zo)

    def predict(self, Xa: np.ndarray, Xb: np.ndarray) -> list[str]:
        probs = self.predict_proba(Xa, Xb)
        return [self.label_order[i] for i in probs.argmax(axis=1)]

    def loss_and_grads(self, Xa: np.ndarray, Xb: np.ndarray, y_idx: np.ndarray):
        n = Xa.shape[0]
        za, zb, ha, hb, concat, zo = self._forward(Xa, Xb)
        log_p = _log_softmax(zo)
        loss = float(-log_p[np.arange(n), y_idx].mean())
        dzo = np.exp(log_p)
        dzo[np.arange(n), y_idx] -= 1.0
        dzo /= n
        dconcat = dzo @ self.params["wo"]
        dha, dhb = dconcat[:, : self.hidden], dconcat[:, self.hidden :]
        dza = dha * (za > 0.0)
        dzb = dhb * (zb > 0.0)
        grads = {
            "wo": dzo.T @ concat,
            "bo": dzo.sum(axis=0),
            "wa": dza.T @ Xa,
            "ba": dza.sum(axis=0),
            "wb": dzb.T @ Xb,
            "bb": dzb.sum(axis=0),
        }
        return loss, grads


def _as_indices(labels, label_order: list[str]) -> np.ndarray:
    index = {lab: i for i, lab in enumerate(label_order)}
    return np.asarray([index[lab] for lab in labels], dtype=np.int64)


def train_fusion(
    embeds_a: np.ndarray,
    embeds_b: np.ndarray,
    labels,
    config: TrainConfig,
    hidden: int = FUSION_HIDDEN,
) -> FusionModel:
    """Train the fusion network on precomputed embeddings.

    Data are shuffled each epoch with a seeded generator; the epoch's
    learning rate follows the exponential decay schedule. The loss trace
    records (epoch, lr, mean batch loss).
    """
    Xa = np.asarray(embeds_a, dtype=np.float64)
    Xb = np.asarray(embeds_b, dtype=np.float64)
    labels = list(labels)
    if not (len(Xa) == len(Xb) == len(labels)):
        raise ValueError("embeddings and labels must be aligned")
    label_order = _check_labels(labels)
    y = _as_indices(labels, label_order)
    model = FusionModel(Xa.shape[1], Xb.shape[1], label_order, hidden=hidden, seed=config.seed)
    state = OptimizerState.fresh(model.params, model.bias_names)
    rng = np.random.default_rng(config.seed + 1)
    n = len(labels)
    for epoch in range(config.epochs):
        lr_t = lr_schedule(config.lr0, config.gamma, epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = model.loss_and_grads(Xa[idx], Xb[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, f"loss became {loss}")
            adamw_step(model.params, grads, state, config, lr_t)
            losses.append(loss)
        model.loss_trace.append((epoch, lr_t, float(np.mean(losses))))
    return model


def train_head(
    embeds: np.ndarray,
    labels,
    seed: int = 0,
    hidden: int = HEAD_HIDDEN,
    lr: float = 1e-3,
    max_epochs: int = 200,
    tol: float = 1e-4,
    patience: int = 10,
) -> HeadModel:
    """Train a single-modality classifier head.

    One hidden layer of 100 ReLU units, Adam at a constant 1e-3 rate,
    batch size min(200, n), early stop once the epoch loss has failed to
    improve by ``tol`` for ``patience`` consecutive epochs.
    """
    X = np.asarray(embeds, dtype=np.float64)
    labels = list(labels)
    if len(X) != len(labels):
        raise ValueError("embeddings and labels must be aligned")
    label_order = _check_labels(labels)
    y = _as_indices(labels, label_order)
    model = HeadModel(X.shape[1], label_order, hidden=hidden, seed=seed)
    config = TrainConfig(lr0=lr, epochs=max_epochs, batch_size=min(200, len(X)),
                         gamma=1.0, weight_decay=0.0, seed=seed)
    state = OptimizerState.fresh(model.params, model.bias_names)
    rng = np.random.default_rng(seed + 1)
    n = len(labels)
    best_loss = np.inf
    stale = 0
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = model.loss_and_grads(X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, f"loss became {loss}")
            adamw_step(model.params, grads, state, config, lr)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        model.loss_trace.append((epoch, lr, epoch_loss))
        if epoch_loss < best_loss - tol:
            best_loss = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    return model


@dataclass
class GridSearchResult:
    config: TrainConfig
    model: FusionModel
    table: list[dict]  # one row per grid point: config fields + val metrics


def _stratified_indices(labels, fraction: float, rng: np.random.Generator):
    by_label: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(lab, []).append(i)
    train_idx, val_idx = [], []
    for lab in sorted(by_label):
        idx = by_label[lab]
        if len(idx) < 2:
            raise DegenerateLabels(
                f"class {lab!r} has {len(idx)} example(s); validation split would empty it"
            )
        order = rng.permutation(len(idx))
        n_val = int(np.floor(fraction * len(idx) + 0.5))
        n_val = min(max(n_val, 1), len(idx) - 1)
        chosen = {idx[i] for i in order[:n_val]}
        for i in idx:
            (val_idx if i in chosen else train_idx).append(i)
    return np.asarray(train_idx), np.asarray(val_idx)


def grid_search(
    grid: GridSpec,
    embeds_a: np.ndarray,
    embeds_b: np.ndarray,
    labels,
    seed: int = 0,
    hidden: int = FUSION_HIDDEN,
) -> GridSearchResult:
    """Pick fusion hyperparameters on a stratified validation split.

    Every grid point trains on the non-validation remainder; the winner has
    the best validation macro-F1 (ties: higher accuracy, then the smallest
    (lr0, epochs, batch, gamma) tuple) and is retrained on the full set.
    """
    Xa = np.asarray(embeds_a, dtype=np.float64)
    Xb = np.asarray(embeds_b, dtype=np.float64)
    labels = list(labels)
    rng = np.random.default_rng(seed)
    train_idx, val_idx = _stratified_indices(labels, grid.validation_fraction, rng)
    y_train = [labels[i] for i in train_idx]
    y_val = [labels[i] for i in val_idx]

    rows = []
    best = None
    for config in grid.points(TrainConfig(seed=seed)):
        try:
            model = train_fusion(Xa[train_idx], Xb[train_idx], y_train, config, hidden=hidden)
            preds = model.predict(Xa[val_idx], Xb[val_idx])
            report = macro_metrics(y_val, preds)
            f1, acc = report.macro_f1, report.accuracy
        except TrainingDiverged:
            f1, acc = -1.0, -1.0
        rows.append(
            {"lr0": config.lr0, "epochs": config.epochs, "batch_size": config.batch_size,
             "gamma": config.gamma, "val_macro_f1": f1, "val_accuracy": acc}
        )
        key = (-f1, -acc, config.sort_key())
        if best is None or key < best[0]:
            best = (key, config)
    winner = best[1]
    final = train_fusion(Xa, Xb, labels, winner, hidden=hidden)
    return GridSearchResult(config=winner, model=final, table=rows)


@dataclass
class AggregateStat:
    mean: float
    std: float
    formatted: str


def aggregate_runs(values) -> AggregateStat:
    """Mean and sample std across seeds, rendered as "mean (std)"."""
    values = list(values)
    if len(values) < 2:
        raise ValueError("aggregate_runs needs >= 2 runs")
    mean = float(np.mean(values))
    std = sample_std(values)
    std_text = "0.000" if std == 0 else f"{std:.2g}"
    return AggregateStat(mean=mean, std=std, formatted=f"{mean:.3f} ({std_text})")


def _encode(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).decode(),
    }


def _decode(block: dict) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(block["data"]), dtype=np.float64)
    return flat.reshape(block["shape"]).copy()


def save_model(model, path: str | Path) -> None:
    """Self-describing checkpoint: header plus base64 float64 row-major blocks."""
    kind = "fusion" if isinstance(model, FusionModel) else "head"
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "label_order": model.label_order,
        "hidden": model.hidden,
        "params": {name: _encode(arr) for name, arr in model.params.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    params = {name: _decode(block) for name, block in doc["params"].items()}
    if doc["kind"] == "fusion":
        model = FusionModel(
            params["wa"].shape[1], params["wb"].shape[1], doc["label_order"], hidden=doc["hidden"]
        )
    else:
        model = HeadModel(params["w1"].shape[1], doc["label_order"], hidden=doc["hidden"])
    model.params = params
    return model


def write_trace(trace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss"])
        for epoch, lr, loss in trace:
            writer.writerow([epoch, repr(lr), repr(loss)])
