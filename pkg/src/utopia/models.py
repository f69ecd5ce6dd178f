"""Small differentiable classifiers with hand-written backprop.

A model is a ReLU MLP (no hidden layers = multinomial logistic regression)
whose input is the standardised numeric block followed by one embedding per
categorical feature. Categorical cells enter as *selector* rows, one-hot in
normal use and soft under Mixup, multiplied into the embedding table. The
gradient with respect to a selector is what the attack calls a token score.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError
from .tabular import Dataset, Schema, ScalerStats, fit_standardizer

CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    layers: tuple            # ((W, b), ...), W is fan_in x fan_out
    embeddings: tuple        # one (tokens x width) table per categorical feature
    d_num: int
    num_classes: int
    embed_width: int
    activation: str = "relu"
    scaler: ScalerStats | None = None
    train_losses: tuple = ()

    def __post_init__(self):
        width = self.d_num + self.embed_width * len(self.embeddings)
        for W, b in self.layers:
            if W.shape[0] != width or b.shape != (W.shape[1],):
                raise ValueError(f"layer shapes do not chain: {W.shape}, {b.shape} after width {width}")
            width = W.shape[1]
        if width != self.num_classes:
            raise ValueError(f"output width {width} != num_classes {self.num_classes}")
        for E in self.embeddings:
            if E.ndim != 2 or E.shape[1] != self.embed_width:
                raise ValueError(f"embedding table shape {E.shape} does not match width {self.embed_width}")

    @property
    def token_counts(self) -> list[int]:
        return [E.shape[0] for E in self.embeddings]

    @property
    def hidden_dims(self) -> list[int]:
        return [W.shape[1] for W, _ in self.layers[:-1]]

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ..., E0, E1, ...]``."""
        out = []
        for W, b in self.layers:
            out += [W, b]
        return out + list(self.embeddings)

    def with_parameters(self, params: Sequence[np.ndarray], **changes) -> "SurrogateModel":
        k = len(self.layers)
        layers = tuple((params[2 * i], params[2 * i + 1]) for i in range(k))
        return replace(self, layers=layers, embeddings=tuple(params[2 * k:]), **changes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    schedule: str = "cosine"
    cosine_t: int | None = None    # defaults to epochs

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        # lr = 0 is allowed so that a frozen run can be expressed
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        t_max = self.cosine_t or self.epochs
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / t_max))


@dataclass(frozen=True, eq=False)
class InputGradient:
    """Per-row gradients of the per-row loss.

    ``numeric`` is ``n x d_num`` (standardised units); ``cat_scores[j]`` is
    ``n x tokens_j``, the gradient with respect to feature ``j``'s selector.
    """
    numeric: np.ndarray
    cat_scores: list

    def cat_matrix(self) -> np.ndarray:
        """Token scores of all features side by side, ``n x sum(tokens)``."""
        n = self.numeric.shape[0]
        return np.concatenate([np.zeros((n, 0))] + list(self.cat_scores), axis=1)


def init_model(schema: Schema, hidden_dims: Sequence[int] = (), embed_width: int = 4,
               seed: int = 0, scaler: ScalerStats | None = None) -> SurrogateModel:
    """Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings ~ U(-1, 1).

    Embedding tables are drawn first, then layers input to output.
    """
    counts = schema.token_counts
    if counts and embed_width < 1:
        raise ValueError("embed_width must be >= 1 when categorical features are present")
    rng = np.random.default_rng(seed)
    embeddings = tuple(rng.uniform(-1.0, 1.0, (t, embed_width)) for t in counts)
    dims = [schema.d_num + embed_width * len(counts)] + [int(h) for h in hidden_dims] + [schema.num_classes]
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        lim = 1.0 / math.sqrt(a)
        layers.append((rng.uniform(-lim, lim, (a, b)), rng.uniform(-lim, lim, b)))
    return SurrogateModel(tuple(layers), embeddings, schema.d_num, schema.num_classes,
                          embed_width, scaler=scaler)


# ---------------------------------------------------------------------------
# encoding


def one_hot(cat: np.ndarray, token_counts: Sequence[int]) -> list[np.ndarray]:
    cat = np.asarray(cat, dtype=np.int64)
    out = []
    for j, t in enumerate(token_counts):
        sel = np.zeros((cat.shape[0], t))
        sel[np.arange(cat.shape[0]), cat[:, j]] = 1.0
        out.append(sel)
    return out


def encode(model: SurrogateModel, data: Dataset) -> tuple[np.ndarray, list[np.ndarray]]:
    """Standardise with the model's scaler and one-hot the categorical block."""
    if model.scaler is None:
        raise ValueError("model has no scaler; train it or pass one to init_model")
    return model.scaler.transform(data.numeric), one_hot(data.categorical, model.token_counts)


def targets_of(labels: np.ndarray, num_classes: int) -> np.ndarray:
    t = np.zeros((len(labels), num_classes))
    t[np.arange(len(labels)), labels] = 1.0
    return t


# ---------------------------------------------------------------------------
# forward / backward


def _forward(model, xnum, sels):
    parts = [np.asarray(xnum, dtype=np.float64)] + [s @ E for s, E in zip(sels, model.embeddings)]
    h = np.concatenate(parts, axis=1)
    acts = [h]
    last = len(model.layers) - 1
    for i, (W, b) in enumerate(model.layers):
        z = h @ W + b
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    return acts


def logits(model: SurrogateModel, xnum, sels) -> np.ndarray:
    return _forward(model, xnum, sels)[-1]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _as_targets(targets, num_classes):
    t = np.asarray(targets)
    if t.ndim == 1:
        return targets_of(t.astype(np.int64), num_classes)
    return t.astype(np.float64)


def per_row_loss(model: SurrogateModel, xnum, sels, targets) -> np.ndarray:
    t = _as_targets(targets, model.num_classes)
    return -(t * _log_softmax(logits(model, xnum, sels))).sum(axis=1)


def loss_and_grads(model: SurrogateModel, xnum, sels, targets):
    """Mean softmax cross-entropy, its parameter gradients, and per-row input gradients.

    ``targets`` are class indices or an ``n x K`` matrix of soft labels.
    Parameter gradients follow :meth:`SurrogateModel.parameters` order.
    """
    n = xnum.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = _as_targets(targets, model.num_classes)
    acts = _forward(model, xnum, sels)
    logp = _log_softmax(acts[-1])
    loss = float(-(t * logp).sum() / n)
    # per-row dL_i/dz; soft targets need not sum to one only under user error
    g = np.exp(logp) * t.sum(axis=1, keepdims=True) - t
    grads = [None] * (2 * len(model.layers))
    for i in range(len(model.layers) - 1, -1, -1):
        W, _ = model.layers[i]
        h = acts[i]
        grads[2 * i] = h.T @ g / n
        grads[2 * i + 1] = g.sum(axis=0) / n
        g = g @ W.T
        if i > 0:
            g = g * (acts[i] > 0.0)
    num_grad = g[:, :model.d_num]
    cat_scores, emb_grads = [], []
    w = model.embed_width
    for j, (s, E) in enumerate(zip(sels, model.embeddings)):
        ge = g[:, model.d_num + j * w: model.d_num + (j + 1) * w]
        cat_scores.append(ge @ E.T)
        emb_grads.append(s.T @ ge / n)
    return loss, grads + emb_grads, InputGradient(num_grad, cat_scores)


def input_gradient(model: SurrogateModel, xnum, sels, targets) -> InputGradient:
    return loss_and_grads(model, xnum, sels, targets)[2]


# ---------------------------------------------------------------------------
# training

Hook = Callable[[np.ndarray, list, np.ndarray, np.random.Generator], tuple]


class AdamW:
    """Adam with decoupled weight decay, matching the PyTorch update order."""

    def __init__(self, params, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            p = p * (1.0 - lr * self.wd)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            out.append(p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return out


class Trainer:
    """Stateful mini-batch loop over pre-encoded arrays.

    :func:`train` wraps this for datasets; the error-minimising baseline
    drives it one epoch at a time.
    """

    def __init__(self, model: SurrogateModel, cfg: TrainConfig, hooks: Sequence[Hook] = ()):
        self.model = model
        self.cfg = cfg
        self.hooks = list(hooks)
        self.params = [p.copy() for p in model.parameters()]
        self.opt = AdamW(self.params, weight_decay=cfg.weight_decay)
        order_seq, hook_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        self.order_rng = np.random.default_rng(order_seq)
        self.hook_rng = np.random.default_rng(hook_seq)
        self.epoch_index = 0
        self.losses: list[float] = []

    def current(self, **changes) -> SurrogateModel:
        return self.model.with_parameters(self.params, train_losses=tuple(self.losses), **changes)

    def run_epoch(self, xnum, sels, labels) -> float:
        cfg = self.cfg
        n = xnum.shape[0]
        lr = cfg.lr_at(self.epoch_index)
        perm = self.order_rng.permutation(n)
        targets = targets_of(labels, self.model.num_classes)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            xb, sb, tb = xnum[b], [s[b] for s in sels], targets[b]
            for hook in self.hooks:
                xb, sb, tb = hook(xb, sb, tb, self.hook_rng)
            loss, grads, _ = loss_and_grads(self.model.with_parameters(self.params), xb, sb, tb)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {self.epoch_index}, batch {start // cfg.batch_size}")
            total += loss * len(b)
            self.params = self.opt.step(self.params, grads, lr)
        self.epoch_index += 1
        self.losses.append(total / n)
        return total / n


def train(model: SurrogateModel, data: Dataset, cfg: TrainConfig,
          hooks: Sequence[Hook] = ()) -> SurrogateModel:
    """Mini-batch AdamW with an optional cosine schedule.

    If the model carries no scaler one is fitted on ``data``. The returned
    model's ``train_losses`` holds the mean loss of every epoch.
    """
    if model.scaler is None:
        model = replace(model, scaler=fit_standardizer(data))
    xnum, sels = encode(model, data)
    tr = Trainer(model, cfg, hooks)
    for _ in range(cfg.epochs):
        tr.run_epoch(xnum, sels, data.labels)
    return tr.current()


def predict(model: SurrogateModel, data: Dataset) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits(model, *encode(model, data)), axis=1)


def accuracy(model: SurrogateModel, data: Dataset) -> float:
    if data.n_rows == 0:
        return 0.0
    return float(np.mean(predict(model, data) == data.labels))


def dataset_loss(model: SurrogateModel, data: Dataset) -> float:
    xnum, sels = encode(model, data)
    return float(per_row_loss(model, xnum, sels, data.labels).mean())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SurrogateModel, path) -> None:
    arrays = {}
    for i, (W, b) in enumerate(model.layers):
        arrays[f"W{i}"], arrays[f"b{i}"] = W, b
    for j, E in enumerate(model.embeddings):
        arrays[f"E{j}"] = E
    if model.scaler is not None:
        arrays["scaler_mean"], arrays["scaler_std"] = model.scaler.mean, model.scaler.std
    arrays["train_losses"] = np.asarray(model.train_losses, dtype=np.float64)
    meta = dict(version=CHECKPOINT_VERSION, n_layers=len(model.layers), n_embeddings=len(model.embeddings),
                d_num=model.d_num, num_classes=model.num_classes, embed_width=model.embed_width,
                activation=model.activation, has_scaler=model.scaler is not None)
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> SurrogateModel:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        layers = tuple((z[f"W{i}"], z[f"b{i}"]) for i in range(meta["n_layers"]))
        emb = tuple(z[f"E{j}"] for j in range(meta["n_embeddings"]))
        scaler = ScalerStats(z["scaler_mean"], z["scaler_std"]) if meta["has_scaler"] else None
        losses = tuple(float(v) for v in z["train_losses"])
    return SurrogateModel(layers, emb, meta["d_num"], meta["num_classes"], meta["embed_width"],
                          meta["activation"], scaler, losses)
