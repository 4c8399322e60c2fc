"""Training protocol: per-utterance z-normalization, padded batches, Adam,
validation-accuracy early stopping with best-epoch restoration."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datasets import UtteranceRecord, split_validation
from .diffcore import Tensor
from .emonet import Model, forward_batch, multitask_loss
from .errors import DataError, DimensionError, ParameterError
from .metrics import EvalReport, TaskReport

log = logging.getLogger(__name__)

ZNORM_EPS = 1e-8


def znormalize_utterance(features) -> np.ndarray:
    """Per-dimension zero mean / unit std across the frames of one utterance."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DataError(f"cannot normalize a sequence of shape {x.shape}")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return (x - mu) / np.maximum(sd, ZNORM_EPS)


@dataclass
class Example:
    """A normalized utterance with integer labels (-1 where a head has no label)."""

    id: str
    features: np.ndarray
    labels: dict[str, int]


def encode(records: list[UtteranceRecord], model_or_heads) -> list[Example]:
    """Load, z-normalize and label-encode records against the model's task heads."""
    heads = model_or_heads.config.heads if isinstance(model_or_heads, Model) else model_or_heads
    out = []
    for r in records:
        labels = {}
        for h in heads:
            value = getattr(r, h.name)
            labels[h.name] = h.labels.index(value) if value in h.labels else -1
        out.append(Example(r.id, znormalize_utterance(r.load_features()), labels))
    return out


@dataclass
class Batch:
    x: np.ndarray
    lengths: np.ndarray
    labels: dict[str, np.ndarray]
    ids: list[str]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.x.shape[1])[None, :] < self.lengths[:, None]


def collate(examples: list[Example], pad_value: float = 0.0) -> Batch:
    lengths = np.array([len(e.features) for e in examples])
    dim = examples[0].features.shape[1]
    x = np.full((len(examples), lengths.max(), dim), pad_value, dtype=np.float64)
    for i, e in enumerate(examples):
        x[i, :lengths[i]] = e.features
    labels = {k: np.array([e.labels[k] for e in examples]) for k in examples[0].labels}
    return Batch(x, lengths, labels, [e.id for e in examples])


def make_batches(examples: list[Example], batch_size: int, seed, pad_value: float = 0.0) -> list[Batch]:
    """Shuffle by ``seed`` and cut into padded batches; each example appears once."""
    if not examples:
        raise DataError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ParameterError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(examples))
    return [collate([examples[i] for i in order[s:s + batch_size]], pad_value)
            for s in range(0, len(order), batch_size)]


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; ``None`` grads count as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------------
# early stopping


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best_epoch: int  # 1-based


def early_stop_check(history: list[float], patience: int = 3) -> StopDecision:
    """Stop once the last ``patience`` accuracies are all strictly below the
    best accuracy reached before them.  Ties with the best break the streak
    but do not move ``best_epoch`` (first occurrence of the maximum)."""
    if not history:
        raise DataError("early stopping needs at least one validation accuracy")
    if patience < 1:
        raise ParameterError(f"patience must be >= 1, got {patience}")
    best = int(np.argmax(history)) + 1
    if len(history) <= patience:
        return StopDecision(False, best)
    before = max(history[:-patience])
    stop = all(a < before for a in history[-patience:])
    return StopDecision(stop, best)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 3
    val_fraction: float = 0.10
    seed: int = 0
    task_weights: dict[str, float] | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.patience < 1:
            raise ParameterError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ParameterError("max_epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ParameterError("val_fraction must lie in (0, 1)")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: Model
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def task_weights_for(model: Model, config: TrainConfig) -> dict[str, float]:
    if config.task_weights is not None:
        unknown = set(config.task_weights) - set(model.heads)
        if unknown:
            raise ParameterError(f"task weights for unknown heads {sorted(unknown)}")
        return {h.name: float(config.task_weights.get(h.name, 0.0)) for h in model.config.heads}
    return {h.name: h.weight for h in model.config.heads}


def predict(model: Model, examples: list[Example], batch_size: int = 64,
            attention: bool = False):
    """Argmax predictions per head (and attention rows when requested)."""
    preds = {name: [] for name in model.heads}
    attn = []
    with dc.no_tape():
        for s in range(0, len(examples), batch_size):
            b = collate(examples[s:s + batch_size])
            out = forward_batch(model, Tensor(b.x), b.lengths, training=False)
            for name, p in out.probs.items():
                preds[name].append(np.argmax(p.data, axis=-1))
            if attention:
                attn.extend(out.attention.data[i, :n].copy() for i, n in enumerate(b.lengths))
    preds = {k: np.concatenate(v) if v else np.zeros(0, int) for k, v in preds.items()}
    return (preds, attn) if attention else preds


def accuracy(model: Model, examples: list[Example], head: str = "emotion") -> float:
    pred = predict(model, examples)[head]
    truth = np.array([e.labels[head] for e in examples])
    return float(np.mean(pred == truth))


def evaluate(model: Model, examples: list[Example]) -> EvalReport:
    """Per-head scores over the examples that carry a label for that head."""
    if not examples:
        raise DataError("cannot evaluate an empty set")
    preds = predict(model, examples)
    report = EvalReport()
    for h in model.config.heads:
        truth = np.array([e.labels[h.name] for e in examples])
        keep = truth >= 0
        if keep.any():
            report.tasks[h.name] = TaskReport.from_predictions(h.labels, truth[keep],
                                                               preds[h.name][keep])
    return report


def train(model: Model, train_set: list[Example], config: TrainConfig,
          val_set: list[Example] | None = None, on_epoch=None) -> TrainResult:
    """Fit ``model`` in place and restore the parameters of the best epoch.

    Without ``val_set`` a ``config.val_fraction`` share of ``train_set`` is
    held out.  Every random draw derives from ``config.seed``: batch order
    depends only on (seed, epoch), so models of different cell kinds see the
    same batches.
    """
    if val_set is None:
        train_set, val_set = split_validation(train_set, config.val_fraction, config.seed)
    if not train_set or not val_set:
        raise DataError(f"empty split: {len(train_set)} train / {len(val_set)} validation")
    weights = task_weights_for(model, config)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    dropout_rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(model)
    history: list[float] = []
    best_state = model.state_dict()
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for batch in make_batches(train_set, config.batch_size, [config.seed, 0, epoch]):
            model.zero_grad()
            with dc.Tape() as tape:
                out = forward_batch(model, Tensor(batch.x), batch.lengths, True, dropout_rng)
                loss = multitask_loss(out.probs, batch.labels, weights)
            tape.backward(loss)
            adam_step(params, [p.grad for p in params], state,
                      config.lr, config.beta1, config.beta2, config.eps)
            losses.append(loss.item())
        val_acc = accuracy(model, val_set)
        history.append(val_acc)
        entry = EpochLog(epoch, float(np.mean(losses)), val_acc)
        result.log.append(entry)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, entry.train_loss, val_acc)
        if on_epoch is not None:
            on_epoch(entry)
        decision = early_stop_check(history, config.patience)
        if decision.best_epoch == epoch:
            best_state = model.state_dict()
        if decision.stop:
            result.stopped_early = True
            break
    result.best_epoch = early_stop_check(history, config.patience).best_epoch
    model.load_state_dict(best_state)
    return result


def epoch_csv(entries: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_accuracy"])
    for e in entries:
        w.writerow([e.epoch, repr(e.train_loss), repr(e.val_accuracy)])
    return buf.getvalue()


def write_epoch_csv(entries: list[EpochLog], path) -> None:
    Path(path).write_text(epoch_csv(entries), encoding="utf-8")
