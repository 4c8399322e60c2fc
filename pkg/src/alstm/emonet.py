"""Trunk/branch multi-task network around a bidirectional recurrent layer.

Trunk: dense ReLU layer per frame, bidirectional LSTM (conventional, mean or
advanced), attention pooling.  Branch: one dense ReLU layer and a softmax
classifier per task.  Tasks are trained jointly with a weighted sum of
cross-entropies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .attnpool import PoolingParams, attend
from .cells import CellKind, CombinerParams, LSTMParams, StepSet, bidirectional
from .diffcore import Tensor
from .errors import ConfigurationError, DataError, DimensionError, FormatError

EMOTIONS = ("neutral", "happy", "angry", "sad")
GENDERS = ("male", "female")

CHECKPOINT_MAGIC = b"ALSM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TaskHead:
    name: str
    labels: tuple[str, ...]
    hidden: int = 256
    weight: float = 1.0

    @property
    def classes(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 36
    dense: int = 256
    hidden: int = 128
    cell: CellKind = field(default_factory=lambda: CellKind.advanced(StepSet((5, 3, 1))))
    heads: tuple[TaskHead, ...] = ()
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        for name in ("input_dim", "dense", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate task heads in {names}")
        if self.heads and "emotion" not in names:
            raise ConfigurationError("the emotion head is required")
        for h in self.heads:
            if h.classes < 2 or h.hidden < 1:
                raise ConfigurationError(f"head {h.name!r} needs >= 2 classes and a positive width")
            if h.weight < 0:
                raise ConfigurationError(f"head {h.name!r} has negative task weight {h.weight}")

    def head(self, name: str) -> TaskHead:
        for h in self.heads:
            if h.name == name:
                return h
        raise KeyError(name)

    def with_cell(self, cell: CellKind) -> "ModelConfig":
        return replace(self, cell=cell)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "dense": self.dense,
            "hidden": self.hidden,
            "cell": self.cell.name,
            "steps": None if self.cell.steps is None else list(self.cell.steps.offsets),
            "dropout": self.dropout,
            "heads": [{"name": h.name, "labels": list(h.labels), "hidden": h.hidden,
                       "weight": h.weight} for h in self.heads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        steps = StepSet(tuple(d["steps"])) if d.get("steps") else None
        heads = tuple(TaskHead(h["name"], tuple(h["labels"]), h["hidden"], h["weight"])
                      for h in d["heads"])
        return cls(d["input_dim"], d["dense"], d["hidden"], CellKind(d["cell"], steps), heads,
                   d["dropout"])


def full_config(cell: CellKind | None = None, speakers: int = 8) -> ModelConfig:
    """36-D input, 256 dense, 128 per direction, emotion/speaker/gender heads of 256."""
    heads = (
        TaskHead("emotion", EMOTIONS, 256, 1.0),
        TaskHead("speaker", tuple(f"spk{i}" for i in range(speakers)), 256, 0.3),
        TaskHead("gender", GENDERS, 256, 0.6),
    )
    return ModelConfig(cell=cell or CellKind.advanced(StepSet((5, 3, 1))), heads=heads)


def _dense_init(rng: np.random.Generator, fan_out: int, fan_in: int) -> tuple[Tensor, Tensor]:
    k = 1.0 / np.sqrt(fan_in)
    return (Tensor(rng.uniform(-k, k, size=(fan_out, fan_in)), requires_grad=True),
            Tensor(np.zeros(fan_out), requires_grad=True))


@dataclass
class Head:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


class Model:
    def __init__(self, config: ModelConfig, dense_W: Tensor, dense_b: Tensor,
                 lstm_fwd: LSTMParams, lstm_bwd: LSTMParams,
                 comb_fwd: CombinerParams | None, comb_bwd: CombinerParams | None,
                 pool: PoolingParams, heads: dict[str, Head]):
        self.config = config
        self.dense_W = dense_W
        self.dense_b = dense_b
        self.lstm_fwd = lstm_fwd
        self.lstm_bwd = lstm_bwd
        self.comb_fwd = comb_fwd
        self.comb_bwd = comb_bwd
        self.pool = pool
        self.heads = heads

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"dense.W": self.dense_W, "dense.b": self.dense_b}
        for d, p in (("fwd", self.lstm_fwd), ("bwd", self.lstm_bwd)):
            out.update({f"blstm.{d}.{k}": v for k, v in p.named().items()})
        if self.comb_fwd is not None:
            out["combiner.fwd.W"] = self.comb_fwd.W
            out["combiner.bwd.W"] = self.comb_bwd.W
        out["pool.W"] = self.pool.W
        for name, h in self.heads.items():
            out.update({f"head.{name}.W1": h.W1, f"head.{name}.b1": h.b1,
                        f"head.{name}.W2": h.W2, f"head.{name}.b2": h.b2})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise FormatError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise FormatError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


def build(config: ModelConfig, seed: int) -> Model:
    """Initialize a model deterministically from ``seed``.

    The random draws do not depend on the cell kind, so the three LSTM
    variants built from one seed share every common parameter.
    """
    rng = np.random.default_rng(seed)
    dense_W, dense_b = _dense_init(rng, config.dense, config.input_dim)
    lstm_fwd = LSTMParams.init(config.dense, config.hidden, rng)
    lstm_bwd = LSTMParams.init(config.dense, config.hidden, rng)
    comb_fwd = comb_bwd = None
    if config.cell.learns_combiner:
        comb_fwd = CombinerParams.zeros(config.hidden)
        comb_bwd = CombinerParams.zeros(config.hidden)
    pool = PoolingParams.zeros(2 * config.hidden)
    heads = {}
    for h in config.heads:
        W1, b1 = _dense_init(rng, h.hidden, 2 * config.hidden)
        W2, b2 = _dense_init(rng, h.classes, h.hidden)
        heads[h.name] = Head(W1, b1, W2, b2)
    return Model(config, dense_W, dense_b, lstm_fwd, lstm_bwd, comb_fwd, comb_bwd, pool, heads)


def parameter_count(model: Model) -> int:
    return int(sum(p.size for p in model.parameters()))


def parameter_count_formula(config: ModelConfig) -> int:
    """Closed-form scalar parameter count for ``config``."""
    D, H = config.dense, config.hidden
    n = config.input_dim * D + D
    n += 2 * 4 * (H * (H + D) + H)
    if config.cell.learns_combiner:
        n += 2 * H
    n += 2 * H
    for h in config.heads:
        n += 2 * H * h.hidden + h.hidden + h.hidden * h.classes + h.classes
    return n


@dataclass
class Output:
    probs: dict[str, Tensor]
    attention: Tensor


def forward_batch(model: Model, x: Tensor, lengths, training: bool = False,
                  rng: np.random.Generator | None = None) -> Output:
    """Run a padded batch of shape (batch, steps, input_dim).

    ``lengths[b]`` gives the number of valid leading frames of row ``b``;
    padded frames never influence valid outputs.
    """
    cfg = model.config
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise DimensionError(f"expected (batch, steps, {cfg.input_dim}) features, got {x.shape}")
    lengths = np.asarray(lengths)
    valid = np.arange(x.shape[1])[None, :] < lengths[:, None]
    rate = cfg.dropout
    a = dc.relu(dc.linear(x, model.dense_W, model.dense_b))
    a = dc.dropout(a, rate, training, rng)
    hs = bidirectional(cfg.cell, model.lstm_fwd, model.lstm_bwd, model.comb_fwd, model.comb_bwd,
                       a, lengths)
    hs = dc.dropout(hs, rate, training, rng)
    pooled = attend(hs, model.pool, valid)
    probs = {}
    for name, head in model.heads.items():
        z = dc.relu(dc.linear(pooled.vector, head.W1, head.b1))
        z = dc.dropout(z, rate, training, rng)
        probs[name] = dc.softmax_stable(dc.linear(z, head.W2, head.b2))
    return Output(probs, pooled.attention)


def forward(model: Model, features, training: bool = False,
            rng: np.random.Generator | None = None) -> Output:
    """Single utterance of shape (frames, input_dim) -> per-task probability vectors."""
    feats = dc.as_tensor(features)
    if feats.ndim != 2 or feats.shape[1] != model.config.input_dim:
        raise DimensionError(
            f"expected (frames, {model.config.input_dim}) features, got {feats.shape}")
    if feats.shape[0] < 1:
        raise DataError("utterance has no frames")
    out = forward_batch(model, dc.reshape(feats, (1,) + feats.shape), [feats.shape[0]],
                        training, rng)
    probs = {k: dc.reshape(v, v.shape[1:]) for k, v in out.probs.items()}
    return Output(probs, dc.reshape(out.attention, out.attention.shape[1:]))


def multitask_loss(probs: dict[str, Tensor], labels: dict[str, object],
                   task_weights: dict[str, float]) -> Tensor:
    """``sum_task weight * cross_entropy``, averaged over the batch when batched.

    Heads with weight 0 are skipped.  A label of ``None`` or a negative index
    for an enabled head is a data error.
    """
    total = None
    for name, w in task_weights.items():
        if w == 0:
            continue
        lab = labels.get(name)
        if lab is None or np.any(np.asarray(lab) < 0):
            raise DataError(f"missing {name!r} label for an enabled task head")
        ce = dc.cross_entropy(probs[name], np.asarray(lab))
        if ce.ndim:
            ce = ce.mean()
        term = ce * float(w)
        total = term if total is None else total + term
    if total is None:
        raise DataError("no task head has a positive weight")
    return total


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    params = model.named_parameters()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint {path} is truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a model checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(take(cfg_len)))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint config is unreadable: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in checkpoint")
    model = build(config, seed=0)
    model.load_state_dict(state)
    return model
