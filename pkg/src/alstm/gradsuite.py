"""Finite-difference gradient checks over every differentiable building block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .attnpool import PoolingParams, attend
from .cells import (CellKind, CellState, CombinerParams, LSTMParams, StepSet, combine_states,
                    lstm_step, run_sequence)
from .diffcore import Tensor, grad_check
from .emonet import ModelConfig, TaskHead, build, forward, multitask_loss

OP_STEP = 1e-6
MODEL_STEP = 1e-5
OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _readout_weights(rng, shape) -> np.ndarray:
    # magnitudes in [0.5, 1.5] keep every coordinate's gradient away from zero,
    # where central-difference roundoff would dominate the relative error
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def op_checks(seed: int) -> list[CheckResult]:
    """Per-op checks on random double-precision inputs with step 1e-6."""
    rng = np.random.default_rng(seed)
    h = OP_STEP

    def r(t_shape):
        return _readout_weights(rng, t_shape)

    x, W, b = _t(rng, 3), _t(rng, 4, 3), _t(rng, 4)
    a, c = _t(rng, 2, 5), _t(rng, 2, 5)
    e = _t(rng, 6)
    mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
    logits = _t(rng, 5)
    seq = _t(rng, 3, 4, 6)
    perm = np.stack([rng.permutation(4) for _ in range(3)])
    wvec = _t(rng, 6)
    w4, w25, w7, w26, w346, w34, w6, w2 = (r((4,)), r((2, 5)), r((2, 7)), r((2, 6)),
                                           r((3, 4, 6)), r((3, 4)), r((6,)), r((2,)))
    checks = {
        "linear": (lambda x, W, b: (dc.linear(x, W, b) * w4).sum(), [x, W, b]),
        "add/sub/mul": (lambda a, c: ((a - c) * (a + c) * w25).sum(), [a, c]),
        "sigmoid": (lambda a: (dc.sigmoid(a) * w25).sum(), [a]),
        "tanh": (lambda a: (dc.tanh(a) * w25).sum(), [a]),
        "relu": (lambda a: (dc.relu(a) * w25).sum(), [a]),
        "softmax": (lambda e: (dc.softmax_stable(e) * w6).sum(), [e]),
        "softmax_masked": (lambda e: (dc.softmax_stable(e, mask) * w6).sum(), [e]),
        "cross_entropy": (lambda z: dc.cross_entropy(dc.softmax_stable(z), 2), [logits]),
        "concat/split": (lambda a, c: (dc.split(dc.concat([a, c], axis=1), [3, 7], axis=1)[1] * w7).sum(),
                         [a, c]),
        "stack/unstack": (lambda a, c: (dc.concat(dc.unstack(dc.stack([a, c], axis=1), axis=2)[:3], axis=1)
                                        * w26).sum(), [a, c]),
        "permute_steps": (lambda s: (dc.permute_steps(s, perm) * w346).sum(), [seq]),
        "dot": (lambda s, w: (dc.dot(s, w) * w34).sum(), [seq, wvec]),
        "mean": (lambda a: (dc.mean(a * a, axis=1) * w2).sum(), [a]),
    }
    out = []
    for name, (f, args) in checks.items():
        out.append(CheckResult(name, grad_check(f, args, h), OP_TOLERANCE))

    hidden, inp = 3, 4
    params = LSTMParams.init(inp, hidden, rng)
    for t in params.biases():
        t.data = rng.normal(size=t.shape)
    prev = CellState(_t(rng, 2, hidden), _t(rng, 2, hidden))
    x_step = _t(rng, 2, inp)
    comb = CombinerParams(_t(rng, hidden))
    states = [CellState(_t(rng, 2, hidden), _t(rng, 2, hidden)) for _ in range(3)]
    wC, wh = r((2, hidden)), r((2, hidden))
    pool_h = _t(rng, 3, 4, 4)
    pool_w = _t(rng, 4)
    pool_mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=bool)
    wp = r((3, 4))

    def step_loss(*args):
        s = lstm_step(params, prev, x_step)
        return (s.C * wC).sum() + (s.h * wh).sum()

    def combine_loss(*args):
        s = combine_states(states, comb)
        return (s.C * wC).sum() + (s.h * wh).sum()

    def pool_loss(s, w):
        return (attend(s, PoolingParams(w), pool_mask).vector * wp).sum()

    lstm_args = list(params.named().values()) + [prev.C, prev.h, x_step]
    comb_args = [comb.W] + [t for s in states for t in (s.C, s.h)]
    out.append(CheckResult("lstm_step", grad_check(step_loss, lstm_args, h), OP_TOLERANCE))
    out.append(CheckResult("combine_states", grad_check(combine_loss, comb_args, h), OP_TOLERANCE))
    out.append(CheckResult("attention_pool", grad_check(pool_loss, [pool_h, pool_w], h), OP_TOLERANCE))
    return out


def tiny_config(cell: CellKind | None = None) -> ModelConfig:
    """Input 5, dense 7, hidden 4, three 2-class heads, no dropout."""
    heads = (TaskHead("emotion", ("a", "b"), 3, 1.0),
             TaskHead("speaker", ("a", "b"), 3, 0.3),
             TaskHead("gender", ("a", "b"), 3, 0.6))
    return ModelConfig(5, 7, 4, cell or CellKind.advanced(StepSet((3, 2, 1))), heads, dropout=0.0)


def sequence_check(seed: int, h: float = MODEL_STEP) -> CheckResult:
    """BPTT through an A-LSTM direction: length 7, T={3,2,1}, hidden 4."""
    rng = np.random.default_rng(seed)
    params = LSTMParams.init(3, 4, rng)
    comb = CombinerParams(_t(rng, 4))
    xs = _t(rng, 7, 3)
    kind = CellKind.advanced(StepSet((3, 2, 1)))
    weights = rng.normal(size=(7, 4))

    def f(*args):
        return (run_sequence(kind, params, comb, xs) * weights).sum()

    return CheckResult("run_sequence", grad_check(f, list(params.named().values()) + [comb.W, xs], h),
                       MODEL_TOLERANCE)


def model_check(seed: int, h: float = MODEL_STEP, cell: CellKind | None = None) -> CheckResult:
    """End-to-end multi-task loss of the tiny config on a 6-frame utterance."""
    rng = np.random.default_rng(seed)
    model = build(tiny_config(cell), seed)
    for p in model.parameters():
        p.data = rng.normal(0.0, 0.5, size=p.shape)
    feats = rng.normal(size=(6, 5))
    labels = {"emotion": 1, "speaker": 0, "gender": 1}
    weights = {h_.name: h_.weight for h_ in model.config.heads}

    def f(*args):
        return multitask_loss(forward(model, feats).probs, labels, weights)

    name = f"model[{model.config.cell.name}]"
    return CheckResult(name, grad_check(f, model.parameters(), h), MODEL_TOLERANCE)


def run_all(seed: int) -> list[CheckResult]:
    results = op_checks(seed)
    results.append(sequence_check(seed))
    for cell in (CellKind.conventional(), CellKind.mean(StepSet((3, 2, 1))),
                 CellKind.advanced(StepSet((3, 2, 1)))):
        results.append(model_check(seed, cell=cell))
    return results
