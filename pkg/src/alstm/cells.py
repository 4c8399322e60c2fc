"""Recurrent cells: conventional LSTM, advanced LSTM (A-LSTM) and mean LSTM.

The A-LSTM runs an ordinary LSTM recurrence but, every ``max(T)`` steps,
replaces the state handed to the next step by a softmax-weighted combination
of the states at offsets ``T`` (e.g. ``{5, 3, 1}``).  The same learned vector
``W`` scores both the cell memories and the hidden values.  The mean LSTM uses
the same schedule with ``W`` pinned at zero, i.e. plain averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError, ParameterError

GATES = ("f", "i", "o", "C")

CONVENTIONAL = "conventional"
MEAN = "mean"
ADVANCED = "advanced"


@dataclass(frozen=True)
class StepSet:
    """Backward offsets of the states that enter one combination."""

    offsets: tuple[int, ...]

    def __post_init__(self):
        offs = tuple(int(o) for o in self.offsets)
        object.__setattr__(self, "offsets", offs)
        if not offs:
            raise ParameterError("step set must not be empty")
        if any(o < 1 for o in offs):
            raise ParameterError(f"step offsets must be positive integers, got {list(offs)}")
        if len(set(offs)) != len(offs):
            raise ParameterError(f"duplicate step offsets in {list(offs)}")
        if any(a <= b for a, b in zip(offs, offs[1:])):
            raise ParameterError(f"step offsets must be strictly decreasing, got {list(offs)}")

    @property
    def period(self) -> int:
        return self.offsets[0]

    def __iter__(self):
        return iter(self.offsets)

    def __len__(self) -> int:
        return len(self.offsets)

    def __str__(self) -> str:
        return ",".join(str(o) for o in self.offsets)


def parse_stepset(text: str) -> StepSet:
    """Parse ``"5,3,1"`` into a validated :class:`StepSet`."""
    try:
        offs = [int(tok) for tok in text.split(",")]
    except ValueError:
        raise ParameterError(f"step set must be comma-separated integers, got {text!r}") from None
    return StepSet(tuple(offs))


@dataclass(frozen=True)
class CellKind:
    name: str
    steps: StepSet | None = None

    def __post_init__(self):
        if self.name not in (CONVENTIONAL, MEAN, ADVANCED):
            raise ParameterError(f"unknown cell kind {self.name!r}")
        if self.name == CONVENTIONAL:
            object.__setattr__(self, "steps", None)
        elif self.steps is None:
            raise ParameterError(f"{self.name} cells need a step set")

    @classmethod
    def conventional(cls) -> "CellKind":
        return cls(CONVENTIONAL)

    @classmethod
    def mean(cls, steps: StepSet) -> "CellKind":
        return cls(MEAN, steps)

    @classmethod
    def advanced(cls, steps: StepSet) -> "CellKind":
        return cls(ADVANCED, steps)

    @property
    def combines(self) -> bool:
        return self.name != CONVENTIONAL

    @property
    def learns_combiner(self) -> bool:
        return self.name == ADVANCED


@dataclass
class LSTMParams:
    """Gate weights of shape hidden x (hidden + input) acting on ``[h, x]``."""

    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_C: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_C: Tensor

    def __post_init__(self):
        shapes = {w.shape for w in self.weights()}
        if len(shapes) != 1:
            raise DimensionError(f"gate weight shapes differ: {sorted(shapes)}")
        (hidden, width), = shapes
        if width <= hidden:
            raise DimensionError(f"gate weights {hidden}x{width} leave no room for the input")
        if any(b.shape != (hidden,) for b in self.biases()):
            raise DimensionError(f"gate biases must have shape ({hidden},)")

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.hidden

    def weights(self) -> list[Tensor]:
        return [self.W_f, self.W_i, self.W_o, self.W_C]

    def biases(self) -> list[Tensor]:
        return [self.b_f, self.b_i, self.b_o, self.b_C]

    def named(self) -> dict[str, Tensor]:
        out = {f"W_{g}": w for g, w in zip(GATES, self.weights())}
        out.update({f"b_{g}": b for g, b in zip(GATES, self.biases())})
        return out

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator) -> "LSTMParams":
        k = 1.0 / np.sqrt(hidden + input_dim)
        ws = [Tensor(rng.uniform(-k, k, size=(hidden, hidden + input_dim)), requires_grad=True)
              for _ in GATES]
        bs = [Tensor(np.zeros(hidden), requires_grad=True) for _ in GATES]
        return cls(*ws, *bs)

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LSTMParams":
        ws = [Tensor(np.zeros((hidden, hidden + input_dim)), requires_grad=True) for _ in GATES]
        bs = [Tensor(np.zeros(hidden), requires_grad=True) for _ in GATES]
        return cls(*ws, *bs)


@dataclass
class CombinerParams:
    """Energy vector scoring states in a combination; one per direction."""

    W: Tensor

    @classmethod
    def zeros(cls, hidden: int, trainable: bool = True) -> "CombinerParams":
        return cls(Tensor(np.zeros(hidden), requires_grad=trainable))


@dataclass
class CellState:
    C: Tensor
    h: Tensor

    @classmethod
    def zeros(cls, hidden: int, batch: tuple[int, ...] = ()) -> "CellState":
        shape = batch + (hidden,)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class Trace:
    """Record of the combinations performed by :func:`run_sequence`."""

    combinations: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)


def _gate_blocks(params: LSTMParams) -> tuple[Tensor, Tensor, Tensor]:
    W = dc.concat(params.weights(), axis=0)
    b = dc.concat(params.biases(), axis=0)
    Wh, Wx = dc.split(W, [params.hidden, params.input_dim], axis=1)
    return Wh, Wx, b


def lstm_cell(gx: Tensor, h_prev: Tensor, C_prev: Tensor, Wh: Tensor) -> tuple[Tensor, Tensor]:
    """Fused LSTM update given the input projection ``gx = Wx x + b``.

    ``gx`` holds the pre-activations of the f, i, o and candidate blocks in
    that order.  Returns ``(h, C)``.
    """
    H = Wh.shape[1]
    if gx.shape[-1] != 4 * H or h_prev.shape[-1] != H or C_prev.shape[-1] != H:
        raise DimensionError(
            f"lstm_cell: gx {gx.shape}, h {h_prev.shape}, C {C_prev.shape} vs hidden {H}")
    hp, Cp, Whd = h_prev.data, C_prev.data, Wh.data
    z = gx.data + hp @ Whd.T
    f = dc._sigmoid(z[..., :H])
    i = dc._sigmoid(z[..., H:2 * H])
    o = dc._sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    C = f * Cp + i * g
    tC = np.tanh(C)
    h = o * tC

    def bwd(grads):
        gh, gC = grads
        dC = gC + gh * o * (1.0 - tC * tC)
        dz = np.concatenate([
            dC * Cp * f * (1.0 - f),
            dC * g * i * (1.0 - i),
            gh * tC * o * (1.0 - o),
            dC * i * (1.0 - g * g),
        ], axis=-1)
        dWh = dz.reshape(-1, 4 * H).T @ hp.reshape(-1, H)
        return dz, dz @ Whd, dC * f, dWh

    h_t, C_t = dc.apply_op((gx, h_prev, C_prev, Wh), (h, C), bwd)
    return h_t, C_t


def lstm_step(params: LSTMParams, prev: CellState, x: Tensor) -> CellState:
    """One conventional LSTM step on ``[h_prev, x]`` (vector or batch)."""
    if x.shape[-1] != params.input_dim:
        raise DimensionError(f"lstm_step: input width {x.shape[-1]} != {params.input_dim}")
    Wh, Wx, b = _gate_blocks(params)
    h, C = lstm_cell(dc.linear(x, Wx, b), prev.h, prev.C, Wh)
    return CellState(C, h)


def combine_states(states: list[CellState], W: CombinerParams, return_weights: bool = False):
    """Softmax-weighted combination of ``states`` (oldest first).

    Energies are ``W . C_j`` for the cell memories and ``W . h_j`` for the
    hidden values, with the same ``W``.  Returns the combined
    :class:`CellState`, plus the two weight tensors when requested.
    """
    if not states:
        raise ParameterError("combine_states needs at least one state")
    H = W.W.shape[0]
    for s in states:
        if s.C.shape[-1] != H or s.h.shape[-1] != H:
            raise DimensionError(f"state width {s.C.shape[-1]} does not match combiner width {H}")
    Cs = dc.stack([s.C for s in states], axis=-2)
    hs = dc.stack([s.h for s in states], axis=-2)
    wC = dc.softmax_stable(dc.dot(Cs, W.W), axis=-1)
    wh = dc.softmax_stable(dc.dot(hs, W.W), axis=-1)
    C = (Cs * dc.reshape(wC, wC.shape + (1,))).sum(axis=-2)
    h = (hs * dc.reshape(wh, wh.shape + (1,))).sum(axis=-2)
    out = CellState(C, h)
    return (out, wC, wh) if return_weights else out


def run_sequence(kind: CellKind, params: LSTMParams, W: CombinerParams | None, xs: Tensor,
                 initial: CellState | None = None, trace: Trace | None = None) -> Tensor:
    """Run one direction over ``xs`` of shape (steps, input) or (batch, steps, input).

    Returns the emitted hidden values with shape (..., steps, hidden).  For
    combining kinds, after every step ``t`` (1-based) that is a multiple of
    ``max(T)`` the states at times ``t + 1 - tau`` for ``tau`` in ``T`` are
    combined and the result is what step ``t + 1`` consumes.  Emitted values
    are always the uncombined ``h_t``.
    """
    single = xs.ndim == 2
    if single:
        xs = dc.reshape(xs, (1,) + xs.shape)
    if xs.ndim != 3 or xs.shape[1] < 1:
        raise DimensionError(f"run_sequence expects (batch, steps, input), got {xs.shape}")
    if xs.shape[2] != params.input_dim:
        raise DimensionError(f"run_sequence: input width {xs.shape[2]} != {params.input_dim}")
    steps = kind.steps
    if kind.combines:
        if steps.period < 1:
            raise ParameterError("max(T) must be at least 1")
        if kind.name == MEAN:
            W = CombinerParams.zeros(params.hidden, trainable=False)
        elif W is None:
            raise ParameterError("advanced cells need combiner parameters")
    batch = xs.shape[0]
    state = initial if initial is not None else CellState.zeros(params.hidden, (batch,))
    if single and state.h.ndim == 1:
        state = CellState(dc.reshape(state.C, (1, -1)), dc.reshape(state.h, (1, -1)))

    Wh, Wx, b = _gate_blocks(params)
    gxs = dc.unstack(dc.linear(xs, Wx, b), axis=1)
    history: list[CellState] = []
    emitted = []
    for t, gx in enumerate(gxs, start=1):
        h, C = lstm_cell(gx, state.h, state.C, Wh)
        emitted.append(h)
        state = CellState(C, h)
        if not kind.combines:
            continue
        history.append(state)
        if len(history) > steps.period:
            history.pop(0)
        if t % steps.period == 0:
            times = tuple(t + 1 - tau for tau in steps)
            picked = [history[len(history) - tau] for tau in steps]
            state = combine_states(picked, W)
            if trace is not None:
                trace.combinations.append((t, times))
    out = dc.stack(emitted, axis=1)
    if single:
        out = dc.reshape(out, out.shape[1:])
    return out


def reversal_order(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Per-row index that reverses the first ``lengths[b]`` steps and keeps padding in place."""
    lengths = np.asarray(lengths)
    t = np.arange(steps)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)


def bidirectional(kind: CellKind, params_fwd: LSTMParams, params_bwd: LSTMParams,
                  W_fwd: CombinerParams | None, W_bwd: CombinerParams | None, xs: Tensor,
                  lengths=None) -> Tensor:
    """Forward and time-reversed passes concatenated per step: (..., steps, 2*hidden).

    With ``lengths`` each row's reversal covers only its valid prefix, so the
    backward direction starts at the row's own last frame regardless of padding.
    """
    if params_fwd.hidden != params_bwd.hidden or params_fwd.input_dim != params_bwd.input_dim:
        raise DimensionError(
            f"direction sizes differ: {params_fwd.hidden}/{params_fwd.input_dim} vs "
            f"{params_bwd.hidden}/{params_bwd.input_dim}")
    single = xs.ndim == 2
    if single:
        xs = dc.reshape(xs, (1,) + xs.shape)
    batch, steps = xs.shape[:2]
    if lengths is None:
        lengths = np.full(batch, steps)
    order = reversal_order(lengths, steps)
    fwd = run_sequence(kind, params_fwd, W_fwd, xs)
    bwd = run_sequence(kind, params_bwd, W_bwd, dc.permute_steps(xs, order))
    out = dc.concat([fwd, dc.permute_steps(bwd, order)], axis=-1)
    if single:
        out = dc.reshape(out, out.shape[1:])
    return out
