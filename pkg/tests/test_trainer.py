import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alstm import diffcore as dc
from alstm.cells import CellKind, StepSet
from alstm.datasets import SynthTaskConfig, gen_delayed_recall
from alstm.diffcore import Tensor
from alstm.emonet import EMOTIONS, GENDERS, ModelConfig, TaskHead, build, forward_batch, multitask_loss
from alstm.errors import DataError, DimensionError, ParameterError
from alstm.trainer import (AdamState, EpochLog, Example, StopDecision, TrainConfig, accuracy, adam_step, collate,
                           early_stop_check, encode, epoch_csv, evaluate, make_batches, predict, train,
                           znormalize_utterance)


def toy_config(cell=None, dropout=0.0):
    heads = (TaskHead("emotion", EMOTIONS, 12, 1.0), TaskHead("speaker", ("spk0", "spk1", "spk2", "spk3"), 12, 0.3),
             TaskHead("gender", GENDERS, 12, 0.6))
    return ModelConfig(36, 12, 8, cell or CellKind.advanced(StepSet((3, 2, 1))), heads, dropout)


def toy_examples(n, seed=0, length=(6, 10)):
    cfg = SynthTaskConfig(n_utterances=n, length_range=length, marker_range=(1, 3),
                          n_pseudo_speakers=4, seed=seed)
    return encode(gen_delayed_recall(cfg), toy_config().heads)


# -- z-normalization --------------------------------------------------------

def test_znormalize_statistics():
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(50, 36))
    z = znormalize_utterance(x)
    assert np.abs(z.mean(axis=0)).max() < 1e-10
    assert np.abs(z.std(axis=0) - 1).max() < 1e-8


def test_znormalize_constant_column_and_idempotence():
    x = np.random.default_rng(1).normal(size=(20, 36))
    x[:, 5] = 7.0
    z = znormalize_utterance(x)
    assert (z[:, 5] == 0).all()
    assert np.abs(znormalize_utterance(z) - z).max() < 1e-12


def test_znormalize_rejects_empty():
    with pytest.raises(DataError):
        znormalize_utterance(np.zeros((0, 36)))


def test_encode_does_not_modify_sources(tmp_path):
    from alstm.datasets import write_dataset, load_manifest
    records = gen_delayed_recall(SynthTaskConfig(n_utterances=3, seed=1))
    manifest = write_dataset(records, tmp_path)
    before = {p.name: p.read_bytes() for p in (tmp_path / "features").iterdir()}
    encode(load_manifest(manifest), toy_config().heads)
    after = {p.name: p.read_bytes() for p in (tmp_path / "features").iterdir()}
    assert before == after


# -- batching ---------------------------------------------------------------

def test_batch_sizes_and_coverage():
    ex = toy_examples(70)
    batches = make_batches(ex, 32, seed=3)
    assert [len(b.ids) for b in batches] == [32, 32, 6]
    ids = [i for b in batches for i in b.ids]
    assert sorted(ids) == sorted(e.id for e in ex)
    again = make_batches(ex, 32, seed=3)
    assert [b.ids for b in batches] == [b.ids for b in again]
    assert [b.ids for b in make_batches(ex, 32, seed=4)] != [b.ids for b in batches]


def test_batch_masks_and_padding():
    ex = toy_examples(5)
    b = collate(ex, pad_value=9.9)
    for row, e in enumerate(ex):
        n = len(e.features)
        assert b.mask[row].sum() == n
        assert np.array_equal(b.x[row, :n], e.features)
        assert (b.x[row, n:] == 9.9).all()


def test_loss_invariant_to_padding_value():
    model = build(toy_config(), 0)
    ex = toy_examples(6)
    losses = []
    for pad in (0.0, 9.9):
        b = collate(ex, pad_value=pad)
        out = forward_batch(model, Tensor(b.x), b.lengths)
        losses.append(multitask_loss(out.probs, b.labels, {"emotion": 1.0, "speaker": 0.3, "gender": 0.6}).item())
    assert losses[0] == losses[1]


def test_make_batches_errors():
    with pytest.raises(DataError):
        make_batches([], 4, 0)
    with pytest.raises(ParameterError):
        make_batches(toy_examples(2), 0, 0)


# -- Adam -------------------------------------------------------------------

def test_adam_zero_gradient():
    q = Tensor(np.array([1.0, -2.0]))
    adam_step([q], [np.zeros(2)], AdamState.zeros_like([q]))
    assert q.data.tolist() == [1.0, -2.0]
    # nonzero moments decay geometrically under a zero gradient
    state = AdamState([np.array([0.5, 0.5])], [np.array([0.1, 0.1])])
    adam_step([Tensor(np.zeros(2))], [np.zeros(2)], state)
    assert np.allclose(state.m[0], 0.45, atol=1e-15) and np.allclose(state.v[0], 0.0999, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), min_size=1, max_size=6))
def test_adam_first_step_is_lr_sign(g):
    g = np.array(g)
    p = Tensor(np.zeros_like(g))
    adam_step([p], [g], AdamState.zeros_like([p]), lr=0.01)
    assert np.all(np.sign(-p.data) == np.sign(g))
    assert np.all((np.abs(p.data) >= 0.99 * 0.01) & (np.abs(p.data) <= 0.01))


def test_adam_quadratic():
    p = Tensor(np.array([1.0]))
    state = AdamState.zeros_like([p])
    for _ in range(200):
        adam_step([p], [2 * p.data], state, lr=0.1)
    assert abs(p.data[0]) < 0.05


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2))
    with pytest.raises(DimensionError):
        adam_step([p], [np.zeros(3)], AdamState.zeros_like([p]))


# -- early stopping ---------------------------------------------------------

def test_early_stop_examples():
    assert early_stop_check([0.5, 0.6, 0.58, 0.59, 0.57]) == StopDecision(True, 2)
    assert not early_stop_check([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).stop
    d = early_stop_check([0.6, 0.5, 0.5, 0.6])
    assert not d.stop and d.best_epoch == 1
    assert not early_stop_check([0.6, 0.5, 0.5]).stop
    with pytest.raises(DataError):
        early_stop_check([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=30))
def test_early_stop_properties(ints):
    h = [i / 20 for i in ints]
    d = early_stop_check(h)
    assert h[d.best_epoch - 1] == max(h)
    if all(a <= b for a, b in zip(h, h[1:])):
        assert not d.stop
    if d.stop:
        assert all(a < max(h[:-3]) for a in h[-3:])


# -- training ---------------------------------------------------------------

def test_validation_split_sizes():
    from alstm.datasets import split_validation
    tr, va = split_validation(list(range(100)), 0.1, seed=0)
    assert (len(tr), len(va)) == (90, 10)
    assert sorted(tr + va) == list(range(100))


def test_training_is_deterministic():
    ex = toy_examples(40)
    cfg = TrainConfig(batch_size=8, lr=3e-3, max_epochs=3, seed=5)
    runs = []
    for _ in range(2):
        model = build(toy_config(dropout=0.5), 1)
        res = train(model, ex, cfg)
        runs.append((epoch_csv(res.log), [p.data.copy() for p in model.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_overfits_twenty_utterances():
    ex = toy_examples(20, seed=2)
    model = build(toy_config(), 0)
    res = train(model, ex, TrainConfig(batch_size=4, lr=1e-2, max_epochs=200, seed=0), val_set=ex)
    assert accuracy(model, ex) == 1.0
    assert res.log[res.best_epoch - 1].val_accuracy == max(e.val_accuracy for e in res.log)


def test_best_epoch_parameters_restored():
    ex = toy_examples(30, seed=3)
    val = toy_examples(10, seed=4)
    model = build(toy_config(), 0)
    snapshots = []
    res = train(model, ex, TrainConfig(batch_size=8, lr=1e-2, max_epochs=6, seed=0), val_set=val,
                on_epoch=lambda e: snapshots.append(accuracy(model, val)))
    assert accuracy(model, val) == snapshots[res.best_epoch - 1]
    assert res.log[res.best_epoch - 1].val_accuracy == max(snapshots)


def test_train_rejects_empty_split():
    with pytest.raises(DataError):
        train(build(toy_config(), 0), toy_examples(3), TrainConfig(), val_set=[])


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParameterError):
        TrainConfig(patience=0)


def test_evaluate_skips_unlabelled_heads():
    model = build(toy_config(), 0)
    ex = toy_examples(8)
    ex[0].labels["speaker"] = -1
    report = evaluate(model, ex)
    assert report.tasks["speaker"].confusion.sum() == 7
    assert report.tasks["emotion"].confusion.sum() == 8
    preds, attn = predict(model, ex, attention=True)
    assert [len(a) for a in attn] == [len(e.features) for e in ex]


def test_epoch_csv_format():
    text = epoch_csv([EpochLog(1, 0.5, 0.25), EpochLog(2, 0.125, 0.5)])
    assert text == "epoch,train_loss,val_accuracy\n1,0.5,0.25\n2,0.125,0.5\n"


def test_encode_marks_unknown_labels():
    recs = gen_delayed_recall(SynthTaskConfig(n_utterances=4, n_pseudo_speakers=8, seed=0))
    heads = (TaskHead("emotion", EMOTIONS), TaskHead("speaker", ("nobody", "else")))
    ex = encode(recs, heads)
    assert all(e.labels["speaker"] == -1 for e in ex)
    assert all(isinstance(e, Example) for e in ex)
